//! File popularity, HRD requests, SBS cache placement and CSD task profiles.

use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{stream_rng, Scenario, Stream};

/// Bytes to bits.
pub const BITS_PER_BYTE: f64 = 8.0;

/// Zipf popularity `Pr_i = i^{-delta} / sum_j j^{-delta}` for files `1..=n_files`.
pub fn zipf_popularity(n_files: usize, delta: f64) -> Vec<f64> {
    assert!(n_files >= 1, "catalog must hold at least one file");
    assert!(delta >= 0.0, "Zipf exponent must be non-negative");
    let raw: Vec<f64> = (1..=n_files).map(|i| (i as f64).powf(-delta)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Equal-size file catalog with its popularity profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub file_size_bytes: f64,
    pub delta: f64,
    pub popularity: Vec<f64>,
}

impl Catalog {
    pub fn new(n_files: usize, file_size_bytes: f64, delta: f64) -> Result<Self> {
        if n_files == 0 {
            return Err(Error::InvalidParams("catalog needs at least one file".into()));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParams("Zipf exponent must be >= 0".into()));
        }
        if !(file_size_bytes > 0.0) {
            return Err(Error::InvalidParams("file size must be positive".into()));
        }
        Ok(Self {
            file_size_bytes,
            delta,
            popularity: zipf_popularity(n_files, delta),
        })
    }

    pub fn n_files(&self) -> usize {
        self.popularity.len()
    }

    pub fn file_bits(&self) -> f64 {
        self.file_size_bytes * BITS_PER_BYTE
    }
}

/// Draw `count` distinct indices, each step proportional to the remaining
/// weights. Falls back to the lowest untaken index once the remaining mass
/// underflows to zero.
fn sample_distinct<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let mut remaining = weights.to_vec();
    let mut taken = vec![false; weights.len()];
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count.min(weights.len()) {
        let idx = match WeightedIndex::new(remaining.iter().copied()) {
            Ok(dist) => rng.sample(&dist),
            Err(_) => taken.iter().position(|t| !t).expect("an index is left"),
        };
        taken[idx] = true;
        remaining[idx] = 0.0;
        picked.push(idx);
    }
    picked
}

/// Binary request matrix `c_ki` (HRDs x files). Each HRD asks for
/// `requests_per_hrd` distinct files drawn by popularity without replacement.
pub fn draw_requests<R: Rng + ?Sized>(
    catalog: &Catalog,
    n_hrd: usize,
    requests_per_hrd: usize,
    rng: &mut R,
) -> Result<Array2<bool>> {
    let n_files = catalog.n_files();
    if requests_per_hrd > n_files {
        return Err(Error::InvalidParams(format!(
            "{requests_per_hrd} requests per HRD exceed the {n_files}-file catalog"
        )));
    }
    let mut request = Array2::from_elem((n_hrd, n_files), false);
    for k in 0..n_hrd {
        for i in sample_distinct(&catalog.popularity, requests_per_hrd, rng) {
            request[(k, i)] = true;
        }
    }
    Ok(request)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Most popular files first, until the next one no longer fits.
    #[default]
    PopularFirst,
    /// Distinct files sampled by popularity until the store is full.
    Sampled,
}

/// Binary cache matrix `b_ni` (SBSs x files) under per-SBS storage `storage_bytes[n]`.
pub fn place_cache<R: Rng + ?Sized>(
    catalog: &Catalog,
    storage_bytes: &[f64],
    policy: CachePolicy,
    rng: &mut R,
) -> Array2<bool> {
    let n_files = catalog.n_files();
    let mut cache = Array2::from_elem((storage_bytes.len(), n_files), false);
    let mut by_popularity: Vec<usize> = (0..n_files).collect();
    by_popularity.sort_by(|&i, &j| {
        catalog.popularity[j]
            .total_cmp(&catalog.popularity[i])
            .then(i.cmp(&j))
    });
    for (n, &capacity) in storage_bytes.iter().enumerate() {
        let fits = ((capacity / catalog.file_size_bytes).floor().max(0.0) as usize).min(n_files);
        let chosen = match policy {
            CachePolicy::PopularFirst => by_popularity[..fits].to_vec(),
            CachePolicy::Sampled => sample_distinct(&catalog.popularity, fits, rng),
        };
        for i in chosen {
            cache[(n, i)] = true;
        }
    }
    cache
}

/// Knobs for [`generate_demand`]. Sizes are bytes (decimal units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemandConfig {
    pub n_files: usize,
    pub file_size_bytes: f64,
    pub requests_per_hrd: usize,
    pub cache_policy: CachePolicy,
    pub storage_bytes: f64,
    pub task_input_bytes: f64,
    pub task_cycles: f64,
    pub local_cycles_per_s: f64,
    pub edge_cycles_per_s: f64,
    pub weight: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            n_files: 20,
            file_size_bytes: 5e6,
            requests_per_hrd: 1,
            cache_policy: CachePolicy::PopularFirst,
            storage_bytes: 2e9,
            task_input_bytes: 100e3,
            task_cycles: 1e9,
            local_cycles_per_s: 1.4e9,
            edge_cycles_per_s: 6e10,
            weight: 1.0,
        }
    }
}

/// Everything the delay model needs besides radio: who wants what, what is
/// cached where, and the computing side.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandProfile {
    /// File size `L` in bytes.
    pub file_size_bytes: f64,
    /// `c_ki`, HRDs x files.
    pub request: Array2<bool>,
    /// `b_ni`, SBSs x files.
    pub cache: Array2<bool>,
    pub task_input_bytes: Vec<f64>,
    pub task_cycles: Vec<f64>,
    pub local_cycles_per_s: Vec<f64>,
    pub edge_cycles_per_s: Vec<f64>,
    pub storage_bytes: Vec<f64>,
    pub hrd_weight: Vec<f64>,
    pub csd_weight: Vec<f64>,
}

impl DemandProfile {
    pub fn n_files(&self) -> usize {
        self.request.ncols()
    }

    pub fn file_bits(&self) -> f64 {
        self.file_size_bytes * BITS_PER_BYTE
    }

    /// Files requested by HRD `k`, ascending.
    pub fn requested(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.request
            .row(k)
            .into_iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
    }

    pub fn is_cached(&self, n: usize, i: usize) -> bool {
        self.cache[(n, i)]
    }

    /// Bytes of cached content at SBS `n`.
    pub fn cached_bytes(&self, n: usize) -> f64 {
        self.cache.row(n).iter().filter(|&&b| b).count() as f64 * self.file_size_bytes
    }

    pub fn validate(&self) -> Result<()> {
        for n in 0..self.cache.nrows() {
            if self.cached_bytes(n) > self.storage_bytes[n] {
                return Err(Error::InvalidParams(format!("cache at SBS {n} exceeds storage")));
            }
        }
        for k in 0..self.request.nrows() {
            if self.requested(k).next().is_none() {
                return Err(Error::InvalidParams(format!("HRD {k} requests nothing")));
            }
        }
        if self
            .hrd_weight
            .iter()
            .chain(&self.csd_weight)
            .any(|w| !(*w > 0.0))
        {
            return Err(Error::InvalidParams("weights must be positive".into()));
        }
        Ok(())
    }
}

/// Draw requests for the scenario's HRDs and place caches at its SBSs.
/// Uses the demand stream of `seed`, so every `delta` sees the same uniforms.
pub fn generate_demand(
    scenario: &Scenario,
    cfg: &DemandConfig,
    delta: f64,
    seed: u64,
) -> Result<DemandProfile> {
    if cfg.requests_per_hrd == 0 {
        return Err(Error::InvalidParams("each HRD must request at least one file".into()));
    }
    let catalog = Catalog::new(cfg.n_files, cfg.file_size_bytes, delta)?;
    let mut rng = stream_rng(seed, Stream::Demand);
    let request = draw_requests(&catalog, scenario.n_hrd(), cfg.requests_per_hrd, &mut rng)?;
    let storage = vec![cfg.storage_bytes; scenario.n_sbs()];
    let cache = place_cache(&catalog, &storage, cfg.cache_policy, &mut rng);
    let k_csd = scenario.n_csd();
    let profile = DemandProfile {
        file_size_bytes: cfg.file_size_bytes,
        request,
        cache,
        task_input_bytes: vec![cfg.task_input_bytes; k_csd],
        task_cycles: vec![cfg.task_cycles; k_csd],
        local_cycles_per_s: vec![cfg.local_cycles_per_s; k_csd],
        edge_cycles_per_s: vec![cfg.edge_cycles_per_s; scenario.n_sbs()],
        storage_bytes: storage,
        hrd_weight: vec![cfg.weight; scenario.n_hrd()],
        csd_weight: vec![cfg.weight; k_csd],
    };
    profile.validate()?;
    Ok(profile)
}
