//! Delay components, the weighted objective and the constraint audit.

use ndarray::{Array2, Array3};

use crate::content::{DemandProfile, BITS_PER_BYTE};
use crate::error::{Entry, Error, Result};
use crate::radio::{build_rate_table, RateTable};
use crate::scenario::Scenario;

/// Placeholder fraction for entries that carry no traffic.
pub const THETA: f64 = 1e-8;

/// Absolute tolerance on constraint sums.
pub const FEAS_TOL: f64 = 1e-9;

/// Everything the evaluator needs about one scenario at one partitioning point.
#[derive(Debug, Clone)]
pub struct Instance {
    pub scenario: Scenario,
    pub demand: DemandProfile,
    pub rates: RateTable,
}

impl Instance {
    pub fn new(scenario: Scenario, demand: DemandProfile) -> Result<Self> {
        demand.validate()?;
        if demand.request.nrows() != scenario.n_hrd()
            || demand.cache.nrows() != scenario.n_sbs()
            || demand.task_cycles.len() != scenario.n_csd()
            || demand.storage_bytes.len() != scenario.n_sbs()
        {
            return Err(Error::InvalidParams(
                "demand profile does not match scenario dimensions".into(),
            ));
        }
        let rates = build_rate_table(&scenario)?;
        Ok(Instance {
            scenario,
            demand,
            rates,
        })
    }

    pub fn n_sbs(&self) -> usize {
        self.scenario.n_sbs()
    }

    pub fn n_hrd(&self) -> usize {
        self.scenario.n_hrd()
    }

    pub fn n_csd(&self) -> usize {
        self.scenario.n_csd()
    }

    pub fn n_files(&self) -> usize {
        self.demand.n_files()
    }

    /// Files requested by HRD `k` that SBS `n` must fetch over its backhaul.
    pub fn needs_backhaul(&self, n: usize, i: usize) -> bool {
        !self.demand.is_cached(n, i)
    }
}

/// Association of every MD. `csd_of[k] == None` means CSD `k` computes locally.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    pub hrd_of: Vec<usize>,
    pub csd_of: Vec<Option<usize>>,
}

impl Partition {
    pub fn hrd_members(&self, n: usize) -> Vec<usize> {
        (0..self.hrd_of.len()).filter(|&k| self.hrd_of[k] == n).collect()
    }

    pub fn csd_members(&self, n: Option<usize>) -> Vec<usize> {
        (0..self.csd_of.len()).filter(|&k| self.csd_of[k] == n).collect()
    }
}

/// Band and compute fractions, dense over every (SBS, device[, file]) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// SBS x CSD uplink band fraction.
    pub alpha: Array2<f64>,
    /// SBS x CSD compute fraction.
    pub gamma: Array2<f64>,
    /// SBS x HRD x file downlink access fraction.
    pub beta: Array3<f64>,
    /// SBS x HRD x file backhaul fraction.
    pub eta: Array3<f64>,
}

impl Allocation {
    pub fn sentinel(n_sbs: usize, n_hrd: usize, n_files: usize, n_csd: usize) -> Self {
        Allocation {
            alpha: Array2::from_elem((n_sbs, n_csd), THETA),
            gamma: Array2::from_elem((n_sbs, n_csd), THETA),
            beta: Array3::from_elem((n_sbs, n_hrd, n_files), THETA),
            eta: Array3::from_elem((n_sbs, n_hrd, n_files), THETA),
        }
    }

    pub fn for_instance(inst: &Instance) -> Self {
        Self::sentinel(inst.n_sbs(), inst.n_hrd(), inst.n_files(), inst.n_csd())
    }

    /// Reset every entry owned by HRD coalition `n` back to the sentinel.
    pub fn clear_hrd(&mut self, n: usize) {
        self.beta.index_axis_mut(ndarray::Axis(0), n).fill(THETA);
        self.eta.index_axis_mut(ndarray::Axis(0), n).fill(THETA);
    }

    pub fn clear_csd(&mut self, n: usize) {
        self.alpha.row_mut(n).fill(THETA);
        self.gamma.row_mut(n).fill(THETA);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrdFileDelay {
    pub file: usize,
    pub t_dl: f64,
    /// `None` when the file is cached at the serving SBS.
    pub t_bh: Option<f64>,
    pub t_hr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsdDelay {
    pub t_ul: f64,
    pub t_ed: f64,
    pub t_lc: f64,
    pub t_cs: f64,
}

/// Delay of HRD `k` fetching file `i` through SBS `n`.
pub fn hrd_delay(inst: &Instance, n: usize, k: usize, i: usize, beta: f64, eta: f64) -> HrdFileDelay {
    let bits = inst.demand.file_bits();
    let t_dl = bits / inst.rates.rate_dl(n, k, beta);
    let t_bh = inst
        .needs_backhaul(n, i)
        .then(|| bits / inst.rates.rate_bh(n, eta));
    HrdFileDelay {
        file: i,
        t_dl,
        t_bh,
        t_hr: t_dl + t_bh.unwrap_or(0.0),
    }
}

/// Completion time of CSD `k`'s task at SBS `n`, or locally when `n` is `None`.
pub fn csd_delay(inst: &Instance, n: Option<usize>, k: usize, alpha: f64, gamma: f64) -> CsdDelay {
    let d = &inst.demand;
    let t_lc = d.task_cycles[k] / d.local_cycles_per_s[k];
    match n {
        None => CsdDelay {
            t_ul: 0.0,
            t_ed: 0.0,
            t_lc,
            t_cs: t_lc,
        },
        Some(n) => {
            let t_ul = d.task_input_bytes[k] * BITS_PER_BYTE / inst.rates.rate_ul(n, k, alpha);
            let t_ed = d.task_cycles[k] / (gamma * d.edge_cycles_per_s[n]);
            CsdDelay {
                t_ul,
                t_ed,
                t_lc,
                t_cs: t_ul + t_ed,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrdReport {
    pub sbs: usize,
    pub files: Vec<HrdFileDelay>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsdReport {
    pub sbs: Option<usize>,
    pub delay: CsdDelay,
}

/// Per-device delays and their aggregates. Totals are unweighted sums over
/// devices (and files); `f` is the weighted objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayReport {
    pub hrd: Vec<HrdReport>,
    pub csd: Vec<CsdReport>,
    pub hrd_total_s: f64,
    pub hrd_backhaul_s: f64,
    pub csd_total_s: f64,
    pub csd_local_s: f64,
    pub csd_offload_s: f64,
    pub n_local_csd: usize,
    pub n_edge_csd: usize,
    pub n_backhauled_files: usize,
    pub n_cached_hits: usize,
    pub f: f64,
}

fn check_dims(inst: &Instance, p: &Partition, a: &Allocation) -> Result<()> {
    let (ns, nh, nf, nc) = (inst.n_sbs(), inst.n_hrd(), inst.n_files(), inst.n_csd());
    if p.hrd_of.len() != nh || p.csd_of.len() != nc {
        return Err(Error::Precondition("partition size does not match instance".into()));
    }
    if a.beta.dim() != (ns, nh, nf)
        || a.eta.dim() != (ns, nh, nf)
        || a.alpha.dim() != (ns, nc)
        || a.gamma.dim() != (ns, nc)
    {
        return Err(Error::Precondition("allocation shape does not match instance".into()));
    }
    Ok(())
}

/// Every entry carrying traffic must be a usable fraction, every other entry
/// must hold the sentinel.
pub fn check_consistency(inst: &Instance, p: &Partition, a: &Allocation) -> Result<()> {
    check_dims(inst, p, a)?;
    let ns = inst.n_sbs();
    let mut bad = Vec::new();
    let active_ok = |x: f64| x.is_finite() && x >= THETA;
    for (k, &n) in p.hrd_of.iter().enumerate() {
        if n >= ns {
            bad.push(Entry { sbs: n, device: k, file: None });
        }
    }
    for (k, n) in p.csd_of.iter().enumerate() {
        if let Some(n) = *n {
            if n >= ns {
                bad.push(Entry { sbs: n, device: k, file: None });
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Inconsistent(bad));
    }

    for ((n, k, i), &beta) in a.beta.indexed_iter() {
        let active = p.hrd_of[k] == n && inst.demand.request[(k, i)];
        let backhauled = active && inst.needs_backhaul(n, i);
        let eta = a.eta[(n, k, i)];
        let ok_beta = if active { active_ok(beta) } else { beta == THETA };
        let ok_eta = if backhauled { active_ok(eta) } else { eta == THETA };
        if !(ok_beta && ok_eta) {
            bad.push(Entry { sbs: n, device: k, file: Some(i) });
        }
    }
    for ((n, k), &alpha) in a.alpha.indexed_iter() {
        let gamma = a.gamma[(n, k)];
        let ok = if p.csd_of[k] == Some(n) {
            active_ok(alpha) && active_ok(gamma)
        } else {
            alpha == THETA && gamma == THETA
        };
        if !ok {
            bad.push(Entry { sbs: n, device: k, file: None });
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Inconsistent(bad))
    }
}

/// Evaluate every delay component and the weighted objective.
pub fn evaluate(inst: &Instance, p: &Partition, a: &Allocation) -> Result<DelayReport> {
    check_consistency(inst, p, a)?;
    let d = &inst.demand;
    let mut r = DelayReport {
        hrd: Vec::with_capacity(inst.n_hrd()),
        csd: Vec::with_capacity(inst.n_csd()),
        hrd_total_s: 0.0,
        hrd_backhaul_s: 0.0,
        csd_total_s: 0.0,
        csd_local_s: 0.0,
        csd_offload_s: 0.0,
        n_local_csd: 0,
        n_edge_csd: 0,
        n_backhauled_files: 0,
        n_cached_hits: 0,
        f: 0.0,
    };

    for (k, &n) in p.hrd_of.iter().enumerate() {
        let files: Vec<HrdFileDelay> = d
            .requested(k)
            .map(|i| hrd_delay(inst, n, k, i, a.beta[(n, k, i)], a.eta[(n, k, i)]))
            .collect();
        let total: f64 = files.iter().map(|f| f.t_hr).sum();
        for f in &files {
            match f.t_bh {
                Some(t) => {
                    r.hrd_backhaul_s += t;
                    r.n_backhauled_files += 1;
                }
                None => r.n_cached_hits += 1,
            }
        }
        r.hrd_total_s += total;
        r.f += d.hrd_weight[k] * total;
        r.hrd.push(HrdReport { sbs: n, files, total });
    }

    for (k, &n) in p.csd_of.iter().enumerate() {
        let (alpha, gamma) = match n {
            Some(n) => (a.alpha[(n, k)], a.gamma[(n, k)]),
            None => (THETA, THETA),
        };
        let delay = csd_delay(inst, n, k, alpha, gamma);
        if n.is_some() {
            r.n_edge_csd += 1;
            r.csd_offload_s += delay.t_cs;
        } else {
            r.n_local_csd += 1;
            r.csd_local_s += delay.t_cs;
        }
        r.csd_total_s += delay.t_cs;
        r.f += d.csd_weight[k] * delay.t_cs;
        r.csd.push(CsdReport { sbs: n, delay });
    }
    Ok(r)
}

pub fn objective(inst: &Instance, p: &Partition, a: &Allocation) -> Result<f64> {
    evaluate(inst, p, a).map(|r| r.f)
}

/// The objective written with the local-computing time subtracted inside the
/// association term and added back as a constant.
pub fn objective_expanded(inst: &Instance, p: &Partition, a: &Allocation) -> Result<f64> {
    check_consistency(inst, p, a)?;
    let d = &inst.demand;
    let mut hrd_term = 0.0;
    for (k, &n) in p.hrd_of.iter().enumerate() {
        for i in d.requested(k) {
            let t = hrd_delay(inst, n, k, i, a.beta[(n, k, i)], a.eta[(n, k, i)]);
            let b = if inst.needs_backhaul(n, i) { 0.0 } else { 1.0 };
            let t_bh = t.t_bh.unwrap_or(0.0);
            hrd_term += d.hrd_weight[k] * ((1.0 - b) * (t.t_dl + t_bh) + b * t.t_dl);
        }
    }
    let mut assoc_term = 0.0;
    let mut local_term = 0.0;
    for (k, &n) in p.csd_of.iter().enumerate() {
        let w = d.csd_weight[k];
        let t_lc = d.task_cycles[k] / d.local_cycles_per_s[k];
        local_term += w * t_lc;
        if let Some(n) = n {
            let t = csd_delay(inst, Some(n), k, a.alpha[(n, k)], a.gamma[(n, k)]);
            assoc_term += w * (t.t_ul + t.t_ed - t_lc);
        }
    }
    Ok(hrd_term + assoc_term + local_term)
}

/// One violated constraint. `constraint` is the index 1..=14 of the
/// association, band, storage, compute, rate-ordering or domain constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub constraint: u8,
    pub sbs: usize,
    pub device: Option<usize>,
    pub file: Option<usize>,
    pub excess: f64,
}

fn cached_bytes(inst: &Instance, n: usize) -> f64 {
    inst.demand.cached_bytes(n)
}

/// Storage used at SBS `n` by cached files plus offloaded task inputs.
pub fn storage_load(inst: &Instance, n: usize, csd_members: impl IntoIterator<Item = usize>) -> f64 {
    cached_bytes(inst, n)
        + csd_members
            .into_iter()
            .map(|k| inst.demand.task_input_bytes[k])
            .sum::<f64>()
}

/// Check the association, band, storage, compute, rate-ordering and domain
/// constraints. Sums are compared at `tol` absolute, storage and rate
/// ordering at `tol` relative.
pub fn audit_constraints(inst: &Instance, p: &Partition, a: &Allocation, tol: f64) -> Result<Vec<Violation>> {
    check_dims(inst, p, a)?;
    let ns = inst.n_sbs();
    let d = &inst.demand;
    let mut out = Vec::new();
    let v = |constraint: u8, sbs: usize, device: Option<usize>, file: Option<usize>, excess: f64| Violation {
        constraint,
        sbs,
        device,
        file,
        excess,
    };

    // C1, C9: single association or local; C2, C10: exactly one SBS.
    for (k, n) in p.csd_of.iter().enumerate() {
        if let Some(n) = *n {
            if n >= ns {
                out.push(v(1, n, Some(k), None, 1.0));
            }
        }
    }
    for (k, &n) in p.hrd_of.iter().enumerate() {
        if n >= ns {
            out.push(v(2, n, Some(k), None, 1.0));
        }
    }
    if !out.is_empty() {
        return Ok(out);
    }

    let mut sum_alpha = vec![0.0; ns];
    let mut sum_gamma = vec![0.0; ns];
    let mut storage: Vec<f64> = (0..ns).map(|n| cached_bytes(inst, n)).collect();
    for (k, n) in p.csd_of.iter().enumerate() {
        if let Some(n) = *n {
            sum_alpha[n] += a.alpha[(n, k)];
            sum_gamma[n] += a.gamma[(n, k)];
            storage[n] += d.task_input_bytes[k];
        }
    }
    let mut sum_beta = vec![0.0; ns];
    let mut sum_eta = vec![0.0; ns];
    for (k, &n) in p.hrd_of.iter().enumerate() {
        for i in d.requested(k) {
            let beta = a.beta[(n, k, i)];
            sum_beta[n] += beta;
            if inst.needs_backhaul(n, i) {
                let eta = a.eta[(n, k, i)];
                sum_eta[n] += eta;
                let r_dl = inst.rates.rate_dl(n, k, beta);
                let r_bh = inst.rates.rate_bh(n, eta);
                if r_dl > r_bh * (1.0 + tol) {
                    out.push(v(8, n, Some(k), Some(i), r_dl / r_bh - 1.0));
                }
            }
        }
    }
    for n in 0..ns {
        for (c, s) in [(3, sum_alpha[n]), (4, sum_beta[n]), (5, sum_eta[n]), (7, sum_gamma[n])] {
            if s > 1.0 + tol {
                out.push(v(c, n, None, None, s - 1.0));
            }
        }
        let cap = d.storage_bytes[n];
        if storage[n] > cap + tol * cap.max(1.0) {
            out.push(v(6, n, None, None, storage[n] - cap));
        }
    }

    let in_box = |x: f64| x.is_finite() && x >= THETA * (1.0 - tol) && x <= 1.0 + tol;
    let excess = |x: f64| if x > 1.0 { x - 1.0 } else { THETA - x };
    for ((n, k), &x) in a.alpha.indexed_iter() {
        if !in_box(x) {
            out.push(v(11, n, Some(k), None, excess(x)));
        }
    }
    for ((n, k), &x) in a.gamma.indexed_iter() {
        if !in_box(x) {
            out.push(v(12, n, Some(k), None, excess(x)));
        }
    }
    for ((n, k, i), &x) in a.beta.indexed_iter() {
        if !in_box(x) {
            out.push(v(13, n, Some(k), Some(i), excess(x)));
        }
    }
    for ((n, k, i), &x) in a.eta.indexed_iter() {
        if !in_box(x) {
            out.push(v(14, n, Some(k), Some(i), excess(x)));
        }
    }
    Ok(out)
}
