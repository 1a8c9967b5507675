//! Network deployment and quasi-static channel snapshot.
//!
//! MBSs sit on a hexagonal lattice; every macrocell receives its SBSs and
//! mobile devices uniformly inside a disc of radius `isd / 2` around its MBS.
//! Link gains combine a distance pathloss (LOS or NLOS, drawn once per link)
//! with log-normal shadowing, and are frozen for the lifetime of the
//! [`Scenario`].

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Independent RNG streams derived from one seed. Changing the number of
/// draws in one stage never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Deployment = 1,
    Shadowing = 2,
    Los = 3,
    Demand = 4,
    Moves = 5,
}

/// A ChaCha8 generator positioned on `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Radio and deployment parameters shared by every link in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    /// System bandwidth `W` in Hz.
    pub bandwidth_hz: f64,
    /// Frequency partitioning factor: share of `W` given to access links.
    pub a: f64,
    /// Uplink time fraction `T1 / T`; the downlink gets the remainder.
    pub t1_frac: f64,
    pub n_mbs: usize,
    /// Inter-site distance between neighbouring MBSs, metres.
    pub isd_m: f64,
    pub p_mbs_dbm: f64,
    pub p_sbs_dbm: f64,
    pub p_md_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub seed: u64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 20e6,
            a: 0.5,
            t1_frac: 0.5,
            n_mbs: 3,
            isd_m: 1000.0,
            p_mbs_dbm: 46.0,
            p_sbs_dbm: 24.0,
            p_md_dbm: 23.0,
            noise_psd_dbm_hz: -174.0,
            seed: 1,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if !(self.bandwidth_hz.is_finite() && self.bandwidth_hz > 0.0) {
            return bad("bandwidth must be positive");
        }
        if !(0.0..=1.0).contains(&self.a) {
            return bad("a must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.t1_frac) {
            return bad("t1_frac must lie in [0, 1]");
        }
        if self.n_mbs == 0 {
            return bad("at least one MBS is required");
        }
        if !(self.isd_m.is_finite() && self.isd_m > 0.0) {
            return bad("inter-site distance must be positive");
        }
        let powers = [
            self.p_mbs_dbm,
            self.p_sbs_dbm,
            self.p_md_dbm,
            self.noise_psd_dbm_hz,
        ];
        if powers.iter().any(|p| !p.is_finite()) {
            return bad("powers must be finite");
        }
        Ok(())
    }

    pub fn t2_frac(&self) -> f64 {
        1.0 - self.t1_frac
    }
}

/// Node counts. `sbs_per_cell` is also the `M` of the per-SBS band split.
/// HRDs and CSDs are totals over the network, dealt round-robin to cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub sbs_per_cell: usize,
    pub n_hrd: usize,
    pub n_csd: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            sbs_per_cell: 5,
            n_hrd: 20,
            n_csd: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkClass {
    MbsMd,
    MbsSbs,
    SbsMd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LosProbability {
    /// `(1 - e^{-d/decay}) min(18/d, 1) + e^{-d/decay}`
    Macro { decay_m: f64 },
    /// `0.5 - min(0.5, 5 e^{-156/d}) + min(0.5, 5 e^{-d/30})`
    SmallCell,
}

/// Log-distance pathloss `intercept + slope * log10(d)` in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDistance {
    pub intercept_db: f64,
    pub slope_db: f64,
}

impl LogDistance {
    fn eval(&self, d: f64) -> f64 {
        self.intercept_db + self.slope_db * d.log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub class: LinkClass,
    pub los: LogDistance,
    pub nlos: LogDistance,
    pub los_probability: LosProbability,
    pub shadow_std_los_db: f64,
    pub shadow_std_nlos_db: f64,
}

impl LinkModel {
    /// The standard model for each link class.
    pub fn for_class(class: LinkClass) -> Self {
        let ld = |intercept_db, slope_db| LogDistance {
            intercept_db,
            slope_db,
        };
        match class {
            LinkClass::MbsMd => Self {
                class,
                los: ld(30.8, 24.2),
                nlos: ld(2.7, 42.8),
                los_probability: LosProbability::Macro { decay_m: 63.0 },
                shadow_std_los_db: 6.0,
                shadow_std_nlos_db: 6.0,
            },
            LinkClass::MbsSbs => Self {
                class,
                los: ld(30.2, 23.5),
                nlos: ld(16.3, 36.3),
                los_probability: LosProbability::Macro { decay_m: 72.0 },
                shadow_std_los_db: 6.0,
                shadow_std_nlos_db: 6.0,
            },
            LinkClass::SbsMd => Self {
                class,
                los: ld(41.1, 20.9),
                nlos: ld(32.9, 37.5),
                los_probability: LosProbability::SmallCell,
                shadow_std_los_db: 6.0,
                shadow_std_nlos_db: 4.0,
            },
        }
    }

    pub fn shadow_std_db(&self, los: bool) -> f64 {
        if los {
            self.shadow_std_los_db
        } else {
            self.shadow_std_nlos_db
        }
    }
}

/// Pathloss in dB. Distances below 1 m are clamped to 1 m.
pub fn pathloss_db(model: &LinkModel, d: f64, los: bool) -> f64 {
    let d = d.max(1.0);
    if los {
        model.los.eval(d)
    } else {
        model.nlos.eval(d)
    }
}

/// Probability that a link of length `d` metres is line-of-sight.
pub fn los_probability(model: &LinkModel, d: f64) -> f64 {
    let p = match model.los_probability {
        LosProbability::Macro { decay_m } => {
            let e = (-d / decay_m).exp();
            (1.0 - e) * (18.0 / d).min(1.0) + e
        }
        LosProbability::SmallCell => {
            0.5 - (5.0 * (-156.0 / d).exp()).min(0.5) + (5.0 * (-d / 30.0).exp()).min(0.5)
        }
    };
    p.clamp(0.0, 1.0)
}

/// The two random inputs a link needs: a uniform for the LOS draw and a
/// standard normal for shadowing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraws {
    pub los_uniform: f64,
    pub shadow_normal: f64,
}

/// Linear channel gain `10^{-(PL + X)/10}` with `X = std * shadow_normal`.
pub fn channel_gain(model: &LinkModel, d: f64, draws: ChannelDraws) -> f64 {
    let los = draws.los_uniform < los_probability(model, d);
    let pl = pathloss_db(model, d, los);
    let shadow = model.shadow_std_db(los) * draws.shadow_normal;
    db_to_linear(-(pl + shadow))
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// First `n` hexagonal lattice sites with spacing `isd`, centre first and
/// then ring by ring. The first three sites are mutually adjacent.
pub fn hex_lattice(n: usize, isd: f64) -> Vec<Point> {
    let dir = |k: usize| {
        let ang = std::f64::consts::FRAC_PI_3 * (k % 6) as f64;
        (ang.cos(), ang.sin())
    };
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(Point::new(0.0, 0.0));
    let mut ring = 1;
    while out.len() < n {
        let r = ring as f64;
        for side in 0..6 {
            let (cx, cy) = dir(side);
            let (wx, wy) = dir(side + 2);
            for step in 0..ring {
                let s = step as f64;
                out.push(Point::new(isd * (r * cx + s * wx), isd * (r * cy + s * wy)));
            }
        }
        ring += 1;
    }
    out.truncate(n);
    out
}

const PLACEMENT_RETRIES: usize = 1000;
const MIN_SEPARATION_M: f64 = 1.0;

/// Immutable deployment plus frozen link gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: SystemParams,
    pub counts: Counts,
    pub mbs_pos: Vec<Point>,
    pub sbs_pos: Vec<Point>,
    pub hrd_pos: Vec<Point>,
    pub csd_pos: Vec<Point>,
    /// Macrocell (MBS index) each SBS was dropped into.
    pub sbs_cell: Vec<usize>,
    /// `h_nk` between SBS `n` (rows) and HRD `k` (columns).
    pub gain_sbs_hrd: Array2<f64>,
    /// `h_nk` between SBS `n` (rows) and CSD `k` (columns).
    pub gain_sbs_csd: Array2<f64>,
    /// Gain from SBS `n` to its backhaul MBS.
    pub gain_mbs_sbs: Vec<f64>,
    /// Nearest MBS to each SBS (ties to the lowest index).
    pub backhaul_mbs: Vec<usize>,
}

impl Scenario {
    pub fn n_sbs(&self) -> usize {
        self.sbs_pos.len()
    }

    pub fn n_hrd(&self) -> usize {
        self.hrd_pos.len()
    }

    pub fn n_csd(&self) -> usize {
        self.csd_pos.len()
    }

    /// Number of SBSs sharing the macrocell of SBS `n`.
    pub fn sbs_in_cell_of(&self, n: usize) -> usize {
        let cell = self.sbs_cell[n];
        self.sbs_cell.iter().filter(|&&c| c == cell).count()
    }

    /// Same deployment and gains, different band/time split.
    pub fn with_partitioning(&self, a: f64, t1_frac: f64) -> Result<Scenario> {
        let mut s = self.clone();
        s.params.a = a;
        s.params.t1_frac = t1_frac;
        s.params.validate()?;
        Ok(s)
    }
}

fn nearest(p: &Point, sites: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in sites.iter().enumerate() {
        let d = p.distance(s);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn place_in_disc(
    rng: &mut ChaCha8Rng,
    centre: Point,
    radius: f64,
    avoid: &[&[Point]],
    what: &str,
) -> Result<Point> {
    for _ in 0..PLACEMENT_RETRIES {
        let r = radius * rng.random::<f64>().sqrt();
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        let p = Point::new(centre.x + r * phi.cos(), centre.y + r * phi.sin());
        let clash = avoid
            .iter()
            .flat_map(|set| set.iter())
            .any(|q| p.distance(q) < MIN_SEPARATION_M);
        if !clash {
            return Ok(p);
        }
    }
    Err(Error::Placement {
        what: what.to_string(),
        retries: PLACEMENT_RETRIES,
    })
}

/// Drop nodes and draw all link gains. Deterministic in `params.seed`.
pub fn generate_scenario(params: &SystemParams, counts: Counts) -> Result<Scenario> {
    params.validate()?;
    if counts.sbs_per_cell == 0 {
        return Err(Error::InvalidParams("no SBS to associate with".into()));
    }

    let mut deploy = stream_rng(params.seed, Stream::Deployment);
    let mbs_pos = hex_lattice(params.n_mbs, params.isd_m);
    let radius = params.isd_m / 2.0;

    let mut sbs_pos = Vec::with_capacity(params.n_mbs * counts.sbs_per_cell);
    let mut sbs_cell = Vec::with_capacity(sbs_pos.capacity());
    for (cell, &centre) in mbs_pos.iter().enumerate() {
        for _ in 0..counts.sbs_per_cell {
            let p = place_in_disc(&mut deploy, centre, radius, &[&mbs_pos, &sbs_pos], "SBS")?;
            sbs_pos.push(p);
            sbs_cell.push(cell);
        }
    }

    let mut drop_mds = |n: usize, what: &str| -> Result<Vec<Point>> {
        let mut pts = Vec::with_capacity(n);
        for k in 0..n {
            let centre = mbs_pos[k % params.n_mbs];
            pts.push(place_in_disc(&mut deploy, centre, radius, &[&mbs_pos, &sbs_pos], what)?);
        }
        Ok(pts)
    };
    let hrd_pos = drop_mds(counts.n_hrd, "HRD")?;
    let csd_pos = drop_mds(counts.n_csd, "CSD")?;

    let mut shadow_rng = stream_rng(params.seed, Stream::Shadowing);
    let mut los_rng = stream_rng(params.seed, Stream::Los);
    let mut draw = || ChannelDraws {
        los_uniform: los_rng.random::<f64>(),
        shadow_normal: shadow_rng.sample(StandardNormal),
    };

    let access = LinkModel::for_class(LinkClass::SbsMd);
    let mut gains_to = |mds: &[Point]| {
        let mut g = Array2::zeros((sbs_pos.len(), mds.len()));
        for ((n, k), v) in g.indexed_iter_mut() {
            *v = channel_gain(&access, sbs_pos[n].distance(&mds[k]), draw());
        }
        g
    };
    let gain_sbs_hrd = gains_to(&hrd_pos);
    let gain_sbs_csd = gains_to(&csd_pos);

    let backhaul = LinkModel::for_class(LinkClass::MbsSbs);
    let backhaul_mbs: Vec<usize> = sbs_pos.iter().map(|p| nearest(p, &mbs_pos)).collect();
    let gain_mbs_sbs = sbs_pos
        .iter()
        .zip(&backhaul_mbs)
        .map(|(p, &m)| channel_gain(&backhaul, p.distance(&mbs_pos[m]), draw()))
        .collect();

    Ok(Scenario {
        params: params.clone(),
        counts,
        mbs_pos,
        sbs_pos,
        hrd_pos,
        csd_pos,
        sbs_cell,
        gain_sbs_hrd,
        gain_sbs_csd,
        gain_mbs_sbs,
        backhaul_mbs,
    })
}
