//! Per-coalition resource allocation.
//!
//! Within one SBS the objective splits into four independent blocks (uplink
//! band, edge compute, downlink access band, backhaul band), each of the form
//! `min sum_j Z_j / x_j` over a simplex. Without bounds the optimum is the
//! square-root share `x_j = sqrt(Z_j) / sum_m sqrt(Z_m)` with value
//! `(sum_j sqrt(Z_j))^2`.

use serde::{Deserialize, Serialize};

use crate::content::BITS_PER_BYTE;
use crate::delay::{storage_load, Allocation, Instance, FEAS_TOL, THETA};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Hrd,
    Csd,
}

/// How a coalition's resources are split when its utility is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationRule {
    /// Square-root shares. Equal shares are used instead when the clamped
    /// backhaul block overflows its band or when they give a lower delay
    /// (possible only below the backhaul floor, where equal shares may still
    /// keep backhaul no slower than access).
    #[default]
    ClosedForm,
    EqualShare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    EqualShare,
}

/// One (HRD, file) pair served by an SBS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrdPair {
    pub k: usize,
    pub i: usize,
    pub z_dl: f64,
    /// `None` for files cached at the SBS.
    pub z_bh: Option<f64>,
    /// Backhaul fraction floor keeping backhaul no slower than full-band access.
    pub theta_lb: f64,
    /// Full-band access rate over full-band backhaul rate, `s_dl r_dl / (s_bh r_bh)`.
    pub rate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrdBlock {
    pub n: usize,
    pub pairs: Vec<HrdPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsdMember {
    pub k: usize,
    pub z_ul: f64,
    pub z_ed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsdBlock {
    pub n: usize,
    pub members: Vec<CsdMember>,
}

pub fn hrd_block(inst: &Instance, n: usize, members: &[usize]) -> HrdBlock {
    let d = &inst.demand;
    let t = &inst.rates;
    let bits = d.file_bits();
    let mut pairs = Vec::new();
    for &k in members {
        let w = d.hrd_weight[k];
        for i in d.requested(k) {
            pairs.push(HrdPair {
                k,
                i,
                z_dl: w * bits / (t.s_dl[n] * t.r_dl[(n, k)]),
                z_bh: inst
                    .needs_backhaul(n, i)
                    .then(|| w * bits / (t.s_bh[n] * t.r_bh[n])),
                theta_lb: t.theta_lb[(n, k)],
                rate_ratio: t.s_dl[n] * t.r_dl[(n, k)] / (t.s_bh[n] * t.r_bh[n]),
            });
        }
    }
    HrdBlock { n, pairs }
}

pub fn csd_block(inst: &Instance, n: usize, members: &[usize]) -> CsdBlock {
    let d = &inst.demand;
    let t = &inst.rates;
    let members = members
        .iter()
        .map(|&k| {
            let w = d.csd_weight[k];
            CsdMember {
                k,
                z_ul: w * d.task_input_bytes[k] * BITS_PER_BYTE / (t.s_ul[n] * t.r_ul[(n, k)]),
                z_ed: w * d.task_cycles[k] / d.edge_cycles_per_s[n],
            }
        })
        .collect();
    CsdBlock { n, members }
}

/// Square-root shares of `z`, each capped at 1.
pub fn sqrt_share(z: &[f64]) -> Vec<f64> {
    let total: f64 = z.iter().map(|v| v.sqrt()).sum();
    z.iter().map(|v| (v.sqrt() / total).min(1.0)).collect()
}

/// `sum_j z_j / x_j`.
pub fn block_value(z: &[f64], x: &[f64]) -> f64 {
    z.iter().zip(x).map(|(z, x)| z / x).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsdShares {
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrdShares {
    pub beta: Vec<f64>,
    /// `THETA` for cached pairs.
    pub eta: Vec<f64>,
}

pub fn allocate_csd(block: &CsdBlock) -> CsdShares {
    let z_ul: Vec<f64> = block.members.iter().map(|m| m.z_ul).collect();
    let z_ed: Vec<f64> = block.members.iter().map(|m| m.z_ed).collect();
    CsdShares {
        alpha: sqrt_share(&z_ul),
        gamma: sqrt_share(&z_ed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrdClosedForm {
    pub shares: HrdShares,
    /// Some backhaul share was raised to its floor.
    pub clamped: bool,
    /// Backhaul shares fit the band and every floor is below 1.
    pub feasible: bool,
}

/// Square-root shares for access and backhaul; backhaul shares are then
/// clamped into `[theta_lb, 1]` and the band sum is checked, not repaired.
pub fn allocate_hrd(block: &HrdBlock) -> HrdClosedForm {
    let z_dl: Vec<f64> = block.pairs.iter().map(|p| p.z_dl).collect();
    let beta = sqrt_share(&z_dl);

    let bh: Vec<usize> = (0..block.pairs.len())
        .filter(|&j| block.pairs[j].z_bh.is_some())
        .collect();
    let z_bh: Vec<f64> = bh.iter().map(|&j| block.pairs[j].z_bh.unwrap()).collect();
    let raw = sqrt_share(&z_bh);
    let mut eta = vec![THETA; block.pairs.len()];
    let mut clamped = false;
    let mut floors_ok = true;
    for (&j, &x) in bh.iter().zip(&raw) {
        let lb = block.pairs[j].theta_lb;
        floors_ok &= lb <= 1.0;
        if x < lb {
            clamped = true;
        }
        eta[j] = x.max(lb).min(1.0);
    }
    let sum_eta: f64 = bh.iter().map(|&j| eta[j]).sum();
    HrdClosedForm {
        shares: HrdShares { beta, eta },
        clamped,
        feasible: floors_ok && sum_eta <= 1.0 + FEAS_TOL,
    }
}

pub fn equal_share_csd(block: &CsdBlock) -> CsdShares {
    let x = 1.0 / block.members.len() as f64;
    CsdShares {
        alpha: vec![x; block.members.len()],
        gamma: vec![x; block.members.len()],
    }
}

pub fn equal_share_hrd(block: &HrdBlock) -> HrdShares {
    let n_act = block.pairs.len();
    let n_bh = block.pairs.iter().filter(|p| p.z_bh.is_some()).count();
    HrdShares {
        beta: vec![1.0 / n_act as f64; n_act],
        eta: block
            .pairs
            .iter()
            .map(|p| if p.z_bh.is_some() { 1.0 / n_bh as f64 } else { THETA })
            .collect(),
    }
}

/// Downlink access never faster than backhaul for any backhauled pair.
pub fn rate_ordering_holds(block: &HrdBlock, shares: &HrdShares) -> bool {
    block.pairs.iter().enumerate().all(|(j, p)| {
        p.z_bh.is_none() || shares.beta[j] * p.rate_ratio <= shares.eta[j] * (1.0 + FEAS_TOL)
    })
}

pub fn hrd_value(block: &HrdBlock, s: &HrdShares) -> f64 {
    block
        .pairs
        .iter()
        .enumerate()
        .map(|(j, p)| p.z_dl / s.beta[j] + p.z_bh.map_or(0.0, |z| z / s.eta[j]))
        .sum()
}

pub fn csd_value(block: &CsdBlock, s: &CsdShares) -> f64 {
    block
        .members
        .iter()
        .enumerate()
        .map(|(j, m)| m.z_ul / s.alpha[j] + m.z_ed / s.gamma[j])
        .sum()
}

/// Fractions chosen for one coalition.
#[derive(Debug, Clone, PartialEq)]
pub enum Shares {
    /// Empty coalition or the local-computing coalition.
    None,
    Hrd(HrdBlock, HrdShares),
    Csd(CsdBlock, CsdShares),
}

impl Shares {
    /// Write this coalition's fractions into `alloc`, clearing what the SBS held before.
    pub fn write_into(&self, kind: Kind, n: Option<usize>, alloc: &mut Allocation) {
        let Some(n) = n else { return };
        match kind {
            Kind::Hrd => alloc.clear_hrd(n),
            Kind::Csd => alloc.clear_csd(n),
        }
        match self {
            Shares::None => {}
            Shares::Hrd(b, s) => {
                for (j, p) in b.pairs.iter().enumerate() {
                    alloc.beta[(n, p.k, p.i)] = s.beta[j];
                    alloc.eta[(n, p.k, p.i)] = s.eta[j];
                }
            }
            Shares::Csd(b, s) => {
                for (j, m) in b.members.iter().enumerate() {
                    alloc.alpha[(n, m.k)] = s.alpha[j];
                    alloc.gamma[(n, m.k)] = s.gamma[j];
                }
            }
        }
    }
}

/// Weighted delay of one coalition under the chosen fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct Utility {
    pub value: f64,
    pub feasible: bool,
    pub method: Method,
    pub shares: Shares,
}

fn equal_hrd_utility(block: HrdBlock) -> Utility {
    let s = equal_share_hrd(&block);
    Utility {
        value: hrd_value(&block, &s),
        feasible: rate_ordering_holds(&block, &s),
        method: Method::EqualShare,
        shares: Shares::Hrd(block, s),
    }
}

/// Utility of a nonempty HRD block. Under the closed-form rule the clamped
/// square-root shares are used when they fit the band, unless equal shares
/// are feasible and lower.
pub fn hrd_utility(block: HrdBlock, rule: AllocationRule) -> Utility {
    match rule {
        AllocationRule::EqualShare => equal_hrd_utility(block),
        AllocationRule::ClosedForm => {
            let cf = allocate_hrd(&block);
            let equal = equal_hrd_utility(block.clone());
            if !cf.feasible {
                return equal;
            }
            let value = hrd_value(&block, &cf.shares);
            if equal.feasible && equal.value < value {
                equal
            } else {
                Utility {
                    value,
                    feasible: true,
                    method: Method::ClosedForm,
                    shares: Shares::Hrd(block, cf.shares),
                }
            }
        }
    }
}

/// Utility of coalition `members` at SBS `n` (`None`: local computing, CSDs only).
pub fn coalition_utility(
    inst: &Instance,
    kind: Kind,
    n: Option<usize>,
    members: &[usize],
    rule: AllocationRule,
) -> Utility {
    let empty = |value: f64| Utility {
        value,
        feasible: true,
        method: Method::ClosedForm,
        shares: Shares::None,
    };
    let Some(n) = n else {
        debug_assert_eq!(kind, Kind::Csd);
        let d = &inst.demand;
        let v = members
            .iter()
            .map(|&k| d.csd_weight[k] * d.task_cycles[k] / d.local_cycles_per_s[k])
            .sum();
        return empty(v);
    };
    if members.is_empty() {
        return empty(0.0);
    }
    match kind {
        Kind::Csd => {
            let block = csd_block(inst, n, members);
            let (s, method) = match rule {
                AllocationRule::ClosedForm => (allocate_csd(&block), Method::ClosedForm),
                AllocationRule::EqualShare => (equal_share_csd(&block), Method::EqualShare),
            };
            let fits = storage_load(inst, n, members.iter().copied())
                <= inst.demand.storage_bytes[n] * (1.0 + FEAS_TOL);
            Utility {
                value: csd_value(&block, &s),
                feasible: fits,
                method,
                shares: Shares::Csd(block, s),
            }
        }
        Kind::Hrd => hrd_utility(hrd_block(inst, n, members), rule),
    }
}

/// Optimal fractions of one block: `min sum z_j / x_j` subject to
/// `sum x_j <= 1` and `lb_j <= x_j <= 1`, by bisection on the log of the
/// simplex multiplier.
pub fn oracle_block(z: &[f64], lb: &[f64], tol: f64) -> Result<Vec<f64>> {
    assert_eq!(z.len(), lb.len());
    if z.is_empty() {
        return Ok(Vec::new());
    }
    if lb.iter().any(|&l| l > 1.0) || lb.iter().sum::<f64>() > 1.0 + FEAS_TOL {
        return Err(Error::Infeasible("block floors exceed the band".into()));
    }
    let x_at = |lambda: f64| -> Vec<f64> {
        z.iter()
            .zip(lb)
            .map(|(&z, &l)| (z / lambda).sqrt().clamp(l, 1.0))
            .collect()
    };
    if z.len() == 1 {
        return Ok(vec![1.0]);
    }
    let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let zmax = z.iter().cloned().fold(0.0, f64::max);
    let mut lo = zmin.ln();
    let mut hi = (zmax / (THETA * THETA)).ln();
    for _ in 0..400 {
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if x_at(mid.exp()).iter().sum::<f64>() > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = x_at(hi.exp());
    let residual = x.iter().sum::<f64>() - 1.0;
    // A negative residual is fine when every share sits on its floor.
    let all_floored = x.iter().zip(lb).all(|(x, l)| x <= l);
    if residual > tol || (residual < -tol && !all_floored) {
        return Err(Error::NoConvergence { residual });
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub beta: Vec<f64>,
    /// `THETA` for cached pairs.
    pub eta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub objective: f64,
}

/// Numerical optimum of one SBS's allocation problem, with backhaul shares
/// floored at `theta_lb` and every other share at `THETA`.
pub fn oracle_solve_p3(hrd: &HrdBlock, csd: &CsdBlock, tol: f64) -> Result<OracleSolution> {
    let floor = |v: &[f64]| vec![THETA; v.len()];
    let z_dl: Vec<f64> = hrd.pairs.iter().map(|p| p.z_dl).collect();
    let beta = oracle_block(&z_dl, &floor(&z_dl), tol)?;

    let bh: Vec<usize> = (0..hrd.pairs.len()).filter(|&j| hrd.pairs[j].z_bh.is_some()).collect();
    let z_bh: Vec<f64> = bh.iter().map(|&j| hrd.pairs[j].z_bh.unwrap()).collect();
    let lb_bh: Vec<f64> = bh.iter().map(|&j| hrd.pairs[j].theta_lb.max(THETA)).collect();
    let x_bh = oracle_block(&z_bh, &lb_bh, tol)?;
    let mut eta = vec![THETA; hrd.pairs.len()];
    for (&j, x) in bh.iter().zip(x_bh) {
        eta[j] = x;
    }

    let z_ul: Vec<f64> = csd.members.iter().map(|m| m.z_ul).collect();
    let z_ed: Vec<f64> = csd.members.iter().map(|m| m.z_ed).collect();
    let alpha = oracle_block(&z_ul, &floor(&z_ul), tol)?;
    let gamma = oracle_block(&z_ed, &floor(&z_ed), tol)?;

    let hs = HrdShares { beta, eta };
    let cs = CsdShares { alpha, gamma };
    let objective = hrd_value(hrd, &hs) + csd_value(csd, &cs);
    Ok(OracleSolution {
        beta: hs.beta,
        eta: hs.eta,
        alpha: cs.alpha,
        gamma: cs.gamma,
        objective,
    })
}
