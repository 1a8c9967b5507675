//! Per-SBS band shares and per-link spectral efficiencies.
//!
//! Access links use the `a W` band, backhaul links the `(1 - a) W` band; both
//! are split three ways for frequency reuse between macrocells and then
//! equally between the `M` SBSs of a cell. Uplink traffic runs in the `T1`
//! slot, downlink in `T2`. Noise is taken over the per-SBS band of the link,
//! so spectral efficiencies do not depend on the fraction a device receives.

use std::io::Write;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scenario::{dbm_to_watts, Scenario};

/// Quasi-static rate coefficients of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    /// Effective downlink access Hz per SBS, `a W (T2/T) / (3M)`.
    pub s_dl: Vec<f64>,
    /// Effective uplink access Hz per SBS, `a W (T1/T) / (3M)`.
    pub s_ul: Vec<f64>,
    /// Effective downlink backhaul Hz per SBS, `(1-a) W (T2/T) / (3M)`.
    pub s_bh: Vec<f64>,
    /// Downlink bits/s/Hz, SBS x HRD.
    pub r_dl: Array2<f64>,
    /// Uplink bits/s/Hz, SBS x CSD.
    pub r_ul: Array2<f64>,
    /// Backhaul bits/s/Hz per SBS.
    pub r_bh: Vec<f64>,
    /// Smallest backhaul fraction keeping the backhaul at least as fast as a
    /// full-band access link: `a r_dl / ((1-a) r_bh)`, SBS x HRD.
    pub theta_lb: Array2<f64>,
    pub noise_access_w: Vec<f64>,
    pub noise_backhaul_w: Vec<f64>,
}

fn spectral_efficiency(p_w: f64, gain: f64, noise_w: f64) -> f64 {
    (1.0 + p_w * gain / noise_w).log2()
}

pub fn build_rate_table(scenario: &Scenario) -> Result<RateTable> {
    let p = &scenario.params;
    let has_hrd = scenario.n_hrd() > 0;
    let has_csd = scenario.n_csd() > 0;
    let degenerate = |what: &str| Err(Error::DegeneratePartition(what.to_string()));
    if p.a == 0.0 && (has_hrd || has_csd) {
        return degenerate("a = 0 leaves no access band");
    }
    if p.a == 1.0 && has_hrd {
        return degenerate("a = 1 leaves no backhaul band");
    }
    if p.t1_frac == 0.0 && has_csd {
        return degenerate("T1/T = 0 leaves no uplink slot");
    }
    if p.t1_frac == 1.0 && has_hrd {
        return degenerate("T1/T = 1 leaves no downlink slot");
    }

    let n_sbs = scenario.n_sbs();
    let n0_w_per_hz = dbm_to_watts(p.noise_psd_dbm_hz);
    let per_sbs_band = |n: usize, share: f64| share * p.bandwidth_hz / (3.0 * scenario.sbs_in_cell_of(n) as f64);

    let access_band: Vec<f64> = (0..n_sbs).map(|n| per_sbs_band(n, p.a)).collect();
    let backhaul_band: Vec<f64> = (0..n_sbs).map(|n| per_sbs_band(n, 1.0 - p.a)).collect();
    let noise_access_w: Vec<f64> = access_band.iter().map(|b| n0_w_per_hz * b).collect();
    let noise_backhaul_w: Vec<f64> = backhaul_band.iter().map(|b| n0_w_per_hz * b).collect();

    let s_dl = access_band.iter().map(|b| b * p.t2_frac()).collect();
    let s_ul = access_band.iter().map(|b| b * p.t1_frac).collect();
    let s_bh = backhaul_band.iter().map(|b| b * p.t2_frac()).collect();

    let p_sbs = dbm_to_watts(p.p_sbs_dbm);
    let p_md = dbm_to_watts(p.p_md_dbm);
    let p_mbs = dbm_to_watts(p.p_mbs_dbm);

    let r_dl = Array2::from_shape_fn(scenario.gain_sbs_hrd.dim(), |(n, k)| {
        spectral_efficiency(p_sbs, scenario.gain_sbs_hrd[(n, k)], noise_access_w[n])
    });
    let r_ul = Array2::from_shape_fn(scenario.gain_sbs_csd.dim(), |(n, k)| {
        spectral_efficiency(p_md, scenario.gain_sbs_csd[(n, k)], noise_access_w[n])
    });
    let r_bh: Vec<f64> = (0..n_sbs)
        .map(|n| spectral_efficiency(p_mbs, scenario.gain_mbs_sbs[n], noise_backhaul_w[n]))
        .collect();
    let theta_lb = Array2::from_shape_fn(r_dl.dim(), |(n, k)| {
        p.a * r_dl[(n, k)] / ((1.0 - p.a) * r_bh[n])
    });

    Ok(RateTable {
        s_dl,
        s_ul,
        s_bh,
        r_dl,
        r_ul,
        r_bh,
        theta_lb,
        noise_access_w,
        noise_backhaul_w,
    })
}

impl RateTable {
    pub fn n_sbs(&self) -> usize {
        self.r_bh.len()
    }

    /// Downlink access rate of HRD `k` at SBS `n` with band fraction `beta`, bits/s.
    pub fn rate_dl(&self, n: usize, k: usize, beta: f64) -> f64 {
        beta * self.s_dl[n] * self.r_dl[(n, k)]
    }

    /// Uplink access rate of CSD `k` at SBS `n` with band fraction `alpha`, bits/s.
    pub fn rate_ul(&self, n: usize, k: usize, alpha: f64) -> f64 {
        alpha * self.s_ul[n] * self.r_ul[(n, k)]
    }

    /// Backhaul rate through SBS `n` with band fraction `eta`, bits/s.
    pub fn rate_bh(&self, n: usize, eta: f64) -> f64 {
        eta * self.s_bh[n] * self.r_bh[n]
    }

    /// Dump S and r values as CSV: `kind,sbs,device,s_hz,r_bps_hz`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "kind,sbs,device,s_hz,r_bps_hz")?;
        for n in 0..self.n_sbs() {
            writeln!(out, "bh,{n},,{:.12e},{:.12e}", self.s_bh[n], self.r_bh[n])?;
            for k in 0..self.r_dl.ncols() {
                writeln!(out, "dl,{n},{k},{:.12e},{:.12e}", self.s_dl[n], self.r_dl[(n, k)])?;
            }
            for k in 0..self.r_ul.ncols() {
                writeln!(out, "ul,{n},{k},{:.12e},{:.12e}", self.s_ul[n], self.r_ul[(n, k)])?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Counts, SystemParams};
    use approx::assert_relative_eq;

    fn scenario(a: f64, t1: f64) -> Scenario {
        let p = SystemParams {
            a,
            t1_frac: t1,
            seed: 9,
            ..SystemParams::default()
        };
        generate_scenario(&p, Counts::default()).unwrap()
    }

    #[test]
    fn s_factors() {
        let t = build_rate_table(&scenario(0.5, 0.5)).unwrap();
        assert_relative_eq!(t.s_dl[0], 0.5 * 20e6 * 0.5 / 15.0, max_relative = 1e-15);
        assert_relative_eq!(t.s_dl[0], 333_333.333_333_333_3, max_relative = 1e-12);
        let t = build_rate_table(&scenario(0.3, 0.2)).unwrap();
        for n in 0..t.n_sbs() {
            let scale = 3.0 * 5.0 / (20e6 * 0.8);
            assert_relative_eq!(t.s_dl[n] * scale + t.s_bh[n] * scale, 1.0, max_relative = 1e-14);
            assert_relative_eq!(t.s_ul[n] / t.s_dl[n], 0.2 / 0.8, max_relative = 1e-14);
        }
    }

    #[test]
    fn unit_snr_gives_one_bit() {
        assert_relative_eq!(spectral_efficiency(2.0, 0.5, 1.0), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn theta_lower_bound() {
        let t = build_rate_table(&scenario(0.5, 0.5)).unwrap();
        for n in 0..t.n_sbs() {
            for k in 0..t.r_dl.ncols() {
                assert_relative_eq!(t.theta_lb[(n, k)], t.r_dl[(n, k)] / t.r_bh[n], max_relative = 1e-14);
            }
        }
    }

    #[test]
    fn rates_scale_linearly() {
        let t = build_rate_table(&scenario(0.5, 0.5)).unwrap();
        assert_eq!(t.rate_dl(0, 0, 0.0), 0.0);
        assert_relative_eq!(t.rate_dl(1, 2, 0.4), 2.0 * t.rate_dl(1, 2, 0.2), max_relative = 1e-15);
        assert_relative_eq!(t.rate_ul(1, 2, 1.0), t.s_ul[1] * t.r_ul[(1, 2)], max_relative = 1e-15);
        assert_relative_eq!(t.rate_bh(3, 0.5), 0.5 * t.s_bh[3] * t.r_bh[3], max_relative = 1e-15);
    }

    #[test]
    fn rate_ordering_closure() {
        // eta >= theta * beta keeps the backhaul no slower than the access link
        let t = build_rate_table(&scenario(0.6, 0.5)).unwrap();
        for n in 0..t.n_sbs() {
            for k in 0..t.r_dl.ncols() {
                let th = t.theta_lb[(n, k)];
                for beta in [0.1, 0.5, 1.0] {
                    let eta = th * beta;
                    assert!(t.rate_dl(n, k, beta) <= t.rate_bh(n, eta) * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn degenerate_splits() {
        for (a, t1) in [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0)] {
            assert!(matches!(
                build_rate_table(&scenario(a, t1)),
                Err(Error::DegeneratePartition(_))
            ));
        }
    }
}
