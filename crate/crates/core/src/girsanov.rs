//! Girsanov density `κ_t` for the fBm shift, its values under the shift
//! `𝒯_t`, shifted fBm values, and a Monte Carlo checker for
//! `E[F] = E[F(𝒜_t) κ_t] = E[F(𝒯_t) κ_t^{-1}(𝒯_t)]`.
//!
//! For constant `σ`, `(𝒦σI_{[0,t]})(r) = σ K_H(t, r)`, hence
//!
//! ```text
//! κ_t          = exp(σ B^H(t) - σ² t^{2H} / 2)
//! κ_t(𝒯_t)     = exp(σ B^H(t) + σ² t^{2H} / 2)
//! B^H(s)(𝒯_t)  = B^H(s) + σ R_H(s, t)
//! ```
//!
//! Shifts are applied algebraically to the sampled values; nothing is resampled.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{covariance_unchecked, HurstParam, PathEnsemble, TimeGrid};
use crate::stats::MeanSe;

type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type ShiftFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type PathFn = Arc<dyn Fn(&[f64], &[f64]) -> Option<f64> + Send + Sync>;

/// Hooks for a time-dependent `σ`. Correctness of `energy` and `shift`
/// against `σ` (and membership of `σ I_{[0,t]}` in the kernel domain) is the
/// caller's burden.
#[derive(Clone)]
pub struct CustomSigma {
    /// `t ↦ σ(t)`, used for the Wiener integral `∫_0^t σ dB^H` (left-point sums).
    pub sigma: TimeFn,
    /// `t ↦ q(t) = ∫_0^t ((𝒦σI_{[0,t]})(r))² dr`.
    pub energy: TimeFn,
    /// `(s, t) ↦ B^H(s)(𝒯_t) - B^H(s)`.
    pub shift: ShiftFn,
}

#[derive(Clone)]
pub enum SigmaSpec {
    Constant(f64),
    Custom(CustomSigma),
}

impl fmt::Debug for SigmaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaSpec::Constant(s) => write!(f, "Constant({s})"),
            SigmaSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl SigmaSpec {
    pub fn constant(&self) -> Option<f64> {
        match self {
            SigmaSpec::Constant(s) => Some(*s),
            SigmaSpec::Custom(_) => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SigmaSpec::Constant(s) if *s == 0.0)
    }

    /// `q(t)`, the exponent correction in `κ_t`.
    pub fn energy(&self, h: HurstParam, t: f64) -> f64 {
        match self {
            SigmaSpec::Constant(s) => s * s * t.powf(2.0 * h.value()),
            SigmaSpec::Custom(c) => (c.energy)(t),
        }
    }

    /// `B^H(s)(𝒯_t) - B^H(s)`.
    pub fn shift(&self, h: HurstParam, s: f64, t: f64) -> f64 {
        match self {
            SigmaSpec::Constant(sig) => sig * covariance_unchecked(h.value(), s, t),
            SigmaSpec::Custom(c) => (c.shift)(s, t),
        }
    }

    /// `∫_0^{t_i} σ dB^H` along one sampled path.
    pub fn wiener_integral(&self, grid: &TimeGrid, bh: &[f64], i: usize) -> f64 {
        match self {
            SigmaSpec::Constant(s) => s * bh[i],
            SigmaSpec::Custom(c) => (0..i).map(|j| (c.sigma)(grid.t(j)) * (bh[j + 1] - bh[j])).sum(),
        }
    }
}

/// `κ_{t_i}` along one path.
pub fn kappa(sigma: &SigmaSpec, h: HurstParam, grid: &TimeGrid, bh: &[f64], i: usize) -> f64 {
    (sigma.wiener_integral(grid, bh, i) - 0.5 * sigma.energy(h, grid.t(i))).exp()
}

/// `κ_{t_i}(𝒯_{t_i})` along one path.
pub fn kappa_shifted(sigma: &SigmaSpec, h: HurstParam, grid: &TimeGrid, bh: &[f64], i: usize) -> f64 {
    (sigma.wiener_integral(grid, bh, i) + 0.5 * sigma.energy(h, grid.t(i))).exp()
}

/// `B^H(s)(𝒯_t)` given the unshifted value `bh_s = B^H(s)`.
pub fn shift_bh(sigma: &SigmaSpec, h: HurstParam, bh_s: f64, s: f64, t: f64) -> Result<f64> {
    if !(0.0 <= s && s <= t) {
        return Err(Error::domain(format!("shift_bh needs 0 <= s <= t, got s={s}, t={t}")));
    }
    Ok(bh_s + sigma.shift(h, s, t))
}

/// Per path, per node: `κ_{t_i}`, `κ_{t_i}(𝒯_{t_i})` and `B^H(t_i)(𝒯_{t_i})`.
#[derive(Debug, Clone)]
pub struct GirsanovFactors {
    pub sigma: SigmaSpec,
    pub hurst: HurstParam,
    pub grid: TimeGrid,
    m_paths: usize,
    kappa: Vec<f64>,
    kappa_shifted: Vec<f64>,
    bh_shifted: Vec<f64>,
}

impl GirsanovFactors {
    pub fn compute(ensemble: &PathEnsemble, sigma: &SigmaSpec) -> Self {
        let grid = ensemble.grid;
        let h = ensemble.hurst;
        let n = grid.n_nodes();
        let energies: Vec<f64> = (0..n).map(|i| sigma.energy(h, grid.t(i))).collect();
        let self_shift: Vec<f64> = (0..n).map(|i| sigma.shift(h, grid.t(i), grid.t(i))).collect();
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..ensemble.m_paths())
            .into_par_iter()
            .map(|p| {
                let bh = ensemble.bh_path(p);
                let mut k = Vec::with_capacity(n);
                let mut ks = Vec::with_capacity(n);
                let mut bs = Vec::with_capacity(n);
                for i in 0..n {
                    let integral = sigma.wiener_integral(&grid, bh, i);
                    k.push((integral - 0.5 * energies[i]).exp());
                    ks.push((integral + 0.5 * energies[i]).exp());
                    bs.push(bh[i] + self_shift[i]);
                }
                (k, ks, bs)
            })
            .collect();
        let mut out = Self {
            sigma: sigma.clone(),
            hurst: h,
            grid,
            m_paths: ensemble.m_paths(),
            kappa: Vec::with_capacity(ensemble.m_paths() * n),
            kappa_shifted: Vec::with_capacity(ensemble.m_paths() * n),
            bh_shifted: Vec::with_capacity(ensemble.m_paths() * n),
        };
        for (k, ks, bs) in rows {
            out.kappa.extend(k);
            out.kappa_shifted.extend(ks);
            out.bh_shifted.extend(bs);
        }
        out
    }

    pub fn m_paths(&self) -> usize {
        self.m_paths
    }

    fn row<'a>(&self, v: &'a [f64], p: usize) -> &'a [f64] {
        let n = self.grid.n_nodes();
        &v[p * n..(p + 1) * n]
    }

    pub fn kappa(&self, p: usize) -> &[f64] {
        self.row(&self.kappa, p)
    }

    pub fn kappa_shifted(&self, p: usize) -> &[f64] {
        self.row(&self.kappa_shifted, p)
    }

    pub fn bh_shifted(&self, p: usize) -> &[f64] {
        self.row(&self.bh_shifted, p)
    }
}

/// `E[sup_t κ_t^p]` and `E[sup_t κ_t(𝒯_t)^p]` estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupMoment {
    pub p: f64,
    pub kappa: MeanSe,
    pub kappa_shifted: MeanSe,
}

pub fn sup_moments(factors: &GirsanovFactors, ps: &[f64]) -> Vec<SupMoment> {
    ps.iter()
        .map(|&p| {
            let sup = |row: &[f64]| row.iter().map(|k| k.powf(p)).fold(f64::NEG_INFINITY, f64::max);
            SupMoment {
                p,
                kappa: MeanSe::from_samples((0..factors.m_paths()).map(|i| sup(factors.kappa(i)))),
                kappa_shifted: MeanSe::from_samples((0..factors.m_paths()).map(|i| sup(factors.kappa_shifted(i)))),
            }
        })
        .collect()
}

/// A functional of the fBm path observed on `t_0..=t_i`.
#[derive(Clone)]
pub enum PathFunctional {
    Constant(f64),
    /// `B^H(t)` at a grid time.
    Value(f64),
    /// `B^H(t)^2` at a grid time.
    Square(f64),
    Custom {
        name: String,
        eval: PathFn,
    },
}

impl fmt::Debug for PathFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn node_of(times: &[f64], t: f64) -> Option<usize> {
    times.iter().position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
}

impl PathFunctional {
    pub fn name(&self) -> String {
        match self {
            PathFunctional::Constant(c) => format!("const({c})"),
            PathFunctional::Value(t) => format!("B^H({t})"),
            PathFunctional::Square(t) => format!("B^H({t})^2"),
            PathFunctional::Custom { name, .. } => name.clone(),
        }
    }

    /// `None` when the functional needs values outside the observed prefix.
    pub fn eval(&self, times: &[f64], path: &[f64]) -> Option<f64> {
        match self {
            PathFunctional::Constant(c) => Some(*c),
            PathFunctional::Value(t) => node_of(times, *t).map(|i| path[i]),
            PathFunctional::Square(t) => node_of(times, *t).map(|i| path[i] * path[i]),
            PathFunctional::Custom { eval, .. } => eval(times, path),
        }
    }
}

/// Three Monte Carlo estimates of `E[F]` with common random numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GirsanovReport {
    pub functional: String,
    pub t: f64,
    pub lhs: f64,
    #[serde(rename = "rhs_A")]
    pub rhs_a: f64,
    #[serde(rename = "rhs_T")]
    pub rhs_t: f64,
    /// Larger of the two per-path-difference standard errors.
    pub se: f64,
    pub se_lhs: f64,
    pub se_rhs_a: f64,
    pub se_rhs_t: f64,
    pub se_gap_a: f64,
    pub se_gap_t: f64,
    pub n_se: f64,
    pub pass: bool,
}

/// Estimates `E[F]`, `E[F(𝒜_t) κ_t]` and `E[F(𝒯_t) κ_t^{-1}(𝒯_t)]` on the
/// same paths. `t` must be a grid time. Disagreement is judged against the
/// standard error of the per-path differences, scaled by `n_se`.
pub fn check_girsanov_identity(
    functional: &PathFunctional,
    t: f64,
    ensemble: &PathEnsemble,
    sigma: &SigmaSpec,
    n_se: f64,
) -> Result<GirsanovReport> {
    let grid = ensemble.grid;
    let h = ensemble.hurst;
    let times = grid.nodes();
    let ti = node_of(&times, t).ok_or_else(|| Error::domain(format!("t = {t} is not a grid time")))?;
    let prefix = &times[..=ti];
    let shift: Vec<f64> = prefix.iter().map(|&s| sigma.shift(h, s, t)).collect();
    let energy = sigma.energy(h, t);

    let samples: Vec<Option<(f64, f64, f64)>> = (0..ensemble.m_paths())
        .into_par_iter()
        .map(|p| {
            let bh = &ensemble.bh_path(p)[..=ti];
            let plain = functional.eval(prefix, bh)?;
            let down: Vec<f64> = bh.iter().zip(&shift).map(|(b, s)| b - s).collect();
            let up: Vec<f64> = bh.iter().zip(&shift).map(|(b, s)| b + s).collect();
            let integral = sigma.wiener_integral(&grid, bh, ti);
            let k = (integral - 0.5 * energy).exp();
            // κ_t^{-1}(𝒯_t) = exp(-∫σdB^H - q/2)
            let k_inv_shifted = (-integral - 0.5 * energy).exp();
            Some((
                plain,
                functional.eval(prefix, &down)? * k,
                functional.eval(prefix, &up)? * k_inv_shifted,
            ))
        })
        .collect();
    if samples.iter().any(Option::is_none) {
        return Err(Error::contract(format!(
            "functional {} is not evaluable on paths observed up to t = {t}",
            functional.name()
        )));
    }
    let samples: Vec<(f64, f64, f64)> = samples.into_iter().flatten().collect();
    let lhs = MeanSe::from_samples(samples.iter().map(|s| s.0));
    let rhs_a = MeanSe::from_samples(samples.iter().map(|s| s.1));
    let rhs_t = MeanSe::from_samples(samples.iter().map(|s| s.2));
    let gap_a = MeanSe::from_samples(samples.iter().map(|s| s.0 - s.1));
    let gap_t = MeanSe::from_samples(samples.iter().map(|s| s.0 - s.2));
    let pass = gap_a.within(0.0, n_se) && gap_t.within(0.0, n_se);
    Ok(GirsanovReport {
        functional: functional.name(),
        t,
        lhs: lhs.mean,
        rhs_a: rhs_a.mean,
        rhs_t: rhs_t.mean,
        se: gap_a.se.max(gap_t.se),
        se_lhs: lhs.se,
        se_rhs_a: rhs_a.se,
        se_rhs_t: rhs_t.se,
        se_gap_a: gap_a.se,
        se_gap_t: gap_t.se,
        n_se,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::sample_paths;

    fn setup(h: f64, m: usize) -> PathEnsemble {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        sample_paths(HurstParam::new(h).unwrap(), grid, m, 3).unwrap()
    }

    #[test]
    fn kappa_is_one_at_time_zero_and_for_zero_sigma() {
        let e = setup(0.3, 8);
        let f = GirsanovFactors::compute(&e, &SigmaSpec::Constant(0.7));
        for p in 0..8 {
            assert_eq!(f.kappa(p)[0], 1.0);
            assert_eq!(f.kappa_shifted(p)[0], 1.0);
        }
        let z = GirsanovFactors::compute(&e, &SigmaSpec::Constant(0.0));
        for p in 0..8 {
            assert!(z.kappa(p).iter().all(|&k| k == 1.0));
            assert!(z.kappa_shifted(p).iter().all(|&k| k == 1.0));
            assert_eq!(z.bh_shifted(p), e.bh_path(p));
        }
    }

    #[test]
    fn free_functions_agree_with_table() {
        let e = setup(0.25, 4);
        let s = SigmaSpec::Constant(0.4);
        let f = GirsanovFactors::compute(&e, &s);
        for p in 0..4 {
            for i in 0..=16 {
                let k = kappa(&s, e.hurst, &e.grid, e.bh_path(p), i);
                let ks = kappa_shifted(&s, e.hurst, &e.grid, e.bh_path(p), i);
                assert_eq!(k, f.kappa(p)[i]);
                assert_eq!(ks, f.kappa_shifted(p)[i]);
            }
        }
    }

    #[test]
    fn shift_bh_domain() {
        let h = HurstParam::new(0.25).unwrap();
        let s = SigmaSpec::Constant(1.0);
        assert!(shift_bh(&s, h, 0.0, 2.0, 1.0).is_err());
        let v = shift_bh(&s, h, 0.3, 1.0, 1.0).unwrap();
        assert!((v - 1.3).abs() < 1e-15);
        let z = shift_bh(&SigmaSpec::Constant(0.0), h, 0.3, 0.5, 1.0).unwrap();
        assert_eq!(z, 0.3);
    }

    #[test]
    fn custom_sigma_matching_constant_reproduces_closed_form() {
        let h = HurstParam::new(0.3).unwrap();
        let sig = 0.6;
        let custom = SigmaSpec::Custom(CustomSigma {
            sigma: Arc::new(move |_| sig),
            energy: Arc::new(move |t| sig * sig * t.powf(0.6)),
            shift: Arc::new(move |s, t| sig * covariance_unchecked(0.3, s, t)),
        });
        let e = setup(0.3, 4);
        let a = GirsanovFactors::compute(&e, &SigmaSpec::Constant(sig));
        let b = GirsanovFactors::compute(&e, &custom);
        assert_eq!(a.hurst, h);
        for p in 0..4 {
            for i in 0..=16 {
                assert!((a.kappa(p)[i] - b.kappa(p)[i]).abs() < 1e-12 * a.kappa(p)[i]);
                assert!((a.bh_shifted(p)[i] - b.bh_shifted(p)[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn functional_outside_prefix_is_a_contract_error() {
        let e = setup(0.3, 16);
        let f = PathFunctional::Value(1.0);
        let err = check_girsanov_identity(&f, 0.5, &e, &SigmaSpec::Constant(0.5), 3.0);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert!(check_girsanov_identity(&f, 0.51, &e, &SigmaSpec::Constant(0.5), 3.0).is_err());
    }

    #[test]
    fn report_serializes_with_documented_keys() {
        let e = setup(0.3, 64);
        let r =
            check_girsanov_identity(&PathFunctional::Constant(1.0), 1.0, &e, &SigmaSpec::Constant(0.5), 3.0).unwrap();
        assert_eq!(r.lhs, 1.0);
        let v = serde_json::to_value(&r).unwrap();
        for key in ["functional", "lhs", "rhs_A", "rhs_T", "se", "pass"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
