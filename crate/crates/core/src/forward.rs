//! Euler schemes for the transformed state `ζ`, the surrogate `X̃ = ζκ`,
//! the first and second variations `y₁`, `y₂`, the direct two-Brownian scheme
//! at `H = 1/2`, and the transformed cost.
//!
//! With `k_i = κ_{t_i}(𝒯_{t_i})` and left-point coefficients,
//!
//! ```text
//! ζ_{i+1} = ζ_i + (b(t_i, ζ_i k_i, v_i) Δt + β(t_i, ζ_i k_i, v_i) ΔW_i) / k_i
//! ```
//!
//! Moments of `X(t)` come from `E[g(X_t)] = E[g(ζ_t k_t) / k_t]`. The pathwise
//! surrogate `X̃(t) = ζ(t) κ_t` matches the law of `X` only when the control
//! does not enter the drift or diffusion, and is kept as a diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{PathEnsemble, TimeGrid};
use crate::girsanov::GirsanovFactors;
use crate::problem::{ControlPolicy, ControlProblem, PolicyInput};
use crate::stats::MeanSe;

/// Fraction of paths allowed to go non-finite before a run fails.
pub const FLAG_BUDGET: f64 = 1e-3;

/// Per path, per node trajectories, row-major `m_paths × n_nodes`.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub grid: TimeGrid,
    pub m_paths: usize,
    pub zeta: Vec<f64>,
    /// `ζ(t_i) κ_{t_i}`.
    pub x_reconstructed: Vec<f64>,
    /// Realized `v(t_i)`.
    pub controls: Vec<f64>,
    /// Realized `v^ε(t_i)` along the same path, when variations were run.
    pub controls_eps: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
    pub y2: Option<Vec<f64>>,
    pub valid: Vec<bool>,
}

fn row(v: &[f64], n: usize, p: usize) -> &[f64] {
    &v[p * n..(p + 1) * n]
}

impl TrajectorySet {
    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn zeta(&self, p: usize) -> &[f64] {
        row(&self.zeta, self.n_nodes(), p)
    }

    pub fn x(&self, p: usize) -> &[f64] {
        row(&self.x_reconstructed, self.n_nodes(), p)
    }

    pub fn control(&self, p: usize) -> &[f64] {
        row(&self.controls, self.n_nodes(), p)
    }

    pub fn control_eps(&self, p: usize) -> Option<&[f64]> {
        self.controls_eps.as_deref().map(|v| row(v, self.n_nodes(), p))
    }

    pub fn y1(&self, p: usize) -> Option<&[f64]> {
        self.y1.as_deref().map(|v| row(v, self.n_nodes(), p))
    }

    pub fn y2(&self, p: usize) -> Option<&[f64]> {
        self.y2.as_deref().map(|v| row(v, self.n_nodes(), p))
    }

    /// `y₃ = y₁ + y₂`.
    pub fn y3(&self, p: usize) -> Option<Vec<f64>> {
        Some(self.y1(p)?.iter().zip(self.y2(p)?).map(|(a, b)| a + b).collect())
    }

    pub fn n_flagged(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }

    pub fn valid_paths(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(p, _)| p)
    }

    /// `ζ` at node `i` over valid paths.
    pub fn zeta_column(&self, i: usize) -> Vec<f64> {
        self.valid_paths().map(|p| self.zeta(p)[i]).collect()
    }
}

fn check_budget(valid: &[bool]) -> Result<()> {
    let flagged = valid.iter().filter(|v| !**v).count();
    let budget = (FLAG_BUDGET * valid.len() as f64).floor() as usize;
    if flagged > budget {
        return Err(Error::FlaggedPaths {
            flagged,
            total: valid.len(),
            budget,
        });
    }
    Ok(())
}

fn check_inputs(ensemble: &PathEnsemble, factors: &GirsanovFactors) -> Result<()> {
    if ensemble.grid != factors.grid || ensemble.m_paths() != factors.m_paths() {
        return Err(Error::contract(
            "Girsanov factors were computed on a different ensemble",
        ));
    }
    Ok(())
}

/// `(ζ, X̃, v, valid)` of one path.
type SimRow = (Vec<f64>, Vec<f64>, Vec<f64>, bool);

enum Controls<'a> {
    Policy(&'a ControlPolicy),
    Realized(&'a [f64]),
}

fn simulate(
    problem: &ControlProblem,
    controls: Controls<'_>,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<TrajectorySet> {
    check_inputs(ensemble, factors)?;
    let grid = ensemble.grid;
    let n = grid.n_nodes();
    let dt = grid.dt();
    let coeffs = problem.coefficients.as_ref();
    let rows: Vec<SimRow> = (0..ensemble.m_paths())
        .into_par_iter()
        .map(|p| {
            let ks = factors.kappa_shifted(p);
            let kappa = factors.kappa(p);
            let bh = ensemble.bh_path(p);
            let bhs = factors.bh_shifted(p);
            let w = ensemble.w_path(p);
            let mut zeta = vec![0.0; n];
            let mut vs = vec![0.0; n];
            zeta[0] = problem.x0;
            for i in 0..n {
                let t = grid.t(i);
                vs[i] = match &controls {
                    Controls::Policy(pol) => problem.control_set.project(pol.eval(&PolicyInput {
                        t,
                        zeta: zeta[i],
                        bh: bh[i],
                        bh_shifted: bhs[i],
                    })),
                    Controls::Realized(m) => m[p * n + i],
                };
                if i + 1 == n {
                    break;
                }
                let k = ks[i];
                let kinv = 1.0 / k;
                let x = zeta[i] * k;
                let b = coeffs.b(t, x, vs[i]).v;
                let beta = coeffs.beta(t, x, vs[i]).v;
                zeta[i + 1] = zeta[i] + (b * dt + beta * (w[i + 1] - w[i])) * kinv;
            }
            let x: Vec<f64> = zeta.iter().zip(kappa).map(|(z, k)| z * k).collect();
            let ok = zeta.iter().chain(&x).all(|v| v.is_finite());
            (zeta, x, vs, ok)
        })
        .collect();
    let m = rows.len();
    let mut out = TrajectorySet {
        grid,
        m_paths: m,
        zeta: Vec::with_capacity(m * n),
        x_reconstructed: Vec::with_capacity(m * n),
        controls: Vec::with_capacity(m * n),
        controls_eps: None,
        y1: None,
        y2: None,
        valid: Vec::with_capacity(m),
    };
    for (z, x, v, ok) in rows {
        out.zeta.extend(z);
        out.x_reconstructed.extend(x);
        out.controls.extend(v);
        out.valid.push(ok);
    }
    check_budget(&out.valid)?;
    Ok(out)
}

/// Simulates `ζ` under the feedback or open-loop policy `v`, projecting its
/// values onto `U`.
pub fn simulate_zeta(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<TrajectorySet> {
    simulate(problem, Controls::Policy(policy), ensemble, factors)
}

/// Simulates `ζ` under a control matrix fixed in advance (`m_paths × n_nodes`).
pub fn simulate_open_loop(
    problem: &ControlProblem,
    controls: &[f64],
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<TrajectorySet> {
    if controls.len() != ensemble.m_paths() * ensemble.n_nodes() {
        return Err(Error::contract("control matrix does not match the ensemble"));
    }
    simulate(problem, Controls::Realized(controls), ensemble, factors)
}

/// Evaluates `policy` along the reference trajectory, so that a spiked policy
/// becomes the process `v^ε` coupled to `v`.
pub fn realize_along(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    reference: &TrajectorySet,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Vec<f64> {
    let n = reference.n_nodes();
    (0..reference.m_paths)
        .into_par_iter()
        .map(|p| {
            let z = reference.zeta(p);
            let bh = ensemble.bh_path(p);
            let bhs = factors.bh_shifted(p);
            (0..n)
                .map(|i| {
                    problem.control_set.project(policy.eval(&PolicyInput {
                        t: reference.grid.t(i),
                        zeta: z[i],
                        bh: bh[i],
                        bh_shifted: bhs[i],
                    }))
                })
                .collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Moments of `X(t_i)` from both reconstruction routes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XMoments {
    pub t: f64,
    /// `E[X̃]` and `E[X̃²]` for `X̃ = ζκ`.
    pub surrogate_mean: MeanSe,
    pub surrogate_second: MeanSe,
    /// `E[ζk/k]` and `E[(ζk)²/k]`.
    pub weighted_mean: MeanSe,
    pub weighted_second: MeanSe,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub grid: TimeGrid,
    pub m_paths: usize,
    /// `X̃(t_i) = ζ(t_i) κ_{t_i}`, row-major.
    pub x: Vec<f64>,
    pub moments: Vec<XMoments>,
}

/// `E[g(ζ_i k_i) / k_i]` over valid paths.
pub fn weighted_expectation(
    traj: &TrajectorySet,
    factors: &GirsanovFactors,
    i: usize,
    g: impl Fn(f64) -> f64,
) -> MeanSe {
    MeanSe::from_samples(traj.valid_paths().map(|p| {
        let k = factors.kappa_shifted(p)[i];
        g(traj.zeta(p)[i] * k) / k
    }))
}

/// The surrogate `X̃ = ζκ` with per-node moment summaries.
pub fn reconstruct_x(traj: &TrajectorySet, factors: &GirsanovFactors) -> Reconstruction {
    let moments = (0..traj.n_nodes())
        .map(|i| {
            let xs: Vec<f64> = traj.valid_paths().map(|p| traj.x(p)[i]).collect();
            XMoments {
                t: traj.grid.t(i),
                surrogate_mean: MeanSe::from_samples(xs.iter().copied()),
                surrogate_second: MeanSe::from_samples(xs.iter().map(|x| x * x)),
                weighted_mean: weighted_expectation(traj, factors, i, |x| x),
                weighted_second: weighted_expectation(traj, factors, i, |x| x * x),
            }
        })
        .collect();
    Reconstruction {
        grid: traj.grid,
        m_paths: traj.m_paths,
        x: traj.x_reconstructed.clone(),
        moments,
    }
}

/// Paths of the direct scheme at `H = 1/2`.
#[derive(Debug, Clone)]
pub struct DirectPaths {
    pub grid: TimeGrid,
    pub m_paths: usize,
    pub x: Vec<f64>,
    pub controls: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DirectPaths {
    pub fn x(&self, p: usize) -> &[f64] {
        row(&self.x, self.grid.n_nodes(), p)
    }

    pub fn control(&self, p: usize) -> &[f64] {
        row(&self.controls, self.grid.n_nodes(), p)
    }

    pub fn valid_paths(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(p, _)| p)
    }

    pub fn mean(&self, i: usize) -> MeanSe {
        MeanSe::from_samples(self.valid_paths().map(|p| self.x(p)[i]))
    }

    pub fn second_moment(&self, i: usize) -> MeanSe {
        MeanSe::from_samples(self.valid_paths().map(|p| self.x(p)[i] * self.x(p)[i]))
    }
}

/// Euler scheme for `dX = σX dB + β dW + b dt` at `H = 1/2`, with `B` the
/// ensemble's fBm column treated as a second Brownian motion. Policies see
/// `(t, X, B, B)`.
pub fn classical_direct(
    problem: &ControlProblem,
    policy: &ControlPolicy,
    ensemble: &PathEnsemble,
) -> Result<DirectPaths> {
    if !ensemble.hurst.is_classical() {
        return Err(Error::domain(format!(
            "classical_direct needs H = 1/2, got {}",
            ensemble.hurst.value()
        )));
    }
    let grid = ensemble.grid;
    let n = grid.n_nodes();
    let dt = grid.dt();
    let coeffs = problem.coefficients.as_ref();
    let sig: Vec<f64> = (0..n)
        .map(|i| match &problem.sigma {
            crate::girsanov::SigmaSpec::Constant(s) => *s,
            crate::girsanov::SigmaSpec::Custom(c) => (c.sigma)(grid.t(i)),
        })
        .collect();
    let rows: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..ensemble.m_paths())
        .into_par_iter()
        .map(|p| {
            let w = ensemble.w_path(p);
            let bh = ensemble.bh_path(p);
            let mut x = vec![0.0; n];
            let mut vs = vec![0.0; n];
            x[0] = problem.x0;
            for i in 0..n {
                let t = grid.t(i);
                vs[i] = problem.control_set.project(policy.eval(&PolicyInput {
                    t,
                    zeta: x[i],
                    bh: bh[i],
                    bh_shifted: bh[i],
                }));
                if i + 1 == n {
                    break;
                }
                let b = coeffs.b(t, x[i], vs[i]).v;
                let beta = coeffs.beta(t, x[i], vs[i]).v;
                x[i + 1] = x[i] + (b * dt + beta * (w[i + 1] - w[i])) + sig[i] * x[i] * (bh[i + 1] - bh[i]);
            }
            let ok = x.iter().all(|v| v.is_finite());
            (x, vs, ok)
        })
        .collect();
    let mut out = DirectPaths {
        grid,
        m_paths: rows.len(),
        x: Vec::with_capacity(rows.len() * n),
        controls: Vec::with_capacity(rows.len() * n),
        valid: Vec::with_capacity(rows.len()),
    };
    for (x, v, ok) in rows {
        out.x.extend(x);
        out.controls.extend(v);
        out.valid.push(ok);
    }
    check_budget(&out.valid)?;
    Ok(out)
}

/// Terminal moments of the transformed route against the direct scheme, from
/// per-path differences on shared increments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossScheme {
    /// `ζk/k − X_direct` at `T`.
    pub mean_gap: MeanSe,
    /// `(ζk)²/k − X_direct²` at `T`.
    pub second_gap: MeanSe,
    /// `X̃ − X_direct` at `T`, reported only.
    pub surrogate_mean_gap: MeanSe,
    pub surrogate_second_gap: MeanSe,
    pub n_se: f64,
    pub pass: bool,
}

pub fn cross_scheme(traj: &TrajectorySet, factors: &GirsanovFactors, direct: &DirectPaths, n_se: f64) -> CrossScheme {
    let last = traj.n_nodes() - 1;
    let paths: Vec<usize> = traj.valid_paths().filter(|&p| direct.valid[p]).collect();
    let gap = |g: &dyn Fn(usize) -> f64| MeanSe::from_samples(paths.iter().map(|&p| g(p)));
    let xd = |p: usize| direct.x(p)[last];
    let k = |p: usize| factors.kappa_shifted(p)[last];
    let z = |p: usize| traj.zeta(p)[last];
    let mean_gap = gap(&|p| z(p) - xd(p));
    let second_gap = gap(&|p| z(p) * z(p) * k(p) - xd(p) * xd(p));
    CrossScheme {
        pass: mean_gap.within(0.0, n_se) && second_gap.within(0.0, n_se),
        mean_gap,
        second_gap,
        surrogate_mean_gap: gap(&|p| traj.x(p)[last] - xd(p)),
        surrogate_second_gap: gap(&|p| traj.x(p)[last].powi(2) - xd(p) * xd(p)),
        n_se,
    }
}

/// Adds `y₁`, `y₂` for the perturbation `v_eps` (realized along the
/// reference path) to a copy of `reference`.
pub fn simulate_variations(
    problem: &ControlProblem,
    reference: &TrajectorySet,
    v_eps: &ControlPolicy,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<TrajectorySet> {
    let ce = realize_along(problem, v_eps, reference, ensemble, factors);
    variations_with_controls(problem, reference, ce, ensemble, factors)
}

/// As [`simulate_variations`] with `v^ε` already realized.
pub fn variations_with_controls(
    problem: &ControlProblem,
    reference: &TrajectorySet,
    controls_eps: Vec<f64>,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<TrajectorySet> {
    check_inputs(ensemble, factors)?;
    let grid = reference.grid;
    let n = grid.n_nodes();
    if controls_eps.len() != reference.m_paths * n {
        return Err(Error::contract("perturbed control matrix does not match the reference"));
    }
    let dt = grid.dt();
    let coeffs = problem.coefficients.as_ref();
    let rows: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..reference.m_paths)
        .into_par_iter()
        .map(|p| {
            let ks = factors.kappa_shifted(p);
            let w = ensemble.w_path(p);
            let y = reference.zeta(p);
            let v = reference.control(p);
            let ve = &controls_eps[p * n..(p + 1) * n];
            let mut y1 = vec![0.0; n];
            let mut y2 = vec![0.0; n];
            for i in 0..n - 1 {
                let t = grid.t(i);
                let k = ks[i];
                let kinv = 1.0 / k;
                let x = y[i] * k;
                let dw = w[i + 1] - w[i];
                let b = coeffs.b(t, x, v[i]);
                let be = coeffs.b(t, x, ve[i]);
                let s = coeffs.beta(t, x, v[i]);
                let se = coeffs.beta(t, x, ve[i]);
                let q = y1[i] * y1[i];
                y1[i + 1] = y1[i] + (b.x * y1[i] + (be.v - b.v) * kinv) * dt + (s.x * y1[i] + (se.v - s.v) * kinv) * dw;
                y2[i + 1] = y2[i]
                    + (b.x * y2[i] + 0.5 * k * be.xx * q) * dt
                    + (s.x * y2[i] + 0.5 * k * se.xx * q) * dw
                    + (be.x - b.x) * y1[i] * dt
                    + (se.x - s.x) * y1[i] * dw;
            }
            let ok = y1.iter().chain(&y2).all(|v| v.is_finite());
            (y1, y2, ok)
        })
        .collect();
    let mut out = reference.clone();
    let mut y1 = Vec::with_capacity(reference.m_paths * n);
    let mut y2 = Vec::with_capacity(reference.m_paths * n);
    for (p, (a, b, ok)) in rows.into_iter().enumerate() {
        y1.extend(a);
        y2.extend(b);
        out.valid[p] &= ok;
    }
    out.y1 = Some(y1);
    out.y2 = Some(y2);
    out.controls_eps = Some(controls_eps);
    check_budget(&out.valid)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub se: f64,
    pub m_paths: usize,
}

/// Per-path samples of `Φ(ζ_T k_T)/k_T + Σ_i f(t_i, ζ_i k_i, v_i)/k_i Δt`.
pub fn cost_samples(problem: &ControlProblem, traj: &TrajectorySet, factors: &GirsanovFactors) -> Vec<f64> {
    let grid = traj.grid;
    let n = grid.n_nodes();
    let dt = grid.dt();
    let coeffs = problem.coefficients.as_ref();
    traj.valid_paths()
        .map(|p| {
            let ks = factors.kappa_shifted(p);
            let z = traj.zeta(p);
            let v = traj.control(p);
            let running: f64 = (0..n - 1)
                .map(|i| coeffs.f(grid.t(i), z[i] * ks[i], v[i]).v / ks[i])
                .sum();
            coeffs.phi(z[n - 1] * ks[n - 1]).v / ks[n - 1] + running * dt
        })
        .collect()
}

pub fn evaluate_cost(problem: &ControlProblem, traj: &TrajectorySet, factors: &GirsanovFactors) -> CostEstimate {
    let s = MeanSe::from_samples(cost_samples(problem, traj, factors));
    CostEstimate {
        mean: s.mean,
        se: s.se,
        m_paths: s.n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{sample_paths, HurstParam};
    use crate::girsanov::SigmaSpec;
    use crate::problem::{spike, Builtin, ControlSet, SpikePerturbation};

    fn setup(h: f64, sigma: f64, m: usize) -> (ControlProblem, PathEnsemble, GirsanovFactors) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let e = sample_paths(HurstParam::new(h).unwrap(), grid, m, 11).unwrap();
        let f = GirsanovFactors::compute(&e, &SigmaSpec::Constant(sigma));
        let pb = ControlProblem::builtin(
            Builtin::lq_basic(),
            sigma,
            1.0,
            1.0,
            ControlSet::Interval { lo: -3.0, hi: 3.0 },
        );
        (pb, e, f)
    }

    #[test]
    fn trivial_coefficients_keep_zeta_constant() {
        let (mut pb, e, f) = setup(0.3, 0.5, 16);
        pb.coefficients = std::sync::Arc::new(Builtin::Trivial);
        let t = simulate_zeta(&pb, &ControlPolicy::Constant(0.0), &e, &f).unwrap();
        assert!(t.zeta.iter().all(|z| *z == 1.0));
        for p in 0..16 {
            assert_eq!(t.x(p), f.kappa(p));
        }
    }

    #[test]
    fn identity_spike_gives_zero_variations() {
        let (pb, e, f) = setup(0.3, 0.5, 16);
        let v = ControlPolicy::Constant(-1.0);
        let traj = simulate_zeta(&pb, &v, &e, &f).unwrap();
        let pert = SpikePerturbation::new(0.5, 0.1, v.clone(), 1.0).unwrap();
        let var = simulate_variations(&pb, &traj, &spike(&v, &pert), &e, &f).unwrap();
        assert!(var.y1.as_ref().unwrap().iter().all(|y| *y == 0.0));
        assert!(var.y2.as_ref().unwrap().iter().all(|y| *y == 0.0));
    }

    #[test]
    fn zero_cost_problem_costs_zero() {
        let (mut pb, e, f) = setup(0.3, 0.5, 8);
        pb.coefficients = std::sync::Arc::new(Builtin::Trivial);
        let t = simulate_zeta(&pb, &ControlPolicy::Constant(0.5), &e, &f).unwrap();
        let c = evaluate_cost(&pb, &t, &f);
        assert_eq!(c.mean, 0.0);
        assert_eq!(c.se, 0.0);
    }

    #[test]
    fn flagged_paths_over_budget_fail() {
        let (mut pb, e, f) = setup(0.3, 0.5, 8);
        pb.x0 = f64::NAN;
        assert!(matches!(
            simulate_zeta(&pb, &ControlPolicy::Constant(0.0), &e, &f),
            Err(Error::FlaggedPaths { flagged: 8, .. })
        ));
    }

    #[test]
    fn direct_scheme_rejects_fractional_ensembles() {
        let (pb, e, _) = setup(0.3, 0.5, 4);
        assert!(classical_direct(&pb, &ControlPolicy::Constant(0.0), &e).is_err());
    }
}
