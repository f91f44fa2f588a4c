//! Checks of the maximum principle: the pointwise variational inequality,
//! the duality relations between variations and adjoints, the ε-scaling of
//! the variations, and the reduction to the two-driver adjoint at `H = 1/2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_classical_adjoint, solve_first_adjoint, tower_check, AdjointOrder, AdjointSolution};
use crate::error::{Error, Result};
use crate::fbm::PathEnsemble;
use crate::forward::{classical_direct, simulate_open_loop, simulate_variations, simulate_zeta, TrajectorySet};
use crate::girsanov::GirsanovFactors;
use crate::problem::{hamiltonian, spike, ControlPolicy, ControlProblem, HamiltonianInput, SpikePerturbation};
use crate::regression::RegressionBasis;
use crate::stats::{LineFit, MeanSe};

pub const DEFAULT_N_SE: f64 = 3.0;
pub const DEFAULT_VI_FLOOR: f64 = 1e-3;

/// Θ for one candidate at one node.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ThetaEntry {
    pub node: usize,
    pub tau: f64,
    pub candidate: f64,
    pub theta: f64,
    pub se: f64,
}

impl ThetaEntry {
    fn tolerance(&self, n_se: f64, floor: f64) -> f64 {
        n_se * self.se + floor
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalReport {
    pub entries: Vec<ThetaEntry>,
    /// Candidate with the smallest mean Θ at each node.
    pub node_minima: Vec<ThetaEntry>,
    pub global_min: ThetaEntry,
    /// `max |Θ(v(τ))|` over paths and nodes; zero by construction.
    pub at_current_max_abs: f64,
    pub n_se: f64,
    pub floor: f64,
    /// Entries with `Θ + n_se·SE < 0`: significant violations.
    pub rejections: Vec<ThetaEntry>,
    pub pass: bool,
}

/// `Θ = H(v_c) - H(v) + κ^{-2}(β(v_c) - β(v))² P / 2` per path at node `i`.
#[allow(clippy::too_many_arguments)]
fn theta(
    problem: &ControlProblem,
    traj: &TrajectorySet,
    factors: &GirsanovFactors,
    first: &AdjointSolution,
    second: &AdjointSolution,
    p: usize,
    i: usize,
    candidate: Option<f64>,
) -> f64 {
    let c = problem.coefficients.as_ref();
    let t = traj.grid.t(i);
    let k = factors.kappa_shifted(p)[i];
    let y = traj.zeta(p)[i];
    let v = traj.control(p)[i];
    let vc = candidate.unwrap_or(v);
    let base = HamiltonianInput {
        s: t,
        x: y,
        v,
        p: first.value(p)[i],
        k: first.z(p)[i],
        kappa: k,
    };
    let h_c = hamiltonian(&HamiltonianInput { v: vc, ..base }, c);
    let h_v = hamiltonian(&base, c);
    let db = c.beta(t, y * k, vc).v - c.beta(t, y * k, v).v;
    h_c - h_v + 0.5 * db * db * second.value(p)[i] / (k * k)
}

/// Evaluates Θ on every `(node, candidate)` pair, averaging over paths.
/// `nodes` defaults to the interior nodes. Passes iff every mean is at least
/// `-(n_se·SE + floor)`.
#[allow(clippy::too_many_arguments)]
pub fn check_variational_inequality(
    problem: &ControlProblem,
    traj: &TrajectorySet,
    factors: &GirsanovFactors,
    first: &AdjointSolution,
    second: &AdjointSolution,
    candidates: &[f64],
    nodes: Option<&[usize]>,
    n_se: f64,
    floor: f64,
) -> Result<VariationalReport> {
    if candidates.is_empty() {
        return Err(Error::contract("variational inequality needs at least one candidate"));
    }
    if first.order != AdjointOrder::First || second.order != AdjointOrder::Second {
        return Err(Error::contract("expected first- and second-order adjoint solutions"));
    }
    let n = traj.n_nodes();
    let interior: Vec<usize> = (1..n - 1).collect();
    let nodes = nodes.unwrap_or(&interior);
    if nodes.iter().any(|&i| i == 0 || i >= n - 1) {
        return Err(Error::domain("variational inequality nodes must be interior"));
    }
    let paths: Vec<usize> = traj.valid_paths().collect();
    let per_node: Vec<(Vec<ThetaEntry>, f64)> = nodes
        .par_iter()
        .map(|&i| {
            let entries = candidates
                .iter()
                .map(|&vc| {
                    let s = MeanSe::from_samples(
                        paths
                            .iter()
                            .map(|&p| theta(problem, traj, factors, first, second, p, i, Some(vc))),
                    );
                    ThetaEntry {
                        node: i,
                        tau: traj.grid.t(i),
                        candidate: vc,
                        theta: s.mean,
                        se: s.se,
                    }
                })
                .collect();
            let current = paths
                .iter()
                .map(|&p| theta(problem, traj, factors, first, second, p, i, None).abs())
                .fold(0.0, f64::max);
            (entries, current)
        })
        .collect();
    let mut entries = Vec::new();
    let mut node_minima = Vec::new();
    let mut at_current_max_abs = 0.0f64;
    for (e, cur) in per_node {
        at_current_max_abs = at_current_max_abs.max(cur);
        if let Some(m) = e.iter().min_by(|a, b| a.theta.total_cmp(&b.theta)) {
            node_minima.push(*m);
        }
        entries.extend(e);
    }
    let global_min = *node_minima
        .iter()
        .min_by(|a, b| a.theta.total_cmp(&b.theta))
        .ok_or_else(|| Error::contract("no nodes to check"))?;
    let rejections: Vec<ThetaEntry> = entries
        .iter()
        .filter(|e| e.theta + n_se * e.se < 0.0)
        .copied()
        .collect();
    let pass = entries.iter().all(|e| e.theta >= -e.tolerance(n_se, floor));
    Ok(VariationalReport {
        entries,
        node_minima,
        global_min,
        at_current_max_abs,
        n_se,
        floor,
        rejections,
        pass,
    })
}

/// Both sides of one duality relation, estimated on common paths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityIdentity {
    pub name: String,
    pub lhs: MeanSe,
    pub rhs: MeanSe,
    /// Per-path `lhs - rhs`; its SE is the combined SE under common paths.
    pub gap: MeanSe,
    pub pass: bool,
}

impl DualityIdentity {
    fn from_pairs(name: &str, pairs: &[(f64, f64)], n_se: f64) -> Self {
        let gap = MeanSe::from_samples(pairs.iter().map(|(l, r)| l - r));
        Self {
            name: name.to_string(),
            lhs: MeanSe::from_samples(pairs.iter().map(|x| x.0)),
            rhs: MeanSe::from_samples(pairs.iter().map(|x| x.1)),
            pass: gap.within(0.0, n_se),
            gap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualityReport {
    pub tau: f64,
    pub epsilon: f64,
    /// First-order relation with `E_i[p_{i+1}]` paired against `φ`.
    pub r1: DualityIdentity,
    /// Same with the fitted `p_i`, which differs by an `O(Δt)` drift term.
    pub r1_fitted: DualityIdentity,
    pub r2: DualityIdentity,
    /// `(P, Q)` representation of the functional on `Y = y₁²`. `Ξ` carries the
    /// Euler product term `(b_x y₁ + φ)² Δt` so the pairing telescopes on the grid.
    pub l1: DualityIdentity,
    pub n_se: f64,
    pub pass: bool,
}

/// Monte Carlo check of the first- and second-order duality relations for
/// the variations in `var` (from `simulate_variations`).
pub fn duality_check(
    problem: &ControlProblem,
    var: &TrajectorySet,
    factors: &GirsanovFactors,
    first: &AdjointSolution,
    second: &AdjointSolution,
    pert: &SpikePerturbation,
    n_se: f64,
) -> Result<DualityReport> {
    let (Some(_), Some(_), Some(_)) = (&var.y1, &var.y2, &var.controls_eps) else {
        return Err(Error::contract("duality check needs simulated variations"));
    };
    let c = problem.coefficients.as_ref();
    let grid = var.grid;
    let n = grid.n_nodes();
    let dt = grid.dt();
    let paths: Vec<usize> = var
        .valid_paths()
        .filter(|&p| first.valid[p] && second.valid[p])
        .collect();
    let rows: Vec<[(f64, f64); 4]> = paths
        .par_iter()
        .map(|&p| {
            let ks = factors.kappa_shifted(p);
            let y = var.zeta(p);
            let v = var.control(p);
            let ve = var.control_eps(p).unwrap_or_default();
            let y1 = var.y1(p).unwrap_or_default();
            let y2 = var.y2(p).unwrap_or_default();
            let (pv, pk, pbar) = (first.value(p), first.z(p), first.value_bar(p));
            let (qk, qbar) = (second.z(p), second.value_bar(p));
            let mut acc = [(0.0, 0.0); 4];
            for i in 0..n - 1 {
                let t = grid.t(i);
                let k = ks[i];
                let x = y[i] * k;
                let b = c.b(t, x, v[i]);
                let be = c.b(t, x, ve[i]);
                let s = c.beta(t, x, v[i]);
                let se = c.beta(t, x, ve[i]);
                let f = c.f(t, x, v[i]);
                let phi = (be.v - b.v) / k;
                let psi = (se.v - s.v) / k;
                let yy = y1[i] * y1[i];
                acc[0].0 += f.x * y1[i] * dt;
                acc[0].1 += (pbar[i] * phi + pk[i] * psi) * dt;
                acc[1].1 += (pv[i] * phi + pk[i] * psi) * dt;
                acc[2].0 += f.x * y2[i] * dt;
                let phi2 = 0.5 * k * be.xx * yy + (be.x - b.x) * y1[i];
                let psi2 = 0.5 * k * se.xx * yy + (se.x - s.x) * y1[i];
                acc[2].1 += (pbar[i] * phi2 + pk[i] * psi2) * dt;
                let hxx = k * (f.xx + pv[i] * b.xx + pk[i] * s.xx);
                let drift = b.x * y1[i] + phi;
                let xi = 2.0 * y1[i] * (phi + s.x * psi) + psi * psi + drift * drift * dt;
                let big_psi = 2.0 * y1[i] * psi;
                acc[3].0 += yy * hxx * dt;
                acc[3].1 += (qbar[i] * xi + qk[i] * big_psi) * dt;
            }
            let kt = ks[n - 1];
            let term = c.phi(y[n - 1] * kt);
            acc[0].0 += term.x * y1[n - 1];
            acc[1].0 = acc[0].0;
            acc[2].0 += term.x * y2[n - 1];
            acc[3].0 += y1[n - 1] * y1[n - 1] * term.xx * kt;
            acc
        })
        .collect();
    let pick = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let r1 = DualityIdentity::from_pairs("eq_r1", &pick(0), n_se);
    let r1_fitted = DualityIdentity::from_pairs("eq_r1_fitted", &pick(1), n_se);
    let r2 = DualityIdentity::from_pairs("eq_r2", &pick(2), n_se);
    let l1 = DualityIdentity::from_pairs("eq_l1", &pick(3), n_se);
    let pass = r1.pass && r2.pass;
    Ok(DualityReport {
        tau: pert.tau,
        epsilon: pert.epsilon,
        r1,
        r1_fitted,
        r2,
        l1,
        n_se,
        pass,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub epsilon: f64,
    /// `E[sup_t |y₁|^p]`.
    pub y1_sup: MeanSe,
    /// `E[sup_t |y₂|^p]`.
    pub y2_sup: MeanSe,
    /// `sup_t E[|y^ε - y - y₃|^p]` and the node attaining it.
    pub remainder: MeanSe,
    pub remainder_node: usize,
    /// `remainder / ε^p`.
    pub remainder_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeCheck {
    pub fit: Option<LineFit>,
    pub band: (f64, f64),
    pub pass: bool,
}

impl SlopeCheck {
    fn new(eps: &[f64], values: &[f64], band: (f64, f64)) -> Self {
        let ok = values.iter().all(|v| *v > 0.0 && v.is_finite());
        let fit = if ok {
            let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
            let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
            LineFit::fit(&lx, &ly)
        } else {
            None
        };
        let pass = fit.is_some_and(|f| f.slope >= band.0 && f.slope <= band.1);
        Self { fit, band, pass }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub tau: f64,
    pub p_moment: f64,
    pub points: Vec<ScalingPoint>,
    pub y1_slope: SlopeCheck,
    pub y2_slope: SlopeCheck,
    pub remainder_decreasing: bool,
    /// Set when `ṽ = v` leaves every variation identically zero.
    pub degenerate: bool,
    pub pass: bool,
}

/// Slope bands at `p = 2`; other moments scale them by `p/2`.
pub const Y1_BAND: (f64, f64) = (0.8, 1.4);
pub const Y2_BAND: (f64, f64) = (1.7, 2.6);

/// Spike experiments over a strictly decreasing ε ladder on one ensemble.
#[allow(clippy::too_many_arguments)]
pub fn scaling_experiment(
    problem: &ControlProblem,
    v: &ControlPolicy,
    v_alt: &ControlPolicy,
    tau: f64,
    ladder: &[f64],
    p_moment: f64,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
) -> Result<ScalingReport> {
    if ladder.len() < 4 {
        return Err(Error::contract(format!(
            "scaling needs at least 4 ladder points, got {}",
            ladder.len()
        )));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::contract("ladder must be strictly decreasing"));
    }
    if p_moment.is_nan() || p_moment < 2.0 {
        return Err(Error::domain(format!("moment order must be >= 2, got {p_moment}")));
    }
    let reference = simulate_zeta(problem, v, ensemble, factors)?;
    let n = reference.n_nodes();
    let mut points = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let pert = SpikePerturbation::new(tau, eps, v_alt.clone(), problem.horizon)?;
        let var = simulate_variations(problem, &reference, &spike(v, &pert), ensemble, factors)?;
        let perturbed = simulate_open_loop(
            problem,
            var.controls_eps.as_deref().unwrap_or_default(),
            ensemble,
            factors,
        )?;
        let paths: Vec<usize> = var.valid_paths().filter(|&p| perturbed.valid[p]).collect();
        let sup_pow = |row: &[f64]| row.iter().map(|v| v.abs().powf(p_moment)).fold(0.0, f64::max);
        let y1_sup = MeanSe::from_samples(paths.iter().map(|&p| sup_pow(var.y1(p).unwrap_or_default())));
        let y2_sup = MeanSe::from_samples(paths.iter().map(|&p| sup_pow(var.y2(p).unwrap_or_default())));
        let mut remainder = MeanSe::from_samples([0.0]);
        let mut remainder_node = 0;
        for i in 0..n {
            let s = MeanSe::from_samples(paths.iter().map(|&p| {
                let r = perturbed.zeta(p)[i]
                    - var.zeta(p)[i]
                    - var.y1(p).unwrap_or_default()[i]
                    - var.y2(p).unwrap_or_default()[i];
                r.abs().powf(p_moment)
            }));
            if s.mean > remainder.mean || i == 0 {
                remainder = s;
                remainder_node = i;
            }
        }
        points.push(ScalingPoint {
            epsilon: eps,
            y1_sup,
            y2_sup,
            remainder_ratio: remainder.mean / eps.powf(p_moment),
            remainder,
            remainder_node,
        });
    }
    let eps: Vec<f64> = ladder.to_vec();
    let scale = p_moment / 2.0;
    let y1_slope = SlopeCheck::new(
        &eps,
        &points.iter().map(|p| p.y1_sup.mean).collect::<Vec<_>>(),
        (Y1_BAND.0 * scale, Y1_BAND.1 * scale),
    );
    let y2_slope = SlopeCheck::new(
        &eps,
        &points.iter().map(|p| p.y2_sup.mean).collect::<Vec<_>>(),
        (Y2_BAND.0 * scale, Y2_BAND.1 * scale),
    );
    let remainder_decreasing = points.windows(2).all(|w| w[1].remainder_ratio < w[0].remainder_ratio);
    let degenerate = points.iter().all(|p| p.y1_sup.mean == 0.0 && p.y2_sup.mean == 0.0);
    let pass = !degenerate && y1_slope.pass && y2_slope.pass && remainder_decreasing;
    Ok(ScalingReport {
        tau,
        p_moment,
        points,
        y1_slope,
        y2_slope,
        remainder_decreasing,
        degenerate,
        pass,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassicalReport {
    /// `p̂(0)` of the transformed route with the SE of its tower estimate.
    pub p0_transformed: MeanSe,
    pub p0_classical: MeanSe,
    pub p0_combined_se: f64,
    pub p0_pass: bool,
    /// `Σ_i E[n_i²]` of the transformed route.
    pub energy_transformed: MeanSe,
    /// `Σ_i E[K₁(t_i)² κ_{t_i}] Δt` of the two-driver route.
    pub energy_classical: MeanSe,
    pub energy_combined_se: f64,
    pub energy_pass: bool,
    pub n_se: f64,
    pub pass: bool,
}

/// Solves the adjoint through the transformed route and through the direct
/// two-driver scheme at `H = 1/2` and compares `p̂(0)` and the energy carried
/// by the orthogonal martingale.
pub fn classical_reduction_check(
    problem: &ControlProblem,
    v: &ControlPolicy,
    ensemble: &PathEnsemble,
    basis: RegressionBasis,
    n_se: f64,
) -> Result<ClassicalReport> {
    if !ensemble.hurst.is_classical() {
        return Err(Error::domain(format!(
            "classical reduction needs H = 1/2, got {}",
            ensemble.hurst.value()
        )));
    }
    if problem.sigma.constant().is_none() {
        return Err(Error::contract("classical reduction needs constant sigma"));
    }
    let factors = GirsanovFactors::compute(ensemble, &problem.sigma);
    let traj = simulate_zeta(problem, v, ensemble, &factors)?;
    let sol_a = solve_first_adjoint(problem, &traj, ensemble, &factors, basis)?;
    let direct = classical_direct(problem, v, ensemble)?;
    let sol_b = solve_classical_adjoint(
        problem,
        &direct,
        ensemble,
        RegressionBasis {
            include_state: false,
            include_kappa: false,
            ..basis
        },
    )?;

    let to_a = tower_check(&sol_a);
    let to_b = tower_check(&sol_b);
    let p0_transformed = MeanSe {
        mean: to_a.value0,
        ..to_a.accumulated
    };
    let p0_classical = MeanSe {
        mean: to_b.value0,
        ..to_b.accumulated
    };
    let p0_combined_se = p0_transformed.se.hypot(p0_classical.se);
    let p0_pass = (p0_transformed.mean - p0_classical.mean).abs() <= n_se * p0_combined_se;

    let n = traj.n_nodes();
    let dt = traj.grid.dt();
    let energy_transformed = MeanSe::from_samples(
        sol_a
            .valid_paths()
            .map(|p| sol_a.residual(p)[..n - 1].iter().map(|r| r * r).sum::<f64>()),
    );
    let energy_classical = MeanSe::from_samples(sol_b.valid_paths().map(|p| {
        let k1 = sol_b.z_b(p).unwrap_or_default();
        let kappa = factors.kappa(p);
        (0..n - 1).map(|i| k1[i] * k1[i] * kappa[i]).sum::<f64>() * dt
    }));
    let energy_combined_se = energy_transformed.se.hypot(energy_classical.se);
    let energy_pass = (energy_transformed.mean - energy_classical.mean).abs() <= n_se * energy_combined_se;
    Ok(ClassicalReport {
        p0_transformed,
        p0_classical,
        p0_combined_se,
        p0_pass,
        energy_transformed,
        energy_classical,
        energy_combined_se,
        energy_pass,
        n_se,
        pass: p0_pass && energy_pass,
    })
}
