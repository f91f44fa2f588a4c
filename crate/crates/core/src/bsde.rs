//! Backward least-squares Monte Carlo for the adjoint equations
//!
//! ```text
//! -dp = [b_x p + β_x K + f_x] ds - K dW - dN,                  p(T) = Φ_x(y_T k_T)
//! -dP = [(2b_x + β_x²) P + 2β_x Q + H_xx] ds - Q dW - dM,      P(T) = Φ_xx(y_T k_T) k_T
//! ```
//!
//! with coefficients at `(s, y(s) k_s, v(s))`, `k_s = κ_s(𝒯_s)`. Each step
//! projects on polynomial features of the node:
//!
//! ```text
//! p̄_i = E_i[p_{i+1}]
//! K_i = E_i[(p_{i+1} - p̄_i) ΔW_i] / Δt
//! p_i = E_i[p_{i+1} + g_i Δt],   g_i = b_x p_{i+1} + β_x K_i + f_x
//! n_i = p_{i+1} + g_i Δt - p_i - K_i ΔW_i
//! ```
//!
//! The orthogonal martingale increments `n_i` are whatever the regression
//! leaves over.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{CovarianceFactor, PathEnsemble, TimeGrid};
use crate::forward::{DirectPaths, TrajectorySet};
use crate::girsanov::{GirsanovFactors, SigmaSpec};
use crate::problem::{hamiltonian_xx, ControlProblem, HamiltonianInput};
use crate::regression::{Design, RegressionBasis, DEFAULT_RIDGE};
use crate::stats::{correlation, MeanSe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointOrder {
    First,
    Second,
    /// Two-driver adjoint of the direct scheme at `H = 1/2`.
    Classical,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceDiagnostics {
    pub node: usize,
    pub n_features: usize,
    pub condition: f64,
    pub fallback: bool,
    pub r2_value: f64,
    pub r2_z: f64,
}

/// Per path, per node solution (row-major `m_paths × n_nodes`). For the
/// second-order equation `value`, `z` and `residual` hold `P`, `Q` and the
/// increments of `M`. Entries of invalid paths are NaN; `z`, `value_bar`,
/// `driver` and `residual` are zero at the terminal node.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub order: AdjointOrder,
    pub grid: TimeGrid,
    pub m_paths: usize,
    pub valid: Vec<bool>,
    pub value: Vec<f64>,
    pub z: Vec<f64>,
    /// `K₁`, the `dB` integrand of the classical adjoint.
    pub z_b: Option<Vec<f64>>,
    /// `E_i[value_{i+1}]`.
    pub value_bar: Vec<f64>,
    pub driver: Vec<f64>,
    pub residual: Vec<f64>,
    pub diagnostics: Vec<SliceDiagnostics>,
}

fn row(v: &[f64], n: usize, p: usize) -> &[f64] {
    &v[p * n..(p + 1) * n]
}

impl AdjointSolution {
    pub fn value(&self, p: usize) -> &[f64] {
        row(&self.value, self.grid.n_nodes(), p)
    }

    pub fn z(&self, p: usize) -> &[f64] {
        row(&self.z, self.grid.n_nodes(), p)
    }

    pub fn z_b(&self, p: usize) -> Option<&[f64]> {
        self.z_b.as_deref().map(|v| row(v, self.grid.n_nodes(), p))
    }

    pub fn value_bar(&self, p: usize) -> &[f64] {
        row(&self.value_bar, self.grid.n_nodes(), p)
    }

    pub fn driver(&self, p: usize) -> &[f64] {
        row(&self.driver, self.grid.n_nodes(), p)
    }

    pub fn residual(&self, p: usize) -> &[f64] {
        row(&self.residual, self.grid.n_nodes(), p)
    }

    pub fn valid_paths(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid.iter().enumerate().filter(|(_, v)| **v).map(|(p, _)| p)
    }

    fn column(&self, data: &[f64], i: usize) -> MeanSe {
        let n = self.grid.n_nodes();
        MeanSe::from_samples(self.valid_paths().map(|p| data[p * n + i]))
    }

    pub fn mean_value(&self, i: usize) -> MeanSe {
        self.column(&self.value, i)
    }

    pub fn mean_z(&self, i: usize) -> MeanSe {
        self.column(&self.z, i)
    }

    /// `E[n_i²]` at node `i`.
    pub fn residual_energy(&self, i: usize) -> f64 {
        let n = self.grid.n_nodes();
        let (s, c) = self
            .valid_paths()
            .fold((0.0, 0usize), |(s, c), p| (s + self.residual[p * n + i].powi(2), c + 1));
        s / c as f64
    }

    /// `Σ_i E[n_i²]`, an estimate of `E[N_T²]`.
    pub fn total_residual_energy(&self) -> f64 {
        (0..self.grid.n_steps()).map(|i| self.residual_energy(i)).sum()
    }

    /// Largest deviation `max_i |value_i - target(t_i)|` over valid paths.
    pub fn max_error(&self, target: impl Fn(f64) -> f64) -> f64 {
        let n = self.grid.n_nodes();
        self.valid_paths()
            .flat_map(|p| (0..n).map(move |i| (p, i)))
            .map(|(p, i)| (self.value[p * n + i] - target(self.grid.t(i))).abs())
            .fold(0.0, f64::max)
    }
}

struct Backward<'a> {
    grid: TimeGrid,
    valid: &'a [bool],
    basis: RegressionBasis,
    order: AdjointOrder,
}

/// Regression variables at node `i`, one column per variable over valid paths.
type FeatureFn<'a> = dyn Fn(usize) -> Vec<Vec<f64>> + 'a;
/// Driver for path `p` at node `i` given `value_{i+1}` and the projected `Z`s.
type DriverFn<'a> = dyn Fn(usize, usize, f64, &[f64]) -> f64 + 'a;
/// Brownian increments `ΔN_j(p, i)` whose integrands are estimated.
type NoiseFn<'a> = dyn Fn(usize, usize) -> f64 + 'a;

impl Backward<'_> {
    fn run(
        &self,
        terminal: Vec<f64>,
        features: &FeatureFn<'_>,
        noises: &[&NoiseFn<'_>],
        driver: &DriverFn<'_>,
    ) -> Result<AdjointSolution> {
        let grid = self.grid;
        let n = grid.n_nodes();
        let m = self.valid.len();
        let dt = grid.dt();
        let paths: Vec<usize> = self
            .valid
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(|(p, _)| p)
            .collect();
        let rows = paths.len();
        let mut value = vec![f64::NAN; m * n];
        let mut z = vec![f64::NAN; m * n];
        let mut z_b = if noises.len() > 1 {
            Some(vec![f64::NAN; m * n])
        } else {
            None
        };
        let mut value_bar = vec![f64::NAN; m * n];
        let mut drv = vec![f64::NAN; m * n];
        let mut residual = vec![f64::NAN; m * n];
        for (r, &p) in paths.iter().enumerate() {
            value[p * n + n - 1] = terminal[r];
            z[p * n + n - 1] = 0.0;
            if let Some(zb) = z_b.as_mut() {
                zb[p * n + n - 1] = 0.0;
            }
            value_bar[p * n + n - 1] = 0.0;
            drv[p * n + n - 1] = 0.0;
            residual[p * n + n - 1] = 0.0;
        }
        let mut next = terminal;
        let mut diagnostics = Vec::with_capacity(n - 1);
        for i in (0..n - 1).rev() {
            let design = Design::new(&features(i), rows, self.basis.degree, self.basis.ridge, i)?;
            let bar = design.project(&next, i)?.fitted;
            let mut zs: Vec<Vec<f64>> = Vec::with_capacity(noises.len());
            let mut r2_z = 1.0;
            for (j, noise) in noises.iter().enumerate() {
                let target: Vec<f64> = paths
                    .iter()
                    .enumerate()
                    .map(|(r, &p)| (next[r] - bar[r]) * noise(p, i) / dt)
                    .collect();
                let proj = design.project(&target, i)?;
                if j == 0 {
                    r2_z = proj.r2;
                }
                zs.push(proj.fitted);
            }
            let mut g = vec![0.0; rows];
            let mut zr = vec![0.0; noises.len()];
            for (r, &p) in paths.iter().enumerate() {
                for (j, zj) in zs.iter().enumerate() {
                    zr[j] = zj[r];
                }
                g[r] = driver(p, i, next[r], &zr);
            }
            let target: Vec<f64> = next.iter().zip(&g).map(|(y, g)| y + g * dt).collect();
            let proj = design.project(&target, i)?;
            for (r, &p) in paths.iter().enumerate() {
                let at = p * n + i;
                value[at] = proj.fitted[r];
                value_bar[at] = bar[r];
                drv[at] = g[r];
                z[at] = zs[0][r];
                if let Some(zb) = z_b.as_mut() {
                    zb[at] = zs[1][r];
                }
                let mart: f64 = zs.iter().zip(noises).map(|(zj, nz)| zj[r] * nz(p, i)).sum();
                residual[at] = target[r] - proj.fitted[r] - mart;
            }
            diagnostics.push(SliceDiagnostics {
                node: i,
                n_features: design.n_features(),
                condition: design.condition,
                fallback: design.fallback,
                r2_value: proj.r2,
                r2_z,
            });
            next = proj.fitted;
        }
        diagnostics.reverse();
        Ok(AdjointSolution {
            order: self.order,
            grid,
            m_paths: m,
            valid: self.valid.to_vec(),
            value,
            z,
            z_b,
            value_bar,
            driver: drv,
            residual,
            diagnostics,
        })
    }
}

/// Regression variables `(ζ, B^H[, ζk][, k][, forecast])` at node `i` over
/// valid paths. For constant `σ` the forecast enters as `exp(σ E[B^H(T) | F^B_t])`,
/// proportional to `E[k_T | F^B_t]`.
pub fn regression_features<'a>(
    traj: &'a TrajectorySet,
    ensemble: &'a PathEnsemble,
    factors: &'a GirsanovFactors,
    basis: RegressionBasis,
) -> Result<impl Fn(usize) -> Vec<Vec<f64>> + 'a> {
    let paths: Vec<usize> = traj.valid_paths().collect();
    let forecast: Option<Vec<Vec<f64>>> = if basis.include_forecast && !ensemble.hurst.is_classical() {
        let factor = CovarianceFactor::new(ensemble.hurst, &ensemble.grid)?;
        let scale = factors.sigma.constant().unwrap_or(0.0);
        Some(
            paths
                .par_iter()
                .map(|&p| {
                    let m = factor.terminal_forecast(ensemble.bh_path(p));
                    if scale == 0.0 {
                        m
                    } else {
                        m.iter().map(|v| (scale * v).exp()).collect()
                    }
                })
                .collect(),
        )
    } else {
        None
    };
    let last = traj.n_nodes() - 1;
    Ok(move |i| {
        let mut cols = vec![
            paths.iter().map(|&p| traj.zeta(p)[i]).collect::<Vec<f64>>(),
            paths.iter().map(|&p| ensemble.bh_path(p)[i]).collect(),
        ];
        if basis.include_state {
            cols.push(
                paths
                    .iter()
                    .map(|&p| traj.zeta(p)[i] * factors.kappa_shifted(p)[i])
                    .collect(),
            );
        }
        if basis.include_kappa {
            cols.push(paths.iter().map(|&p| factors.kappa_shifted(p)[i]).collect());
        }
        if let Some(f) = forecast.as_ref().filter(|_| i < last) {
            cols.push(f.iter().map(|row| row[i]).collect());
        }
        cols
    })
}

fn check_alignment(traj: &TrajectorySet, ensemble: &PathEnsemble, factors: &GirsanovFactors) -> Result<()> {
    if traj.grid != ensemble.grid || traj.m_paths != ensemble.m_paths() || factors.m_paths() != traj.m_paths {
        return Err(Error::contract(
            "trajectories, ensemble and factors must share paths and grid",
        ));
    }
    Ok(())
}

/// First-order adjoint `(p, K, N)` along the reference trajectory.
pub fn solve_first_adjoint(
    problem: &ControlProblem,
    traj: &TrajectorySet,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
    basis: RegressionBasis,
) -> Result<AdjointSolution> {
    check_alignment(traj, ensemble, factors)?;
    let grid = traj.grid;
    let last = grid.n_nodes() - 1;
    let c = problem.coefficients.as_ref();
    let terminal: Vec<f64> = traj
        .valid_paths()
        .map(|p| c.phi(traj.zeta(p)[last] * factors.kappa_shifted(p)[last]).x)
        .collect();
    let features = regression_features(traj, ensemble, factors, basis)?;
    let dw = |p: usize, i: usize| ensemble.dw(p, i);
    let driver = |p: usize, i: usize, next: f64, z: &[f64]| {
        let t = grid.t(i);
        let x = traj.zeta(p)[i] * factors.kappa_shifted(p)[i];
        let v = traj.control(p)[i];
        c.b(t, x, v).x * next + c.beta(t, x, v).x * z[0] + c.f(t, x, v).x
    };
    Backward {
        grid,
        valid: &traj.valid,
        basis,
        order: AdjointOrder::First,
    }
    .run(terminal, &features, &[&dw], &driver)
}

/// Second-order adjoint `(P, Q, M)`, with `H_xx` evaluated on the first-order solution.
pub fn solve_second_adjoint(
    problem: &ControlProblem,
    traj: &TrajectorySet,
    ensemble: &PathEnsemble,
    factors: &GirsanovFactors,
    first: &AdjointSolution,
    basis: RegressionBasis,
) -> Result<AdjointSolution> {
    check_alignment(traj, ensemble, factors)?;
    if first.order != AdjointOrder::First || first.grid != traj.grid || first.m_paths != traj.m_paths {
        return Err(Error::contract(
            "second-order solve needs the first-order solution on the same paths",
        ));
    }
    let grid = traj.grid;
    let last = grid.n_nodes() - 1;
    let c = problem.coefficients.as_ref();
    let terminal: Vec<f64> = traj
        .valid_paths()
        .map(|p| {
            let k = factors.kappa_shifted(p)[last];
            c.phi(traj.zeta(p)[last] * k).xx * k
        })
        .collect();
    let features = regression_features(traj, ensemble, factors, basis)?;
    let dw = |p: usize, i: usize| ensemble.dw(p, i);
    let driver = |p: usize, i: usize, next: f64, z: &[f64]| {
        let t = grid.t(i);
        let k = factors.kappa_shifted(p)[i];
        let y = traj.zeta(p)[i];
        let v = traj.control(p)[i];
        let bx = c.b(t, y * k, v).x;
        let sx = c.beta(t, y * k, v).x;
        let hxx = hamiltonian_xx(
            &HamiltonianInput {
                s: t,
                x: y,
                v,
                p: first.value(p)[i],
                k: first.z(p)[i],
                kappa: k,
            },
            c,
        );
        (2.0 * bx + sx * sx) * next + 2.0 * sx * z[0] + hxx
    };
    Backward {
        grid,
        valid: &traj.valid,
        basis,
        order: AdjointOrder::Second,
    }
    .run(terminal, &features, &[&dw], &driver)
}

/// Adjoint of the direct scheme at `H = 1/2` with two Brownian drivers:
/// `-dp = [b_x p + β_x K + σK₁ + f_x] ds - K dW - K₁ dB`, features `(X, B)`.
pub fn solve_classical_adjoint(
    problem: &ControlProblem,
    paths: &DirectPaths,
    ensemble: &PathEnsemble,
    basis: RegressionBasis,
) -> Result<AdjointSolution> {
    if !ensemble.hurst.is_classical() {
        return Err(Error::domain("the two-driver adjoint needs H = 1/2"));
    }
    if paths.grid != ensemble.grid || paths.m_paths != ensemble.m_paths() {
        return Err(Error::contract("direct paths and ensemble must share paths and grid"));
    }
    let grid = paths.grid;
    let last = grid.n_nodes() - 1;
    let c = problem.coefficients.as_ref();
    let sigma = |t: f64| match &problem.sigma {
        SigmaSpec::Constant(s) => *s,
        SigmaSpec::Custom(cs) => (cs.sigma)(t),
    };
    let terminal: Vec<f64> = paths.valid_paths().map(|p| c.phi(paths.x(p)[last]).x).collect();
    let features = |i: usize| {
        let ids: Vec<usize> = paths.valid_paths().collect();
        vec![
            ids.iter().map(|&p| paths.x(p)[i]).collect::<Vec<f64>>(),
            ids.iter().map(|&p| ensemble.bh_path(p)[i]).collect(),
        ]
    };
    let dw = |p: usize, i: usize| ensemble.dw(p, i);
    let db = |p: usize, i: usize| ensemble.dbh(p, i);
    let driver = |p: usize, i: usize, next: f64, z: &[f64]| {
        let t = grid.t(i);
        let x = paths.x(p)[i];
        let v = paths.control(p)[i];
        c.b(t, x, v).x * next + c.beta(t, x, v).x * z[0] + sigma(t) * z[1] + c.f(t, x, v).x
    };
    Backward {
        grid,
        valid: &paths.valid,
        basis,
        order: AdjointOrder::Classical,
    }
    .run(terminal, &features, &[&dw, &db], &driver)
}

/// `p̂_0` against the plain mean of `terminal + Σ_i g_i Δt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TowerCheck {
    pub value0: f64,
    pub accumulated: MeanSe,
    pub pass: bool,
}

pub fn tower_check(sol: &AdjointSolution) -> TowerCheck {
    let n = sol.grid.n_nodes();
    let dt = sol.grid.dt();
    let accumulated = MeanSe::from_samples(sol.valid_paths().map(|p| {
        let d = sol.driver(p);
        sol.value(p)[n - 1] + d[..n - 1].iter().sum::<f64>() * dt
    }));
    let value0 = sol.mean_value(0).mean;
    let tol = 3.0 * accumulated.se + 1e-12 * value0.abs().max(1.0);
    TowerCheck {
        value0,
        accumulated,
        pass: (value0 - accumulated.mean).abs() <= tol,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeOrthogonality {
    pub node: usize,
    pub t: f64,
    pub residual_energy: f64,
    pub corr_dw: f64,
    /// Largest |t-statistic| of `Σ_{j≥i} n_j` regressed on node-`i` features.
    pub max_t_stat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub nodes: Vec<NodeOrthogonality>,
    pub corr_bound: f64,
    pub t_bound: f64,
    pub total_residual_energy: f64,
    pub max_abs_corr: f64,
    pub pass: bool,
}

/// Correlation of `n_i` with `ΔW_i` against `4/√M`, and a martingale check on
/// the tail sums `Σ_{j≥i} n_j`. `features` are the regression variables at
/// each node (as used in the solve), or `None` for `(ζ, B^H)`-free
/// intercept-only checks.
pub fn orthogonality_diagnostics(
    sol: &AdjointSolution,
    ensemble: &PathEnsemble,
    features: Option<&dyn Fn(usize) -> Vec<Vec<f64>>>,
) -> Result<OrthogonalityReport> {
    let n = sol.grid.n_nodes();
    let paths: Vec<usize> = sol.valid_paths().collect();
    let m = paths.len();
    let corr_bound = 4.0 / (m as f64).sqrt();
    let t_bound = 5.0;
    let mut tail = vec![0.0; m];
    let mut nodes = Vec::with_capacity(n - 1);
    for i in (0..n - 1).rev() {
        let res: Vec<f64> = paths.iter().map(|&p| sol.residual(p)[i]).collect();
        let dw: Vec<f64> = paths.iter().map(|&p| ensemble.dw(p, i)).collect();
        for (t, r) in tail.iter_mut().zip(&res) {
            *t += r;
        }
        let energy = res.iter().map(|r| r * r).sum::<f64>() / m as f64;
        let corr = correlation(&res, &dw);
        let vars = match features {
            Some(f) => f(i),
            None => Vec::new(),
        };
        let scale = tail.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let max_t_stat = if scale <= 1e-12 {
            0.0
        } else {
            Design::new(&vars, m, 2, DEFAULT_RIDGE, i)?
                .t_stats(&tail, i)?
                .iter()
                .map(|t| t.abs())
                .fold(0.0, f64::max)
        };
        nodes.push(NodeOrthogonality {
            node: i,
            t: sol.grid.t(i),
            residual_energy: energy,
            corr_dw: corr,
            max_t_stat,
        });
    }
    nodes.reverse();
    let max_abs_corr = nodes.iter().map(|o| o.corr_dw.abs()).fold(0.0, f64::max);
    let pass = nodes
        .iter()
        .all(|o| o.corr_dw.abs() <= corr_bound && o.max_t_stat <= t_bound);
    Ok(OrthogonalityReport {
        total_residual_energy: nodes.iter().map(|o| o.residual_energy).sum(),
        nodes,
        corr_bound,
        t_bound,
        max_abs_corr,
        pass,
    })
}
