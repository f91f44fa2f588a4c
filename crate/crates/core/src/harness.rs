//! Experiment configuration, orchestration and persistence.
//!
//! A run writes `<out>/<fingerprint>/{config.json, report.json, tables/*.csv}`.
//! The fingerprint is the SHA-256 of the canonical config JSON, and the
//! record payload (everything except timestamps) depends only on the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{
    orthogonality_diagnostics, regression_features, solve_first_adjoint, solve_second_adjoint, tower_check,
    AdjointOrder, AdjointSolution, OrthogonalityReport, TowerCheck,
};
use crate::error::{Error, Result};
use crate::export::csv_err;
use crate::fbm::{sample_paths, HurstParam, KernelTable, PathEnsemble, TimeGrid};
use crate::forward::{
    classical_direct, cross_scheme, evaluate_cost, reconstruct_x, simulate_variations, simulate_zeta, CostEstimate,
    CrossScheme, XMoments,
};
use crate::girsanov::{
    check_girsanov_identity, sup_moments, GirsanovFactors, GirsanovReport, PathFunctional, SupMoment,
};
use crate::problem::{spike, Builtin, ControlProblem, ControlSet, PolicySpec, SpikePerturbation};
use crate::regression::RegressionBasis;
use crate::stats::covariance;
use crate::verify::{
    check_variational_inequality, classical_reduction_check, duality_check, scaling_experiment, ClassicalReport,
    DualityReport, ScalingReport, VariationalReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    SampleFbm,
    CheckGirsanov,
    Simulate,
    Cost,
    SolveBsde,
    VerifyMp,
    Scaling,
    Duality,
    ReduceClassical,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SampleFbm => "sample_fbm",
            Experiment::CheckGirsanov => "check_girsanov",
            Experiment::Simulate => "simulate",
            Experiment::Cost => "cost",
            Experiment::SolveBsde => "solve_bsde",
            Experiment::VerifyMp => "verify_mp",
            Experiment::Scaling => "scaling",
            Experiment::Duality => "duality",
            Experiment::ReduceClassical => "reduce_classical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self { tau: 0.5, epsilon: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Standard errors allowed on every Monte Carlo comparison.
    pub n_se: f64,
    /// Absolute floor added to `n_se·SE` in the variational inequality.
    pub vi_floor: f64,
    /// Largest admissible `|empirical − exact|` fBm covariance.
    pub covariance: f64,
    /// Largest admissible kernel row-quadrature error.
    pub kernel: f64,
    /// Largest admissible relative error of `κ(𝒯) = κ exp(σ² t^{2H})`.
    pub identity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            n_se: 3.0,
            vi_floor: 1e-3,
            covariance: 0.05,
            kernel: 1e-2,
            identity: 1e-12,
        }
    }
}

fn default_experiments() -> Vec<Experiment> {
    vec![Experiment::VerifyMp]
}
fn default_hurst() -> f64 {
    0.3
}
fn default_sigma() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn default_control_set() -> ControlSet {
    ControlSet::Interval { lo: -3.0, hi: 3.0 }
}
fn default_policy() -> PolicySpec {
    PolicySpec::Constant { value: 0.0 }
}
fn default_alt_policy() -> PolicySpec {
    PolicySpec::Constant { value: 1.0 }
}
fn default_steps() -> usize {
    64
}
fn default_paths() -> usize {
    20_000
}
fn default_ladder() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn two() -> f64 {
    2.0
}
fn default_n_candidates() -> usize {
    13
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiments")]
    pub experiments: Vec<Experiment>,
    pub problem: Builtin,
    #[serde(default = "default_hurst")]
    pub hurst: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub x0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_control_set")]
    pub control_set: ControlSet,
    #[serde(default = "default_policy")]
    pub policy: PolicySpec,
    /// Spike alternative `ṽ`.
    #[serde(default = "default_alt_policy")]
    pub alt_policy: PolicySpec,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_paths")]
    pub m_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default)]
    pub spike: SpikeConfig,
    #[serde(default = "default_ladder")]
    pub ladder: Vec<f64>,
    #[serde(default = "two")]
    pub p_moment: f64,
    /// Explicit candidate values; when absent, an even grid over `U`.
    #[serde(default)]
    pub candidates: Option<Vec<f64>>,
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    /// Nodes at which Θ is evaluated; all interior nodes when absent.
    #[serde(default)]
    pub vi_nodes: Option<Vec<usize>>,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Per-path CSV of the simulated trajectories.
    #[serde(default)]
    pub write_paths: bool,
}

impl ExperimentConfig {
    /// Defaults for `problem`, useful as a starting point for overrides.
    pub fn for_problem(problem: Builtin) -> Self {
        from_value(serde_json::json!({ "problem": problem })).expect("defaults are valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() {
            return Err(Error::config("experiments", "at least one experiment is required"));
        }
        let h = HurstParam::new(self.hurst).map_err(|e| Error::config("hurst", e.to_string()))?;
        self.problem
            .validate()
            .map_err(|e| Error::config("problem", e.to_string()))?;
        if self.problem.requires_classical() && !h.is_classical() {
            return Err(Error::config(
                "hurst",
                format!("{} needs hurst = 0.5", self.problem.name()),
            ));
        }
        if self.experiments.contains(&Experiment::ReduceClassical) && !h.is_classical() {
            return Err(Error::config("hurst", "reduce_classical needs hurst = 0.5"));
        }
        for (path, v) in [("sigma", self.sigma), ("x0", self.x0)] {
            if !v.is_finite() {
                return Err(Error::config(path, "must be finite"));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if self.n_steps < 2 {
            return Err(Error::config("n_steps", "must be at least 2"));
        }
        if self.m_paths == 0 {
            return Err(Error::config("m_paths", "must be at least 1"));
        }
        self.control_set
            .validate()
            .map_err(|e| Error::config("control_set", e.to_string()))?;
        if self.basis.ridge < 0.0 || !self.basis.ridge.is_finite() {
            return Err(Error::config("basis.ridge", "must be non-negative"));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("n_se", t.n_se),
            ("vi_floor", t.vi_floor),
            ("covariance", t.covariance),
            ("kernel", t.kernel),
            ("identity", t.identity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tolerances.{name}"), "must be positive"));
            }
        }
        if self.ladder.iter().any(|e| e.is_nan() || *e <= 0.0) {
            return Err(Error::config("ladder", "entries must be positive"));
        }
        if matches!(&self.candidates, Some(c) if c.is_empty()) {
            return Err(Error::config("candidates", "must not be empty"));
        }
        self.policy
            .build(&self.problem)
            .map_err(|e| Error::config("policy", e.to_string()))?;
        self.alt_policy
            .build(&self.problem)
            .map_err(|e| Error::config("alt_policy", e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn problem(&self) -> ControlProblem {
        ControlProblem::builtin(
            self.problem.clone(),
            self.sigma,
            self.x0,
            self.horizon,
            self.control_set.clone(),
        )
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n_steps)
    }

    pub fn candidate_values(&self) -> Vec<f64> {
        self.candidates
            .clone()
            .unwrap_or_else(|| self.control_set.candidates(self.n_candidates))
    }
}

fn from_value<T: DeserializeOwned>(v: serde_json::Value) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub experiment: Experiment,
    pub name: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub toolkit_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub checks: Vec<CheckOutcome>,
    /// Raw statistics keyed by experiment name.
    pub results: BTreeMap<String, serde_json::Value>,
    pub pass: bool,
}

impl ResultRecord {
    /// Everything except the timestamps.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("record serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("started_at");
            m.remove("finished_at");
        }
        v
    }

    pub fn result<T: DeserializeOwned>(&self, experiment: Experiment) -> Result<T> {
        let v = self
            .results
            .get(experiment.name())
            .ok_or_else(|| Error::NotFound(format!("record has no {} result", experiment.name())))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceCell {
    pub t: f64,
    pub s: f64,
    pub empirical: f64,
    pub exact: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FbmResult {
    /// Cells on a node subset of at most 65 nodes per axis.
    pub covariance: Vec<CovarianceCell>,
    pub max_covariance_error: f64,
    pub covariance_pass: bool,
    pub corr_w_bh_terminal: f64,
    pub corr_bound: f64,
    pub independence_pass: bool,
    /// `max_i |Σ_j k[i][j]² Δt − t_i^{2H}|`; zero at `H = 1/2`.
    pub kernel_row_error: f64,
    pub kernel_pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GirsanovResult {
    pub identities: Vec<GirsanovReport>,
    pub sup_moments: Vec<SupMoment>,
    pub max_identity_error: f64,
    pub identity_pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateResult {
    pub n_flagged: usize,
    pub moments: Vec<XMoments>,
    /// Comparison with the direct two-Brownian scheme, at `H = 1/2` only.
    pub cross_scheme: Option<CrossScheme>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BsdeNode {
    pub t: f64,
    pub mean_value: f64,
    pub mean_z: f64,
    pub residual_energy: f64,
    pub r2_value: f64,
    pub condition: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdjointSummary {
    pub order: AdjointOrder,
    pub nodes: Vec<BsdeNode>,
    pub tower: TowerCheck,
    pub orthogonality: OrthogonalityReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BsdeResult {
    pub first: AdjointSummary,
    pub second: AdjointSummary,
}

fn summarize(sol: &AdjointSolution, orthogonality: OrthogonalityReport) -> AdjointSummary {
    let n = sol.grid.n_nodes();
    let nodes = (0..n)
        .map(|i| {
            let d = sol.diagnostics.iter().find(|d| d.node == i);
            BsdeNode {
                t: sol.grid.t(i),
                mean_value: sol.mean_value(i).mean,
                mean_z: sol.mean_z(i).mean,
                residual_energy: sol.residual_energy(i),
                r2_value: d.map_or(1.0, |d| d.r2_value),
                condition: d.map_or(1.0, |d| d.condition),
                fallback: d.is_some_and(|d| d.fallback),
            }
        })
        .collect();
    AdjointSummary {
        order: sol.order,
        nodes,
        tower: tower_check(sol),
        orthogonality,
    }
}

/// Lazily shared inputs of one run.
struct Context<'a> {
    config: &'a ExperimentConfig,
    problem: ControlProblem,
    ensemble: Option<PathEnsemble>,
}

impl Context<'_> {
    fn ensemble(&mut self) -> Result<&PathEnsemble> {
        if self.ensemble.is_none() {
            let c = self.config;
            self.ensemble = Some(sample_paths(HurstParam::new(c.hurst)?, c.grid()?, c.m_paths, c.seed)?);
        }
        Ok(self.ensemble.as_ref().expect("just sampled"))
    }
}

type Outcome = (serde_json::Value, Vec<(String, bool)>);

fn sample_fbm(ctx: &mut Context) -> Result<Outcome> {
    let tol = ctx.config.tolerances.clone();
    let e = ctx.ensemble()?;
    let grid = e.grid;
    let h = e.hurst;
    let m = e.m_paths();
    let stride = grid.n_steps().div_ceil(64).max(1);
    let nodes: Vec<usize> = (1..grid.n_nodes()).filter(|i| i % stride == 0).collect();
    let columns: Vec<Vec<f64>> = nodes.iter().map(|&i| e.bh_column(i)).collect();
    let mut cells: Vec<CovarianceCell> = Vec::with_capacity(nodes.len() * nodes.len());
    let mut max_err = 0.0f64;
    for (a, &i) in nodes.iter().enumerate() {
        for (b, &j) in nodes.iter().enumerate() {
            let (t, s) = (grid.t(i), grid.t(j));
            let empirical = if b < a {
                cells[b * nodes.len() + a].empirical
            } else {
                covariance(&columns[a], &columns[b])
            };
            let exact = crate::fbm::covariance(h, t, s)?;
            max_err = max_err.max((empirical - exact).abs());
            cells.push(CovarianceCell {
                t,
                s,
                empirical,
                exact,
                diff: empirical - exact,
            });
        }
    }
    let last = grid.n_nodes() - 1;
    let corr = if m > 1 {
        crate::stats::correlation(&e.w_column(last), &e.bh_column(last))
    } else {
        0.0
    };
    let corr_bound = 4.0 / (m as f64).sqrt();
    let kernel_row_error = if h.is_classical() {
        0.0
    } else {
        let table = KernelTable::build(h, grid);
        (1..grid.n_nodes())
            .map(|i| (table.row_quadrature(i) - grid.t(i).powf(2.0 * h.value())).abs())
            .fold(0.0, f64::max)
    };
    let r = FbmResult {
        covariance: cells,
        max_covariance_error: max_err,
        covariance_pass: max_err <= tol.covariance,
        corr_w_bh_terminal: corr,
        corr_bound,
        independence_pass: corr.abs() <= corr_bound,
        kernel_row_error,
        kernel_pass: kernel_row_error <= tol.kernel,
    };
    let checks = vec![
        ("covariance".into(), r.covariance_pass),
        ("independence".into(), r.independence_pass),
        ("kernel_rows".into(), r.kernel_pass),
    ];
    Ok((serde_json::to_value(r)?, checks))
}

fn check_girsanov(ctx: &mut Context) -> Result<Outcome> {
    let tol = ctx.config.tolerances.clone();
    let sigma = ctx.problem.sigma.clone();
    let e = ctx.ensemble()?;
    let t = e.grid.horizon();
    let identities = [
        PathFunctional::Constant(1.0),
        PathFunctional::Value(t),
        PathFunctional::Square(t),
    ]
    .iter()
    .map(|f| check_girsanov_identity(f, t, e, &sigma, tol.n_se))
    .collect::<Result<Vec<_>>>()?;
    let factors = GirsanovFactors::compute(e, &sigma);
    let s = sigma.constant().unwrap_or(0.0);
    let h2 = 2.0 * e.hurst.value();
    let mut max_identity_error = 0.0f64;
    for p in 0..e.m_paths() {
        let (k, ks) = (factors.kappa(p), factors.kappa_shifted(p));
        for i in 0..e.n_nodes() {
            let want = k[i] * (s * s * e.grid.t(i).powf(h2)).exp();
            max_identity_error = max_identity_error.max((ks[i] - want).abs() / ks[i]);
        }
    }
    let r = GirsanovResult {
        sup_moments: sup_moments(&factors, &[1.0, 2.0, 4.0]),
        identity_pass: sigma.constant().is_none() || max_identity_error <= tol.identity,
        max_identity_error,
        identities,
    };
    let mut checks: Vec<(String, bool)> = r
        .identities
        .iter()
        .map(|g| (format!("identity_{}", g.functional), g.pass))
        .collect();
    checks.push(("shifted_density".into(), r.identity_pass));
    Ok((serde_json::to_value(r)?, checks))
}

fn simulate(ctx: &mut Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let policy = cfg.policy.build(&cfg.problem)?;
    let n_se = cfg.tolerances.n_se;
    let e = ctx.ensemble()?;
    let factors = GirsanovFactors::compute(e, &problem.sigma);
    let traj = simulate_zeta(&problem, &policy, e, &factors)?;
    let rec = reconstruct_x(&traj, &factors);
    let cross_scheme = if e.hurst.is_classical() && problem.sigma.constant().is_some() {
        let direct = classical_direct(&problem, &policy, e)?;
        Some(cross_scheme(&traj, &factors, &direct, n_se))
    } else {
        None
    };
    let r = SimulateResult {
        n_flagged: traj.n_flagged(),
        moments: rec.moments,
        cross_scheme,
    };
    let mut checks = Vec::new();
    if let Some(c) = &r.cross_scheme {
        checks.push(("cross_scheme".to_string(), c.pass));
    }
    let mut v = serde_json::to_value(r)?;
    if cfg.write_paths {
        let mut rows = Vec::new();
        for p in 0..traj.m_paths {
            for i in 0..traj.n_nodes() {
                rows.push(vec![
                    p as f64,
                    traj.grid.t(i),
                    traj.zeta(p)[i],
                    traj.x(p)[i],
                    traj.control(p)[i],
                ]);
            }
        }
        v["paths"] = serde_json::to_value(rows)?;
    }
    Ok((v, checks))
}

fn cost(ctx: &mut Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let policy = cfg.policy.build(&cfg.problem)?;
    let e = ctx.ensemble()?;
    let factors = GirsanovFactors::compute(e, &problem.sigma);
    let traj = simulate_zeta(&problem, &policy, e, &factors)?;
    let c: CostEstimate = evaluate_cost(&problem, &traj, &factors);
    Ok((serde_json::to_value(c)?, Vec::new()))
}

struct Solved {
    factors: GirsanovFactors,
    traj: crate::forward::TrajectorySet,
    first: AdjointSolution,
    second: AdjointSolution,
}

fn solve(ctx: &mut Context) -> Result<Solved> {
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let policy = cfg.policy.build(&cfg.problem)?;
    let e = ctx.ensemble()?;
    let factors = GirsanovFactors::compute(e, &problem.sigma);
    let traj = simulate_zeta(&problem, &policy, e, &factors)?;
    let first = solve_first_adjoint(&problem, &traj, e, &factors, cfg.basis)?;
    let second = solve_second_adjoint(&problem, &traj, e, &factors, &first, cfg.basis)?;
    Ok(Solved {
        factors,
        traj,
        first,
        second,
    })
}

fn solve_bsde(ctx: &mut Context) -> Result<Outcome> {
    let s = solve(ctx)?;
    let basis = ctx.config.basis;
    let e = ctx.ensemble()?;
    let features = regression_features(&s.traj, e, &s.factors, basis)?;
    let f1 = orthogonality_diagnostics(&s.first, e, Some(&features))?;
    let f2 = orthogonality_diagnostics(&s.second, e, Some(&features))?;
    let r = BsdeResult {
        first: summarize(&s.first, f1),
        second: summarize(&s.second, f2),
    };
    let checks = vec![
        ("tower_first".into(), r.first.tower.pass),
        ("tower_second".into(), r.second.tower.pass),
        ("orthogonality_first".into(), r.first.orthogonality.pass),
        ("orthogonality_second".into(), r.second.orthogonality.pass),
    ];
    Ok((serde_json::to_value(r)?, checks))
}

fn verify_mp(ctx: &mut Context) -> Result<Outcome> {
    let s = solve(ctx)?;
    let cfg = ctx.config;
    let r: VariationalReport = check_variational_inequality(
        &ctx.problem,
        &s.traj,
        &s.factors,
        &s.first,
        &s.second,
        &cfg.candidate_values(),
        cfg.vi_nodes.as_deref(),
        cfg.tolerances.n_se,
        cfg.tolerances.vi_floor,
    )?;
    let checks = vec![
        ("variational_inequality".into(), r.pass),
        ("theta_at_current_is_zero".into(), r.at_current_max_abs == 0.0),
    ];
    Ok((serde_json::to_value(r)?, checks))
}

fn duality(ctx: &mut Context) -> Result<Outcome> {
    let s = solve(ctx)?;
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let v = cfg.policy.build(&cfg.problem)?;
    let alt = cfg.alt_policy.build(&cfg.problem)?;
    let pert = SpikePerturbation::new(cfg.spike.tau, cfg.spike.epsilon, alt, cfg.horizon)?;
    let e = ctx.ensemble()?;
    let var = simulate_variations(&problem, &s.traj, &spike(&v, &pert), e, &s.factors)?;
    let r: DualityReport = duality_check(
        &problem,
        &var,
        &s.factors,
        &s.first,
        &s.second,
        &pert,
        cfg.tolerances.n_se,
    )?;
    let checks = vec![("eq_r1".into(), r.r1.pass), ("eq_r2".into(), r.r2.pass)];
    Ok((serde_json::to_value(r)?, checks))
}

fn scaling(ctx: &mut Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let v = cfg.policy.build(&cfg.problem)?;
    let alt = cfg.alt_policy.build(&cfg.problem)?;
    let e = ctx.ensemble()?;
    let factors = GirsanovFactors::compute(e, &problem.sigma);
    let r: ScalingReport = scaling_experiment(
        &problem,
        &v,
        &alt,
        cfg.spike.tau,
        &cfg.ladder,
        cfg.p_moment,
        e,
        &factors,
    )?;
    let checks = vec![
        ("y1_slope".into(), r.y1_slope.pass),
        ("y2_slope".into(), r.y2_slope.pass),
        ("remainder_decreasing".into(), r.remainder_decreasing),
        ("non_degenerate".into(), !r.degenerate),
    ];
    Ok((serde_json::to_value(r)?, checks))
}

fn reduce_classical(ctx: &mut Context) -> Result<Outcome> {
    let cfg = ctx.config;
    let problem = ctx.problem.clone();
    let v = cfg.policy.build(&cfg.problem)?;
    let e = ctx.ensemble()?;
    let r: ClassicalReport = classical_reduction_check(&problem, &v, e, cfg.basis, cfg.tolerances.n_se)?;
    let checks = vec![("p0".into(), r.p0_pass), ("residual_energy".into(), r.energy_pass)];
    Ok((serde_json::to_value(r)?, checks))
}

/// Runs every experiment of `config` on one shared ensemble.
pub fn run(config: &ExperimentConfig) -> Result<ResultRecord> {
    config.validate()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut ctx = Context {
        config,
        problem: config.problem(),
        ensemble: None,
    };
    let mut results = BTreeMap::new();
    let mut checks = Vec::new();
    for &exp in &config.experiments {
        let (value, outcome) = match exp {
            Experiment::SampleFbm => sample_fbm(&mut ctx),
            Experiment::CheckGirsanov => check_girsanov(&mut ctx),
            Experiment::Simulate => simulate(&mut ctx),
            Experiment::Cost => cost(&mut ctx),
            Experiment::SolveBsde => solve_bsde(&mut ctx),
            Experiment::VerifyMp => verify_mp(&mut ctx),
            Experiment::Scaling => scaling(&mut ctx),
            Experiment::Duality => duality(&mut ctx),
            Experiment::ReduceClassical => reduce_classical(&mut ctx),
        }?;
        results.insert(exp.name().to_string(), value);
        checks.extend(outcome.into_iter().map(|(name, pass)| CheckOutcome {
            experiment: exp,
            name,
            pass,
        }));
    }
    Ok(ResultRecord {
        fingerprint: config.fingerprint(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        config: config.clone(),
        pass: checks.iter().all(|c| c.pass),
        checks,
        results,
    })
}

/// Tidy table destined for one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(path)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Covariance,
    Scaling,
    Vi,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariance" => Ok(PlotKind::Covariance),
            "scaling" => Ok(PlotKind::Scaling),
            "vi" => Ok(PlotKind::Vi),
            other => Err(Error::NotFound(format!("plot kind `{other}`"))),
        }
    }
}

pub fn plot_table(record: &ResultRecord, kind: PlotKind) -> Result<Table> {
    match kind {
        PlotKind::Covariance => {
            let r: FbmResult = record.result(Experiment::SampleFbm)?;
            let mut t = Table::new("covariance", &["t", "s", "empirical", "exact", "diff"]);
            for c in &r.covariance {
                t.push([c.t, c.s, c.empirical, c.exact, c.diff].map(num));
            }
            Ok(t)
        }
        PlotKind::Scaling => {
            let r: ScalingReport = record.result(Experiment::Scaling)?;
            let mut t = Table::new("scaling", &["epsilon", "moment", "value", "fitted"]);
            let fitted = |fit: &Option<crate::stats::LineFit>, eps: f64| {
                fit.as_ref().map_or(String::new(), |f| num(f.predict(eps.ln()).exp()))
            };
            for p in &r.points {
                t.push([
                    num(p.epsilon),
                    "y1".into(),
                    num(p.y1_sup.mean),
                    fitted(&r.y1_slope.fit, p.epsilon),
                ]);
                t.push([
                    num(p.epsilon),
                    "y2".into(),
                    num(p.y2_sup.mean),
                    fitted(&r.y2_slope.fit, p.epsilon),
                ]);
                t.push([num(p.epsilon), "remainder".into(), num(p.remainder.mean), String::new()]);
            }
            Ok(t)
        }
        PlotKind::Vi => {
            let r: VariationalReport = record.result(Experiment::VerifyMp)?;
            let mut t = Table::new("vi", &["tau", "candidate", "theta", "se"]);
            for e in &r.entries {
                t.push([e.tau, e.candidate, e.theta, e.se].map(num));
            }
            Ok(t)
        }
    }
}

/// Writes the CSV for `kind` into `dir`. Fails with `NotFound` when the
/// record does not contain the experiment behind it.
pub fn emit_plot_data(record: &ResultRecord, kind: PlotKind, dir: &Path) -> Result<PathBuf> {
    plot_table(record, kind)?.write(dir)
}

/// Every table derivable from the record.
pub fn tables(record: &ResultRecord) -> Result<Vec<Table>> {
    let mut out = Vec::new();
    for kind in [PlotKind::Covariance, PlotKind::Scaling, PlotKind::Vi] {
        match plot_table(record, kind) {
            Ok(t) => out.push(t),
            Err(Error::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if let Ok(r) = record.result::<SimulateResult>(Experiment::Simulate) {
        let mut t = Table::new(
            "moments",
            &[
                "t",
                "surrogate_mean",
                "surrogate_mean_se",
                "surrogate_second",
                "weighted_mean",
                "weighted_second",
            ],
        );
        for m in &r.moments {
            t.push(
                [
                    m.t,
                    m.surrogate_mean.mean,
                    m.surrogate_mean.se,
                    m.surrogate_second.mean,
                    m.weighted_mean.mean,
                    m.weighted_second.mean,
                ]
                .map(num),
            );
        }
        out.push(t);
        if let Some(rows) = record.results[Experiment::Simulate.name()].get("paths") {
            let rows: Vec<Vec<f64>> = serde_json::from_value(rows.clone())?;
            let mut t = Table::new("paths", &["path_id", "t", "zeta", "x", "control"]);
            for r in rows {
                t.push(r.into_iter().map(num));
            }
            out.push(t);
        }
    }
    if let Ok(r) = record.result::<BsdeResult>(Experiment::SolveBsde) {
        for (name, s) in [("bsde_first", &r.first), ("bsde_second", &r.second)] {
            let mut t = Table::new(name, &["t", "mean_value", "mean_z", "residual_energy", "r2"]);
            for n in &s.nodes {
                t.push([n.t, n.mean_value, n.mean_z, n.residual_energy, n.r2_value].map(num));
            }
            out.push(t);
        }
    }
    if let Ok(r) = record.result::<DualityReport>(Experiment::Duality) {
        let mut t = Table::new(
            "duality",
            &["identity", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se", "pass"],
        );
        for id in [&r.r1, &r.r1_fitted, &r.r2, &r.l1] {
            let mut row = vec![id.name.clone()];
            row.extend([id.lhs.mean, id.lhs.se, id.rhs.mean, id.rhs.se, id.gap.mean, id.gap.se].map(num));
            row.push(id.pass.to_string());
            t.push(row);
        }
        out.push(t);
    }
    Ok(out)
}

/// Writes `config.json`, `report.json` and `tables/*.csv` under
/// `out/<fingerprint>/` and returns that directory.
pub fn write_record(record: &ResultRecord, out: &Path) -> Result<PathBuf> {
    let dir = out.join(&record.fingerprint);
    fs::create_dir_all(dir.join("tables"))?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&record.config)?)?;
    let mut report = serde_json::to_value(record)?;
    if let Some(sim) = report.pointer_mut("/results/simulate").and_then(|v| v.as_object_mut()) {
        sim.remove("paths");
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    for t in tables(record)? {
        t.write(&dir.join("tables"))?;
    }
    Ok(dir)
}
