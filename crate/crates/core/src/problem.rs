//! Coefficient sets `(σ, β, b, f, Φ)`, control sets and policies in
//! transformed coordinates, spike perturbations, and the Hamiltonian
//!
//! ```text
//! H(s, x, v, p, K) = (f + p b + K β)(s, x κ_s(𝒯_s), v) / κ_s(𝒯_s)
//! ```

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::girsanov::SigmaSpec;

/// A value with its first and second `x`-derivatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Jet {
    pub v: f64,
    pub x: f64,
    pub xx: f64,
}

impl Jet {
    pub const ZERO: Jet = Jet {
        v: 0.0,
        x: 0.0,
        xx: 0.0,
    };

    pub fn new(v: f64, x: f64, xx: f64) -> Self {
        Self { v, x, xx }
    }
}

/// `b`, `β`, `f` and `Φ` with their `x`-derivatives. Control is scalar.
/// Implementations must be pure.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn b(&self, t: f64, x: f64, u: f64) -> Jet;
    fn beta(&self, t: f64, x: f64, u: f64) -> Jet;
    fn f(&self, t: f64, x: f64, u: f64) -> Jet;
    fn phi(&self, x: f64) -> Jet;

    /// Uniform bound on the coefficients and derivatives, when one exists.
    fn bound(&self) -> Option<f64> {
        None
    }

    /// Lipschitz constant in `x`, when one exists.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// Shipped coefficient sets, selectable by name from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Builtin {
    /// `b = u`, `β = β₀ + β₁u + γux`, `f = u²/2`, `Φ = λx`.
    LqBasic {
        #[serde(default = "one")]
        lambda: f64,
        #[serde(default = "default_beta0")]
        beta0: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// `b = ax + u`, `β = cx`, `f = u²/2`, `Φ = λx + qx²/2`.
    Geometric {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default)]
        lambda: f64,
        #[serde(default = "one")]
        q: f64,
    },
    /// The geometric set, restricted to `H = 1/2`.
    ClassicalHHalf {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default)]
        lambda: f64,
        #[serde(default = "one")]
        q: f64,
    },
    /// `b = ax + u`, `β = β₀`, `f = u²/2`, `Φ = λx`; adjoint `p(s) = λ e^{a(T-s)}`.
    LinearGaussian {
        #[serde(default = "default_a")]
        a: f64,
        #[serde(default = "default_beta0")]
        beta0: f64,
        #[serde(default = "one")]
        lambda: f64,
    },
    /// `b = u`, `β = β₀ + β₁u + γux`, `f = u²/2`, `Φ = qx²/2`.
    QuadraticTerminal {
        #[serde(default = "one")]
        q: f64,
        #[serde(default = "default_beta0")]
        beta0: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default)]
        gamma: f64,
    },
    /// Everything zero.
    Trivial,
}

fn one() -> f64 {
    1.0
}
fn default_beta0() -> f64 {
    0.2
}
fn default_beta1() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.5
}
fn default_a() -> f64 {
    0.1
}
fn default_c() -> f64 {
    0.3
}

impl Builtin {
    pub fn lq_basic() -> Self {
        Builtin::LqBasic {
            lambda: 1.0,
            beta0: default_beta0(),
            beta1: default_beta1(),
            gamma: default_gamma(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::LqBasic { .. } => "lq_basic",
            Builtin::Geometric { .. } => "geometric",
            Builtin::ClassicalHHalf { .. } => "classical_h_half",
            Builtin::LinearGaussian { .. } => "linear_gaussian",
            Builtin::QuadraticTerminal { .. } => "quadratic_terminal",
            Builtin::Trivial => "trivial",
        }
    }

    pub fn requires_classical(&self) -> bool {
        matches!(self, Builtin::ClassicalHHalf { .. })
    }

    /// `λ` for the sets with a linear terminal cost.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Builtin::LqBasic { lambda, .. }
            | Builtin::Geometric { lambda, .. }
            | Builtin::ClassicalHHalf { lambda, .. }
            | Builtin::LinearGaussian { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("problem.{name}"), "must be finite"))
            }
        };
        match *self {
            Builtin::LqBasic {
                lambda,
                beta0,
                beta1,
                gamma,
            } => {
                finite("lambda", lambda)?;
                finite("beta0", beta0)?;
                finite("beta1", beta1)?;
                finite("gamma", gamma)
            }
            Builtin::Geometric { a, c, lambda, q } | Builtin::ClassicalHHalf { a, c, lambda, q } => {
                finite("a", a)?;
                finite("c", c)?;
                finite("lambda", lambda)?;
                finite("q", q)
            }
            Builtin::LinearGaussian { a, beta0, lambda } => {
                finite("a", a)?;
                finite("beta0", beta0)?;
                finite("lambda", lambda)
            }
            Builtin::QuadraticTerminal { q, beta0, beta1, gamma } => {
                finite("q", q)?;
                finite("beta0", beta0)?;
                finite("beta1", beta1)?;
                finite("gamma", gamma)
            }
            Builtin::Trivial => Ok(()),
        }
    }
}

impl Coefficients for Builtin {
    fn b(&self, _t: f64, x: f64, u: f64) -> Jet {
        match *self {
            Builtin::LqBasic { .. } | Builtin::QuadraticTerminal { .. } => Jet::new(u, 0.0, 0.0),
            Builtin::Geometric { a, .. } | Builtin::ClassicalHHalf { a, .. } | Builtin::LinearGaussian { a, .. } => {
                Jet::new(a * x + u, a, 0.0)
            }
            Builtin::Trivial => Jet::ZERO,
        }
    }

    fn beta(&self, _t: f64, x: f64, u: f64) -> Jet {
        match *self {
            Builtin::LqBasic {
                beta0, beta1, gamma, ..
            }
            | Builtin::QuadraticTerminal {
                beta0, beta1, gamma, ..
            } => Jet::new(beta0 + beta1 * u + gamma * u * x, gamma * u, 0.0),
            Builtin::Geometric { c, .. } | Builtin::ClassicalHHalf { c, .. } => Jet::new(c * x, c, 0.0),
            Builtin::LinearGaussian { beta0, .. } => Jet::new(beta0, 0.0, 0.0),
            Builtin::Trivial => Jet::ZERO,
        }
    }

    fn f(&self, _t: f64, _x: f64, u: f64) -> Jet {
        match self {
            Builtin::Trivial => Jet::ZERO,
            _ => Jet::new(0.5 * u * u, 0.0, 0.0),
        }
    }

    fn phi(&self, x: f64) -> Jet {
        match *self {
            Builtin::LqBasic { lambda, .. } | Builtin::LinearGaussian { lambda, .. } => {
                Jet::new(lambda * x, lambda, 0.0)
            }
            Builtin::Geometric { lambda, q, .. } | Builtin::ClassicalHHalf { lambda, q, .. } => {
                Jet::new(lambda * x + 0.5 * q * x * x, lambda + q * x, q)
            }
            Builtin::QuadraticTerminal { q, .. } => Jet::new(0.5 * q * x * x, q * x, q),
            Builtin::Trivial => Jet::ZERO,
        }
    }

    fn lipschitz(&self) -> Option<f64> {
        match *self {
            Builtin::Trivial => Some(0.0),
            Builtin::LinearGaussian { a, .. } => Some(a.abs()),
            _ => None,
        }
    }
}

type CoefFn = Arc<dyn Fn(f64, f64, f64) -> Jet + Send + Sync>;
type TermFn = Arc<dyn Fn(f64) -> Jet + Send + Sync>;

/// Coefficient set built from closures.
#[derive(Clone)]
pub struct FnCoefficients {
    pub b: CoefFn,
    pub beta: CoefFn,
    pub f: CoefFn,
    pub phi: TermFn,
}

impl fmt::Debug for FnCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnCoefficients")
    }
}

impl Coefficients for FnCoefficients {
    fn b(&self, t: f64, x: f64, u: f64) -> Jet {
        (self.b)(t, x, u)
    }
    fn beta(&self, t: f64, x: f64, u: f64) -> Jet {
        (self.beta)(t, x, u)
    }
    fn f(&self, t: f64, x: f64, u: f64) -> Jet {
        (self.f)(t, x, u)
    }
    fn phi(&self, x: f64) -> Jet {
        (self.phi)(x)
    }
}

/// Admissible control values `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSet {
    Finite { values: Vec<f64> },
    Interval { lo: f64, hi: f64 },
}

impl ControlSet {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::Finite { values } if values.is_empty() || values.iter().any(|v| !v.is_finite()) => {
                Err(Error::config(
                    "problem.control_set.values",
                    "must be a non-empty list of finite values",
                ))
            }
            ControlSet::Interval { lo, hi } if !(lo <= hi && lo.is_finite() && hi.is_finite()) => {
                Err(Error::config("problem.control_set", "interval needs finite lo <= hi"))
            }
            _ => Ok(()),
        }
    }

    pub fn contains(&self, u: f64) -> bool {
        match self {
            ControlSet::Finite { values } => values.contains(&u),
            ControlSet::Interval { lo, hi } => *lo <= u && u <= *hi,
        }
    }

    /// Nearest admissible value.
    pub fn project(&self, u: f64) -> f64 {
        match self {
            ControlSet::Interval { lo, hi } => u.clamp(*lo, *hi),
            ControlSet::Finite { values } => values
                .iter()
                .copied()
                .min_by(|a, b| (a - u).abs().total_cmp(&(b - u).abs()))
                .unwrap_or(u),
        }
    }

    /// The candidate list for a finite set, or `n` equispaced points of an interval.
    pub fn candidates(&self, n: usize) -> Vec<f64> {
        match self {
            ControlSet::Finite { values } => values.clone(),
            ControlSet::Interval { lo, hi } => {
                if n <= 1 || lo == hi {
                    vec![*lo]
                } else {
                    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
                }
            }
        }
    }
}

/// Everything a policy may look at when evaluated at `t_i`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput {
    pub t: f64,
    pub zeta: f64,
    pub bh: f64,
    /// `B^H(t)(𝒯_t)`.
    pub bh_shifted: f64,
}

type FeedbackFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// A control `v(t)` in transformed coordinates.
#[derive(Clone)]
pub enum ControlPolicy {
    Constant(f64),
    /// `v(t) = a + b t`.
    Deterministic {
        a: f64,
        b: f64,
    },
    /// `v(t) = g(t, ζ(t), B^H(t))`.
    MarkovFeedback(FeedbackFn),
    /// An untransformed control `u(t) = a + c B^H(t)`; the framework
    /// evaluates `v(t) = u(t, 𝒯_t)` on shifted fBm values.
    FbmFunctional {
        a: f64,
        c: f64,
    },
    /// `alt` on the closed interval `[lo, hi]`, `base` elsewhere.
    Spiked {
        base: Box<ControlPolicy>,
        alt: Box<ControlPolicy>,
        lo: f64,
        hi: f64,
    },
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::Constant(c) => write!(f, "Constant({c})"),
            ControlPolicy::Deterministic { a, b } => write!(f, "Deterministic({a} + {b} t)"),
            ControlPolicy::MarkovFeedback(_) => f.write_str("MarkovFeedback(..)"),
            ControlPolicy::FbmFunctional { a, c } => write!(f, "FbmFunctional({a} + {c} B^H)"),
            ControlPolicy::Spiked { base, alt, lo, hi } => {
                write!(f, "Spiked({base:?} -> {alt:?} on [{lo}, {hi}])")
            }
        }
    }
}

/// Serializable subset of [`ControlPolicy`] for configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Constant {
        value: f64,
    },
    Deterministic {
        a: f64,
        b: f64,
    },
    FbmFunctional {
        a: f64,
        c: f64,
    },
    /// `v ≡ -λ`, the minimizer of the LQ Hamiltonian.
    LqOptimal,
}

impl PolicySpec {
    pub fn build(&self, builtin: &Builtin) -> Result<ControlPolicy> {
        Ok(match *self {
            PolicySpec::Constant { value } => ControlPolicy::Constant(value),
            PolicySpec::Deterministic { a, b } => ControlPolicy::Deterministic { a, b },
            PolicySpec::FbmFunctional { a, c } => ControlPolicy::FbmFunctional { a, c },
            PolicySpec::LqOptimal => {
                let lambda = builtin.lambda().ok_or_else(|| {
                    Error::config("policy", format!("lq_optimal needs a λ, {} has none", builtin.name()))
                })?;
                ControlPolicy::Constant(-lambda)
            }
        })
    }
}

const SPIKE_TIE: f64 = 1e-12;

impl ControlPolicy {
    pub fn eval(&self, inp: &PolicyInput) -> f64 {
        match self {
            ControlPolicy::Constant(c) => *c,
            ControlPolicy::Deterministic { a, b } => a + b * inp.t,
            ControlPolicy::MarkovFeedback(g) => g(inp.t, inp.zeta, inp.bh),
            ControlPolicy::FbmFunctional { a, c } => a + c * inp.bh_shifted,
            ControlPolicy::Spiked { base, alt, lo, hi } => {
                let tie = SPIKE_TIE * hi.abs().max(1.0);
                if inp.t >= lo - tie && inp.t <= hi + tie {
                    alt.eval(inp)
                } else {
                    base.eval(inp)
                }
            }
        }
    }
}

/// Spike data `(τ, ε, ṽ)` with `[τ-ε, τ+ε] ⊂ [0, T]`.
#[derive(Debug, Clone)]
pub struct SpikePerturbation {
    pub tau: f64,
    pub epsilon: f64,
    pub alt: ControlPolicy,
}

impl SpikePerturbation {
    pub fn new(tau: f64, epsilon: f64, alt: ControlPolicy, horizon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::domain(format!("spike needs epsilon > 0, got {epsilon}")));
        }
        if !(tau > 0.0 && tau < horizon) {
            return Err(Error::domain(format!(
                "spike needs 0 < tau < T, got tau={tau}, T={horizon}"
            )));
        }
        let tie = SPIKE_TIE * horizon;
        if tau - epsilon < -tie || tau + epsilon > horizon + tie {
            return Err(Error::domain(format!(
                "[tau - eps, tau + eps] = [{}, {}] escapes [0, {horizon}]",
                tau - epsilon,
                tau + epsilon
            )));
        }
        Ok(Self { tau, epsilon, alt })
    }

    pub fn lo(&self) -> f64 {
        self.tau - self.epsilon
    }

    pub fn hi(&self) -> f64 {
        self.tau + self.epsilon
    }
}

/// `v^ε`: `ṽ` on the closed interval `[τ-ε, τ+ε]`, `v` elsewhere.
pub fn spike(v: &ControlPolicy, pert: &SpikePerturbation) -> ControlPolicy {
    ControlPolicy::Spiked {
        base: Box::new(v.clone()),
        alt: Box::new(pert.alt.clone()),
        lo: pert.lo(),
        hi: pert.hi(),
    }
}

/// A control problem in transformed coordinates.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub coefficients: Arc<dyn Coefficients>,
    pub sigma: SigmaSpec,
    pub x0: f64,
    pub horizon: f64,
    pub control_set: ControlSet,
}

impl ControlProblem {
    pub fn builtin(builtin: Builtin, sigma: f64, x0: f64, horizon: f64, control_set: ControlSet) -> Self {
        Self {
            name: builtin.name().to_string(),
            coefficients: Arc::new(builtin),
            sigma: SigmaSpec::Constant(sigma),
            x0,
            horizon,
            control_set,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HamiltonianInput {
    pub s: f64,
    pub x: f64,
    pub v: f64,
    pub p: f64,
    pub k: f64,
    /// `κ_s(𝒯_s)`.
    pub kappa: f64,
}

pub fn hamiltonian(inp: &HamiltonianInput, coeffs: &dyn Coefficients) -> f64 {
    let xs = inp.x * inp.kappa;
    let f = coeffs.f(inp.s, xs, inp.v).v;
    let b = coeffs.b(inp.s, xs, inp.v).v;
    let beta = coeffs.beta(inp.s, xs, inp.v).v;
    (f + inp.p * b + inp.k * beta) / inp.kappa
}

/// `∂²H/∂x² = κ (f_xx + p b_xx + K β_xx)(s, xκ, v)`.
pub fn hamiltonian_xx(inp: &HamiltonianInput, coeffs: &dyn Coefficients) -> f64 {
    let xs = inp.x * inp.kappa;
    let f = coeffs.f(inp.s, xs, inp.v).xx;
    let b = coeffs.b(inp.s, xs, inp.v).xx;
    let beta = coeffs.beta(inp.s, xs, inp.v).xx;
    inp.kappa * (f + inp.p * b + inp.k * beta)
}

/// Worst relative mismatch between a supplied derivative and its finite difference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub probes: usize,
    pub worst: f64,
    pub worst_what: String,
    pub pass: bool,
}

/// Compares every `*_x` and `*_xx` callback with centered differences of
/// the callback one order below, on `probes` random `(t, x, u)` points.
pub fn check_derivatives(
    coeffs: &dyn Coefficients,
    horizon: f64,
    control_set: &ControlSet,
    probes: usize,
    seed: u64,
    tol: f64,
) -> DerivativeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let us = control_set.candidates(9);
    let mut worst = 0.0f64;
    let mut worst_what = String::new();
    let mut note = |what: &str, supplied: f64, fd: f64, scale: f64| {
        let err = (supplied - fd).abs() / scale.max(1.0);
        if err > worst {
            worst = err;
            worst_what = what.to_string();
        }
    };
    for _ in 0..probes {
        let t = rng.random::<f64>() * horizon;
        let x: f64 = rng.random_range(-3.0..3.0);
        let u = us[rng.random_range(0..us.len())];
        let h = 1e-5 * x.abs().max(1.0);
        let fields: [(&str, &dyn Fn(f64) -> Jet); 4] = [
            ("b", &|y| coeffs.b(t, y, u)),
            ("beta", &|y| coeffs.beta(t, y, u)),
            ("f", &|y| coeffs.f(t, y, u)),
            ("phi", &|y| coeffs.phi(y)),
        ];
        for (name, g) in fields {
            let (lo, mid, hi) = (g(x - h), g(x), g(x + h));
            let d1 = (hi.v - lo.v) / (2.0 * h);
            let d2 = (hi.x - lo.x) / (2.0 * h);
            note(&format!("{name}_x"), mid.x, d1, mid.x.abs().max(mid.v.abs()));
            note(&format!("{name}_xx"), mid.xx, d2, mid.xx.abs().max(mid.x.abs()));
        }
    }
    DerivativeReport {
        probes,
        worst,
        worst_what,
        pass: worst <= tol,
    }
}
