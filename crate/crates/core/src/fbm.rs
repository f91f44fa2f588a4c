//! Fractional Brownian motion: the Molchan–Golosov kernel, the covariance
//! `R_H`, and exact joint `(W, B^H)` path ensembles on a uniform grid.
//!
//! `B^H` is represented as `B^H(t) = ∫_0^t K_H(t, s) dW⁰(s)` for a Brownian
//! motion `W⁰` independent of the control noise `W`. For `H < 1/2`
//!
//! ```text
//! K_H(t,s) = C_H [ (t/s)^{H-1/2} (t-s)^{H-1/2}
//!                  - (H-1/2) s^{1/2-H} ∫_s^t u^{H-3/2} (u-s)^{H-1/2} du ]
//! C_H      = sqrt( 2H / ((1-2H) B(1-2H, H+1/2)) )
//! ```
//!
//! and `K_H ≡ 1` at `H = 1/2`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use statrs::function::beta::{beta, beta_reg};

use crate::error::{Error, Result};
use crate::quad;

pub const MIN_HURST: f64 = 0.05;
pub const MAX_HURST: f64 = 0.5;

/// Relative diagonal jitter tried once when the covariance factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Hurst index in the supported range `[0.05, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self> {
        if !(MIN_HURST..=MAX_HURST).contains(&h) {
            return Err(Error::domain(format!(
                "Hurst parameter {h} outside supported range [{MIN_HURST}, {MAX_HURST}]"
            )));
        }
        Ok(Self(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// True iff `H = 1/2` exactly, where `B^H` is a Brownian motion.
    pub fn is_classical(self) -> bool {
        self.0 == 0.5
    }
}

impl TryFrom<f64> for HurstParam {
    type Error = Error;
    fn try_from(h: f64) -> Result<Self> {
        Self::new(h)
    }
}

impl From<HurstParam> for f64 {
    fn from(h: HurstParam) -> f64 {
        h.0
    }
}

/// Uniform grid `t_i = i T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps < 2 {
            return Err(Error::domain(format!("n_steps must be at least 2, got {n_steps}")));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes, `n_steps + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.t(i)).collect()
    }
}

/// `C_H = sqrt(2H / ((1 - 2H) B(1 - 2H, H + 1/2)))`.
pub fn kernel_constant(h: HurstParam) -> Result<f64> {
    if h.is_classical() {
        return Err(Error::ClassicalKernel);
    }
    let h = h.value();
    let b = beta(1.0 - 2.0 * h, h + 0.5);
    Ok((2.0 * h / ((1.0 - 2.0 * h) * b)).sqrt())
}

/// `R_H(t, s) = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2`.
pub fn covariance(h: HurstParam, t: f64, s: f64) -> Result<f64> {
    if t < 0.0 || s < 0.0 {
        return Err(Error::domain(format!("covariance needs t, s >= 0, got ({t}, {s})")));
    }
    Ok(covariance_unchecked(h.value(), t, s))
}

pub(crate) fn covariance_unchecked(h: f64, t: f64, s: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e))
}

/// Evaluator for `K_H` with the normalization constant cached.
#[derive(Debug, Clone, Copy)]
pub struct Kernel {
    h: f64,
    c_h: f64,
    beta: f64,
}

impl Kernel {
    pub fn new(h: HurstParam) -> Self {
        let c_h = if h.is_classical() {
            1.0
        } else {
            kernel_constant(h).expect("non-classical")
        };
        let beta = if h.is_classical() {
            0.0
        } else {
            beta(1.0 - 2.0 * h.value(), h.value() + 0.5)
        };
        Self {
            h: h.value(),
            c_h,
            beta,
        }
    }

    pub fn c_h(&self) -> f64 {
        self.c_h
    }

    /// `K_H(t, s)` for `0 < s < t`.
    pub fn value(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < t) {
            return Err(Error::domain(format!("kernel needs 0 < s < t, got t={t}, s={s}")));
        }
        Ok(self.value_unchecked(t, s))
    }

    fn value_unchecked(&self, t: f64, s: f64) -> f64 {
        self.value_with_gap(t, s, t - s)
    }

    /// `K_H(t, s)` with `d = t - s` supplied separately, for `s` so close to
    /// `t` that the difference is not representable.
    fn value_with_gap(&self, t: f64, s: f64, d: f64) -> f64 {
        if self.h == 0.5 {
            return 1.0;
        }
        let a = self.h - 0.5;
        let first = (t / s).powf(a) * d.powf(a);
        self.c_h * (first - a * s.powf(-a) * self.inner_integral(t, s, d))
    }

    /// `∫_s^t u^{H-3/2} (u-s)^{H-1/2} du`. Substituting `u = s/v` gives
    /// `s^{2H-1} B(1-2H, H+1/2) I_{1-s/t}(H+1/2, 1-2H)`.
    fn inner_integral(&self, t: f64, s: f64, d: f64) -> f64 {
        let a = 1.0 - 2.0 * self.h;
        let b = self.h + 0.5;
        s.powf(-a) * self.beta * beta_reg(b, a, d / t)
    }

    /// `∫_lo^hi K_H(t, r)^2 dr` for a grid cell below `t`. Cells touching
    /// `r = 0` or `r = t` carry an integrable `|·|^{2H-1}` singularity that is
    /// removed by a power substitution before quadrature.
    pub(crate) fn cell_energy(&self, t: f64, lo: f64, hi: f64) -> f64 {
        if self.h == 0.5 {
            return hi - lo;
        }
        let left = lo <= 0.0;
        let right = hi >= t;
        match (left, right) {
            (true, true) => {
                let mid = 0.5 * (lo + hi);
                self.cell_energy(t, lo, mid) + self.cell_energy(t, mid, hi)
            }
            (false, false) => quad::integrate(
                |r| {
                    let k = self.value_unchecked(t, r);
                    k * k
                },
                lo,
                hi,
                0.0,
                1e-10,
            ),
            (true, false) | (false, true) => {
                let q = 1.0 / (2.0 * self.h);
                let w = hi - lo;
                let f = |x: f64| {
                    let d = w * x.powf(q);
                    let k = if left {
                        self.value_unchecked(t, lo + d)
                    } else {
                        self.value_with_gap(t, hi - d, d)
                    };
                    k * k * w * q * x.powf(q - 1.0)
                };
                quad::integrate(f, 0.0, 1.0, 0.0, 1e-10)
            }
        }
    }
}

/// Molchan–Golosov kernel value `K_H(t, s)` for `0 < s < t`.
pub fn kernel_value(h: HurstParam, t: f64, s: f64) -> Result<f64> {
    Kernel::new(h).value(t, s)
}

/// Kernel values tabulated on a grid.
///
/// `k[i][j]` is the root-mean-square of `K_H(t_i, ·)` over the cell
/// `[t_j, t_{j+1}]`, so that `Σ_j k[i][j]^2 Δt` equals `∫_0^{t_i} K_H(t_i, r)^2 dr`
/// up to quadrature error. Point values at the nodes themselves are infinite
/// at `j = 0` for `H < 1/2`, and a plain Riemann sum would carry an `O(Δt^{2H})`
/// error from the two singular cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTable {
    pub hurst: HurstParam,
    pub grid: TimeGrid,
    pub c_h: f64,
    rows: Vec<Vec<f64>>,
}

impl KernelTable {
    pub fn build(h: HurstParam, grid: TimeGrid) -> Self {
        let kernel = Kernel::new(h);
        let dt = grid.dt();
        let rows: Vec<Vec<f64>> = (0..grid.n_nodes())
            .into_par_iter()
            .map(|i| {
                let t = grid.t(i);
                (0..i)
                    .map(|j| (kernel.cell_energy(t, grid.t(j), grid.t(j + 1)) / dt).sqrt())
                    .collect()
            })
            .collect();
        Self {
            hurst: h,
            grid,
            c_h: kernel.c_h(),
            rows,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// `Σ_j k[i][j]^2 Δt`, which should approach `t_i^{2H}`.
    pub fn row_quadrature(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|k| k * k).sum::<f64>() * self.grid.dt()
    }

    /// `Σ_j k[i][j] k[l][j] Δt`, an approximation of `R_H(t_i, t_l)`.
    pub fn cross_quadrature(&self, i: usize, l: usize) -> f64 {
        self.rows[i].iter().zip(&self.rows[l]).map(|(a, b)| a * b).sum::<f64>() * self.grid.dt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Cholesky,
    Volterra,
}

/// Jointly sampled `(W, B^H)` paths, stored row-major as `m_paths × n_nodes`.
///
/// Path `p` draws `W` from ChaCha stream `2p` and the fBm driver from stream
/// `2p + 1` of the generator seeded with `seed`, so paths are reproducible
/// individually and independent of the thread schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub hurst: HurstParam,
    pub grid: TimeGrid,
    pub seed: u64,
    pub sampler: Sampler,
    m_paths: usize,
    w: Vec<f64>,
    bh: Vec<f64>,
}

impl PathEnsemble {
    pub fn from_parts(
        hurst: HurstParam,
        grid: TimeGrid,
        seed: u64,
        sampler: Sampler,
        w: Vec<f64>,
        bh: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.n_nodes();
        if w.len() != bh.len() || w.is_empty() || !w.len().is_multiple_of(n) {
            return Err(Error::contract("ensemble matrices do not match the grid"));
        }
        Ok(Self {
            hurst,
            grid,
            seed,
            sampler,
            m_paths: w.len() / n,
            w,
            bh,
        })
    }

    pub fn m_paths(&self) -> usize {
        self.m_paths
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn w_path(&self, p: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.w[p * n..(p + 1) * n]
    }

    pub fn bh_path(&self, p: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.bh[p * n..(p + 1) * n]
    }

    /// `W(t_{i+1}) - W(t_i)`.
    pub fn dw(&self, p: usize, i: usize) -> f64 {
        let w = self.w_path(p);
        w[i + 1] - w[i]
    }

    /// `B^H(t_{i+1}) - B^H(t_i)`.
    pub fn dbh(&self, p: usize, i: usize) -> f64 {
        let b = self.bh_path(p);
        b[i + 1] - b[i]
    }

    pub fn w_stream(p: usize) -> u64 {
        2 * p as u64
    }

    pub fn bh_stream(p: usize) -> u64 {
        2 * p as u64 + 1
    }

    /// Column `i` of `B^H` across paths.
    pub fn bh_column(&self, i: usize) -> Vec<f64> {
        (0..self.m_paths).map(|p| self.bh_path(p)[i]).collect()
    }

    pub fn w_column(&self, i: usize) -> Vec<f64> {
        (0..self.m_paths).map(|p| self.w_path(p)[i]).collect()
    }

    /// Sample covariance of `B^H(t_i)` and `B^H(t_j)`.
    pub fn empirical_covariance(&self, i: usize, j: usize) -> f64 {
        crate::stats::covariance(&self.bh_column(i), &self.bh_column(j))
    }

    pub fn w_matrix(&self) -> &[f64] {
        &self.w
    }

    pub fn bh_matrix(&self) -> &[f64] {
        &self.bh
    }
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn brownian_path(seed: u64, p: usize, grid: &TimeGrid) -> Vec<f64> {
    let mut rng = stream_rng(seed, PathEnsemble::w_stream(p));
    let sd = grid.dt().sqrt();
    let mut w = Vec::with_capacity(grid.n_nodes());
    w.push(0.0);
    let mut acc = 0.0;
    for _ in 0..grid.n_steps() {
        let z: f64 = StandardNormal.sample(&mut rng);
        acc += sd * z;
        w.push(acc);
    }
    w
}

/// Lower Cholesky factor of `[R_H(t_i, t_j)]_{i,j=1..n}`, stored row-major.
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    n: usize,
    lower: Vec<f64>,
    pub jitter: f64,
}

impl CovarianceFactor {
    pub fn new(h: HurstParam, grid: &TimeGrid) -> Result<Self> {
        let n = grid.n_steps();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            covariance_unchecked(h.value(), grid.t(i + 1), grid.t(j + 1))
        });
        let (chol, jitter) = match cov.clone().cholesky() {
            Some(c) => (c, 0.0),
            None => {
                let max_diag = (0..n).map(|i| cov[(i, i)]).fold(0.0, f64::max);
                let jitter = CHOLESKY_JITTER * max_diag;
                let mut jittered = cov;
                for i in 0..n {
                    jittered[(i, i)] += jitter;
                }
                let c = jittered
                    .cholesky()
                    .ok_or(Error::NotPositiveDefinite { order: n, jitter })?;
                (c, jitter)
            }
        };
        let l = chol.l();
        let mut lower = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            for j in 0..=i {
                lower[i * (i + 1) / 2 + j] = l[(i, j)];
            }
        }
        Ok(Self { n, lower, jitter })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    /// Reconstructed covariance `(L Lᵀ)[i][j]` (zero-based over `t_1..t_n`).
    pub fn reconstructed(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        let ra = &self.lower[a * (a + 1) / 2..a * (a + 1) / 2 + a + 1];
        let rb = &self.lower[b * (b + 1) / 2..b * (b + 1) / 2 + a + 1];
        ra.iter().zip(rb).map(|(x, y)| x * y).sum()
    }

    /// `E[B^H(T) | B^H(t_1), …, B^H(t_i)]` at every node of a path sampled on
    /// the grid (`bh[0] = 0`). The leading block of `L` factors the leading
    /// block of the covariance, so the conditional mean is a partial sum of
    /// the last row of `L` against the innovations.
    pub fn terminal_forecast(&self, bh: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut xi = vec![0.0; n];
        for i in 0..n {
            let row = &self.lower[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            let s: f64 = row[..i].iter().zip(&xi).map(|(l, x)| l * x).sum();
            xi[i] = (bh[i + 1] - s) / row[i];
        }
        let last = &self.lower[(n - 1) * n / 2..(n - 1) * n / 2 + n];
        let mut out = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for (l, x) in last.iter().zip(&xi) {
            acc += l * x;
            out.push(acc);
        }
        out
    }

    fn apply(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            let row = &self.lower[i * (i + 1) / 2..i * (i + 1) / 2 + i + 1];
            *o = row.iter().zip(z).map(|(l, z)| l * z).sum();
        }
    }
}

/// Exact sampling of `B^H` on the grid through the Cholesky factor of its
/// covariance matrix; `W` from independent Gaussian increments.
pub fn sample_paths(h: HurstParam, grid: TimeGrid, m_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if m_paths == 0 {
        return Err(Error::domain("m_paths must be at least 1"));
    }
    let factor = CovarianceFactor::new(h, &grid)?;
    sample_with_factor(h, grid, m_paths, seed, &factor)
}

pub fn sample_with_factor(
    h: HurstParam,
    grid: TimeGrid,
    m_paths: usize,
    seed: u64,
    factor: &CovarianceFactor,
) -> Result<PathEnsemble> {
    if factor.order() != grid.n_steps() {
        return Err(Error::contract("covariance factor does not match the grid"));
    }
    let n = grid.n_steps();
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..m_paths)
        .into_par_iter()
        .map(|p| {
            let w = brownian_path(seed, p, &grid);
            let mut rng = stream_rng(seed, PathEnsemble::bh_stream(p));
            let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut bh = vec![0.0; n + 1];
            factor.apply(&z, &mut bh[1..]);
            (w, bh)
        })
        .collect();
    assemble(h, grid, seed, Sampler::Cholesky, paths)
}

/// Midpoint Volterra discretization `B^H(t_i) ≈ Σ_{j<i} K_H(t_i, t_{j+1/2}) ΔW⁰_j`.
/// Only meant as an independent cross-check of [`sample_paths`].
pub fn sample_paths_volterra(h: HurstParam, grid: TimeGrid, m_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if m_paths == 0 {
        return Err(Error::domain("m_paths must be at least 1"));
    }
    let weights = volterra_weights(h, &grid);
    let n = grid.n_steps();
    let sd = grid.dt().sqrt();
    let paths: Vec<(Vec<f64>, Vec<f64>)> = (0..m_paths)
        .into_par_iter()
        .map(|p| {
            let w = brownian_path(seed, p, &grid);
            let mut rng = stream_rng(seed, PathEnsemble::bh_stream(p));
            let dw0: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sd * z
                })
                .collect();
            let mut bh = vec![0.0; n + 1];
            for i in 1..=n {
                bh[i] = weights[i].iter().zip(&dw0).fold(0.0, |acc, (k, d)| acc + k * d);
            }
            (w, bh)
        })
        .collect();
    assemble(h, grid, seed, Sampler::Volterra, paths)
}

/// Row `i` holds `K_H(t_i, t_{j+1/2})` for `j < i`.
pub fn volterra_weights(h: HurstParam, grid: &TimeGrid) -> Vec<Vec<f64>> {
    let kernel = Kernel::new(h);
    let dt = grid.dt();
    (0..grid.n_nodes())
        .into_par_iter()
        .map(|i| {
            let t = grid.t(i);
            (0..i)
                .map(|j| kernel.value_unchecked(t, grid.t(j) + 0.5 * dt))
                .collect()
        })
        .collect()
}

/// Covariance of the Volterra sampler output, `Σ_j w[i][j] w[l][j] Δt`.
pub fn volterra_covariance(weights: &[Vec<f64>], dt: f64, i: usize, l: usize) -> f64 {
    weights[i].iter().zip(&weights[l]).map(|(a, b)| a * b).sum::<f64>() * dt
}

fn assemble(
    h: HurstParam,
    grid: TimeGrid,
    seed: u64,
    sampler: Sampler,
    paths: Vec<(Vec<f64>, Vec<f64>)>,
) -> Result<PathEnsemble> {
    let mut w = Vec::with_capacity(paths.len() * grid.n_nodes());
    let mut bh = Vec::with_capacity(paths.len() * grid.n_nodes());
    for (pw, pb) in paths {
        w.extend(pw);
        bh.extend(pb);
    }
    PathEnsemble::from_parts(h, grid, seed, sampler, w, bh)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(h: f64) -> HurstParam {
        HurstParam::new(h).unwrap()
    }

    #[test]
    fn hurst_range_is_enforced() {
        assert!(HurstParam::new(0.04).is_err());
        assert!(HurstParam::new(0.51).is_err());
        assert!(HurstParam::new(0.5).unwrap().is_classical());
        assert!(!HurstParam::new(0.3).unwrap().is_classical());
    }

    #[test]
    fn grid_nodes_are_exact_at_ends() {
        let g = TimeGrid::new(2.0, 7).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(7), 2.0);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
    }

    #[test]
    fn classical_kernel_constant_is_rejected() {
        assert!(matches!(kernel_constant(hp(0.5)), Err(Error::ClassicalKernel)));
        let c = kernel_constant(hp(0.1)).unwrap();
        assert!(c.is_finite() && c > 0.0);
    }

    #[test]
    fn brownian_kernel_is_one() {
        assert_eq!(kernel_value(hp(0.5), 1.0, 0.3).unwrap(), 1.0);
        assert_eq!(kernel_value(hp(0.5), 2.0, 1.9).unwrap(), 1.0);
    }

    #[test]
    fn kernel_domain_errors() {
        assert!(kernel_value(hp(0.3), 1.0, 1.0).is_err());
        assert!(kernel_value(hp(0.3), 1.0, 0.0).is_err());
        assert!(kernel_value(hp(0.3), 1.0, 1.5).is_err());
    }

    #[test]
    fn covariance_closed_forms() {
        assert!((covariance(hp(0.3), 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((covariance(hp(0.5), 1.0, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(covariance(hp(0.3), -1.0, 1.0).is_err());
    }

    #[test]
    fn single_path_starts_at_zero_and_is_deterministic() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let a = sample_paths(hp(0.3), g, 1, 9).unwrap();
        assert_eq!(a.w_path(0)[0], 0.0);
        assert_eq!(a.bh_path(0)[0], 0.0);
        let b = sample_paths(hp(0.3), g, 3, 9).unwrap();
        // path 0 does not depend on how many paths were requested
        assert_eq!(a.w_path(0), b.w_path(0));
        assert_eq!(a.bh_path(0), b.bh_path(0));
    }

    #[test]
    fn volterra_at_half_is_cumulative_sum() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let e = sample_paths_volterra(hp(0.5), g, 2, 5).unwrap();
        let sd = g.dt().sqrt();
        for p in 0..2 {
            let mut rng = stream_rng(5, PathEnsemble::bh_stream(p));
            let mut acc = 0.0;
            for i in 1..=32 {
                let z: f64 = StandardNormal.sample(&mut rng);
                acc += sd * z;
                assert_eq!(e.bh_path(p)[i], acc);
            }
        }
    }

    #[test]
    fn factor_reconstructs_covariance() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let f = CovarianceFactor::new(hp(0.2), &g).unwrap();
        for i in (0..32).step_by(5) {
            for j in (0..32).step_by(3) {
                let exact = covariance_unchecked(0.2, g.t(i + 1), g.t(j + 1));
                assert!((f.reconstructed(i, j) - exact).abs() < 1e-12);
            }
        }
    }
}
