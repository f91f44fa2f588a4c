//! Least-squares projection onto polynomial features, the conditional
//! expectation estimator behind the backward schemes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Polynomial features of total degree `≤ degree` in the standardized
/// variables `ζ(t_i)`, `B^H(t_i)` and, optionally, the state `ζk`, the
/// factor `k = κ_{t_i}(𝒯_{t_i})` and the forecast `E[B^H(T) | F^B_{t_i}]`.
/// `B^H` is not Markov for `H ≠ 1/2`; the forecast carries the part of its
/// history that drives the terminal factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    pub degree: usize,
    #[serde(default = "yes")]
    pub include_state: bool,
    #[serde(default)]
    pub include_kappa: bool,
    #[serde(default = "yes")]
    pub include_forecast: bool,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn yes() -> bool {
    true
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 2,
            include_state: true,
            include_kappa: false,
            include_forecast: true,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl RegressionBasis {
    pub fn with_degree(degree: usize) -> Self {
        Self {
            degree,
            ..Self::default()
        }
    }
}

/// Exponent vectors of all monomials in `vars` variables with total degree
/// `≤ degree`, constant first.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; vars]];
    for d in 1..=degree {
        let mut level = Vec::new();
        let mut cur = vec![0; vars];
        fill(&mut level, &mut cur, 0, d);
        out.extend(level);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// A factored design for one time slice.
#[derive(Debug, Clone)]
pub struct Design {
    rows: usize,
    cols: usize,
    x: Vec<f64>,
    normal_inv: DMatrix<f64>,
    pub condition: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub fitted: Vec<f64>,
    pub coef: Vec<f64>,
    pub r2: f64,
}

impl Design {
    /// `vars` holds one column per raw variable, each of length `rows`.
    /// Columns with (numerically) zero spread are dropped before the
    /// monomials are formed, so a slice where every variable is constant
    /// reduces to the sample mean.
    pub fn new(vars: &[Vec<f64>], rows: usize, degree: usize, ridge: f64, node: usize) -> Result<Self> {
        if rows == 0 {
            return Err(Error::Regression {
                node,
                message: "no valid paths".into(),
            });
        }
        let mut std_vars: Vec<Vec<f64>> = Vec::new();
        for col in vars {
            let n = rows as f64;
            let mean = col.iter().sum::<f64>() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if !sd.is_finite() || !mean.is_finite() {
                return Err(Error::Regression {
                    node,
                    message: "non-finite feature".into(),
                });
            }
            if sd > 1e-12 * mean.abs().max(1.0) {
                std_vars.push(col.iter().map(|v| (v - mean) / sd).collect());
            }
        }
        let monos = if std_vars.is_empty() {
            vec![vec![]]
        } else {
            monomials(std_vars.len(), degree)
        };
        let cols = monos.len();
        let mut x = vec![0.0; rows * cols];
        for r in 0..rows {
            for (c, m) in monos.iter().enumerate() {
                x[r * cols + c] = m
                    .iter()
                    .zip(&std_vars)
                    .fold(1.0, |acc, (&e, v)| acc * v[r].powi(e as i32));
            }
        }
        let mut normal = DMatrix::<f64>::zeros(cols, cols);
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            for a in 0..cols {
                let xa = xr[a];
                for b in a..cols {
                    normal[(a, b)] += xa * xr[b];
                }
            }
        }
        for a in 0..cols {
            for b in 0..a {
                normal[(a, b)] = normal[(b, a)];
            }
        }
        let eig = normal.clone().symmetric_eigenvalues();
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), &e| (l.min(e), h.max(e)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        for a in 1..cols {
            normal[(a, a)] += ridge * rows as f64;
        }
        let (normal_inv, fallback) = match normal.clone().cholesky() {
            Some(ch) => (ch.inverse(), false),
            None => {
                let svd = normal.svd(true, true);
                let inv = svd.pseudo_inverse(1e-12 * hi.max(1.0)).map_err(|e| Error::Regression {
                    node,
                    message: e.to_string(),
                })?;
                (inv, true)
            }
        };
        Ok(Self {
            rows,
            cols,
            x,
            normal_inv,
            condition,
            fallback,
        })
    }

    pub fn n_features(&self) -> usize {
        self.cols
    }

    pub fn project(&self, y: &[f64], node: usize) -> Result<Projection> {
        if y.len() != self.rows || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression {
                node,
                message: "target has wrong length or non-finite entries".into(),
            });
        }
        // The intercept is unpenalized, so fitting the centred target and
        // adding the mean back is the same projection, exact on constants.
        let n = self.rows as f64;
        let mean = y.iter().sum::<f64>() / n;
        let mut rhs = DVector::<f64>::zeros(self.cols);
        for (r, &yr) in y.iter().enumerate() {
            let xr = &self.x[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                rhs[c] += xr[c] * (yr - mean);
            }
        }
        let mut coef = &self.normal_inv * rhs;
        coef[0] += mean;
        let fitted: Vec<f64> = (0..self.rows)
            .map(|r| {
                let xr = &self.x[r * self.cols..(r + 1) * self.cols];
                xr.iter().zip(coef.iter()).map(|(a, b)| a * b).sum()
            })
            .collect();
        let tss: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        let rss: f64 = y.iter().zip(&fitted).map(|(a, b)| (a - b) * (a - b)).sum();
        let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
        Ok(Projection {
            fitted,
            coef: coef.iter().copied().collect(),
            r2,
        })
    }

    /// t-statistics of the coefficients of `y` regressed on this design.
    pub fn t_stats(&self, y: &[f64], node: usize) -> Result<Vec<f64>> {
        let proj = self.project(y, node)?;
        let dof = (self.rows as f64 - self.cols as f64).max(1.0);
        let s2 = y.iter().zip(&proj.fitted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / dof;
        Ok(proj
            .coef
            .iter()
            .enumerate()
            .map(|(c, b)| {
                let var = s2 * self.normal_inv[(c, c)];
                if var > 0.0 {
                    b / var.sqrt()
                } else if *b == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(1, 0), vec![vec![0]]);
        assert_eq!(monomials(2, 1), vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn constant_target_is_reproduced() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = Design::new(&[x], 200, 2, DEFAULT_RIDGE, 0).unwrap();
        let p = d.project(&vec![2.5; 200], 0).unwrap();
        assert!(p.fitted.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn quadratic_is_recovered_and_mean_preserved() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.713).cos() * 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v + 0.5 * v * v).collect();
        let d = Design::new(&[x], 500, 2, DEFAULT_RIDGE, 0).unwrap();
        let p = d.project(&y, 0).unwrap();
        let err = p.fitted.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "{err}");
        let my = y.iter().sum::<f64>() / 500.0;
        let mf = p.fitted.iter().sum::<f64>() / 500.0;
        assert!((my - mf).abs() < 1e-12);
    }

    #[test]
    fn constant_features_are_dropped() {
        let d = Design::new(&[vec![3.0; 10], vec![0.0; 10]], 10, 2, DEFAULT_RIDGE, 0).unwrap();
        assert_eq!(d.n_features(), 1);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let p = d.project(&y, 0).unwrap();
        assert!(p.fitted.iter().all(|v| (v - 4.5).abs() < 1e-12));
    }

    #[test]
    fn duplicated_columns_stay_solvable() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let d = Design::new(&[x.clone(), x.clone()], 100, 2, 0.0, 3).unwrap();
        let p = d.project(&x, 3).unwrap();
        let err = p.fitted.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }
}
