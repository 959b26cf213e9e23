//! Higher-order Legendre convolution kernels.
//!
//! The one-dimensional kernel of order `m = ⌊α⌋ + 1` is
//! `k̃(u) = Σ_{j≤m} φ_j(0) φ_j(u)` on `[-1, 1]`, where `φ_j` are the Legendre
//! polynomials normalized in `L²[-1,1]`. It integrates to one and annihilates
//! the monomials `u, …, u^m`.

use crate::error::{Error, Result};
use crate::grid::Cell;

#[derive(Clone, Debug, PartialEq)]
pub struct LegendreKernel {
    alpha: f64,
    dim: usize,
    order: usize,
    /// `φ_j(0)` for `j = 0..=order`.
    weights: Vec<f64>,
}

/// Orthonormal Legendre values `φ_0(u), …, φ_m(u)` via the three-term recurrence.
fn orthonormal_legendre(u: f64, m: usize, out: &mut [f64]) {
    let mut p_prev = 1.0;
    let mut p = u;
    out[0] = (0.5f64).sqrt();
    if m >= 1 {
        out[1] = (1.5f64).sqrt() * u;
    }
    for j in 1..m {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0) * u * p - jf * p_prev) / (jf + 1.0);
        p_prev = p;
        p = next;
        out[j + 1] = ((2.0 * jf + 3.0) / 2.0).sqrt() * p;
    }
}

impl LegendreKernel {
    pub fn new(alpha: f64, dim: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel needs alpha > 0 and d >= 1, got ({alpha}, {dim})"
            )));
        }
        let order = alpha.floor() as usize + 1;
        let mut weights = vec![0.0; order + 1];
        orthonormal_legendre(0.0, order, &mut weights);
        Ok(LegendreKernel { alpha, dim, order, weights })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `k̃_α(u)`, zero outside `[-1, 1]`.
    pub fn kernel_1d(&self, u: f64) -> f64 {
        if !(-1.0..=1.0).contains(&u) {
            return 0.0;
        }
        let mut phi = [0.0; 64];
        orthonormal_legendre(u, self.order, &mut phi);
        self.weights.iter().zip(&phi).map(|(w, p)| w * p).sum()
    }

    /// `K_α(z) = ∏_i k̃_α(z_i)`.
    pub fn kernel_product(&self, z: &[f64]) -> f64 {
        let mut acc = 1.0;
        for &zi in z {
            acc *= self.kernel_1d(zi);
            if acc == 0.0 {
                break;
            }
        }
        acc
    }

    /// Sup bound `(2α + 2)^d` on `|K_α|`.
    pub fn bound(&self) -> f64 {
        (2.0 * self.alpha + 2.0).powi(self.dim as i32)
    }

    /// `(3^d / t) Σ_i K_α((x − X_i) 2^L) Y_i` for samples drawn on the inflated cell.
    pub fn kernel_estimate(&self, cell: &Cell, samples: &[(Vec<f64>, u8)], x: &[f64]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        let scale = (cell.depth() as f64).exp2();
        let mut z = vec![0.0; x.len()];
        let mut sum = 0.0;
        for (p, y) in samples {
            if *y == 0 {
                continue;
            }
            for ((zi, xi), pi) in z.iter_mut().zip(x).zip(p) {
                *zi = (xi - pi) * scale;
            }
            sum += self.kernel_product(&z);
        }
        Ok(self.normalization() * sum / samples.len() as f64)
    }

    /// Volume of the inflated cell times `2^{Ld}`.
    pub fn normalization(&self) -> f64 {
        3f64.powi(self.dim as i32)
    }

    /// Estimates at many targets from a flat, row-major sample matrix.
    pub(crate) fn estimate_many(
        &self,
        depth: u8,
        points: &[f64],
        labels: &[u8],
        targets: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let t = labels.len();
        if t == 0 {
            return Err(Error::EmptySample);
        }
        let d = self.dim;
        let scale = (depth as f64).exp2();
        let positives: Vec<&[f64]> = points
            .chunks_exact(d)
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(p, _)| p)
            .collect();
        let norm = self.normalization() / t as f64;
        Ok(targets
            .iter()
            .map(|x| {
                let s: f64 = positives
                    .iter()
                    .map(|p| {
                        let mut acc = 1.0;
                        for i in 0..d {
                            acc *= self.kernel_1d((x[i] - p[i]) * scale);
                            if acc == 0.0 {
                                break;
                            }
                        }
                        acc
                    })
                    .sum();
                s * norm
            })
            .collect())
    }
}
