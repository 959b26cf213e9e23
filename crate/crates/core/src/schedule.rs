//! Closed-form sampling schedule and correctness thresholds.
//!
//! All quantities are evaluated in log space where possible: `log(1/δ_l)`
//! grows linearly in `l` and would underflow `δ_l` itself long before the
//! depth cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias bound `b_{l,α} = λ d^{(α∧1)/2} 2^{-lα}`.
pub fn bias_bound(l: u8, alpha: f64, lambda: f64, d: usize) -> f64 {
    lambda * (d as f64).powf(alpha.min(1.0) / 2.0) * (-(l as f64) * alpha).exp2()
}

/// `log(1/δ_{l,α})` with `δ_{l,α} = δ 2^{-l(d+1)(α∨1)}`.
pub fn log_inv_delta_l(l: u8, alpha: f64, d: usize, delta: f64) -> f64 {
    -delta.ln() + l as f64 * (d as f64 + 1.0) * alpha.max(1.0) * std::f64::consts::LN_2
}

pub fn delta_l(l: u8, alpha: f64, d: usize, delta: f64) -> f64 {
    (-log_inv_delta_l(l, alpha, d, delta)).exp()
}

/// `t_{l,α}` before rounding up.
pub fn samples_per_cell_real(l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> f64 {
    let b = bias_bound(l, alpha, lambda, d);
    let log_term = log_inv_delta_l(l, alpha, d, delta);
    if alpha <= 1.0 {
        log_term / (2.0 * b * b)
    } else {
        4f64.powi(2 * d as i32 + 1) * (alpha + 1.0).powi(2 * d as i32) * log_term / (b * b)
    }
}

/// `t_{l,α} = ⌈·⌉`, failing when the count leaves the `u64` range.
pub fn samples_per_cell(l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> Result<u64> {
    let t = samples_per_cell_real(l, alpha, lambda, d, delta).ceil();
    // 2^63 keeps products with cell counts checkable without wrapping
    if !t.is_finite() || t >= 9.223_372_036_854_776e18 {
        return Err(Error::Overflow(format!("t at depth {l}, alpha {alpha} is {t:e}")));
    }
    Ok(t.max(1.0) as u64)
}

/// `B_{l,α}` with the un-rounded `t_{l,α∧1}`; equals `4 b_{l,α∧1}`.
pub fn labeling_threshold_real(l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> f64 {
    let a = alpha.min(1.0);
    let t = samples_per_cell_real(l, a, lambda, d, delta);
    threshold_with_t(l, a, lambda, d, delta, t)
}

/// `B_{l,α}` with the integer sample count actually drawn.
pub fn labeling_threshold(l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> Result<f64> {
    let a = alpha.min(1.0);
    let t = samples_per_cell(l, a, lambda, d, delta)?;
    Ok(threshold_with_t(l, a, lambda, d, delta, t as f64))
}

fn threshold_with_t(l: u8, a: f64, lambda: f64, d: usize, delta: f64, t: f64) -> f64 {
    let dev = (log_inv_delta_l(l, a, d, delta) / (2.0 * t)).sqrt();
    2.0 * (dev + bias_bound(l, a, lambda, d))
}

/// Threshold `4^{d+1} λ 2^{-αL}` of the kernel labeling pass.
pub fn kernel_threshold(depth: u8, alpha: f64, lambda: f64, d: usize) -> f64 {
    4f64.powi(d as i32 + 1) * lambda * (-alpha * depth as f64).exp2()
}

/// Everything the learner needs at one depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSchedule {
    pub l: u8,
    pub alpha: f64,
    pub lambda: f64,
    pub d: usize,
    pub delta: f64,
    /// `b_{l,α}`.
    pub b: f64,
    /// `δ_{l,α}` (may underflow to 0 at large depths; the sampler uses log space).
    pub delta_l: f64,
    /// `t_{l,α}`, charged by the loop guard.
    pub t: u64,
    /// `t_{l,α∧1}`, drawn per active cell.
    pub t_center: u64,
    /// `B_{l,α}` with the rounded `t_{l,α∧1}`.
    #[serde(rename = "B")]
    pub threshold: f64,
}

impl DepthSchedule {
    pub fn new(l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> Result<Self> {
        validate(alpha, lambda, d, delta)?;
        Ok(DepthSchedule {
            l,
            alpha,
            lambda,
            d,
            delta,
            b: bias_bound(l, alpha, lambda, d),
            delta_l: delta_l(l, alpha, d, delta),
            t: samples_per_cell(l, alpha, lambda, d, delta)?,
            t_center: samples_per_cell(l, alpha.min(1.0), lambda, d, delta)?,
            threshold: labeling_threshold(l, alpha, lambda, d, delta)?,
        })
    }
}

pub(crate) fn validate(alpha: f64, lambda: f64, d: usize, delta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("alpha must be positive, got {alpha}")));
    }
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be at least 1, got {lambda}")));
    }
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be positive".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!("delta must lie in (0,1), got {delta}")));
    }
    Ok(())
}

/// Marginal regime for the correctness threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    /// Near-uniform marginal with constants `c1` (cell mass) and `c3` (margin).
    Strong { c1: f64, c3: f64 },
    Unrestricted,
}

/// The margin `Δ*` above which the fixed-smoothness learner labels correctly.
pub fn compute_delta_threshold(
    n: u64,
    delta: f64,
    alpha: f64,
    lambda: f64,
    d: usize,
    beta: f64,
    density: Density,
) -> f64 {
    let nf = n as f64;
    let df = d as f64;
    let log_term = (2.0 * df * lambda * lambda * nf / delta).ln();
    match density {
        Density::Strong { c1, c3 } => {
            let c5 = 2f64.powf(alpha.min(1.0) * beta) * ((c3 / c1) * 8f64.powf(beta)).max(1.0);
            if alpha <= 1.0 {
                let c7 = 2.0 * (df + 1.0) * c5;
                let denom = 2.0 * alpha + (df - alpha * beta).max(0.0);
                let lam = lambda.powf((df / alpha).max(beta));
                6.0 * df.sqrt() * (c7 * lam * log_term / (denom * alpha * nf)).powf(alpha / denom)
            } else {
                let c8 = 4f64.powi(2 * d as i32 + 1)
                    * (alpha + 1.0).powf(2.0 * alpha)
                    * (df + 1.0)
                    * c5;
                let denom = 2.0 * alpha + (df - beta).max(0.0);
                let lam = lambda.powf(df.max(beta));
                4f64.powi(d as i32 + 2) * (c8 * lam * log_term / nf).powf(alpha / denom)
            }
        }
        Density::Unrestricted => {
            let denom = 2.0 * alpha + df;
            let lam = lambda.powf(df / denom);
            if alpha <= 1.0 {
                6.0 * df.sqrt()
                    * lam
                    * (2.0 * (df + 1.0) * log_term / (denom * alpha * nf)).powf(alpha / denom)
            } else {
                let c = 4f64.powi(2 * d as i32 + 1) * (alpha + 1.0).powi(2 * d as i32) * (df + 1.0);
                4f64.powi(d as i32 + 2) * lam * (c * log_term / nf).powf(alpha / denom)
            }
        }
    }
}

/// Exponent of `1/n` in `Δ*`.
pub fn delta_threshold_exponent(alpha: f64, d: usize, beta: f64, density: Density) -> f64 {
    let df = d as f64;
    match density {
        Density::Strong { .. } if alpha <= 1.0 => alpha / (2.0 * alpha + (df - alpha * beta).max(0.0)),
        Density::Strong { .. } => alpha / (2.0 * alpha + (df - beta).max(0.0)),
        Density::Unrestricted => alpha / (2.0 * alpha + df),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn samples_formula_alpha_one() {
        let b = bias_bound(2, 1.0, 1.0, 1);
        assert_eq!(b, 0.25);
        assert!((delta_l(2, 1.0, 1, 0.05) - 0.003_125).abs() < 1e-15);
        let log_term = (1.0f64 / 0.003_125).ln();
        let expected = (log_term / (2.0 * 0.0625)).ceil() as u64;
        assert_eq!(expected, 47);
        assert_eq!(samples_per_cell(2, 1.0, 1.0, 1, 0.05).unwrap(), 47);
    }

    #[test]
    fn samples_formula_alpha_two() {
        assert_eq!(bias_bound(1, 2.0, 1.0, 1), 0.25);
        let log_term = (16.0f64 / 0.05).ln();
        let expected = (64.0 * 9.0 * log_term / 0.0625).ceil() as u64;
        assert_eq!(samples_per_cell(1, 2.0, 1.0, 1, 0.05).unwrap(), expected);
        // 576 · ln(320) / 0.0625 = 53160.85
        assert_eq!(expected, 53_161);
    }

    #[test]
    fn threshold_examples() {
        assert!((labeling_threshold_real(2, 1.0, 1.0, 1, 0.05) - 1.0).abs() < 1e-12);
        let runtime = labeling_threshold(2, 1.0, 1.0, 1, 0.05).unwrap();
        assert!(runtime <= 1.0 && runtime > 0.99);
        for l in 1..20 {
            assert!(
                labeling_threshold_real(l + 1, 0.7, 2.0, 3, 0.1)
                    < labeling_threshold_real(l, 0.7, 2.0, 3, 0.1)
            );
        }
    }

    #[test]
    fn overflow_is_reported() {
        assert!(matches!(samples_per_cell(62, 3.0, 1.0, 4, 0.05), Err(Error::Overflow(_))));
    }

    #[test]
    fn kernel_threshold_value() {
        assert_eq!(kernel_threshold(3, 2.0, 1.0, 1), 16.0 / 64.0);
    }

    #[test]
    fn delta_threshold_exponents() {
        let strong = Density::Strong { c1: 1.0, c3: 5.0 };
        assert_eq!(delta_threshold_exponent(1.0, 1, 0.0, strong), 1.0 / 3.0);
        assert_eq!(delta_threshold_exponent(0.5, 1, 3.0, strong), 0.5);
        // slope of the closed form in n once its log factor is divided out
        for (alpha, beta, d, dens, e) in [
            (1.0, 0.0, 1, strong, 1.0 / 3.0),
            (0.5, 3.0, 1, strong, 0.5),
            (2.0, 1.0, 2, strong, 2.0 / 5.0),
            (1.0, 1.0, 2, Density::Unrestricted, 0.25),
            (1.5, 1.0, 1, Density::Unrestricted, 0.375),
        ] {
            let g = |n: f64| {
                let log_term = (2.0 * d as f64 * n / 0.05).ln();
                compute_delta_threshold(n as u64, 0.05, alpha, 1.0, d, beta, dens).ln()
                    - e * log_term.ln()
            };
            let (n1, n2) = (1e12f64, 1e14f64);
            let slope = (g(n2) - g(n1)) / (n2.ln() - n1.ln());
            assert!((slope + e).abs() < 1e-9, "({alpha},{beta},{d}) slope {slope} want -{e}");
        }
    }

    #[test]
    fn delta_threshold_vanishes() {
        let dens = Density::Strong { c1: 1.0, c3: 5.0 };
        let mut last = f64::INFINITY;
        for k in 2..62 {
            let v = compute_delta_threshold(1u64 << k, 0.05, 1.0, 1.0, 1, 1.0, dens);
            assert!(v.is_finite() && v > 0.0);
            if k > 4 {
                assert!(v < last);
            }
            last = v;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn schedule_struct() {
        let s = DepthSchedule::new(3, 2.0, 1.0, 1, 0.05).unwrap();
        assert_eq!(s.t_center, samples_per_cell(3, 1.0, 1.0, 1, 0.05).unwrap());
        assert!(s.t > s.t_center);
        assert!(DepthSchedule::new(1, 1.0, 0.5, 1, 0.05).is_err());
        assert!(DepthSchedule::new(1, 1.0, 1.0, 1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn threshold_identity(alpha in 0.05f64..=1.0, lambda in 1.0f64..20.0, d in 1usize..6,
                              l in 1u8..40, delta in 1e-6f64..0.99) {
            let b = labeling_threshold_real(l, alpha, lambda, d, delta);
            let four_b = 4.0 * bias_bound(l, alpha, lambda, d);
            prop_assert!(((b - four_b) / four_b).abs() <= 1e-12);
        }

        #[test]
        fn quantities_positive(alpha in 0.05f64..4.0, lambda in 1.0f64..10.0, d in 1usize..4,
                               l in 1u8..12, delta in 1e-6f64..0.99) {
            if samples_per_cell(l, alpha, lambda, d, delta).is_err() {
                prop_assert!(matches!(DepthSchedule::new(l, alpha, lambda, d, delta), Err(Error::Overflow(_))));
                return Ok(());
            }
            let s = DepthSchedule::new(l, alpha, lambda, d, delta).unwrap();
            prop_assert!(s.b > 0.0 && s.b.is_finite());
            prop_assert!(s.t >= 1 && s.t_center >= 1);
            prop_assert!(s.threshold > 0.0 && s.threshold.is_finite());
        }

        #[test]
        fn clipped_alpha_agrees(alpha in 0.05f64..=1.0, l in 1u8..30, d in 1usize..5) {
            prop_assert_eq!(samples_per_cell(l, alpha, 1.5, d, 0.05).unwrap(),
                            samples_per_cell(l, alpha.min(1.0), 1.5, d, 0.05).unwrap());
        }

        #[test]
        fn t_nonincreasing_in_delta(d1 in 1e-6f64..0.5, frac in 0.0f64..1.0, alpha in 0.1f64..3.0) {
            let d2 = d1 + (0.99 - d1) * frac;
            prop_assert!(samples_per_cell(4, alpha, 1.0, 2, d2).unwrap()
                         <= samples_per_cell(4, alpha, 1.0, 2, d1).unwrap());
        }
    }
}
