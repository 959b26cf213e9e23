//! Classification problems, the metered label oracle, and excess risk.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{grid_cells, BoxNd, Region};
use crate::rng::{self, TAG_MONTE_CARLO, TAG_SINGLE};

/// Declared smoothness and margin constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta0: f64,
    pub lambda: f64,
    /// Present iff the marginal satisfies the strong density assumption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    pub c3: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && self.beta >= 0.0
            && self.delta0 >= 0.0
            && self.lambda >= 1.0
            && self.c3 > 0.0
            && self.c1.is_none_or(|c| c > 0.0)
            && [self.alpha, self.beta, self.delta0, self.lambda, self.c3].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid noise parameters {self:?}")))
        }
    }
}

/// Analytic regression functions, all defined on `ℝ^d` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EtaSpec {
    Constant {
        value: f64,
    },
    /// `clamp(center_value + Σ g_i (x_i − 1/2), 0, 1)`.
    Affine {
        center_value: f64,
        gradient: Vec<f64>,
    },
    /// `base + amplitude · sin(2π frequency (x_1 − 1/2))`.
    SinusoidalBump {
        base: f64,
        amplitude: f64,
        frequency: f64,
    },
    /// Bumps of radius `2^-radius_exp` on a grid of the first `d−1` axes, on
    /// top of the ramp `x_d/2 + 1/4`.
    LowerBoundStrong {
        alpha: f64,
        radius_exp: u32,
        delta: f64,
        c: f64,
        sigma: Vec<i8>,
    },
    /// Bumps around 1/2 on a grid of `[0, 1/2]^d`, lifted smoothly to 1 at
    /// `(1, …, 1)` by a separable ramp of smoothness `ramp_order`.
    LowerBoundWeak {
        alpha: f64,
        radius_exp: u32,
        delta: f64,
        c: f64,
        sigma: Vec<i8>,
        ramp_order: u32,
    },
}

/// Radial profile shared by both lower-bound families: `CΔ/2` inside `r/2`,
/// zero beyond `r`, and the two-piece polynomial glue in between.
pub(crate) fn bump_profile(z: f64, r: f64, alpha: f64, c: f64, delta: f64) -> f64 {
    if z <= 0.5 * r {
        c * delta / 2.0
    } else if z >= r {
        0.0
    } else if z > 0.75 * r {
        c * 4f64.powf(alpha - 1.0) * (r - z).powf(alpha)
    } else {
        c * (delta / 2.0 - 4f64.powf(alpha - 1.0) * (z - 0.5 * r).powf(alpha))
    }
}

/// Smoothstep of order `n`: a polynomial from 0 to 1 on `[0,1]` with `n`
/// vanishing derivatives at both ends.
pub(crate) fn smoothstep(n: u32, u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    let n = n as u64;
    let binom = |a: u64, b: u64| -> f64 {
        (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64)
    };
    let mut s = 0.0;
    for k in 0..=n {
        s += binom(n + k, k) * binom(2 * n + 1, n - k) * (-u).powi(k as i32);
    }
    s * u.powi(n as i32 + 1)
}

/// Grid index and center of the bump cell containing `x` (clamped to the grid).
fn bump_cell(x: &[f64], r: f64, per_axis: u64) -> (usize, f64) {
    let mut k = 0usize;
    let mut stride = 1usize;
    let mut dist2 = 0.0;
    for &xi in x {
        let idx = ((xi / (2.0 * r)).floor().max(0.0) as u64).min(per_axis - 1);
        let ci = (2 * idx + 1) as f64 * r;
        dist2 += (xi - ci) * (xi - ci);
        k += idx as usize * stride;
        stride *= per_axis as usize;
    }
    (k, dist2.sqrt())
}

impl EtaSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let v = match self {
            EtaSpec::Constant { value } => *value,
            EtaSpec::Affine { center_value, gradient } => {
                center_value + gradient.iter().zip(x).map(|(g, xi)| g * (xi - 0.5)).sum::<f64>()
            }
            EtaSpec::SinusoidalBump { base, amplitude, frequency } => {
                base + amplitude * (std::f64::consts::TAU * frequency * (x[0] - 0.5)).sin()
            }
            EtaSpec::LowerBoundStrong { alpha, radius_exp, delta, c, sigma } => {
                let d = x.len();
                let r = (-(*radius_exp as f64)).exp2();
                let per_axis = 1u64 << (radius_exp - 1);
                let (k, dist) = bump_cell(&x[..d - 1], r, per_axis);
                let f = x[d - 1] / 2.0 + 0.25;
                f + sigma[k] as f64 * bump_profile(dist, r, *alpha, *c, *delta)
            }
            EtaSpec::LowerBoundWeak { alpha, radius_exp, delta, c, sigma, ramp_order } => {
                let d = x.len();
                let r = (-(*radius_exp as f64)).exp2();
                let per_axis = 1u64 << (radius_exp - 2);
                let (k, dist) = bump_cell(x, r, per_axis);
                let ramp: f64 = x
                    .iter()
                    .map(|&t| smoothstep(*ramp_order, 2.0 * t - 1.0))
                    .sum::<f64>()
                    / (2.0 * d as f64);
                0.5 + sigma[k] as f64 * bump_profile(dist, r, *alpha, *c, *delta) + ramp
            }
        };
        v.clamp(0.0, 1.0)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self {
            EtaSpec::Constant { value } if !(0.0..=1.0).contains(value) => {
                bad(format!("constant {value} outside [0,1]"))
            }
            EtaSpec::Affine { gradient, center_value } => {
                if gradient.len() != dim || !center_value.is_finite() {
                    bad(format!("affine gradient has {} entries for d = {dim}", gradient.len()))
                } else {
                    Ok(())
                }
            }
            EtaSpec::SinusoidalBump { base, amplitude, frequency } => {
                if !(*amplitude >= 0.0 && base - amplitude >= 0.0 && base + amplitude <= 1.0)
                    || !frequency.is_finite()
                {
                    bad(format!("sinusoid {base} ± {amplitude} leaves [0,1]"))
                } else {
                    Ok(())
                }
            }
            EtaSpec::LowerBoundStrong { radius_exp, sigma, .. } => {
                if dim < 2 || *radius_exp < 1 || *radius_exp > 30 {
                    return bad(format!("strong bump family needs d >= 2, got d = {dim}"));
                }
                let k = 1u128 << ((radius_exp - 1) as usize * (dim - 1)).min(127);
                if sigma.len() as u128 != k || sigma.iter().any(|s| s.abs() != 1) {
                    return bad(format!("sigma must have {k} entries of ±1"));
                }
                Ok(())
            }
            EtaSpec::LowerBoundWeak { radius_exp, sigma, .. } => {
                if *radius_exp < 2 || *radius_exp > 30 {
                    return bad(format!("weak bump radius 2^-{radius_exp} too coarse"));
                }
                let k = 1u128 << ((radius_exp - 2) as usize * dim).min(127);
                if sigma.len() as u128 != k || sigma.iter().any(|s| s.abs() != 1) {
                    return bad(format!("sigma must have {k} entries of ±1"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `∫_B η dx`.
    fn box_integral(&self, bx: &BoxNd) -> Result<f64> {
        match self {
            EtaSpec::Constant { value } => Ok(value * bx.volume()),
            EtaSpec::Affine { center_value, gradient } => {
                let h = AffineForm::new(*center_value, gradient, bx);
                let neg = h.negated();
                Ok(h.integral() - h.relu_integral(1.0) + neg.relu_integral(0.0))
            }
            EtaSpec::SinusoidalBump { base, amplitude, frequency } => {
                let omega = std::f64::consts::TAU * frequency;
                let (lo, hi) = (bx.lo[0], bx.hi[0]);
                let rest: f64 = bx.lo[1..].iter().zip(&bx.hi[1..]).map(|(a, b)| b - a).product();
                let osc = if omega == 0.0 {
                    0.0
                } else {
                    -(amplitude / omega) * ((omega * (hi - 0.5)).cos() - (omega * (lo - 0.5)).cos())
                };
                Ok(rest * (base * (hi - lo) + osc))
            }
            _ => Err(Error::UnsupportedExact(format!("{} over a box", self.name()))),
        }
    }

    /// `∫_B (2η − 1)_+ dx`.
    fn box_positive_part(&self, bx: &BoxNd) -> Result<f64> {
        match self {
            EtaSpec::Constant { value } => Ok((2.0 * value - 1.0).max(0.0) * bx.volume()),
            EtaSpec::Affine { center_value, gradient } => {
                let h = AffineForm::new(*center_value, gradient, bx);
                Ok(2.0 * (h.relu_integral(0.5) - h.relu_integral(1.0)))
            }
            EtaSpec::SinusoidalBump { base, amplitude, frequency } if *base == 0.5 => {
                let omega = std::f64::consts::TAU * frequency;
                let rest: f64 = bx.lo[1..].iter().zip(&bx.hi[1..]).map(|(a, b)| b - a).product();
                if omega == 0.0 {
                    return Ok(0.0);
                }
                let (u0, u1) = (omega * (bx.lo[0] - 0.5), omega * (bx.hi[0] - 0.5));
                let (u0, u1) = if omega > 0.0 { (u0, u1) } else { (u1, u0) };
                // ∫ 2A (sin u)_+ dx with du = ω dx
                Ok(rest * 2.0 * amplitude * (positive_sine_primitive(u1) - positive_sine_primitive(u0))
                    / omega.abs())
            }
            _ => Err(Error::UnsupportedExact(format!("{} positive part", self.name()))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EtaSpec::Constant { .. } => "constant",
            EtaSpec::Affine { .. } => "affine",
            EtaSpec::SinusoidalBump { .. } => "sinusoidal_bump",
            EtaSpec::LowerBoundStrong { .. } => "lower_bound_strong",
            EtaSpec::LowerBoundWeak { .. } => "lower_bound_weak",
        }
    }
}

/// `∫_0^u (sin s)_+ ds`.
fn positive_sine_primitive(u: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let k = (u / tau).floor();
    let rho = u - k * tau;
    let part = if rho < std::f64::consts::PI { 1.0 - rho.cos() } else { 2.0 };
    2.0 * k + part
}

/// `h(x) = h(lo) + Σ g_i (x_i − lo_i)` on a box, for exact piecewise-linear integrals.
struct AffineForm {
    at_lo: f64,
    gradient: Vec<f64>,
    widths: Vec<f64>,
}

impl AffineForm {
    fn new(center_value: f64, gradient: &[f64], bx: &BoxNd) -> Self {
        let at_lo =
            center_value + gradient.iter().zip(&bx.lo).map(|(g, l)| g * (l - 0.5)).sum::<f64>();
        let widths = bx.lo.iter().zip(&bx.hi).map(|(a, b)| (b - a).max(0.0)).collect();
        AffineForm { at_lo, gradient: gradient.to_vec(), widths }
    }

    fn negated(&self) -> Self {
        AffineForm {
            at_lo: -self.at_lo,
            gradient: self.gradient.iter().map(|g| -g).collect(),
            widths: self.widths.clone(),
        }
    }

    fn volume(&self) -> f64 {
        self.widths.iter().product()
    }

    fn integral(&self) -> f64 {
        let mid = self.at_lo
            + self.gradient.iter().zip(&self.widths).map(|(g, w)| 0.5 * g * w).sum::<f64>();
        mid * self.volume()
    }

    /// `∫_B (h − a)_+`, by the mixed finite difference of `(h−a)_+^{k+1}/((k+1)! ∏ g)`.
    fn relu_integral(&self, a: f64) -> f64 {
        let spread: f64 = self.gradient.iter().zip(&self.widths).map(|(g, w)| (g * w).abs()).sum();
        let (mut lo, mut hi) = (self.at_lo - a, self.at_lo - a);
        for (g, w) in self.gradient.iter().zip(&self.widths) {
            if g * w < 0.0 {
                lo += g * w;
            } else {
                hi += g * w;
            }
        }
        if hi <= 0.0 {
            return 0.0;
        }
        if lo >= 0.0 {
            return self.integral() - a * self.volume();
        }
        let active: Vec<usize> = (0..self.gradient.len())
            .filter(|&i| (self.gradient[i] * self.widths[i]).abs() > 1e-14 * spread)
            .collect();
        let flat_volume: f64 = (0..self.gradient.len())
            .filter(|i| !active.contains(i))
            .map(|i| self.widths[i])
            .product();
        let k = active.len();
        let degree = (k + 1) as i32;
        let factorial: f64 = (1..=k + 1).map(|i| i as f64).product();
        let prod_g: f64 = active.iter().map(|&i| self.gradient[i]).product();
        // flat directions contribute their midpoint shift
        let flat_shift: f64 = (0..self.gradient.len())
            .filter(|i| !active.contains(i))
            .map(|i| 0.5 * self.gradient[i] * self.widths[i])
            .sum();
        let mut acc = 0.0;
        for mask in 0..1u64 << k {
            let mut v = self.at_lo - a + flat_shift;
            let mut lows = 0;
            for (bit, &i) in active.iter().enumerate() {
                if (mask >> bit) & 1 == 1 {
                    v += self.gradient[i] * self.widths[i];
                } else {
                    lows += 1;
                }
            }
            let sign = if lows % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * v.max(0.0).powi(degree);
        }
        (acc / (factorial * prod_g) * flat_volume).max(0.0)
    }
}

/// Marginal distributions supported inside `[0,1]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Uniform,
    /// Cell masses of `G_depth` in lexicographic order (last axis fastest).
    PiecewiseUniform { depth: u8, weights: Vec<f64> },
    /// Mass `ball_mass` spread uniformly over equal balls, the rest on one atom.
    AtomPlusBalls { centers: Vec<Vec<f64>>, radius: f64, ball_mass: f64, atom: Vec<f64> },
}

/// A box carrying constant density, optionally with `η` known to be constant on it.
#[derive(Clone, Debug)]
struct Piece {
    bx: BoxNd,
    density: f64,
    eta: Option<f64>,
}

impl Marginal {
    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self {
            Marginal::Uniform => Ok(()),
            Marginal::PiecewiseUniform { depth, weights } => {
                let want = 1u128 << (*depth as usize * dim).min(127);
                if weights.len() as u128 != want {
                    return bad(format!("{} weights for {want} cells", weights.len()));
                }
                let total: f64 = weights.iter().sum();
                if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return bad(format!("weights must be nonnegative and sum to 1 (got {total})"));
                }
                Ok(())
            }
            Marginal::AtomPlusBalls { centers, radius, ball_mass, atom } => {
                if centers.is_empty() || !(*ball_mass > 0.0 && *ball_mass <= 1.0) || !(*radius > 0.0)
                {
                    return bad("atom-plus-balls needs centers, radius > 0, mass in (0,1]".into());
                }
                let inside = |p: &[f64], pad: f64| {
                    p.len() == dim && p.iter().all(|&v| v - pad >= 0.0 && v + pad <= 1.0)
                };
                if !inside(atom, 0.0) || !centers.iter().all(|c| inside(c, *radius)) {
                    return bad("atom-plus-balls support leaves the unit cube".into());
                }
                Ok(())
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Marginal::Uniform => (0..dim).map(|_| rng.random::<f64>()).collect(),
            Marginal::PiecewiseUniform { depth, weights } => {
                let idx = WeightedIndex::new(weights).expect("validated weights").sample(rng);
                let side = 1u64 << depth;
                let s = (-(*depth as f64)).exp2();
                let mut rem = idx as u64;
                let mut coords = vec![0u64; dim];
                for c in coords.iter_mut().rev() {
                    *c = rem % side;
                    rem /= side;
                }
                coords.iter().map(|&c| (c as f64 + rng.random::<f64>()) * s).collect()
            }
            Marginal::AtomPlusBalls { centers, radius, ball_mass, atom } => {
                if !rng.random_bool(*ball_mass) {
                    return atom.clone();
                }
                let c = &centers[rng.random_range(0..centers.len())];
                loop {
                    let x: Vec<f64> =
                        c.iter().map(|&ci| ci + radius * (2.0 * rng.random::<f64>() - 1.0)).collect();
                    let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if r2 <= radius * radius {
                        return x;
                    }
                }
            }
        }
    }

    /// Atoms as `(point, mass)` pairs.
    pub fn atoms(&self) -> Vec<(Vec<f64>, f64)> {
        match self {
            Marginal::AtomPlusBalls { atom, ball_mass, .. } if *ball_mass < 1.0 => {
                vec![(atom.clone(), 1.0 - ball_mass)]
            }
            _ => Vec::new(),
        }
    }

    /// Density pieces for exact integration.
    fn pieces(&self, dim: usize, eta: &EtaSpec) -> Result<Vec<Piece>> {
        match self {
            Marginal::Uniform => Ok(vec![Piece {
                bx: BoxNd { lo: vec![0.0; dim], hi: vec![1.0; dim] },
                density: 1.0,
                eta: None,
            }]),
            Marginal::PiecewiseUniform { depth, weights } => {
                let cells = grid_cells(*depth, dim)?;
                Ok(cells
                    .into_iter()
                    .zip(weights)
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(c, w)| Piece { density: w / c.volume(), bx: c.bounds(), eta: None })
                    .collect())
            }
            Marginal::AtomPlusBalls { centers, radius, ball_mass, .. } => {
                if dim != 1 {
                    return Err(Error::UnsupportedExact("ball marginal in d > 1".into()));
                }
                let density = ball_mass / (centers.len() as f64 * 2.0 * radius);
                let constant_inside = matches!(eta, EtaSpec::LowerBoundWeak { .. });
                Ok(centers
                    .iter()
                    .map(|c| Piece {
                        bx: BoxNd { lo: vec![c[0] - radius], hi: vec![c[0] + radius] },
                        density,
                        eta: constant_inside.then(|| eta.eval(c)),
                    })
                    .collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub dim: usize,
    pub eta: EtaSpec,
    pub marginal: Marginal,
    pub params: NoiseParams,
}

impl Problem {
    pub fn new(dim: usize, eta: EtaSpec, marginal: Marginal, params: NoiseParams) -> Result<Self> {
        let p = Problem { dim, eta, marginal, params };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        self.eta.validate(self.dim)?;
        self.marginal.validate(self.dim)?;
        self.params.validate()
    }

    pub fn eta_at(&self, x: &[f64]) -> f64 {
        self.eta.eval(x)
    }

    pub fn bayes_label(&self, x: &[f64]) -> u8 {
        u8::from(self.eta_at(x) >= 0.5)
    }

    pub fn sample_x<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginal.sample(self.dim, rng)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Problem =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(format!("problem spec: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

/// Piecewise-constant rule: 1 on `positive_region`, 0 elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub positive_region: Region,
}

impl Classifier {
    pub fn new(positive_region: Region) -> Self {
        Classifier { positive_region }
    }

    pub fn zero(dim: usize) -> Self {
        Classifier { positive_region: Region::new(dim) }
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.positive_region.contains_point(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RiskMethod {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    /// 95% normal half-width; absent for exact evaluation.
    pub half_width: Option<f64>,
}

/// `R(f) − R(f*) = ∫_{f ≠ f*} |1 − 2η| dP_X`.
pub fn excess_risk(problem: &Problem, classifier: &Classifier, method: RiskMethod) -> Result<RiskEstimate> {
    match method {
        RiskMethod::Exact => exact_risk(problem, classifier),
        RiskMethod::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidConfig("monte carlo needs at least one sample".into()));
            }
            let mut rng = rng::stream(seed, &[TAG_MONTE_CARLO]);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..samples {
                let x = problem.sample_x(&mut rng);
                let v = if classifier.predict(&x) != problem.bayes_label(&x) {
                    (1.0 - 2.0 * problem.eta_at(&x)).abs()
                } else {
                    0.0
                };
                sum += v;
                sum_sq += v * v;
            }
            let n = samples as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(1e-12);
            Ok(RiskEstimate { value: mean, half_width: Some(1.96 * (var / n).sqrt()) })
        }
    }
}

fn exact_risk(problem: &Problem, classifier: &Classifier) -> Result<RiskEstimate> {
    let eta = &problem.eta;
    let pieces = problem.marginal.pieces(problem.dim, eta)?;
    // ∫ (2η−1)_+ dP + ∫_{S¹} (1 − 2η) dP
    let positive = |p: &Piece, bx: &BoxNd| -> Result<f64> {
        match p.eta {
            Some(v) => Ok((2.0 * v - 1.0).max(0.0) * bx.volume()),
            None => eta.box_positive_part(bx),
        }
    };
    let integral = |p: &Piece, bx: &BoxNd| -> Result<f64> {
        match p.eta {
            Some(v) => Ok(v * bx.volume()),
            None => eta.box_integral(bx),
        }
    };
    let mut total = 0.0;
    for p in &pieces {
        total += p.density * positive(p, &p.bx)?;
    }
    for cell in classifier.positive_region.iter() {
        let cb = cell.bounds();
        for p in &pieces {
            if let Some(bx) = cb.intersect(&p.bx) {
                total += p.density * (bx.volume() - 2.0 * integral(p, &bx)?);
            }
        }
    }
    for (x, m) in problem.marginal.atoms() {
        let v = problem.eta_at(&x);
        total += m * (2.0 * v - 1.0).max(0.0);
        if classifier.predict(&x) == 1 {
            total += m * (1.0 - 2.0 * v);
        }
    }
    Ok(RiskEstimate { value: total.max(0.0), half_width: None })
}

#[derive(Debug)]
struct Budget {
    initial: u64,
    spent: AtomicU64,
    parent: Option<Arc<Budget>>,
}

impl Budget {
    fn reserve(&self, k: u64) -> Result<()> {
        let mut cur = self.spent.load(Ordering::SeqCst);
        loop {
            let next = cur.checked_add(k).filter(|&v| v <= self.initial).ok_or(
                Error::BudgetExhausted { initial: self.initial, spent: cur, requested: k },
            )?;
            match self.spent.compare_exchange_weak(cur, next, Ordering::SeqCst, Ordering::SeqCst) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        if let Some(parent) = &self.parent {
            if let Err(e) = parent.reserve(k) {
                self.spent.fetch_sub(k, Ordering::SeqCst);
                return Err(e);
            }
        }
        Ok(())
    }
}

/// Bernoulli label source metered by a (possibly nested) budget.
///
/// Every draw comes from a stream keyed by the oracle's namespace plus a
/// caller-supplied key, so results do not depend on query order or threads.
#[derive(Clone, Debug)]
pub struct LabelOracle {
    problem: Arc<Problem>,
    root: u64,
    namespace: Vec<u64>,
    budget: Arc<Budget>,
    counter: Arc<AtomicU64>,
}

impl LabelOracle {
    pub fn new(problem: Arc<Problem>, budget: u64, root: u64) -> Self {
        LabelOracle {
            problem,
            root,
            namespace: Vec::new(),
            budget: Arc::new(Budget { initial: budget, spent: AtomicU64::new(0), parent: None }),
            counter: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn initial_budget(&self) -> u64 {
        self.budget.initial
    }

    pub fn spent(&self) -> u64 {
        self.budget.spent.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.budget.initial - self.spent()
    }

    fn key(&self, tail: &[u64]) -> Vec<u64> {
        let mut k = self.namespace.clone();
        k.extend_from_slice(tail);
        k
    }

    /// One Bernoulli(η(x)) label; the k-th call uses counter value k.
    pub fn query_label(&self, x: &[f64]) -> Result<u8> {
        self.budget.reserve(1)?;
        let k = self.counter.fetch_add(1, Ordering::SeqCst);
        let mut r = rng::stream(self.root, &self.key(&[TAG_SINGLE, k]));
        Ok(u8::from(r.random_bool(self.problem.eta_at(x))))
    }

    /// Number of ones among `t` labels requested at `x`; all-or-nothing on budget.
    pub fn query_repeated(&self, x: &[f64], t: u64, key: &[u64]) -> Result<u64> {
        self.budget.reserve(t)?;
        let p = self.problem.eta_at(x);
        let mut r = rng::stream(self.root, &self.key(key));
        let bin = Binomial::new(t, p).map_err(|e| Error::Invariant(format!("binomial: {e}")))?;
        Ok(bin.sample(&mut r))
    }

    /// Labels at each row of a flat, row-major point matrix.
    pub fn query_points(&self, points: &[f64], key: &[u64]) -> Result<Vec<u8>> {
        let d = self.problem.dim;
        let t = (points.len() / d) as u64;
        self.budget.reserve(t)?;
        let mut r = rng::stream(self.root, &self.key(key));
        Ok(points
            .chunks_exact(d)
            .map(|x| u8::from(r.random_bool(self.problem.eta_at(x))))
            .collect())
    }

    /// Learner-side randomness sharing this oracle's seed and namespace.
    pub fn learner_stream(&self, key: &[u64]) -> ChaCha8Rng {
        rng::stream(self.root, &self.key(key))
    }

    /// Child oracle capped at `cap` labels, also charged against this oracle.
    pub fn sub_oracle(&self, cap: u64, id: u64) -> LabelOracle {
        LabelOracle {
            problem: Arc::clone(&self.problem),
            root: self.root,
            namespace: self.key(&[rng::TAG_ORACLE, id]),
            budget: Arc::new(Budget {
                initial: cap,
                spent: AtomicU64::new(0),
                parent: Some(Arc::clone(&self.budget)),
            }),
            counter: Arc::new(AtomicU64::new(0)),
        }
    }
}
