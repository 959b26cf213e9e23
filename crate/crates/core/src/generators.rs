//! Synthetic problems with known smoothness and margin constants, and
//! numerical checks of those constants.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{EtaSpec, Marginal, NoiseParams, Problem};
use crate::rng::{self, TAG_HOLDER, TAG_MARGIN, TAG_SIGMA};

/// Largest number of bump cells a lower-bound instance may carry.
pub const MAX_BUMPS: u64 = 1 << 22;

const CALIBRATION_PAIRS: usize = 4_000;
const CALIBRATION_SEED: u64 = 0x00c0_ffee;
const CALIBRATION_STEPS: usize = 30;
const CALIBRATION_SAFETY: f64 = 0.9;
const HOLDER_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SmoothFamily {
    Constant { value: f64 },
    /// Must stay inside `[0, 1]` on the whole cube, so no clamping occurs.
    Affine { center_value: f64, gradient: Vec<f64> },
    /// `1/2 + A sin(2πf(x_1 − 1/2))` with `2f` a positive integer.
    Sinusoid { amplitude: f64, frequency: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundStrongSpec {
    pub d: usize,
    pub alpha: f64,
    /// Requested bump height scale; snapped so that `Δ^{1/α}` is dyadic.
    pub delta: f64,
    #[serde(default)]
    pub sigma: Option<Vec<i8>>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundWeakSpec {
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    #[serde(default)]
    pub sigma: Option<Vec<i8>>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Snaps `Δ` to `2^{−jα}` with `j ≥ min_exp`, returning `(j, Δ_snapped)`.
pub fn snap_delta(delta: f64, alpha: f64, min_exp: u32) -> Result<(u32, f64)> {
    if !(delta > 0.0 && delta < 1.0) || !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InfeasibleDelta(delta));
    }
    let j = (-delta.log2() / alpha).round();
    if j < min_exp as f64 || j > 30.0 {
        return Err(Error::InfeasibleDelta(delta));
    }
    let j = j as u32;
    Ok((j, (-(j as f64) * alpha).exp2()))
}

fn random_sigma(seed: u64, k: usize) -> Vec<i8> {
    let mut r = rng::stream(seed, &[TAG_SIGMA]);
    (0..k).map(|_| if r.random_bool(0.5) { 1 } else { -1 }).collect()
}

fn bump_count(per_axis_exp: u32, axes: usize) -> Result<u64> {
    let bits = per_axis_exp as u64 * axes as u64;
    if bits >= 63 || (1u64 << bits) > MAX_BUMPS {
        return Err(Error::InvalidFamilyParams(format!("2^{bits} bump cells exceeds the cap")));
    }
    Ok(1 << bits)
}

fn resolve_sigma(given: &Option<Vec<i8>>, seed: u64, k: u64) -> Result<Vec<i8>> {
    match given {
        Some(s) if s.len() as u64 != k || s.iter().any(|v| v.abs() != 1) => Err(
            Error::InvalidFamilyParams(format!("sigma must hold {k} entries of ±1")),
        ),
        Some(s) => Ok(s.clone()),
        None => Ok(random_sigma(seed, k as usize)),
    }
}

/// Largest `C ≤ c_max` whose instance passes the Hölder check, times a safety factor.
fn calibrate_c(build: impl Fn(f64) -> EtaSpec, d: usize, alpha: f64, lambda: f64, c_max: f64) -> Result<f64> {
    let ok = |c: f64| {
        holder_stats(&build(c), d, alpha, CALIBRATION_PAIRS, CALIBRATION_SEED).max_ratio()
            <= lambda * (1.0 + HOLDER_TOL)
    };
    if !ok(0.0) {
        return Err(Error::InvalidFamilyParams(format!(
            "background alone exceeds lambda = {lambda} at alpha = {alpha}"
        )));
    }
    let (mut lo, mut hi) = (0.0, c_max);
    if ok(hi) {
        lo = hi;
    } else {
        for _ in 0..CALIBRATION_STEPS {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    if lo <= 0.0 {
        return Err(Error::InvalidFamilyParams("no positive bump scale fits lambda".into()));
    }
    Ok(CALIBRATION_SAFETY * lo)
}

/// Bump instance on a uniform marginal: `x_d/2 + 1/4` plus `K = 2^{(j−1)(d−1)}`
/// signed bumps of radius `2^{−j}` over the first `d − 1` axes.
pub fn make_lb_strong(spec: &LowerBoundStrongSpec, lambda: f64) -> Result<Problem> {
    let d = spec.d;
    if d < 2 {
        return Err(Error::InvalidFamilyParams("strong bump family needs d >= 2".into()));
    }
    if !(lambda >= 1.0) {
        return Err(Error::InvalidFamilyParams(format!("lambda {lambda} < 1")));
    }
    let (j, delta) = snap_delta(spec.delta, spec.alpha, 1)?;
    let k = bump_count(j - 1, d - 1)?;
    let sigma = resolve_sigma(&spec.sigma, spec.seed, k)?;
    let alpha = spec.alpha;
    let eta = |c: f64| EtaSpec::LowerBoundStrong { alpha, radius_exp: j, delta, c, sigma: sigma.clone() };
    // keeps the bumps within [1/5, 4/5]
    let c_range = (0.1 / delta).min(1.0);
    let c = match spec.c {
        Some(c) if c > 0.0 && c <= c_range => c,
        Some(c) => return Err(Error::InvalidFamilyParams(format!("C = {c} outside (0, {c_range}]"))),
        None => calibrate_c(eta, d, alpha, lambda, c_range)?,
    };
    let params =
        NoiseParams { alpha, beta: 1.0, delta0: 0.0, lambda, c1: Some(1.0), c3: 4.0 };
    Problem::new(d, eta(c), Marginal::Uniform, params)
}

/// Bump instance without the density assumption: `K = 2^{(j−2)d}` bumps tiling
/// `[0, 1/2]^d`, mass `(CΔ)^β` on the bump plateaus and the rest on `(1, …, 1)`.
pub fn make_lb_weak(spec: &LowerBoundWeakSpec, lambda: f64) -> Result<Problem> {
    let d = spec.d;
    if d == 0 || !(spec.beta >= 0.0 && spec.beta.is_finite()) || !(lambda >= 1.0) {
        return Err(Error::InvalidFamilyParams(format!(
            "weak bump family needs d >= 1, beta >= 0, lambda >= 1 (got {d}, {}, {lambda})",
            spec.beta
        )));
    }
    let (j, delta) = snap_delta(spec.delta, spec.alpha, 2)?;
    let k = bump_count(j - 2, d)?;
    let sigma = resolve_sigma(&spec.sigma, spec.seed, k)?;
    let alpha = spec.alpha;
    let ramp_order = (alpha.ceil() as u32).saturating_sub(1);
    let eta = |c: f64| EtaSpec::LowerBoundWeak {
        alpha,
        radius_exp: j,
        delta,
        c,
        sigma: sigma.clone(),
        ramp_order,
    };
    let c = match spec.c {
        Some(c) if c > 0.0 && c <= 1.0 => c,
        Some(c) => return Err(Error::InvalidFamilyParams(format!("C = {c} outside (0, 1]"))),
        None => calibrate_c(eta, d, alpha, lambda, 1.0)?,
    };
    let r = (-(j as f64)).exp2();
    let per_axis = 1u64 << (j - 2);
    let centers = (0..k)
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let i = idx % per_axis;
                    idx /= per_axis;
                    (2 * i + 1) as f64 * r
                })
                .collect()
        })
        .collect();
    let w = (c * delta).powf(spec.beta);
    let marginal = Marginal::AtomPlusBalls { centers, radius: 0.5 * r, ball_mass: w, atom: vec![1.0; d] };
    let params = NoiseParams {
        alpha,
        beta: spec.beta,
        delta0: 0.0,
        lambda,
        c1: None,
        c3: 2f64.powf(spec.beta),
    };
    Problem::new(d, eta(c), marginal, params)
}

/// Smooth control problems on the uniform marginal with exact declared constants.
///
/// `lambda` defaults to the family's own Hölder constant (at least 1); an
/// explicit value must not undercut it.
pub fn make_smooth_problem(family: &SmoothFamily, d: usize, alpha: f64, lambda: Option<f64>) -> Result<Problem> {
    let bad = |m: String| Err(Error::InvalidFamilyParams(m));
    if d == 0 || !(alpha > 0.0 && alpha.is_finite()) {
        return bad(format!("need d >= 1 and alpha > 0, got ({d}, {alpha})"));
    }
    let (eta, need, beta, delta0, c3) = match family {
        SmoothFamily::Constant { value } => {
            if !(0.0..=1.0).contains(value) {
                return bad(format!("constant {value} outside [0, 1]"));
            }
            (EtaSpec::Constant { value: *value }, 1.0, 0.0, (value - 0.5).abs(), 1.0)
        }
        SmoothFamily::Affine { center_value, gradient } => {
            if gradient.len() != d {
                return bad(format!("gradient has {} entries for d = {d}", gradient.len()));
            }
            let l1: f64 = gradient.iter().map(|g| g.abs()).sum();
            let linf = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !(linf > 0.0) || !l1.is_finite() {
                return bad("affine gradient must be nonzero and finite".into());
            }
            if center_value - l1 / 2.0 < 0.0 || center_value + l1 / 2.0 > 1.0 {
                return bad(format!("affine {center_value} ± {} leaves [0, 1]", l1 / 2.0));
            }
            let l2 = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            let need = if alpha < 1.0 { l2 * (d as f64).powf((1.0 - alpha) / 2.0) } else { l1 };
            let eta = EtaSpec::Affine { center_value: *center_value, gradient: gradient.clone() };
            (eta, need, 1.0, 0.0, 2.0 / linf)
        }
        SmoothFamily::Sinusoid { amplitude, frequency } => {
            let twice = 2.0 * frequency;
            if !(*amplitude > 0.0 && *amplitude <= 0.5) || !(twice >= 1.0 && twice.fract() == 0.0) {
                return bad(format!("sinusoid needs A in (0, 1/2] and 2f in N (A = {amplitude}, f = {frequency})"));
            }
            let eta = EtaSpec::SinusoidalBump { base: 0.5, amplitude: *amplitude, frequency: *frequency };
            (eta, sinusoid_lambda(*amplitude, *frequency, alpha), 1.0, 0.0, 1.0 / amplitude)
        }
    };
    let need = need.max(1.0);
    let lambda = match lambda {
        None => need,
        Some(l) if l >= need => l,
        Some(l) => return bad(format!("lambda {l} below the family constant {need}")),
    };
    let params = NoiseParams { alpha, beta, delta0, lambda, c1: Some(1.0), c3 };
    Problem::new(d, eta, Marginal::Uniform, params)
}

/// Hölder constant of `A sin(ωx)`: `Aω^j` for `j ≤ ⌊α⌋` and `2^{1−γ}Aω^α` at the top.
pub fn sinusoid_lambda(amplitude: f64, frequency: f64, alpha: f64) -> f64 {
    let omega = std::f64::consts::TAU * frequency;
    let k = alpha.floor() as i32;
    let gamma = alpha - k as f64;
    let derivs = (1..=k).map(|j| amplitude * omega.powi(j)).fold(amplitude, f64::max);
    let top = amplitude * omega.powf(alpha) * 2f64.powf(1.0 - gamma);
    derivs.max(top)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    /// `sup Σ_{|s|=j} |D^s η|` for `j = 0, …, ⌊α⌋`.
    pub order_sups: Vec<f64>,
    /// `sup Σ_{|s|=⌊α⌋} |D^s η(x) − D^s η(y)| / |x − y|^{α−⌊α⌋}` over the sampled pairs.
    pub top_ratio: f64,
    pub lambda: f64,
    pub pass: bool,
}

impl HolderReport {
    pub fn max_ratio(&self) -> f64 {
        self.order_sups.iter().copied().fold(self.top_ratio, f64::max)
    }
}

/// Central-difference stencil for one multi-index, as `(offsets, weight)` terms.
struct Stencil {
    terms: Vec<(Vec<f64>, f64)>,
}

fn multi_indices(d: usize, k: usize) -> Vec<Vec<usize>> {
    if d == 1 {
        return vec![vec![k]];
    }
    (0..=k)
        .rev()
        .flat_map(|first| {
            multi_indices(d - 1, k - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn stencils(d: usize, k: usize) -> Vec<Stencil> {
    let h = if k == 0 { 0.0 } else { 1e-16f64.powf(1.0 / (k as f64 + 2.0)) };
    multi_indices(d, k)
        .into_iter()
        .map(|s| {
            let mut terms = vec![(vec![0.0; d], 1.0)];
            for (axis, &si) in s.iter().enumerate() {
                if si == 0 {
                    continue;
                }
                let scale = h.powi(si as i32);
                terms = terms
                    .into_iter()
                    .flat_map(|(off, w)| {
                        (0..=si).map(move |m| {
                            let mut o = off.clone();
                            o[axis] += (si as f64 / 2.0 - m as f64) * h;
                            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                            (o, w * sign * binom(si, m) / scale)
                        })
                    })
                    .collect();
            }
            Stencil { terms }
        })
        .collect()
}

fn apply(eta: &EtaSpec, x: &[f64], st: &Stencil, buf: &mut Vec<f64>) -> f64 {
    st.terms
        .iter()
        .map(|(off, w)| {
            buf.clear();
            buf.extend(x.iter().zip(off).map(|(a, b)| a + b));
            w * eta.eval(buf)
        })
        .sum()
}

fn holder_stats(eta: &EtaSpec, d: usize, alpha: f64, pairs: usize, seed: u64) -> HolderReport {
    let k = alpha.floor() as usize;
    let gamma = alpha - k as f64;
    let by_order: Vec<Vec<Stencil>> = (0..=k).map(|j| stencils(d, j)).collect();
    let max_dist = (d as f64).sqrt();
    let (ln_lo, ln_hi) = (1e-4f64.ln(), max_dist.ln());
    let merge = |mut a: (Vec<f64>, f64), b: (Vec<f64>, f64)| {
        for (x, y) in a.0.iter_mut().zip(&b.0) {
            *x = x.max(*y);
        }
        a.1 = a.1.max(b.1);
        a
    };
    let zero = || (vec![0.0; k + 1], 0.0);
    let (order_sups, top_ratio) = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[TAG_HOLDER, i as u64]);
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let dir: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            let t = r.random_range(ln_lo..ln_hi).exp();
            let y: Vec<f64> =
                x.iter().zip(&dir).map(|(a, u)| (a + t * u / norm).clamp(0.0, 1.0)).collect();
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let mut buf = Vec::with_capacity(d);
            let mut sups = vec![0.0; k + 1];
            let mut top = 0.0;
            for (j, sts) in by_order.iter().enumerate() {
                let dx: Vec<f64> = sts.iter().map(|s| apply(eta, &x, s, &mut buf)).collect();
                let dy: Vec<f64> = sts.iter().map(|s| apply(eta, &y, s, &mut buf)).collect();
                let sx: f64 = dx.iter().map(|v| v.abs()).sum();
                let sy: f64 = dy.iter().map(|v| v.abs()).sum();
                sups[j] = sx.max(sy);
                if j == k && dist > 0.0 {
                    let diff: f64 = dx.iter().zip(&dy).map(|(a, b)| (a - b).abs()).sum();
                    top = diff / dist.powf(gamma);
                }
            }
            (sups, top)
        })
        .reduce(zero, merge);
    HolderReport { order_sups, top_ratio, lambda: f64::NAN, pass: false }
}

/// Empirical Hölder constants of `η` on random pairs with log-uniform separation.
/// Derivatives use central differences.
pub fn verify_holder(problem: &Problem, alpha: f64, lambda: f64, pairs: usize, seed: u64) -> HolderReport {
    let mut rep = holder_stats(&problem.eta, problem.dim, alpha, pairs, seed);
    rep.lambda = lambda;
    rep.pass = rep.max_ratio() <= lambda * (1.0 + HOLDER_TOL);
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginPoint {
    pub eps: f64,
    /// Empirical `P(|η − 1/2| ≤ Δ₀ + ε)`.
    pub empirical: f64,
    /// `c₃ε^β` plus three binomial standard deviations.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub curve: Vec<MarginPoint>,
    /// Empirical mass of `{0 < |η − 1/2| < Δ₀}`.
    pub band_mass: f64,
    pub pass: bool,
}

const MARGIN_GRID: usize = 48;
const MARGIN_CHUNK: usize = 4096;

/// Checks `P(|η − 1/2| ≤ Δ₀ + ε) ≤ c₃ε^β` on a log grid of `ε ∈ [10⁻⁴, 1]`.
pub fn verify_margin(problem: &Problem, beta: f64, delta0: f64, c3: f64, samples: usize, seed: u64) -> MarginReport {
    let chunks = samples.div_ceil(MARGIN_CHUNK);
    let mut margins: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut r = rng::stream(seed, &[TAG_MARGIN, c as u64]);
            let len = MARGIN_CHUNK.min(samples - c * MARGIN_CHUNK);
            (0..len)
                .map(|_| (problem.eta_at(&problem.sample_x(&mut r)) - 0.5).abs())
                .collect::<Vec<_>>()
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let n = margins.len().max(1) as f64;
    let below = |v: f64| margins.partition_point(|&m| m <= v) as f64 / n;
    let band = margins.iter().filter(|&&m| m > 0.0 && m < delta0).count() as f64 / n;
    let curve: Vec<MarginPoint> = (0..MARGIN_GRID)
        .map(|i| {
            let eps = 10f64.powf(-4.0 + 4.0 * i as f64 / (MARGIN_GRID - 1) as f64);
            let b = (c3 * eps.powf(beta)).min(1.0);
            MarginPoint { eps, empirical: below(delta0 + eps), bound: b + 3.0 * (b * (1.0 - b) / n).sqrt() }
        })
        .collect();
    let pass = band == 0.0 && curve.iter().all(|p| p.empirical <= p.bound);
    MarginReport { curve, band_mass: band, pass }
}

/// Runs both checks at the problem's own declared parameters.
pub fn self_check(problem: &Problem, pairs: usize, samples: usize, seed: u64) -> (HolderReport, MarginReport) {
    let p = &problem.params;
    (
        verify_holder(problem, p.alpha, p.lambda, pairs, seed),
        verify_margin(problem, p.beta, p.delta0, p.c3, samples, seed),
    )
}
