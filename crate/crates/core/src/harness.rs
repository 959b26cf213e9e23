//! Experiment orchestration: single runs, budget sweeps, correctness audits
//! and rate-exponent fits.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{run_adaptive, AdaptiveConfig};
use crate::error::{Error, Result};
use crate::grid::{Cell, Region, MAX_DEPTH};
use crate::problem::{excess_risk, Classifier, LabelOracle, Problem, RiskMethod};
use crate::rng::{self, TAG_BOOTSTRAP, TAG_EVAL};
use crate::subroutine::{run_subroutine, DyadicSubroutine, SubroutineConfig};

/// Column order of the per-run CSV table.
pub const CSV_HEADER: [&str; 9] =
    ["n", "seed", "spent", "depth_L", "risk", "risk_ci", "s0_cells", "s1_cells", "wall_ms"];

/// Column order of the quantile table used for plotting.
pub const PLOT_HEADER: [&str; 4] = ["n", "q25", "q50", "q75"];

const AUDIT_MAX_POINTS: u64 = 1 << 28;
const WITNESS_LIMIT: usize = 8;
const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Subroutine,
    Adaptive,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaChoice {
    /// The problem's declared constant.
    #[default]
    Declared,
    Fixed { value: f64 },
    /// `max(1, ln n)`, for runs that do not know the constant.
    LogSurrogate,
}

impl LambdaChoice {
    pub fn resolve(&self, problem: &Problem, n: u64) -> f64 {
        match self {
            LambdaChoice::Declared => problem.params.lambda,
            LambdaChoice::Fixed { value } => *value,
            LambdaChoice::LogSurrogate => (n as f64).ln().max(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Exact when the problem supports it, Monte Carlo otherwise.
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: EvalMethod,
    pub samples: u64,
}

impl Default for Evaluation {
    fn default() -> Self {
        Evaluation { method: EvalMethod::Auto, samples: 200_000 }
    }
}

/// One run: a problem, a learner, a budget and a seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub problem: Problem,
    pub algorithm: Algorithm,
    pub n: u64,
    pub seed: u64,
    pub delta: f64,
    /// Smoothness handed to the subroutine; defaults to the declared value.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub lambda: LambdaChoice,
    #[serde(default)]
    pub evaluation: Evaluation,
    /// Record wall-clock time. Off by default so records replay byte for byte.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub problem: Problem,
    pub algorithm: Algorithm,
    pub budgets: Vec<u64>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub lambda: LambdaChoice,
    #[serde(default)]
    pub evaluation: Evaluation,
    #[serde(default)]
    pub timing: bool,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("budgets must be nonempty and strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        self.problem.validate()
    }

    /// Runs in `(n, seed)` order.
    pub fn runs(&self) -> Vec<RunSpec> {
        self.budgets
            .iter()
            .flat_map(|&n| {
                self.seeds.iter().map(move |&seed| RunSpec {
                    problem: self.problem.clone(),
                    algorithm: self.algorithm,
                    n,
                    seed,
                    delta: self.delta,
                    alpha: self.alpha,
                    lambda: self.lambda.clone(),
                    evaluation: self.evaluation,
                    timing: self.timing,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    pub problem: String,
    pub n: u64,
    pub seed: u64,
    pub delta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub spent: u64,
    /// The budget could not pay for the first depth; the classifier is all zeros.
    pub infeasible: bool,
    #[serde(rename = "depth_L")]
    pub depth_l: u8,
    pub s0_cells: usize,
    pub s1_cells: usize,
    pub s0_volume: f64,
    pub s1_volume: f64,
    pub risk: f64,
    /// Half-width of the 95% interval; absent for exact evaluation.
    pub risk_ci: Option<f64>,
    pub risk_method: RiskKind,
    /// `|𝒜_l|` per depth (subroutine runs only).
    pub active_counts: Vec<u64>,
    /// Phases that could afford their first depth (adaptive runs only).
    pub feasible_phases: Option<usize>,
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Exact,
    MonteCarlo,
}

impl RunRecord {
    pub fn csv_fields(&self) -> [String; 9] {
        let opt = |v: Option<String>| v.unwrap_or_default();
        [
            self.n.to_string(),
            self.seed.to_string(),
            self.spent.to_string(),
            self.depth_l.to_string(),
            self.risk.to_string(),
            opt(self.risk_ci.map(|v| v.to_string())),
            self.s0_cells.to_string(),
            self.s1_cells.to_string(),
            opt(self.wall_ms.map(|v| v.to_string())),
        ]
    }
}

/// A record together with the label sets it summarizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub record: RunRecord,
    pub s0: Region,
    pub s1: Region,
}

/// Excess risk of a classifier, falling back to Monte Carlo when exact
/// integration is unavailable and the evaluation allows it.
pub fn evaluate(problem: &Problem, classifier: &Classifier, eval: Evaluation, seed: u64) -> Result<(f64, Option<f64>, RiskKind)> {
    let mc = RiskMethod::MonteCarlo { samples: eval.samples, seed: rng::derive_seed(seed, &[TAG_EVAL]) };
    let est = match eval.method {
        EvalMethod::Exact => excess_risk(problem, classifier, RiskMethod::Exact)
            .map(|e| (e, RiskKind::Exact))?,
        EvalMethod::MonteCarlo => (excess_risk(problem, classifier, mc)?, RiskKind::MonteCarlo),
        EvalMethod::Auto => match excess_risk(problem, classifier, RiskMethod::Exact) {
            Ok(e) => (e, RiskKind::Exact),
            Err(Error::UnsupportedExact(_)) => (excess_risk(problem, classifier, mc)?, RiskKind::MonteCarlo),
            Err(e) => return Err(e),
        },
    };
    let (e, kind) = est;
    let value = if e.value > 0.0 { e.value } else { 0.0 };
    Ok((value, e.half_width, kind))
}

pub fn run_once(spec: &RunSpec) -> Result<RunOutput> {
    spec.problem.validate()?;
    let started = Instant::now();
    let problem = Arc::new(spec.problem.clone());
    let d = problem.dim;
    let alpha = spec.alpha.unwrap_or(problem.params.alpha);
    let lambda = spec.lambda.resolve(&problem, spec.n);
    let oracle = LabelOracle::new(Arc::clone(&problem), spec.n, spec.seed);

    let (s0, s1, depth_l, active_counts, infeasible, feasible_phases) = match spec.algorithm {
        Algorithm::Subroutine => {
            let cfg = SubroutineConfig { n: spec.n, delta: spec.delta, alpha, lambda };
            match run_subroutine(&oracle, &cfg) {
                Ok(out) => (out.s0, out.s1, out.final_depth, out.active_counts, false, None),
                Err(Error::InfeasibleBudget { .. }) => {
                    (Region::new(d), Region::new(d), 0, Vec::new(), true, None)
                }
                Err(e) => return Err(e),
            }
        }
        Algorithm::Adaptive => {
            let cfg = AdaptiveConfig::new(spec.n, spec.delta, lambda)?;
            let out = run_adaptive(&oracle, &cfg, &DyadicSubroutine)?;
            let feasible = out.history.iter().filter(|h| !h.infeasible).count();
            let depth = out.history.iter().map(|h| h.final_depth).max().unwrap_or(0);
            (out.s0, out.s1, depth, Vec::new(), feasible == 0, Some(feasible))
        }
    };

    let classifier = Classifier::new(s1.clone());
    let (risk, risk_ci, risk_method) = evaluate(&problem, &classifier, spec.evaluation, spec.seed)?;
    let record = RunRecord {
        algorithm: spec.algorithm,
        problem: problem.eta.name().to_string(),
        n: spec.n,
        seed: spec.seed,
        delta: spec.delta,
        alpha,
        lambda,
        spent: oracle.spent(),
        infeasible,
        depth_l,
        s0_cells: s0.len(),
        s1_cells: s1.len(),
        s0_volume: s0.volume(),
        s1_volume: s1.volume(),
        risk,
        risk_ci,
        risk_method,
        active_counts,
        feasible_phases,
        wall_ms: spec.timing.then(|| started.elapsed().as_millis() as u64),
    };
    Ok(RunOutput { record, s0, s1 })
}

/// Runs every `(n, seed)` pair on a pool of `threads` workers (0 = rayon default).
pub fn run_sweep(config: &SweepConfig, threads: usize) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let runs = config.runs();
    let mut records: Vec<RunRecord> = pool.install(|| {
        runs.par_iter().map(|r| run_once(r).map(|o| o.record)).collect::<Result<Vec<_>>>()
    })?;
    records.sort_by_key(|r| (r.n, r.seed));
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    /// `η − 1/2 > Δ` outside `S¹`.
    MissedPositive,
    /// `1/2 − η > Δ` outside `S⁰`.
    MissedNegative,
    /// A point of `S¹` with `η ≤ 1/2`.
    WrongPositive,
    /// A point of `S⁰` with `η ≥ 1/2`.
    WrongNegative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub point: Vec<f64>,
    pub eta: f64,
    pub violation: Violation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    /// Every point with margin above `Δ` carries its Bayes label.
    pub weakly_correct: bool,
    /// `S¹ ⊂ {η > 1/2}` and `S⁰ ⊂ {η < 1/2}`.
    pub correct: bool,
    pub grid_depth: u8,
    pub points_checked: u64,
    pub witnesses: Vec<Witness>,
}

fn classify(eta: f64, in0: bool, in1: bool, delta: f64) -> Option<Violation> {
    if in1 && eta <= 0.5 {
        Some(Violation::WrongPositive)
    } else if in0 && eta >= 0.5 {
        Some(Violation::WrongNegative)
    } else if !in1 && eta - 0.5 > delta {
        Some(Violation::MissedPositive)
    } else if !in0 && 0.5 - eta > delta {
        Some(Violation::MissedNegative)
    } else {
        None
    }
}

/// Checks the four inclusions at the centers of `G_grid_depth` and at the
/// atoms of the marginal. `grid_depth` defaults to the deepest region cell plus two.
pub fn check_correct(
    problem: &Problem,
    s0: &Region,
    s1: &Region,
    delta: f64,
    grid_depth: Option<u8>,
) -> Result<CorrectnessReport> {
    let d = problem.dim;
    if s0.dim() != d || s1.dim() != d {
        return Err(Error::InvalidConfig("region dimension differs from the problem".into()));
    }
    let region_depth = s0.max_depth().into_iter().chain(s1.max_depth()).max().unwrap_or(0);
    let grid_depth = grid_depth.unwrap_or((region_depth + 2).min(MAX_DEPTH));
    if grid_depth < region_depth {
        return Err(Error::ResolutionTooCoarse { grid_depth, region_depth });
    }
    let bits = grid_depth as u64 * d as u64;
    if bits > 63 || (1u64 << bits) > AUDIT_MAX_POINTS {
        return Err(Error::InvalidConfig(format!("audit grid of 2^{bits} points is too large")));
    }
    let total = 1u64 << bits;
    let side = 1u64 << grid_depth;
    let chunk = 1u64 << 14;
    let check = |x: &[f64]| {
        let eta = problem.eta_at(x);
        classify(eta, s0.contains_point(x), s1.contains_point(x), delta)
            .map(|violation| Witness { point: x.to_vec(), eta, violation })
    };
    let per_chunk: Vec<Vec<Witness>> = (0..total.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut found = Vec::new();
            let mut coords = vec![0u64; d];
            for idx in c * chunk..((c + 1) * chunk).min(total) {
                let mut rem = idx;
                for v in coords.iter_mut().rev() {
                    *v = rem % side;
                    rem /= side;
                }
                let center = Cell::new(grid_depth, coords.clone()).expect("in range").center();
                if let Some(w) = check(&center) {
                    found.push(w);
                    if found.len() >= 4 * WITNESS_LIMIT {
                        break;
                    }
                }
            }
            found
        })
        .collect();
    let mut all: Vec<Witness> = per_chunk.into_iter().flatten().collect();
    all.extend(problem.marginal.atoms().iter().filter_map(|(p, _)| check(p)));

    let weak = |v: Violation| matches!(v, Violation::MissedPositive | Violation::MissedNegative);
    let weakly_correct = !all.iter().any(|w| weak(w.violation));
    let correct = all.iter().all(|w| weak(w.violation));
    // keep a few of each kind
    let mut witnesses = Vec::new();
    for kind in [Violation::WrongPositive, Violation::WrongNegative, Violation::MissedPositive, Violation::MissedNegative] {
        witnesses.extend(all.iter().filter(|w| w.violation == kind).take(WITNESS_LIMIT).cloned());
    }
    let points_checked = total + problem.marginal.atoms().len() as u64;
    Ok(CorrectnessReport { weakly_correct, correct, grid_depth, points_checked, witnesses })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Strong,
    Unrestricted,
}

/// Exponent of `n` in the excess-risk rate of the active learner.
pub fn theoretical_exponent(alpha: f64, beta: f64, d: usize, regime: Regime) -> f64 {
    let df = d as f64;
    let num = alpha * (beta + 1.0);
    match regime {
        Regime::Strong => num / (2.0 * alpha + (df - alpha.min(1.0) * beta).max(0.0)),
        Regime::Unrestricted => num / (2.0 * alpha + df),
    }
}

/// Exponent of the passive rate without the density assumption.
pub fn passive_exponent(alpha: f64, beta: f64, d: usize) -> f64 {
    alpha * (beta + 1.0) / (2.0 * alpha + d as f64 + alpha * beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 2.5% and 97.5% bootstrap quantiles of the slope.
    pub band: (f64, f64),
    /// `(n, median risk)` for the budgets used in the fit.
    pub points: Vec<(u64, f64)>,
    /// Budgets whose median risk was zero and were left out.
    pub dropped: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub n: u64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn group(samples: &[(u64, f64)]) -> BTreeMap<u64, Vec<f64>> {
    let mut by_n: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &(n, r) in samples {
        by_n.entry(n).or_default().push(r);
    }
    for v in by_n.values_mut() {
        v.sort_by(f64::total_cmp);
    }
    by_n
}

pub fn quantile_table(records: &[RunRecord]) -> Vec<QuantileRow> {
    let samples: Vec<(u64, f64)> = records.iter().map(|r| (r.n, r.risk)).collect();
    group(&samples)
        .into_iter()
        .map(|(n, v)| QuantileRow { n, q25: quantile(&v, 0.25), q50: quantile(&v, 0.5), q75: quantile(&v, 0.75) })
        .collect()
}

fn ols(points: &[(f64, f64)]) -> (f64, f64) {
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn log_points(medians: &[(u64, f64)]) -> Vec<(f64, f64)> {
    medians.iter().filter(|(_, m)| *m > 0.0).map(|&(n, m)| ((n as f64).ln(), m.ln())).collect()
}

pub fn fit_rate(records: &[RunRecord]) -> Result<RateFit> {
    let samples: Vec<(u64, f64)> = records.iter().map(|r| (r.n, r.risk)).collect();
    fit_rate_samples(&samples)
}

/// Least squares of `ln median risk` on `ln n` over `(n, risk)` samples, with
/// a seed-level bootstrap band.
pub fn fit_rate_samples(samples: &[(u64, f64)]) -> Result<RateFit> {
    let by_n = group(samples);
    if by_n.len() < 4 {
        return Err(Error::DegenerateData(format!("{} budgets, need at least 4", by_n.len())));
    }
    if let Some((n, v)) = by_n.iter().find(|(_, v)| v.len() < 5) {
        return Err(Error::DegenerateData(format!("budget {n} has {} seeds, need at least 5", v.len())));
    }
    if samples.iter().any(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::DegenerateData("risks must be finite and nonnegative".into()));
    }
    let medians: Vec<(u64, f64)> = by_n.iter().map(|(&n, v)| (n, quantile(v, 0.5))).collect();
    let dropped: Vec<u64> = medians.iter().filter(|(_, m)| *m == 0.0).map(|p| p.0).collect();
    let pts = log_points(&medians);
    if pts.len() < 3 {
        return Err(Error::DegenerateData(format!("only {} nonzero medians", pts.len())));
    }
    let (slope, intercept) = ols(&pts);

    let mut r = rng::stream(BOOTSTRAP_SEED, &[TAG_BOOTSTRAP]);
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut buf = Vec::new();
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let meds: Vec<(u64, f64)> = by_n
            .iter()
            .map(|(&n, v)| {
                buf.clear();
                buf.extend((0..v.len()).map(|_| v[r.random_range(0..v.len())]));
                buf.sort_by(f64::total_cmp);
                (n, quantile(&buf, 0.5))
            })
            .collect();
        let p = log_points(&meds);
        if p.len() >= 3 {
            slopes.push(ols(&p).0);
        }
    }
    slopes.sort_by(f64::total_cmp);
    let band = if slopes.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile(&slopes, 0.025), quantile(&slopes, 0.975))
    };
    let points = medians.into_iter().filter(|(_, m)| *m > 0.0).collect();
    Ok(RateFit { slope, intercept, band, points, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{EtaSpec, Marginal, NoiseParams};

    fn affine() -> Problem {
        let params = NoiseParams { alpha: 1.0, beta: 1.0, delta0: 0.0, lambda: 1.0, c1: Some(1.0), c3: 5.0 };
        Problem::new(1, EtaSpec::Affine { center_value: 0.5, gradient: vec![0.4] }, Marginal::Uniform, params)
            .unwrap()
    }

    fn region(cells: &[(u8, u64)]) -> Region {
        Region::from_cells(1, cells.iter().map(|&(l, c)| Cell::new(l, vec![c]).unwrap())).unwrap()
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> Vec<(u64, f64)> {
        (10..=17)
            .flat_map(|k| {
                let n = 1u64 << k;
                let f = &f;
                (0..5).map(move |_| (n, f(n as f64)))
            })
            .collect()
    }

    #[test]
    fn exponent_examples() {
        assert_eq!(theoretical_exponent(1.0, 1.0, 1, Regime::Strong), 1.0);
        assert_eq!(theoretical_exponent(1.0, 0.0, 2, Regime::Strong), 0.25);
        assert!((theoretical_exponent(2.0, 1.0, 2, Regime::Strong) - 0.8).abs() < 1e-15);
        assert!((theoretical_exponent(1.0, 1.0, 1, Regime::Unrestricted) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(passive_exponent(1.0, 1.0, 1), 0.5);
    }

    #[test]
    fn audit_exact_partition() {
        let p = affine();
        let s1 = region(&[(1, 1)]);
        let s0 = region(&[(1, 0)]);
        let rep = check_correct(&p, &s0, &s1, 0.0, None).unwrap();
        assert!(rep.correct && rep.weakly_correct, "{rep:?}");
        assert_eq!(rep.grid_depth, 3);
        assert!(rep.witnesses.is_empty());
    }

    #[test]
    fn audit_injected_violation() {
        let p = affine();
        let s1 = region(&[(1, 1), (3, 3)]);
        let s0 = region(&[(3, 0), (3, 1), (3, 2)]);
        let rep = check_correct(&p, &s0, &s1, 0.0, None).unwrap();
        assert!(!rep.correct);
        let w = rep.witnesses.iter().find(|w| w.violation == Violation::WrongPositive).unwrap();
        assert!(w.point[0] > 0.375 && w.point[0] < 0.5 && w.eta < 0.5);
    }

    #[test]
    fn audit_empty_sets() {
        let p = affine();
        let e = Region::new(1);
        // sup |η − 1/2| over centers of G_6 is 0.2 · (1 − 2^-6)
        let sup = 0.2 * (1.0 - 1.0 / 64.0);
        let rep = check_correct(&p, &e, &e, sup, Some(6)).unwrap();
        assert!(rep.weakly_correct && rep.correct);
        let rep = check_correct(&p, &e, &e, sup - 1e-9, Some(6)).unwrap();
        assert!(!rep.weakly_correct && rep.correct);
        let err = check_correct(&p, &e, &region(&[(4, 3)]), 1.0, Some(3));
        assert_eq!(err, Err(Error::ResolutionTooCoarse { grid_depth: 3, region_depth: 4 }));
    }

    #[test]
    fn fit_exact_power_law() {
        let fit = fit_rate_samples(&synthetic(|n| 3.0 / n)).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-9);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
        assert!(fit.band.0 <= fit.slope + 1e-9 && fit.slope - 1e-9 <= fit.band.1);
    }

    #[test]
    fn fit_log_corrected_rate() {
        // slope of ln(n^{-2/3} ln n) over [2^10, 2^17] by least squares
        let fit = fit_rate_samples(&synthetic(|n| n.powf(-2.0 / 3.0) * n.ln())).unwrap();
        let xs: Vec<f64> = (10..=17).map(|k| k as f64 * 2f64.ln()).collect();
        let pts: Vec<(f64, f64)> = xs.iter().map(|&x| (x, -2.0 / 3.0 * x + x.ln())).collect();
        let (want, _) = ols(&pts);
        assert!((fit.slope - want).abs() < 1e-9);
        assert!((fit.slope + 0.557_925).abs() < 1e-5, "slope {}", fit.slope);
    }

    #[test]
    fn fit_degenerate_inputs() {
        assert!(matches!(fit_rate_samples(&synthetic(|_| 0.0)), Err(Error::DegenerateData(_))));
        let mut few = synthetic(|n| 1.0 / n);
        few.retain(|(n, _)| *n < 1 << 13);
        assert!(matches!(fit_rate_samples(&few), Err(Error::DegenerateData(_))));
        let mut zeros = synthetic(|n| 1.0 / n);
        for s in zeros.iter_mut().filter(|s| s.0 >= 1 << 15) {
            s.1 = 0.0;
        }
        let fit = fit_rate_samples(&zeros).unwrap();
        assert_eq!(fit.dropped, vec![1 << 15, 1 << 16, 1 << 17]);
        assert!((fit.slope + 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_invariances() {
        let noisy: Vec<(u64, f64)> = synthetic(|n| 1.0 / n.sqrt())
            .into_iter()
            .enumerate()
            .map(|(i, (n, r))| (n, r * (1.0 + 0.3 * ((i * 7919) % 13) as f64 / 13.0)))
            .collect();
        let base = fit_rate_samples(&noisy).unwrap();
        let mut rev = noisy.clone();
        rev.reverse();
        assert_eq!(fit_rate_samples(&rev).unwrap(), base);
        let scaled: Vec<(u64, f64)> = noisy.iter().map(|&(n, r)| (n, 7.5 * r)).collect();
        let s = fit_rate_samples(&scaled).unwrap();
        assert!((s.slope - base.slope).abs() < 1e-12);
        assert!((s.intercept - base.intercept - 7.5f64.ln()).abs() < 1e-12);
        assert!((s.band.0 - base.band.0).abs() < 1e-12 && (s.band.1 - base.band.1).abs() < 1e-12);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    }

    fn spec(algorithm: Algorithm, n: u64, seed: u64) -> RunSpec {
        RunSpec {
            problem: affine(),
            algorithm,
            n,
            seed,
            delta: 0.05,
            alpha: None,
            lambda: LambdaChoice::Declared,
            evaluation: Evaluation::default(),
            timing: false,
        }
    }

    #[test]
    fn run_once_records() {
        let out = run_once(&spec(Algorithm::Subroutine, 300_000, 3)).unwrap();
        let r = &out.record;
        assert!(r.spent <= r.n && !r.infeasible);
        assert_eq!(r.risk_method, RiskKind::Exact);
        assert_eq!(r.s1_cells, out.s1.len());
        assert_eq!(r.active_counts.len(), r.depth_l as usize);
        let json = serde_json::to_string(r).unwrap();
        assert!(json.contains("\"depth_L\""));
        assert_eq!(serde_json::from_str::<RunRecord>(&json).unwrap(), *r);
        assert_eq!(run_once(&spec(Algorithm::Subroutine, 300_000, 3)).unwrap(), out);

        let tiny = run_once(&spec(Algorithm::Subroutine, 5, 3)).unwrap().record;
        assert!(tiny.infeasible && tiny.spent == 0);
        assert!((tiny.risk - 0.1).abs() < 1e-12);

        let ad = run_once(&spec(Algorithm::Adaptive, 5_000, 1)).unwrap().record;
        assert!(ad.spent <= 5_000 && ad.feasible_phases.is_some());
    }

    #[test]
    fn sweep_order_and_threads() {
        let cfg = SweepConfig {
            problem: affine(),
            algorithm: Algorithm::Subroutine,
            budgets: vec![2_000, 50_000],
            seeds: vec![4, 1, 2],
            delta: 0.05,
            alpha: None,
            lambda: LambdaChoice::LogSurrogate,
            evaluation: Evaluation::default(),
            timing: false,
        };
        let one = run_sweep(&cfg, 1).unwrap();
        let keys: Vec<(u64, u64)> = one.iter().map(|r| (r.n, r.seed)).collect();
        assert_eq!(keys, vec![(2_000, 1), (2_000, 2), (2_000, 4), (50_000, 1), (50_000, 2), (50_000, 4)]);
        assert!((one[0].lambda - 2_000f64.ln()).abs() < 1e-12);
        assert_eq!(run_sweep(&cfg, 4).unwrap(), one);
        let bad = SweepConfig { budgets: vec![5, 5], ..cfg };
        assert!(matches!(run_sweep(&bad, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn monte_carlo_fallback() {
        let p = crate::generators::make_lb_strong(
            &crate::generators::LowerBoundStrongSpec { d: 2, alpha: 1.0, delta: 0.125, sigma: None, c: None, seed: 0 },
            1.0,
        )
        .unwrap();
        let (risk, ci, kind) =
            evaluate(&p, &Classifier::zero(2), Evaluation { method: EvalMethod::Auto, samples: 20_000 }, 1).unwrap();
        assert_eq!(kind, RiskKind::MonteCarlo);
        assert!(risk > 0.0 && ci.unwrap() > 0.0);
        assert!(evaluate(&p, &Classifier::zero(2), Evaluation { method: EvalMethod::Exact, samples: 1 }, 1).is_err());
    }
}
