//! Smoothness-adaptive aggregation over a grid of smoothness guesses.
//!
//! Phase `i` runs the fixed-smoothness learner with guess `α_i` on its own
//! budget slice; its label sets only claim regions no earlier phase assigned
//! to the opposite class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Region;
use crate::problem::{Classifier, LabelOracle};
use crate::subroutine::{Subroutine, SubroutineConfig, SubroutineOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub n: u64,
    pub delta: f64,
    pub lambda: f64,
    pub alpha_grid: Vec<f64>,
    /// Per-phase budget `⌊n / phases⌋`.
    pub n0: u64,
    /// Per-phase confidence `δ / phases`.
    pub delta0: f64,
}

impl AdaptiveConfig {
    /// `⌊ln n⌋³` phases with `α_i = i / ⌊ln n⌋²`.
    pub fn new(n: u64, delta: f64, lambda: f64) -> Result<Self> {
        let k = (n as f64).ln().floor() as u64;
        if k == 0 {
            return Err(Error::InvalidConfig(format!("budget {n} gives no smoothness grid")));
        }
        let k2 = (k * k) as f64;
        let grid = (1..=k * k * k).map(|i| i as f64 / k2).collect();
        Self::custom(n, delta, lambda, grid)
    }

    pub fn custom(n: u64, delta: f64, lambda: f64, alpha_grid: Vec<f64>) -> Result<Self> {
        if alpha_grid.is_empty() || alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("alpha grid must be nonempty and increasing".into()));
        }
        if !(delta > 0.0 && delta < 1.0) || !(lambda >= 1.0) {
            return Err(Error::InvalidConfig(format!("bad delta {delta} or lambda {lambda}")));
        }
        let phases = alpha_grid.len() as u64;
        Ok(AdaptiveConfig {
            n,
            delta,
            lambda,
            n0: n / phases,
            delta0: delta / phases as f64,
            alpha_grid,
        })
    }

    pub fn phases(&self) -> usize {
        self.alpha_grid.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub index: usize,
    pub alpha: f64,
    pub spent: u64,
    pub infeasible: bool,
    pub final_depth: u8,
    pub phase_s0_cells: usize,
    pub phase_s1_cells: usize,
    pub s0_volume: f64,
    pub s1_volume: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveOutcome {
    pub s0: Region,
    pub s1: Region,
    pub spent: u64,
    pub history: Vec<PhaseRecord>,
}

impl AdaptiveOutcome {
    pub fn classifier(&self) -> Classifier {
        Classifier::new(self.s1.clone())
    }
}

/// `s^y_i = s^y_{i−1} ∪ (S^y_i \ s^{1−y}_{i−1})`.
pub fn aggregate_step(
    prev0: &Region,
    prev1: &Region,
    s0: &Region,
    s1: &Region,
) -> Result<(Region, Region)> {
    if prev0.intersects(prev1) {
        return Err(Error::Overlap("aggregated sets intersect".into()));
    }
    if s0.intersects(s1) {
        return Err(Error::Overlap("phase label sets intersect".into()));
    }
    let next0 = prev0.union(&s0.difference(prev1));
    let next1 = prev1.union(&s1.difference(prev0));
    Ok((next0, next1))
}

fn check_growth(prev: &Region, next: &Region, label: u8, phase: usize) -> Result<()> {
    if !prev.difference(next).is_empty() {
        return Err(Error::Invariant(format!("s{label} shrank at phase {phase}")));
    }
    Ok(())
}

pub fn run_adaptive(
    oracle: &LabelOracle,
    config: &AdaptiveConfig,
    subroutine: &dyn Subroutine,
) -> Result<AdaptiveOutcome> {
    let d = oracle.problem().dim;
    if oracle.remaining() < config.n {
        return Err(Error::InvalidConfig(format!(
            "oracle holds {} labels but the run needs {}",
            oracle.remaining(),
            config.n
        )));
    }
    let start = oracle.spent();
    let mut s0 = Region::new(d);
    let mut s1 = Region::new(d);
    let mut history = Vec::with_capacity(config.phases());

    for (i, &alpha) in config.alpha_grid.iter().enumerate() {
        let phase_oracle = oracle.sub_oracle(config.n0, i as u64);
        let sub_cfg =
            SubroutineConfig { n: config.n0, delta: config.delta0, alpha, lambda: config.lambda };
        let (out, infeasible) = match subroutine.run(&phase_oracle, &sub_cfg) {
            Ok(out) => (out, false),
            Err(Error::InfeasibleBudget { .. }) => (SubroutineOutcome::empty(d), true),
            Err(e) => return Err(e),
        };
        let (n0, n1) = aggregate_step(&s0, &s1, &out.s0, &out.s1)?;
        check_growth(&s0, &n0, 0, i)?;
        check_growth(&s1, &n1, 1, i)?;
        if n0.intersects(&n1) {
            return Err(Error::Invariant(format!("aggregated sets intersect after phase {i}")));
        }
        s0 = n0;
        s1 = n1;
        history.push(PhaseRecord {
            index: i + 1,
            alpha,
            spent: phase_oracle.spent(),
            infeasible,
            final_depth: out.final_depth,
            phase_s0_cells: out.s0.len(),
            phase_s1_cells: out.s1.len(),
            s0_volume: s0.volume(),
            s1_volume: s1.volume(),
        });
    }
    Ok(AdaptiveOutcome { s0, s1, spent: oracle.spent() - start, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cell;
    use crate::problem::{EtaSpec, Marginal, NoiseParams, Problem};
    use crate::subroutine::{run_subroutine, DyadicSubroutine};
    use std::sync::Arc;

    fn cell(l: u8, c: &[u64]) -> Cell {
        Cell::new(l, c.to_vec()).unwrap()
    }

    fn reg(cells: &[Cell]) -> Region {
        Region::from_cells(cells[0].dim(), cells.iter().cloned()).unwrap()
    }

    #[test]
    fn grid_parameters() {
        let c = AdaptiveConfig::new(50, 0.05, 1.0).unwrap();
        assert_eq!(c.phases(), 27);
        assert_eq!(c.n0, 50 / 27);
        assert!((c.delta0 - 0.05 / 27.0).abs() < 1e-18);
        assert!((c.alpha_grid[0] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(*c.alpha_grid.last().unwrap(), 3.0);
        assert!(c.n0 * c.phases() as u64 <= c.n);
        assert!(AdaptiveConfig::new(2, 0.05, 1.0).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = cell(1, &[0]);
        let b = cell(1, &[1]);
        let empty = Region::new(1);
        let (r0, r1) = aggregate_step(&empty, &empty, &reg(std::slice::from_ref(&a)), &reg(std::slice::from_ref(&b))).unwrap();
        assert_eq!(r0, reg(std::slice::from_ref(&a)));
        assert_eq!(r1, reg(std::slice::from_ref(&b)));

        let (r0, r1) =
            aggregate_step(&reg(std::slice::from_ref(&a)), &empty, &empty, &reg(&[a.clone(), b.clone()])).unwrap();
        assert_eq!(r0, reg(std::slice::from_ref(&a)));
        assert_eq!(r1, reg(std::slice::from_ref(&b)));

        let p0 = reg(std::slice::from_ref(&a));
        let p1 = reg(std::slice::from_ref(&b));
        let (r0, r1) = aggregate_step(&p0, &p1, &p0, &p1).unwrap();
        assert_eq!((r0, r1), (p0, p1));
    }

    #[test]
    fn aggregate_refines_partial_overlap() {
        let prev0 = reg(&[cell(2, &[1])]);
        let empty = Region::new(1);
        let (r0, r1) = aggregate_step(&prev0, &empty, &empty, &reg(&[cell(1, &[0])])).unwrap();
        assert_eq!(r0, prev0);
        assert_eq!(r1, reg(&[cell(2, &[0])]));
    }

    #[test]
    fn aggregate_rejects_overlapping_inputs() {
        let a = reg(&[cell(1, &[0])]);
        let empty = Region::new(1);
        assert!(matches!(aggregate_step(&a, &a, &empty, &empty), Err(Error::Overlap(_))));
        assert!(matches!(aggregate_step(&empty, &empty, &a, &a), Err(Error::Overlap(_))));
    }

    fn affine() -> Arc<Problem> {
        Arc::new(
            Problem::new(
                1,
                EtaSpec::Affine { center_value: 0.5, gradient: vec![0.8] },
                Marginal::Uniform,
                NoiseParams { alpha: 1.0, beta: 1.0, delta0: 0.0, lambda: 1.0, c1: Some(1.0), c3: 2.5 },
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_phase_equals_subroutine() {
        let p = affine();
        let n = 400_000;
        let cfg = AdaptiveConfig::custom(n, 0.05, 1.0, vec![1.0]).unwrap();
        let o = LabelOracle::new(Arc::clone(&p), n, 3);
        let ad = run_adaptive(&o, &cfg, &DyadicSubroutine).unwrap();
        let o2 = LabelOracle::new(p, n, 3);
        let direct = run_subroutine(&o2.sub_oracle(n, 0), &SubroutineConfig { n, delta: 0.05, alpha: 1.0, lambda: 1.0 }).unwrap();
        assert_eq!(ad.s0, direct.s0);
        assert_eq!(ad.s1, direct.s1);
        assert_eq!(ad.spent, direct.spent);
    }

    #[test]
    fn phases_grow_monotonically() {
        let p = affine();
        let n = 2_000_000;
        let cfg = AdaptiveConfig::custom(n, 0.05, 1.0, vec![0.25, 0.5, 0.75, 1.0]).unwrap();
        let o = LabelOracle::new(p, n, 11);
        let out = run_adaptive(&o, &cfg, &DyadicSubroutine).unwrap();
        assert!(out.spent <= n);
        for w in out.history.windows(2) {
            assert!(w[1].s0_volume >= w[0].s0_volume && w[1].s1_volume >= w[0].s1_volume);
        }
        assert!(!out.s0.intersects(&out.s1));
        assert!(out.s1.volume() > 0.0);
    }

    #[test]
    fn infeasible_phases_contribute_nothing() {
        let p = affine();
        let cfg = AdaptiveConfig::new(1000, 0.05, 1.0).unwrap();
        let o = LabelOracle::new(p, 1000, 1);
        let out = run_adaptive(&o, &cfg, &DyadicSubroutine).unwrap();
        assert!(out.history.iter().all(|h| h.infeasible));
        assert!(out.s0.is_empty() && out.s1.is_empty());
        assert_eq!(out.spent, 0);

        let cfg = AdaptiveConfig::new(56, 0.05, 1.0).unwrap();
        assert_eq!(cfg.n0, 0);
        let o = LabelOracle::new(affine(), 56, 1);
        let out = run_adaptive(&o, &cfg, &DyadicSubroutine).unwrap();
        assert_eq!(out.history.len(), 64);
        assert!(out.history.iter().all(|h| h.infeasible));
    }

    #[test]
    fn injected_phases_keep_earliest_claims() {
        // phase 2 only gains ground where phase 1 stayed silent
        let p = affine();
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let injected = |_: &LabelOracle, _: &SubroutineConfig| -> Result<SubroutineOutcome> {
            let i = calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let mut out = SubroutineOutcome::empty(1);
            if i == 0 {
                out.s0 = reg(&[cell(2, &[0])]);
                out.s1 = reg(&[cell(2, &[3])]);
            } else {
                out.s1 = reg(&[cell(1, &[0])]);
                out.s0 = reg(&[cell(2, &[2])]);
            }
            Ok(out)
        };
        let cfg = AdaptiveConfig::custom(10, 0.05, 1.0, vec![0.5, 1.0]).unwrap();
        let o = LabelOracle::new(p, 10, 0);
        let out = run_adaptive(&o, &cfg, &injected).unwrap();
        assert_eq!(out.s0, reg(&[cell(2, &[0]), cell(2, &[2])]));
        assert_eq!(out.s1, reg(&[cell(2, &[3]), cell(2, &[1])]));
    }
}
