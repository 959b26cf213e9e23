//! Fixed-smoothness dyadic refinement with optimistic labeling.
//!
//! Depth by depth, every active cell is sampled at its center. A cell whose
//! empirical mean is farther than `B_{l,α}` from 1/2 is labeled; the rest are
//! split. For `α > 1` a kernel pass then labels subcells of the last undecided
//! cells from uniform samples on their inflated neighbourhoods.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, Region, MAX_DEPTH};
use crate::kernel::LegendreKernel;
use crate::problem::{Classifier, LabelOracle};
use crate::rng::{TAG_CENTER, TAG_KERNEL_LABELS, TAG_KERNEL_POINTS};
use crate::schedule::{self, kernel_threshold, labeling_threshold, samples_per_cell};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubroutineConfig {
    pub n: u64,
    pub delta: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl SubroutineConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        schedule::validate(self.alpha, self.lambda, dim, self.delta)
    }

    /// Labels charged before the first depth: `2^d t_{1,α∧1}`.
    pub fn initial_charge(&self, dim: usize) -> Result<u64> {
        let t1 = samples_per_cell(1, self.alpha.min(1.0), self.lambda, dim, self.delta)?;
        t1.checked_mul(1u64 << dim)
            .ok_or_else(|| Error::Overflow("initial charge exceeds u64".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPassDiagnostics {
    pub cells: u64,
    pub samples_per_cell: u64,
    pub subcell_depth: u8,
    pub threshold: f64,
    pub labeled: u64,
    pub dead_zone: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubroutineOutcome {
    pub s0: Region,
    pub s1: Region,
    /// Cells left without a label: the final active set, or the dead-zone
    /// subcells when the kernel pass ran.
    pub unlabeled: Region,
    /// `L`, the last depth whose cells were sampled.
    pub final_depth: u8,
    pub spent: u64,
    /// `|𝒜_l|` for `l = 1..=L`.
    pub active_counts: Vec<u64>,
    pub kernel: Option<KernelPassDiagnostics>,
}

impl SubroutineOutcome {
    pub fn empty(dim: usize) -> Self {
        SubroutineOutcome {
            s0: Region::new(dim),
            s1: Region::new(dim),
            unlabeled: Region::from_cells(dim, [Cell::root(dim)]).expect("single cell"),
            final_depth: 0,
            spent: 0,
            active_counts: Vec::new(),
            kernel: None,
        }
    }

    pub fn classifier(&self) -> Classifier {
        classifier_from(&self.s1)
    }
}

pub fn classifier_from(s1: &Region) -> Classifier {
    Classifier::new(s1.clone())
}

/// Anything that maps `(oracle, config)` to label sets under the same contract.
pub trait Subroutine: Sync {
    fn run(&self, oracle: &LabelOracle, config: &SubroutineConfig) -> Result<SubroutineOutcome>;
}

/// The dyadic refinement learner.
#[derive(Clone, Copy, Debug, Default)]
pub struct DyadicSubroutine;

impl Subroutine for DyadicSubroutine {
    fn run(&self, oracle: &LabelOracle, config: &SubroutineConfig) -> Result<SubroutineOutcome> {
        run_subroutine(oracle, config)
    }
}

impl<F> Subroutine for F
where
    F: Fn(&LabelOracle, &SubroutineConfig) -> Result<SubroutineOutcome> + Sync,
{
    fn run(&self, oracle: &LabelOracle, config: &SubroutineConfig) -> Result<SubroutineOutcome> {
        self(oracle, config)
    }
}

enum Decision {
    Label(u8),
    Split,
}

fn cell_key(tag: u64, cell: &Cell) -> Vec<u64> {
    let mut k = Vec::with_capacity(cell.dim() + 2);
    k.push(tag);
    k.push(cell.depth() as u64);
    k.extend_from_slice(cell.coords());
    k
}

/// `|𝒜_l| · t_{l,α}`, or `None` if it cannot be represented.
fn depth_cost(cells: usize, l: u8, alpha: f64, lambda: f64, d: usize, delta: f64) -> Option<u64> {
    samples_per_cell(l, alpha, lambda, d, delta).ok()?.checked_mul(cells as u64)
}

pub fn run_subroutine(oracle: &LabelOracle, config: &SubroutineConfig) -> Result<SubroutineOutcome> {
    let d = oracle.problem().dim;
    config.validate(d)?;
    if oracle.remaining() < config.n {
        return Err(Error::InvalidConfig(format!(
            "oracle holds {} labels but the run needs {}",
            oracle.remaining(),
            config.n
        )));
    }
    let SubroutineConfig { n, delta, alpha, lambda } = *config;
    let a1 = alpha.min(1.0);
    let start_spent = oracle.spent();

    let initial = config.initial_charge(d);
    let mut t = match initial {
        Ok(t) if t <= n => t,
        Ok(t) => return Err(Error::InfeasibleBudget { budget: n, required: t }),
        Err(_) => return Err(Error::InfeasibleBudget { budget: n, required: u64::MAX }),
    };

    let mut s0 = Region::new(d);
    let mut s1 = Region::new(d);
    let mut active: Vec<Cell> = Cell::root(d).children();
    let mut undecided_last: Vec<Cell> = Vec::new();
    let mut active_counts = Vec::new();
    let mut l: u8 = 1;

    loop {
        if active.is_empty() {
            break;
        }
        let guard = depth_cost(active.len(), l, alpha, lambda, d, delta)
            .and_then(|c| c.checked_add(t))
            .is_some_and(|total| total <= n);
        if !guard {
            break;
        }
        if l > MAX_DEPTH - 1 {
            return Err(Error::DepthCap(MAX_DEPTH));
        }
        let t_c = samples_per_cell(l, a1, lambda, d, delta)?;
        let threshold = labeling_threshold(l, alpha, lambda, d, delta)?;
        active_counts.push(active.len() as u64);

        let decisions: Vec<Decision> = active
            .par_iter()
            .map(|cell| {
                let ones = oracle.query_repeated(&cell.center(), t_c, &cell_key(TAG_CENTER, cell))?;
                let eta_hat = ones as f64 / t_c as f64;
                Ok(if (eta_hat - 0.5).abs() <= threshold {
                    Decision::Split
                } else {
                    Decision::Label(u8::from(eta_hat >= 0.5))
                })
            })
            .collect::<Result<_>>()?;

        let mut next = Vec::new();
        undecided_last.clear();
        for (cell, dec) in active.into_iter().zip(decisions) {
            match dec {
                Decision::Label(1) => s1.insert(cell)?,
                Decision::Label(_) => s0.insert(cell)?,
                Decision::Split => {
                    next.extend(cell.children());
                    undecided_last.push(cell);
                }
            }
        }
        active = next;
        l += 1;
        let t_next = samples_per_cell(l, a1, lambda, d, delta)
            .ok()
            .and_then(|tc| tc.checked_mul(active.len() as u64));
        match t_next.and_then(|c| c.checked_add(t)) {
            Some(v) => t = v,
            None => break,
        }
    }
    let final_depth = l - 1;

    let mut outcome = SubroutineOutcome {
        s0,
        s1,
        unlabeled: Region::from_cells(d, active)?,
        final_depth,
        spent: 0,
        active_counts,
        kernel: None,
    };
    if alpha > 1.0 && final_depth >= 1 && !undecided_last.is_empty() {
        kernel_pass(oracle, config, &undecided_last, &mut outcome)?;
    }
    outcome.spent = oracle.spent() - start_spent;
    debug_assert!(outcome.spent <= n);
    Ok(outcome)
}

/// Labels the subcells at depth `⌊Lα⌋` of each undecided depth-`L` cell.
fn kernel_pass(
    oracle: &LabelOracle,
    config: &SubroutineConfig,
    cells: &[Cell],
    outcome: &mut SubroutineOutcome,
) -> Result<()> {
    let d = oracle.problem().dim;
    let big_l = outcome.final_depth;
    let SubroutineConfig { delta, alpha, lambda, .. } = *config;
    let t = samples_per_cell(big_l, alpha, lambda, d, delta)?;
    let sub_depth = ((big_l as f64 * alpha).floor() as u64).min(MAX_DEPTH as u64) as u8;
    let threshold = kernel_threshold(big_l, alpha, lambda, d);
    let kernel = LegendreKernel::new(alpha, d)?;

    let per_cell: Vec<(Vec<Cell>, Vec<f64>)> = cells
        .par_iter()
        .map(|cell| {
            let bx = cell.inflated_box();
            let mut rng = oracle.learner_stream(&cell_key(TAG_KERNEL_POINTS, cell));
            let mut points = vec![0.0; t as usize * d];
            for row in points.chunks_exact_mut(d) {
                bx.sample_into(&mut rng, row);
            }
            let labels = oracle.query_points(&points, &cell_key(TAG_KERNEL_LABELS, cell))?;
            let subcells = cell.subcells_at_depth(sub_depth)?;
            let targets: Vec<Vec<f64>> = subcells.iter().map(Cell::center).collect();
            let est = kernel.estimate_many(big_l, &points, &labels, &targets)?;
            Ok((subcells, est))
        })
        .collect::<Result<_>>()?;

    let mut unlabeled = Region::new(d);
    let (mut labeled, mut dead) = (0u64, 0u64);
    for (subcells, est) in per_cell {
        for (c, e) in subcells.into_iter().zip(est) {
            if e - 0.5 > threshold {
                outcome.s1.insert(c)?;
                labeled += 1;
            } else if e - 0.5 < -threshold {
                outcome.s0.insert(c)?;
                labeled += 1;
            } else {
                unlabeled.insert(c)?;
                dead += 1;
            }
        }
    }
    outcome.unlabeled = unlabeled;
    outcome.kernel = Some(KernelPassDiagnostics {
        cells: cells.len() as u64,
        samples_per_cell: t,
        subcell_depth: sub_depth,
        threshold,
        labeled,
        dead_zone: dead,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Coverage;
    use crate::problem::{EtaSpec, Marginal, NoiseParams, Problem};
    use std::sync::Arc;

    fn problem(eta: EtaSpec, dim: usize) -> Arc<Problem> {
        Arc::new(
            Problem::new(
                dim,
                eta,
                Marginal::Uniform,
                NoiseParams { alpha: 1.0, beta: 1.0, delta0: 0.0, lambda: 1.0, c1: Some(1.0), c3: 5.0 },
            )
            .unwrap(),
        )
    }

    fn cfg(n: u64, alpha: f64) -> SubroutineConfig {
        SubroutineConfig { n, delta: 0.05, alpha, lambda: 1.0 }
    }

    fn assert_partition(out: &SubroutineOutcome) {
        assert!(!out.s0.intersects(&out.s1));
        assert!(!out.s0.intersects(&out.unlabeled));
        assert!(!out.s1.intersects(&out.unlabeled));
        let vol = out.s0.volume() + out.s1.volume() + out.unlabeled.volume();
        assert!((vol - 1.0).abs() < 1e-12, "covered volume {vol}");
    }

    #[test]
    fn infeasible_budget() {
        let p = problem(EtaSpec::Constant { value: 0.75 }, 1);
        let o = LabelOracle::new(p, 10, 1);
        let c = cfg(10, 1.0);
        let need = c.initial_charge(1).unwrap();
        assert_eq!(need, 18);
        assert_eq!(
            run_subroutine(&o, &c),
            Err(Error::InfeasibleBudget { budget: 10, required: need })
        );
        assert_eq!(o.spent(), 0);
        let zero = cfg(0, 1.0);
        assert!(matches!(run_subroutine(&o, &zero), Err(Error::InfeasibleBudget { budget: 0, .. })));
    }

    #[test]
    fn constant_problem_labels_everything_positive() {
        let p = problem(EtaSpec::Constant { value: 0.75 }, 1);
        let mut good = 0;
        for seed in 0..20 {
            let o = LabelOracle::new(Arc::clone(&p), 1_000_000, seed);
            let out = run_subroutine(&o, &cfg(1_000_000, 1.0)).unwrap();
            assert!(out.spent <= 1_000_000);
            assert_partition(&out);
            if out.s0.is_empty() && (out.s1.volume() - 1.0).abs() < 1e-12 {
                good += 1;
            }
        }
        assert!(good >= 19, "{good}/20");
    }

    #[test]
    fn small_budget_leaves_constant_problem_unlabeled() {
        // B_l ≥ 1/4 until depth 5 for λ = d = 1, which 10⁴ labels cannot reach
        let p = problem(EtaSpec::Constant { value: 0.75 }, 1);
        let o = LabelOracle::new(p, 10_000, 3);
        let out = run_subroutine(&o, &cfg(10_000, 1.0)).unwrap();
        assert!(out.s1.is_empty() && out.s0.is_empty());
        assert!(out.final_depth >= 1);
        assert_partition(&out);
    }

    #[test]
    fn affine_labels_are_correct() {
        let p = problem(EtaSpec::Affine { center_value: 0.5, gradient: vec![0.4] }, 1);
        let mut good = 0;
        for seed in 0..20 {
            let o = LabelOracle::new(Arc::clone(&p), 1_000_000, seed);
            let out = run_subroutine(&o, &cfg(1_000_000, 1.0)).unwrap();
            let s1_ok = out.s1.iter().all(|c| c.bounds().lo[0] >= 0.5);
            let s0_ok = out.s0.iter().all(|c| c.bounds().hi[0] <= 0.5);
            if s1_ok && s0_ok {
                good += 1;
            }
            assert_partition(&out);
        }
        assert!(good >= 19, "{good}/20");
    }

    #[test]
    fn refinement_is_monotone_and_counts_match() {
        let p = problem(EtaSpec::Affine { center_value: 0.5, gradient: vec![0.6, 0.3] }, 2);
        let o = LabelOracle::new(p, 3_000_000, 8);
        let out = run_subroutine(&o, &cfg(3_000_000, 1.0)).unwrap();
        assert_eq!(out.active_counts.len(), out.final_depth as usize);
        assert_eq!(out.active_counts[0], 4);
        for w in out.active_counts.windows(2) {
            assert_eq!(w[1] % 4, 0);
        }
        for c in out.s0.iter().chain(out.s1.iter()) {
            assert!(c.depth() >= 1 && c.depth() <= out.final_depth);
        }
        for c in out.unlabeled.iter() {
            assert_eq!(c.depth(), out.final_depth + 1);
        }
        assert_partition(&out);
    }

    #[test]
    fn deterministic_replay() {
        let p = problem(EtaSpec::Affine { center_value: 0.5, gradient: vec![0.9] }, 1);
        let run = |seed| {
            let o = LabelOracle::new(Arc::clone(&p), 500_000, seed);
            run_subroutine(&o, &cfg(500_000, 1.0)).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_eq!(serde_json::to_string(&run(4)).unwrap(), serde_json::to_string(&run(4)).unwrap());
    }

    #[test]
    fn kernel_pass_dead_zone_and_counts() {
        // with λ = 1, d = 1, α = 1.5 the threshold 16·2^{-1.5L} is far above any estimate error
        let p = problem(EtaSpec::Constant { value: 0.5 }, 1);
        let n = 4_000_000;
        let o = LabelOracle::new(p, n, 2);
        let out = run_subroutine(&o, &cfg(n, 1.5)).unwrap();
        assert!(out.spent <= n);
        let k = out.kernel.clone().expect("kernel pass ran");
        let big_l = out.final_depth;
        assert_eq!(k.subcell_depth, (big_l as f64 * 1.5).floor() as u8);
        assert_eq!(k.dead_zone + k.labeled, k.cells << (k.subcell_depth - big_l));
        assert_eq!(k.labeled, 0);
        assert_partition(&out);
    }

    #[test]
    fn classifier_from_regions() {
        let empty = Region::new(1);
        assert_eq!(classifier_from(&empty).predict(&[0.3]), 0);
        let full = Region::from_cells(1, [Cell::root(1)]).unwrap();
        let c = classifier_from(&full);
        assert_eq!(c.predict(&[0.0]), 1);
        assert_eq!(c.predict(&[1.0]), 1);
        assert_eq!(full.coverage(&Cell::new(4, vec![3]).unwrap()), Coverage::Full);
    }
}
