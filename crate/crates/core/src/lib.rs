//! Membership-query active classification on the unit cube.
//!
//! The crate provides synthetic problems with known smoothness and margin
//! parameters, a budget-metered label oracle, the fixed-smoothness dyadic
//! refinement learner with its kernel labeling pass for smooth targets, the
//! smoothness-adaptive aggregation over a grid of guesses, and tooling to audit
//! correctness and fit empirical rate exponents.

pub mod adaptive;
pub mod error;
pub mod generators;
pub mod grid;
pub mod harness;
pub mod kernel;
pub mod problem;
pub mod rng;
pub mod schedule;
pub mod subroutine;

pub use adaptive::{aggregate_step, run_adaptive, AdaptiveConfig, AdaptiveOutcome, PhaseRecord};
pub use error::{Error, Result};
pub use generators::{
    make_lb_strong, make_lb_weak, make_smooth_problem, verify_holder, verify_margin, HolderReport,
    LowerBoundStrongSpec, LowerBoundWeakSpec, MarginReport, SmoothFamily,
};
pub use grid::{cell_of_point, diameter, BoxNd, Cell, Coverage, Region};
pub use harness::{
    check_correct, fit_rate, run_once, run_sweep, theoretical_exponent, Algorithm, CorrectnessReport,
    Evaluation, LambdaChoice, RateFit, Regime, RunOutput, RunRecord, RunSpec, SweepConfig,
};
pub use kernel::LegendreKernel;
pub use problem::{
    Classifier, EtaSpec, LabelOracle, Marginal, NoiseParams, Problem, RiskEstimate, RiskMethod,
};
pub use schedule::{Density, DepthSchedule};
pub use subroutine::{
    run_subroutine, DyadicSubroutine, Subroutine, SubroutineConfig, SubroutineOutcome,
};

