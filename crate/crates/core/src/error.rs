use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("label budget exhausted ({spent} of {initial} used, {requested} requested)")]
    BudgetExhausted {
        initial: u64,
        spent: u64,
        requested: u64,
    },

    #[error("budget {budget} cannot afford the first depth ({required} labels needed)")]
    InfeasibleBudget { budget: u64, required: u64 },

    #[error("no exact excess-risk integral for this problem/classifier: {0}")]
    UnsupportedExact(String),

    #[error("sample-count overflow: {0}")]
    Overflow(String),

    #[error("kernel estimate requested on an empty sample")]
    EmptySample,

    #[error("regions overlap: {0}")]
    Overlap(String),

    #[error("no feasible bump scale near Delta = {0}")]
    InfeasibleDelta(f64),

    #[error("invalid family parameters: {0}")]
    InvalidFamilyParams(String),

    #[error("grid depth {grid_depth} is coarser than region depth {region_depth}")]
    ResolutionTooCoarse { grid_depth: u8, region_depth: u8 },

    #[error("degenerate rate data: {0}")]
    DegenerateData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("refinement reached the depth cap of {0}")]
    DepthCap(u8),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;
