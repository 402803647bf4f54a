//! Numerical checks of the relation between switch-scaled least squares and
//! group lasso, and of the symmetries of the switch objective.

pub mod error;
pub mod props;
pub mod solver;

pub use error::{Error, Result};
pub use props::{
    equivalence_trial, nonconvexity_witness, run, scaling_check, signflip_check, signflip_network, signflip_orbit,
    squared_error_objective, verify_equivalence, EquivalenceReport, EquivalenceTrial, NonconvexityReport, PropOutcome,
    Proposition, ScalingReport, SignflipReport,
};
pub use solver::{
    block_soft_threshold, factor_columns, solve_group_lasso, solve_smallify, GroupLassoProblem, GroupLassoSolution,
    SmallifyProblem, SmallifySolution, SolverOptions,
};
