//! Message-passing detectors for overloaded multi-user MIMO uplinks.
//!
//! The system model is `y = H x + n` with more users than receive antennas.
//! [`lmmse`] is the exact linear MMSE reference, [`gmpid`] is Gaussian
//! message passing on the fully connected graph, and [`sagmpid`] is its
//! relaxed variant that converges to the LMMSE estimate. [`analysis`]
//! holds the closed-form predictions and spectral tools, [`harness`] the
//! seeded Monte-Carlo driver.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod gmpid;
pub mod harness;
pub mod linalg;
pub mod lmmse;
pub mod model;
pub mod ops;
pub mod sagmpid;

pub use analysis::classical::{
    classical_detect, classical_iterate, ClassicalOptions, ClassicalOutcome, StationaryScheme,
};
pub use analysis::spectral::{spectral_radius, LinearOperator, PowerOptions};
pub use analysis::{
    gmpid_limit_formula, predict_convergence, solve_variance_fixed_point, ConvergencePrediction, VarianceSolution,
};
pub use error::{Error, Result};
pub use gmpid::{gmpid_run, DetectionReport, IterationOptions, MessageState, Schedule, Verdict};
pub use lmmse::{lmmse_detect, predict_mmse_mse, LmmseResult};
pub use model::{
    generate_instance, mse, trial_seed, ChannelInstance, GaussianMessage, Observation, PriorBelief, PriorMode,
    SystemConfig,
};
pub use ops::MulCounter;
pub use sagmpid::{choose_relaxation, sa_gmpid_run, RelaxationChoice, RelaxationMode};
