//! Conditional flow matching for likelihood-free Bayesian inverse problems.
//!
//! A velocity network `v(x, y, t)` is regressed onto the rate of the linear
//! interpolant between source draws `z` and joint samples `(x, y)`; samples of
//! `x | y` follow by integrating `dx/dt = v(x, y, t)` from `t = 0` to `t = 1`.
//!
//! - [`flow`]: interpolant, closed-form minimizers on finite data and the
//!   Gaussian velocity oracle.
//! - [`net`]: the MLP, its hand-written reverse pass, Adam and EMA.
//! - [`train`]: datasets, normalization, the training loop and checkpoint selection.
//! - [`ode`]: adaptive Dormand–Prince integration and posterior sampling.
//! - [`problems`]: the 1-D toy, the spiral and Lorenz-63 data assimilation.
//! - [`metrics`]: Sinkhorn distance, KDE, ensemble statistics.

// `!(a > b)` rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ode;
pub mod problems;
pub mod train;

pub use checkpoint::{Checkpoint, RngState};
pub use error::{Error, Result};
pub use flow::{
    case1_velocity, case1_xbar, case2_weights, empirical_final_hop, exact_empirical_velocity,
    gaussian_velocity_oracle, interpolant_rate, interpolate, Case1Field, EmpiricalSupport,
    InterpolantPair, TimePoint, T_CAP,
};
pub use metrics::{
    count_modes, ensemble_stats, kde_1d, rmse, self_distance_baseline, sinkhorn_distance,
    Bandwidth, Baseline, CloudPair, KdeResult, SinkhornConfig, SinkhornResult,
};
pub use net::{
    adam_step, time_features, Activation, EmaState, FlowBatch, Mlp, MlpConfig, OptimState,
    ParameterArray,
};
pub use ode::{
    rk45_integrate, sample_posterior, InitialStates, OdeSolveResult, PosteriorEnsemble,
    SolverConfig,
};
pub use train::{
    moving_average, sample_source_batch, select_checkpoint, train_cfm, CheckpointStrategy,
    LossHistory, Normalizer, PairedDataset, SourceKind, Split, TrainConfig, TrainOutcome, Trainer,
};
