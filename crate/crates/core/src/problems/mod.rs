//! Forward models and reference posteriors for the benchmark problems.

mod lorenz;
mod spiral;
mod toy1d;

pub use lorenz::{
    build_da_problem, lorenz_drift, lorenz_euler_step, lorenz_observe, sir_filter,
    systematic_resample, DaConfig, DaProblem, Lorenz63Spec, ParticleEnsemble, SirStep,
};
pub use spiral::{spiral_generate, spiral_reference_conditional, SpiralSpec};
pub use toy1d::{toy1d_generate, toy1d_posterior_moments, toy1d_posterior_pdf, Toy1dSpec};
