//! Guided flow matching.
//!
//! Gaussian-path flow matching with classifier-free guidance: schedulers
//! and their coefficients ([`scheduler`]), a small trainable velocity model
//! ([`nn`]), the training objective and guidance algebra ([`fm`]), fixed-step
//! ODE samplers ([`sampler`]), closed-form Gaussian-mixture ground truth
//! ([`oracle`]) and a return-conditioned planner on a point-mass
//! environment ([`rl`]), with small statistics helpers ([`stats`]) and the
//! `gflow` command line ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod error;
pub mod field;
pub mod fm;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod rl;
pub mod sampler;
pub mod scheduler;
pub mod stats;

pub use error::{Error, Result};
pub use field::VelocityField;
pub use scheduler::Scheduler;
