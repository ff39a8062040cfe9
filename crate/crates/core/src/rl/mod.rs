//! Offline reinforcement learning with a return-conditioned flow planner on
//! a point-mass environment: data generation, inverse dynamics, planner
//! training and closed-loop evaluation.

pub mod dataset;
pub mod env;
pub mod idm;
pub mod planner;

pub use dataset::{discounted_return, generate_dataset, OfflineDataset, Preset, Split, WindowData};
pub use env::{Controller, PointMassEnv};
pub use idm::{train_idm, IdmConfig, InverseDynamics};
pub use planner::{evaluate, ood_probe, train_planner, EvalConfig, Planner, RtgRule};
