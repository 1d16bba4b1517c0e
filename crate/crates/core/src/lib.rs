//! Formation optimization for range-based relative pose estimation.
//!
//! Relative poses of `N` agents are held as a tuple on `SE(n)^{N−1}` relative to
//! Agent 1. Inter-tag ranges give the Fisher information of that state; its
//! negative log-determinant, plus a collision barrier, is descended on the
//! manifold to find locally optimal formations. A Gauss-Newton estimator with
//! attitude priors and a Monte-Carlo harness checks the estimation error along
//! the way.

pub mod estimator;
pub mod fisher;
pub mod formation_opt;
pub mod manifold;
pub mod presets;
pub mod ranging;
pub mod scenario;

pub use estimator::{gauss_newton, monte_carlo, mse, AttitudePrior, EstimatorError, MonteCarloReport};
pub use fisher::{crlb, fim, j_est, Cost, CrlbEllipse, FisherError, FisherInfo};
pub use formation_opt::{descend, descend_with, gradient, j_col_pair, j_total, CheckpointSpacing, DescentOptions, DescentResult, DescentTrace, OptError};
pub use manifold::{GroupMode, ManifoldError, Pose, Rotation, StateTuple};
pub use ranging::{jacobian_blocks, range, stack_jacobian, synthesize, MeasurementVector, RangingError};
pub use scenario::{load_scenario, write_scenario, Edge, MeasurementGraph, Scenario, ScenarioError, TagLayout};
