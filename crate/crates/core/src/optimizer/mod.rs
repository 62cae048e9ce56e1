//! Joint robust optimization of keyframe poses and map points.

pub mod factors;
pub mod graph;
pub mod noise;
pub mod solver;
pub mod triangulation;

use thiserror::Error;

pub use factors::{pose_update, reprojection_jacobians, reprojection_residual, semantic_jacobian, semantic_residual};
pub use graph::{apply_reinitialization, FactorGraph, Keyframe, MapPoint, Objective, Observation, SemanticAnchor};
pub use noise::{robust_cost, NoiseModel, RobustKernel};
pub use solver::{solve, OptResult, SolverConfig, Termination};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no keyframe is fixed and no keyframe carries an anchor; the gauge is free")]
    GaugeUnconstrained,
    #[error("damped normal equations could not be factorized")]
    NumericalFailure,
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(u64),
    #[error("keyframe {keyframe} observes unknown map point {point}")]
    UnknownMapPoint { keyframe: u64, point: u64 },
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("invalid robust kernel threshold {0}")]
    InvalidKernel(f64),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("bad graph record: {0}")]
    Record(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
