//! Gaussian-process extended object estimation from bistatic
//! channel-parameter measurements.
//!
//! The chain runs measurements → incidence points ([`mapping`] with a known
//! receiver or [`slam`] without one) → DBSCAN clusters and polar training
//! sets ([`cluster`]) → per-cluster GP radial contours ([`gp`]).

pub mod cluster;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gp;
pub mod io;
pub mod lsq;
pub mod mapping;
pub mod pipeline;
pub mod scene;
pub mod shapes;
pub mod slam;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{
    forward_model, IncidencePoint, NoiseCov, PathKind, PathMeasurement, RxState, TxState, Vec2,
    SPEED_OF_LIGHT,
};
pub use mapping::{cost_j, estimate_ip, geometric_seed, MappingConfig};
pub use scene::{synthesize_scene, SceneConfig, ScenePath};
pub use slam::{snapshot_slam, SlamConfig, SlamResult};
