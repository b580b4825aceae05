//! Dual rigid-body RGB-D odometry and mapping.
//!
//! Tracks two rigid motions per frame pair — the camera against the static
//! background and one dominant moving object — while jointly estimating a
//! per-cluster static/dynamic segmentation. Noisy motion priors (odometry,
//! object kinematics) seed and regularize both estimates. Includes point-based
//! dual-model mapping, a synthetic RGB-D scene generator, and trajectory
//! evaluation tools.

pub mod alignment;
pub mod clustering;
pub mod eval;
pub mod frame;
pub mod img;
pub mod mapping;
pub mod se3;
pub mod solver;
pub mod synth;
pub mod tum;

pub use frame::{build_pyramid, FramePyramid, Intrinsics, RgbdFrame};
pub use img::Image;
pub use se3::{twist_distance, Pose, Twist};
