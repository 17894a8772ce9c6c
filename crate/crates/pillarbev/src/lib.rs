//! Pillar-based bird's-eye-view 3D object detection, desk scale.
//!
//! The crate covers the full inference path of a pillar detector built from
//! 2D sparse convolutions, plus the training-surface pieces needed to verify
//! it without a training loop:
//!
//! - [`geom`]: exact rotated-box geometry (polygon-clipped IoU, 3D IoU, the
//!   orientation-decoupled IoU/GIoU/DIoU family with analytic gradients, and
//!   a rasterization oracle).
//! - [`pillars`]: point cloud → sparse pillar grid with an order-invariant
//!   per-pillar feature encoder.
//! - [`sparse2d`]: rulebook-driven submanifold / strided sparse 2D
//!   convolution, per-site affine+ReLU, densification, and the dense
//!   convolution that doubles as its oracle.
//! - [`network`]: encoder stages 1-4 (sparse) + stage 5 (dense), the three
//!   neck fusion variants, the head-map projection, and stage planning for
//!   detachable encoder stages across pillar sizes.
//! - [`head`]: center-head post-processing — peak decode, IoU-aware score
//!   rectification, rotated NMS.
//! - [`losses`]: the joint detection loss with analytic gradients and
//!   finite-difference verification hooks.
//! - [`harness`]: synthetic scenes, sweep accumulation, augmentation,
//!   target assembly, the end-to-end pipeline driver, and benchmarking.

pub mod geom;
pub mod harness;
pub mod head;
pub mod losses;
pub mod network;
pub mod pillars;
pub mod sparse2d;
pub mod weights;

pub use geom::{Box3d, BoxBev};



