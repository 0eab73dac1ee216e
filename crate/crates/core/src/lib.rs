//! Geometric and numerical core for 3D facial-landmark estimation on
//! radiance fields.
//!
//! The crate is organized around a small set of currencies:
//!
//! - [`face_model`]: bilinear landmark synthesis from a rank-3 core tensor,
//!   rigid/affine alignment, and synthetic cores for testing.
//! - [`tps`]: 3D thin-plate-spline fitting and evaluation, plus non-uniform
//!   (warped) volume resampling for expression augmentation.
//! - [`field`]: the queryable radiance-field abstraction with voxel-grid and
//!   analytic implementations.
//! - [`sampling`]: oriented-box feature-volume sampling with density
//!   thresholding, sinusoidal position encoding, fine-region boxes, and
//!   pose/scale augmentation.
//! - [`fitting`]: Wing loss, direct model fitting against observed
//!   landmarks, the multi-view triangulation baseline, and region metrics.

pub mod error;
pub mod face_model;
pub mod field;
pub mod fitting;
pub mod sampling;
pub mod tps;

pub use error::{Error, Result};
pub use face_model::{
    generate_landmarks, synth_core, BilinearCore, ExpressionWeights, IdentityWeights, Landmarks68,
    TransformMatrix,
};
pub use field::{FieldSample, RadianceField, SphereField, SyntheticHeadField, VoxelGridField};
pub use fitting::{
    evaluate, fit_landmarks, triangulate, wing_gradient, wing_loss, CameraPose, EvalReport,
    FitProblem, FitResult, WingParams,
};
pub use sampling::{
    apply_augment, fine_boxes, position_encoding, random_augment, sample_volume, AugmentTransform,
    FeatureVolume, FineBoxes, OrientedBox,
};
pub use tps::{fit_tps, kernel_u, warp_sample, TpsSystem, TpsWarp};
