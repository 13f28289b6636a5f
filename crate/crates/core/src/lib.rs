//! Volumes, cubic B-spline free-form deformation, and the landmark-centred
//! patch dataset used to train dense registration-error regressors.

pub mod dataset;
pub mod ffd;
pub mod landmarks;
pub mod seed;
pub mod volume;

pub use ffd::{ControlGrid, DeformationSpec, DisplacementField, FfdError};
pub use landmarks::{Landmark, LandmarkPair, LandmarkPairs, LandmarkSet};
pub use volume::{Geometry, Modality, Volume, VolumeError};
