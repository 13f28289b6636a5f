//! Cubic B-spline free-form deformation.
//!
//! A [`ControlGrid`] holds per-control-point displacement coefficients (mm).
//! Control point `b` along an axis sits at `origin_mm + b * spacing_mm`; a
//! position with grid coordinate `r = (x - origin) / spacing` lies in cell
//! `i = floor(r) - 1` and is influenced by coefficients `i..i+4`.
//!
//! Grids built by [`ControlGrid::layout`] place `n` interior points strictly
//! inside the voxel-center hull, one boundary point on each hull face, and one
//! outer margin point per side, so `counts = n + 4`. Random grids keep the
//! boundary and margin coefficients at zero.

mod basis;
mod field;
mod fit;
mod grid;

use thiserror::Error;

pub use basis::bspline_basis;
pub use field::{
    brute_force_field, dense_field, load_field, magnitude_map, save_field, warp_volume, DisplacementField,
};
pub use fit::{fit_landmark_bspline, fit_objective, FitSpec};
pub use grid::{load_grid, sample_random_grid, save_grid, ControlGrid, DeformationSpec};

#[derive(Debug, Error)]
pub enum FfdError {
    #[error("basis argument {0} outside [0, 1)")]
    Domain(f64),
    #[error("control grid does not cover the geometry: {0}")]
    Coverage(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("no landmark pairs given")]
    EmptyPairs,
    #[error("landmark outside the volume extent: {0}")]
    OutOfExtent(String),
    #[error("invalid deformation spec: {0}")]
    InvalidSpec(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
}
