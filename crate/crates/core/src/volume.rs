//! 3D scalar volumes with axis-aligned world geometry.
//!
//! Voxel `(i, j, k)` has its center at `origin + (i, j, k) * spacing` (mm).
//! Storage is a flat `f32` buffer in x-fastest order, which is also the
//! on-disk order of the raw_json format.

mod nifti;
mod rawjson;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rawjson::{read_raw_json, write_raw_json, RawHeader};
pub(crate) use rawjson::paths_for as rawjson_paths;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    FileMissing(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("reference and target do not overlap")]
    NoOverlap,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VolumeError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            VolumeError::FileMissing(path.display().to_string())
        } else {
            VolumeError::Io { path: path.display().to_string(), source }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Modality {
    #[serde(rename = "MRI")]
    Mri,
    #[serde(rename = "iUS")]
    Ius,
    #[serde(rename = "ERROR")]
    Error,
    #[serde(rename = "OTHER")]
    #[default]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    RawJson,
    Nifti,
}

impl std::str::FromStr for VolumeFormat {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw_json" | "raw-json" | "json" => Ok(VolumeFormat::RawJson),
            "nifti" | "nii" => Ok(VolumeFormat::Nifti),
            other => Err(VolumeError::UnsupportedFormat(other.to_string())),
        }
    }
}

/// Grid layout shared by volumes, displacement fields and error maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        let g = Geometry { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::InvalidGeometry(format!("non-finite origin {:?}", self.origin)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Geometry::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world position.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel to a world position, or `None` when it falls outside the grid.
    pub fn nearest_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r <= (self.dims[a] - 1) as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// World-space bounding box of the voxel centers.
    pub fn center_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = self.world(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, hi)
    }

    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = self.center_bounds();
        (0..3).all(|a| p[a].is_finite() && p[a] >= lo[a] && p[a] <= hi[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    modality: Modality,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, modality: Modality, data: Vec<f32>) -> Result<Self, VolumeError> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(VolumeError::Format(format!(
                "dims {:?} need {} values, got {}",
                geometry.dims,
                geometry.len(),
                data.len()
            )));
        }
        Ok(Volume { geometry, modality, data })
    }

    pub fn zeros(geometry: Geometry, modality: Modality) -> Result<Self, VolumeError> {
        let n = geometry.len();
        Volume::new(geometry, modality, vec![0.0; n])
    }

    /// Builds a volume by evaluating `f` at every voxel center (world mm).
    pub fn from_fn(
        geometry: Geometry,
        modality: Modality,
        mut f: impl FnMut([f64; 3]) -> f32,
    ) -> Result<Self, VolumeError> {
        geometry.validate()?;
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(geometry.world(i, j, k)));
                }
            }
        }
        Volume::new(geometry, modality, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geometry.origin
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geometry.index(i, j, k)]
    }

    /// Trilinear sample at continuous voxel coordinates. Positions outside
    /// `[0, n-1]` on any axis return 0.
    #[inline]
    pub fn sample_index(&self, p: [f64; 3]) -> f32 {
        sample_trilinear(&self.data, &self.geometry.dims, p, false)
    }

    /// Trilinear sample at a world position with zero outside the voxel-center hull.
    pub fn sample_world(&self, p: [f64; 3]) -> f32 {
        self.sample_index(self.geometry.continuous_index(p))
    }

    /// Sub-block copy starting at voxel `start` with extent `size`.
    pub fn extract_block(&self, start: [usize; 3], size: [usize; 3]) -> Result<Volume, VolumeError> {
        for a in 0..3 {
            if start[a] + size[a] > self.geometry.dims[a] || size[a] == 0 {
                return Err(VolumeError::InvalidGeometry(format!(
                    "block {:?}+{:?} outside dims {:?}",
                    start, size, self.geometry.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
        for k in start[2]..start[2] + size[2] {
            for j in start[1]..start[1] + size[1] {
                let row = self.geometry.index(start[0], j, k);
                data.extend_from_slice(&self.data[row..row + size[0]]);
            }
        }
        let geometry = Geometry {
            dims: size,
            spacing: self.geometry.spacing,
            origin: self.geometry.world(start[0], start[1], start[2]),
        };
        Volume::new(geometry, self.modality, data)
    }

    /// Bounding box (inclusive voxel indices) of the nonzero voxels.
    pub fn nonzero_bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, &v) in self.data.iter().enumerate() {
            if v != 0.0 {
                any = true;
                let c = self.geometry.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}

/// Core trilinear kernel shared by resampling and warping.
///
/// With `clamp_half_voxel`, coordinates within half a voxel outside the center
/// hull are clamped onto it (the voxel's physical extent); beyond that the
/// sample is 0.
#[inline]
pub(crate) fn sample_trilinear(data: &[f32], dims: &[usize; 3], p: [f64; 3], clamp_half_voxel: bool) -> f32 {
    let Some((x0, x1, tx)) = axis_weights(p[0], dims[0], clamp_half_voxel) else {
        return 0.0;
    };
    let Some((y0, y1, ty)) = axis_weights(p[1], dims[1], clamp_half_voxel) else {
        return 0.0;
    };
    let Some((z0, z1, tz)) = axis_weights(p[2], dims[2], clamp_half_voxel) else {
        return 0.0;
    };
    let nx = dims[0];
    let ny = dims[1];
    let at = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)] as f64;
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
    let c0 = lerp(c00, c10, ty);
    let c1 = lerp(c01, c11, ty);
    lerp(c0, c1, tz) as f32
}

#[inline]
fn axis_weights(p: f64, n: usize, clamp_half_voxel: bool) -> Option<(usize, usize, f64)> {
    let hi = (n - 1) as f64;
    let p = if clamp_half_voxel {
        if !(p >= -0.5 && p <= hi + 0.5) {
            return None;
        }
        p.clamp(0.0, hi)
    } else {
        if !(p >= 0.0 && p <= hi) {
            return None;
        }
        p
    };
    let i0 = p.floor() as usize;
    if i0 >= n - 1 {
        return Some((n - 1, n - 1, 0.0));
    }
    Some((i0, i0 + 1, p - i0 as f64))
}

pub fn load_volume(path: impl AsRef<Path>, format: VolumeFormat) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    match format {
        VolumeFormat::RawJson => {
            let (header, payload) = read_raw_json(path)?;
            if header.components != 1 {
                return Err(VolumeError::Format(format!(
                    "expected a scalar volume, header declares {} components",
                    header.components
                )));
            }
            let geometry = header.geometry()?;
            Volume::new(geometry, header.modality, payload)
        }
        VolumeFormat::Nifti => nifti::load_nifti(path),
    }
}

/// Picks the format from the file name (`.nii`/`.nii.gz` → nifti, otherwise raw_json).
pub fn load_volume_auto(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        load_volume(path, VolumeFormat::Nifti)
    } else {
        load_volume(path, VolumeFormat::RawJson)
    }
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let header = RawHeader::for_geometry(volume.geometry(), volume.modality(), 1);
    write_raw_json(path.as_ref(), &header, volume.data())
}

/// Resamples onto an isotropic grid of `target_spacing` mm covering the same
/// physical box. Output centers are laid out symmetrically about the input box
/// center; samples inside the input box are trilinear, outside are 0.
pub fn resample_isotropic(v: &Volume, target_spacing: f64) -> Result<Volume, VolumeError> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(VolumeError::InvalidGeometry(format!(
            "target spacing must be positive, got {target_spacing}"
        )));
    }
    let g = v.geometry();
    let mut dims = [0usize; 3];
    let mut origin = [0.0f64; 3];
    for a in 0..3 {
        let extent = g.dims[a] as f64 * g.spacing[a];
        if g.dims[a] < 2 && g.spacing[a] != target_spacing {
            return Err(VolumeError::DegenerateVolume(format!(
                "axis {a} has {} voxel(s); cannot interpolate to {target_spacing} mm",
                g.dims[a]
            )));
        }
        // guard against 10.000000000000002 / 0.5 style rounding
        let m = ((extent / target_spacing) - 1e-9).ceil().max(1.0) as usize;
        dims[a] = m;
        let center = g.origin[a] + 0.5 * (g.dims[a] - 1) as f64 * g.spacing[a];
        origin[a] = center - 0.5 * (m - 1) as f64 * target_spacing;
    }
    let out = Geometry::new(dims, [target_spacing; 3], origin)?;
    Ok(resample_to_geometry(v, &out))
}

/// Resamples `v` onto an arbitrary axis-aligned grid (same boundary rule as
/// [`resample_isotropic`]).
pub fn resample_to_geometry(v: &Volume, out: &Geometry) -> Volume {
    let g = *v.geometry();
    let [nx, ny, nz] = out.dims;
    let mut data = Vec::with_capacity(out.len());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = g.continuous_index(out.world(i, j, k));
                data.push(sample_trilinear(&v.data, &g.dims, p, true));
            }
        }
    }
    Volume { geometry: *out, modality: v.modality, data }
}

/// Restricts `target` to the world bounding box of `reference`'s nonzero
/// voxels, dilated by `margin_mm` and clamped to `target`'s own extent.
pub fn crop_to_fov(reference: &Volume, target: &Volume, margin_mm: f64) -> Result<Volume, VolumeError> {
    if !(margin_mm >= 0.0) {
        return Err(VolumeError::InvalidGeometry(format!("margin must be >= 0, got {margin_mm}")));
    }
    let (rlo, rhi) = reference.nonzero_bounds().ok_or(VolumeError::NoOverlap)?;
    let rg = reference.geometry();
    let wlo = rg.world(rlo[0], rlo[1], rlo[2]);
    let whi = rg.world(rhi[0], rhi[1], rhi[2]);
    let tg = target.geometry();
    let mut start = [0usize; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        let lo = (wlo[a] - margin_mm - tg.origin[a]) / tg.spacing[a];
        let hi = (whi[a] + margin_mm - tg.origin[a]) / tg.spacing[a];
        let i_lo = (lo - 1e-9).ceil().max(0.0);
        let i_hi = (hi + 1e-9).floor().min((tg.dims[a] - 1) as f64);
        if i_lo > i_hi {
            return Err(VolumeError::NoOverlap);
        }
        start[a] = i_lo as usize;
        size[a] = (i_hi - i_lo) as usize + 1;
    }
    target.extract_block(start, size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d: usize, s: f64) -> Geometry {
        Geometry::new([d, d, d], [s; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn world_index_round_trip() {
        let g = Geometry::new([5, 6, 7], [0.7, 0.5, 1.3], [0.3, -2.0, 10.0]).unwrap();
        for k in 0..7 {
            for j in 0..6 {
                for i in 0..5 {
                    let w = g.world(i, j, k);
                    assert_eq!(g.nearest_voxel(w), Some([i, j, k]));
                    assert_eq!(g.coords(g.index(i, j, k)), [i, j, k]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = geom(2, 1.0);
        assert!(matches!(Volume::new(g, Modality::Other, vec![0.0; 7]), Err(VolumeError::Format(_))));
    }

    #[test]
    fn identity_resample() {
        let g = Geometry::new([6, 5, 4], [1.0; 3], [2.0, 3.0, 4.0]).unwrap();
        let v = Volume::from_fn(g, Modality::Mri, |p| (p[0] * 3.0 + p[1] - p[2] * 0.5) as f32).unwrap();
        let r = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(r.dims(), v.dims());
        assert_eq!(r.origin(), v.origin());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constant_survives_any_resample() {
        let g = Geometry::new([7, 9, 5], [1.0, 0.8, 1.7], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, Modality::Mri, |_| 3.25).unwrap();
        for t in [0.3, 0.5, 0.77, 1.0, 2.2] {
            let r = resample_isotropic(&v, t).unwrap();
            assert!(r.data().iter().all(|&x| x == 3.25), "target {t}");
            let back = resample_to_geometry(&r, v.geometry());
            assert!(back.data().iter().all(|&x| x == 3.25));
        }
    }

    #[test]
    fn ramp_resample_matches_analytic() {
        let g = Geometry::new([10, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, Modality::Mri, |p| p[0] as f32).unwrap();
        let r = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(r.dims(), [20, 8, 8]);
        let (lo, hi) = g.center_bounds();
        let rg = *r.geometry();
        let mut checked = 0;
        for idx in 0..rg.len() {
            let [i, j, k] = rg.coords(idx);
            let w = rg.world(i, j, k);
            if (0..3).all(|a| w[a] >= lo[a] && w[a] <= hi[a]) {
                assert!((r.data()[idx] as f64 - w[0]).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn degenerate_axis_rejected() {
        let g = Geometry::new([4, 4, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::zeros(g, Modality::Other).unwrap();
        assert!(matches!(resample_isotropic(&v, 0.5), Err(VolumeError::DegenerateVolume(_))));
        assert!(resample_isotropic(&v, 1.0).is_ok());
    }

    #[test]
    fn crop_covers_central_cube() {
        let tg = geom(30, 1.0);
        let target = Volume::from_fn(tg, Modality::Mri, |p| (p[0] + 100.0 * p[1]) as f32).unwrap();
        let reference = Volume::from_fn(tg, Modality::Ius, |p| {
            let inside = (0..3).all(|a| p[a] >= 10.0 && p[a] <= 19.0);
            if inside { 1.0 } else { 0.0 }
        })
        .unwrap();
        let out = crop_to_fov(&reference, &target, 0.0).unwrap();
        assert_eq!(out.dims(), [10, 10, 10]);
        assert_eq!(out.origin(), [10.0, 10.0, 10.0]);
        assert_eq!(out.get(0, 0, 0), target.get(10, 10, 10));
        let wide = crop_to_fov(&reference, &target, 2.0).unwrap();
        assert_eq!(wide.dims(), [14, 14, 14]);
    }

    #[test]
    fn crop_full_and_disjoint() {
        let tg = geom(8, 1.0);
        let target = Volume::from_fn(tg, Modality::Mri, |p| p[2] as f32 + 1.0).unwrap();
        assert_eq!(crop_to_fov(&target, &target, 0.0).unwrap(), target);
        let far = Geometry::new([4, 4, 4], [1.0; 3], [100.0, 0.0, 0.0]).unwrap();
        let reference = Volume::from_fn(far, Modality::Ius, |_| 1.0).unwrap();
        assert!(matches!(crop_to_fov(&reference, &target, 0.0), Err(VolumeError::NoOverlap)));
        let empty = Volume::zeros(tg, Modality::Ius).unwrap();
        assert!(matches!(crop_to_fov(&empty, &target, 0.0), Err(VolumeError::NoOverlap)));
    }

    #[test]
    fn sample_is_exact_at_integer_positions() {
        let g = Geometry::new([3, 4, 5], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_fn(g, Modality::Mri, |p| (p[0] * 1.1 - p[1] * 7.3 + p[2] * 0.01) as f32).unwrap();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let p = [c[0] as f64, c[1] as f64, c[2] as f64];
            assert_eq!(v.sample_index(p).to_bits(), v.data()[idx].to_bits());
        }
        assert_eq!(v.sample_index([-0.01, 0.0, 0.0]), 0.0);
        assert_eq!(v.sample_index([2.0001, 0.0, 0.0]), 0.0);
    }
}
