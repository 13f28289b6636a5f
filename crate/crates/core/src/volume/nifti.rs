//! Minimal NIfTI-1 ingestion (single-file `.nii`, optionally gzipped).
//!
//! Only scalar 3D images are accepted. Non-axis-aligned or flipped affines
//! are resampled onto an axis-aligned grid with positive spacing.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{sample_trilinear, Geometry, Modality, Volume, VolumeError};

const HEADER_LEN: usize = 348;

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.little { i32::from_le_bytes(b) } else { i32::from_be_bytes(b) }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    }

    fn value(&self, datatype: i16, off: usize) -> f64 {
        let b = &self.bytes[off..];
        macro_rules! rd {
            ($t:ty, $n:expr) => {{
                let a: [u8; $n] = b[..$n].try_into().unwrap();
                (if self.little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match datatype {
            2 => b[0] as f64,
            256 => b[0] as i8 as f64,
            4 => rd!(i16, 2),
            512 => rd!(u16, 2),
            8 => rd!(i32, 4),
            768 => rd!(u32, 4),
            16 => rd!(f32, 4),
            64 => rd!(f64, 8),
            _ => unreachable!("checked by bytes_per_voxel"),
        }
    }
}

fn bytes_per_voxel(datatype: i16) -> Option<usize> {
    match datatype {
        2 | 256 => Some(1),
        4 | 512 => Some(2),
        8 | 768 | 16 => Some(4),
        64 => Some(8),
        _ => None,
    }
}

pub(super) fn load_nifti(path: &Path) -> Result<Volume, VolumeError> {
    let raw = fs::read(path).map_err(|e| VolumeError::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| VolumeError::Format(format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    parse_nifti(&bytes)
}

pub(super) fn parse_nifti(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Format("file shorter than a NIfTI-1 header".into()));
    }
    let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348;
    let r = Reader { bytes, little };
    if r.i32(0) != 348 {
        return Err(VolumeError::Format("sizeof_hdr is not 348".into()));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(VolumeError::UnsupportedFormat("only single-file NIfTI-1 (n+1) is supported".into()));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            let d = r.i16(42 + 2 * a);
            if d < 1 {
                return Err(VolumeError::Format(format!("dim[{}] = {d}", a + 1)));
            }
            dims[a] = d as usize;
        }
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(VolumeError::UnsupportedFormat("only 3D scalar images are supported".into()));
        }
    }
    let datatype = r.i16(70);
    let bpv = bytes_per_voxel(datatype)
        .ok_or_else(|| VolumeError::UnsupportedFormat(format!("NIfTI datatype {datatype}")))?;
    let pixdim: Vec<f64> = (0..8).map(|i| r.f32(76 + 4 * i) as f64).collect();
    let vox_offset = r.f32(108).max(HEADER_LEN as f32) as usize;
    let n = dims.iter().product::<usize>();
    if bytes.len() < vox_offset + n * bpv {
        return Err(VolumeError::Format(format!(
            "payload needs {} bytes after offset {vox_offset}, file has {}",
            n * bpv,
            bytes.len()
        )));
    }
    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let data: Vec<f32> = (0..n)
        .map(|i| (r.value(datatype, vox_offset + i * bpv) * slope + if inter.is_finite() { inter } else { 0.0 }) as f32)
        .collect();

    let (linear, offset) = affine(&r, &pixdim);
    let geometry_native = Geometry { dims, spacing: [1.0; 3], origin: [0.0; 3] };

    // Axis-aligned with positive spacing: use as is.
    let is_diag = (0..3).all(|i| (0..3).all(|j| i == j || linear[(i, j)] == 0.0));
    if is_diag && (0..3).all(|i| linear[(i, i)] > 0.0) {
        let g = Geometry::new(
            dims,
            [linear[(0, 0)], linear[(1, 1)], linear[(2, 2)]],
            [offset[0], offset[1], offset[2]],
        )?;
        return Volume::new(g, Modality::Other, data);
    }
    resample_affine(&data, &geometry_native, &linear, &offset)
}

fn affine(r: &Reader, pixdim: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let sform = r.i16(254);
    let qform = r.i16(252);
    if sform > 0 {
        let row = |o: usize| [r.f32(o) as f64, r.f32(o + 4) as f64, r.f32(o + 8) as f64, r.f32(o + 12) as f64];
        let (x, y, z) = (row(280), row(296), row(312));
        let m = Matrix3::new(x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]);
        return (m, Vector3::new(x[3], y[3], z[3]));
    }
    let scale = Vector3::new(pixdim[1].abs().max(1e-12), pixdim[2].abs().max(1e-12), pixdim[3].abs().max(1e-12));
    if qform > 0 {
        let b = r.f32(256) as f64;
        let c = r.f32(260) as f64;
        let d = r.f32(264) as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let m = rot * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2] * qfac));
        let off = Vector3::new(r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64);
        return (m, off);
    }
    (Matrix3::from_diagonal(&scale), Vector3::zeros())
}

/// Resamples voxel data with index→world map `linear * idx + offset` onto an
/// axis-aligned grid whose spacing is the smallest voxel edge.
fn resample_affine(
    data: &[f32],
    native: &Geometry,
    linear: &Matrix3<f64>,
    offset: &Vector3<f64>,
) -> Result<Volume, VolumeError> {
    let inv = linear
        .try_inverse()
        .ok_or_else(|| VolumeError::Format("singular NIfTI affine".into()))?;
    let spacing = (0..3).map(|c| linear.column(c).norm()).fold(f64::INFINITY, f64::min);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let idx = Vector3::new(
            if corner & 1 != 0 { (native.dims[0] - 1) as f64 } else { 0.0 },
            if corner & 2 != 0 { (native.dims[1] - 1) as f64 } else { 0.0 },
            if corner & 4 != 0 { (native.dims[2] - 1) as f64 } else { 0.0 },
        );
        let w = linear * idx + offset;
        for a in 0..3 {
            lo[a] = lo[a].min(w[a]);
            hi[a] = hi[a].max(w[a]);
        }
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((hi[a] - lo[a]) / spacing + 1e-6).floor() as usize + 1;
    }
    let g = Geometry::new(dims, [spacing; 3], lo)?;
    let mut out = Vec::with_capacity(g.len());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let w = g.world(i, j, k);
                let p = inv * (Vector3::new(w[0], w[1], w[2]) - offset);
                let mut q = [p[0], p[1], p[2]];
                // snap tiny rounding noise so grid-coincident samples stay exact
                for v in q.iter_mut() {
                    let r = v.round();
                    if (*v - r).abs() < 1e-9 {
                        *v = r;
                    }
                }
                out.push(sample_trilinear(data, &native.dims, q, false));
            }
        }
    }
    Volume::new(g, Modality::Other, out)
}
