use std::fs;
use std::path::Path;

use super::DatasetError;
use crate::landmarks::LandmarkSet;
use crate::volume::Volume;

const MAGIC: &[u8; 4] = b"PRC1";
const HEADER_LEN: usize = 64;

/// Provenance shared by every patch cut from one deformation.
#[derive(Debug, Clone)]
pub struct PatchContext {
    pub patient_id: String,
    pub deformation_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patient_id: String,
    pub landmark_id: String,
    pub deformation_index: usize,
    pub seed: u64,
    pub center_world_mm: [f64; 3],
    /// First voxel of the window in the source volume.
    pub start_voxel: [usize; 3],
    pub size: usize,
    /// `size³` values each, x-fastest.
    pub mri: Vec<f32>,
    pub ius: Vec<f32>,
    pub error: Vec<f32>,
}

/// Rescales to `[0, 1]`; a constant patch maps to all zeros.
pub fn normalize_min_max(data: &mut [f32]) {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in data.iter_mut() {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
}

/// Window start along one axis: `c − P/2`, shifted into `[0, n − P]`.
fn window_start(center: usize, dim: usize, p: usize) -> usize {
    center.saturating_sub(p / 2).min(dim - p)
}

/// Cuts one `P³` patch triple per landmark. Landmarks outside the grid, or
/// volumes smaller than `P`, are skipped with a warning.
pub fn extract_patches(
    mri: &Volume,
    warped_ius: &Volume,
    error: &Volume,
    landmarks: &LandmarkSet,
    patch_size: usize,
    ctx: &PatchContext,
) -> Result<Vec<PatchRecord>, DatasetError> {
    if patch_size == 0 || patch_size % 2 != 0 {
        return Err(DatasetError::InvalidOption(format!("patch size must be even and > 0, got {patch_size}")));
    }
    let g = mri.geometry();
    if g != warped_ius.geometry() || g != error.geometry() {
        return Err(DatasetError::GeometryMismatch(format!("patient {}: patch sources differ", ctx.patient_id)));
    }
    let dims = g.dims;
    if dims.iter().any(|&d| d < patch_size) {
        log::warn!(
            "patient {}: volume {:?} smaller than patch {patch_size}, no patches",
            ctx.patient_id,
            dims
        );
        return Ok(Vec::new());
    }
    let size = [patch_size; 3];
    let mut out = Vec::with_capacity(landmarks.len());
    for lm in landmarks.entries() {
        let Some(c) = g.nearest_voxel(lm.position) else {
            log::warn!("patient {}: landmark {} at {:?} outside volume, skipped", ctx.patient_id, lm.id, lm.position);
            continue;
        };
        let start = [0, 1, 2].map(|a| window_start(c[a], dims[a], patch_size));
        let mut m = mri.extract_block(start, size)?.into_data();
        let mut u = warped_ius.extract_block(start, size)?.into_data();
        let e = error.extract_block(start, size)?.into_data();
        normalize_min_max(&mut m);
        normalize_min_max(&mut u);
        out.push(PatchRecord {
            patient_id: ctx.patient_id.clone(),
            landmark_id: lm.id.clone(),
            deformation_index: ctx.deformation_index,
            seed: ctx.seed,
            center_world_mm: lm.position,
            start_voxel: start,
            size: patch_size,
            mri: m,
            ius: u,
            error: e,
        });
    }
    Ok(out)
}

/// Fixed-layout container: 64-byte header, then the MRI, iUS and error
/// payloads as little-endian f32.
pub fn write_record(record: &PatchRecord, path: &Path) -> Result<(), DatasetError> {
    let n = record.size.pow(3);
    for (name, arr) in [("mri", &record.mri), ("ius", &record.ius), ("error", &record.error)] {
        if arr.len() != n {
            return Err(DatasetError::Record {
                path: path.display().to_string(),
                msg: format!("{name} payload has {} values, expected {n}", arr.len()),
            });
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 12 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(record.size as u32).to_le_bytes());
    for k in 0..3u64 {
        buf.extend_from_slice(&(HEADER_LEN as u64 + k * 4 * n as u64).to_le_bytes());
    }
    buf.extend_from_slice(&record.seed.to_le_bytes());
    buf.extend_from_slice(&(record.deformation_index as u32).to_le_bytes());
    buf.resize(HEADER_LEN, 0);
    for arr in [&record.mri, &record.ius, &record.error] {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| DatasetError::io(path, e))
}

/// Payloads and header fields of a `.pr` file. Identity fields
/// (patient, landmark, center) live in the manifest and are left empty.
pub fn read_record(path: &Path) -> Result<PatchRecord, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    let bad = |msg: String| DatasetError::Record { path: path.display().to_string(), msg };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing PRC1 header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let size = u32_at(4) as usize;
    let n = size.pow(3);
    if bytes.len() != HEADER_LEN + 12 * n {
        return Err(bad(format!("{} bytes, expected {} for P={size}", bytes.len(), HEADER_LEN + 12 * n)));
    }
    let mut arrays = Vec::with_capacity(3);
    for k in 0..3 {
        let off = u64_at(8 + 8 * k) as usize;
        if off < HEADER_LEN || off + 4 * n > bytes.len() {
            return Err(bad(format!("payload offset {off} out of range")));
        }
        let arr: Vec<f32> = bytes[off..off + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(arr);
    }
    let error = arrays.pop().unwrap();
    let ius = arrays.pop().unwrap();
    let mri = arrays.pop().unwrap();
    Ok(PatchRecord {
        patient_id: String::new(),
        landmark_id: String::new(),
        deformation_index: u32_at(40) as usize,
        seed: u64_at(32),
        center_world_mm: [0.0; 3],
        start_voxel: [0; 3],
        size,
        mri,
        ius,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Landmark;
    use crate::volume::{Geometry, Modality};

    fn vols(d: usize) -> (Volume, Volume, Volume) {
        let g = Geometry::new([d; 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = Volume::from_fn(g, Modality::Mri, |p| (p[0] + 100.0 * p[1] + 10000.0 * p[2]) as f32).unwrap();
        let u = Volume::from_fn(g, Modality::Ius, |p| (p[0] * p[1] - p[2]) as f32).unwrap();
        let e = Volume::from_fn(g, Modality::Error, |p| (p[0] * 0.01 + p[2] * 0.02) as f32).unwrap();
        (m, u, e)
    }

    fn ctx() -> PatchContext {
        PatchContext { patient_id: "p".into(), deformation_index: 3, seed: 77 }
    }

    fn lms(pts: &[[f64; 3]]) -> LandmarkSet {
        LandmarkSet::new(
            pts.iter().enumerate().map(|(i, p)| Landmark { id: format!("L{i}"), position: *p }).collect(),
        )
        .unwrap()
    }

    fn slice(v: &Volume, start: [usize; 3], p: usize) -> Vec<f32> {
        let mut out = Vec::new();
        for k in start[2]..start[2] + p {
            for j in start[1]..start[1] + p {
                for i in start[0]..start[0] + p {
                    out.push(v.get(i, j, k));
                }
            }
        }
        out
    }

    #[test]
    fn interior_patch_is_slice() {
        let (m, u, e) = vols(32);
        let recs = extract_patches(&m, &u, &e, &lms(&[[16.0, 15.0, 17.0]]), 16, &ctx()).unwrap();
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.start_voxel, [8, 7, 9]);
        assert_eq!(r.error, slice(&e, [8, 7, 9], 16));
        let mut expect = slice(&m, [8, 7, 9], 16);
        normalize_min_max(&mut expect);
        assert_eq!(r.mri, expect);
    }

    #[test]
    fn clamped_at_face() {
        let (m, u, e) = vols(40);
        let recs = extract_patches(&m, &u, &e, &lms(&[[3.0, 20.0, 38.0]]), 16, &ctx()).unwrap();
        assert_eq!(recs[0].start_voxel, [0, 12, 24]);
        assert_eq!(recs[0].error.len(), 16usize.pow(3));
    }

    #[test]
    fn skips_outside_and_small() {
        let (m, u, e) = vols(20);
        let recs = extract_patches(&m, &u, &e, &lms(&[[-5.0, 2.0, 2.0], [10.0; 3]]), 16, &ctx()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].landmark_id, "L1");
        assert!(extract_patches(&m, &u, &e, &lms(&[[10.0; 3]]), 32, &ctx()).unwrap().is_empty());
        assert!(matches!(
            extract_patches(&m, &u, &e, &lms(&[[10.0; 3]]), 7, &ctx()),
            Err(DatasetError::InvalidOption(_))
        ));
    }

    #[test]
    fn normalization() {
        let mut a = vec![2.0, 4.0, 3.0];
        normalize_min_max(&mut a);
        assert_eq!(a, vec![0.0, 1.0, 0.5]);
        let mut c = vec![5.0; 4];
        normalize_min_max(&mut c);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn record_round_trip() {
        let (m, u, e) = vols(16);
        let r = extract_patches(&m, &u, &e, &lms(&[[8.0; 3]]), 8, &ctx()).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pr");
        write_record(&r, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PRC1");
        assert_eq!(bytes.len(), 64 + 12 * 512);
        let back = read_record(&path).unwrap();
        assert_eq!((back.mri, back.ius, back.error), (r.mri, r.ius, r.error));
        assert_eq!((back.seed, back.deformation_index, back.size), (77, 3, 8));
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(read_record(&path), Err(DatasetError::Record { .. })));
    }
}
