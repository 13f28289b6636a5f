//! Procedural MRI/iUS cohort for tests and demos: a shared template of soft
//! ellipsoids, jittered per subject. The iUS view remaps the contrast, adds
//! bright boundary rims and multiplicative speckle, and is zero outside a
//! spherical field of view.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::build::CaseDescriptor;
use super::DatasetError;
use crate::landmarks::{save_landmarks, Landmark, LandmarkSet};
use crate::seed::derive;
use crate::volume::{save_volume, Geometry, Modality, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub landmarks_per_subject: usize,
    /// Cubic volume edge (voxels).
    pub dims: usize,
    pub spacing_mm: f64,
    pub blobs: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { subjects: 8, landmarks_per_subject: 2, dims: 64, spacing_mm: 1.0, blobs: 40, seed: 2024 }
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    mri: f64,
    ius: f64,
}

/// Blob centres and radii are in units of the volume edge.
fn template(spec: &SyntheticSpec) -> Vec<Blob> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[b"template"]));
    (0..spec.blobs)
        .map(|_| {
            let center = [0; 3].map(|_| rng.random_range(0.15..0.85));
            let r = rng.random_range(0.04..0.14);
            let radii = [0; 3].map(|_| r * rng.random_range(0.7..1.3));
            let mri = rng.random_range(0.2..1.0);
            let ius = if rng.random_bool(0.5) { 1.0 - mri } else { rng.random_range(0.1..0.9) };
            Blob { center, radii, mri, ius }
        })
        .collect()
}

fn subject_id(i: usize) -> String {
    format!("case{:02}", i + 1)
}

/// Renders one subject: `(mri, ius, landmarks)`.
pub fn render_subject(spec: &SyntheticSpec, index: usize) -> Result<(Volume, Volume, LandmarkSet), DatasetError> {
    let pid = subject_id(index);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(spec.seed, &[b"subject", pid.as_bytes()]));
    let n = spec.dims;
    let s = spec.spacing_mm;
    let edge = (n - 1) as f64 * s;
    let blobs: Vec<Blob> = template(spec)
        .into_iter()
        .map(|b| Blob {
            center: b.center.map(|c| (c + rng.random_range(-0.03..0.03)) * edge),
            radii: b.radii.map(|r| r * rng.random_range(0.85..1.15) * edge),
            ..b
        })
        .collect();
    let g = Geometry::new([n; 3], [s; 3], [0.0; 3])?;

    // soft indicator per blob with a ~1 voxel transition
    let field = |p: [f64; 3]| -> (f64, f64, f64) {
        let (mut m, mut u, mut rim) = (0.15, 0.2, 0.0f64);
        for b in &blobs {
            let q: f64 = (0..3).map(|a| ((p[a] - b.center[a]) / b.radii[a]).powi(2)).sum::<f64>().sqrt();
            let r_mean = (b.radii[0] + b.radii[1] + b.radii[2]) / 3.0;
            let dist = (q - 1.0) * r_mean / s;
            let w = 1.0 / (1.0 + (dist * 2.0).exp());
            m += w * (b.mri - m);
            u += w * (b.ius - u);
            rim = rim.max((-dist * dist).exp());
        }
        (m, u, rim)
    };

    let noise = Normal::new(0.0f64, 0.02).unwrap();
    let speckle = Normal::new(1.0f64, 0.25).unwrap();
    let mut mri = Vec::with_capacity(g.len());
    let mut ius = Vec::with_capacity(g.len());
    let centre = edge / 2.0;
    let fov = 0.47 * edge;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let p = g.world(i, j, k);
                let (m, u, rim) = field(p);
                mri.push((m * 1000.0 + noise.sample(&mut rng) * 1000.0).max(0.0) as f32);
                let r = ((p[0] - centre).powi(2) + (p[1] - centre).powi(2) + (p[2] - centre).powi(2)).sqrt();
                let v = if r <= fov {
                    let depth_gain = 1.0 - 0.4 * (p[2] / edge);
                    ((0.6 * u + 0.8 * rim) * depth_gain * speckle.sample(&mut rng).max(0.05)).max(1e-3) * 255.0
                } else {
                    0.0
                };
                ius.push(v as f32);
            }
        }
    }
    let mri = Volume::new(g, Modality::Mri, mri)?;
    let ius = Volume::new(g, Modality::Ius, ius)?;

    // landmarks at blob centres well inside the field of view
    let mut order: Vec<usize> = (0..blobs.len()).collect();
    order.sort_by(|&a, &b| {
        let d = |i: usize| (0..3).map(|x| (blobs[i].center[x] - centre).powi(2)).sum::<f64>();
        d(a).total_cmp(&d(b))
    });
    let mut lms = Vec::new();
    for &bi in order.iter().skip(rng.random_range(0..3)) {
        if lms.len() == spec.landmarks_per_subject {
            break;
        }
        let c = blobs[bi].center;
        let close = lms.iter().any(|l: &Landmark| (0..3).map(|a| (l.position[a] - c[a]).powi(2)).sum::<f64>() < 4.0);
        if !close {
            let snapped = c.map(|v| (v / s).round() * s);
            lms.push(Landmark { id: format!("L{}", lms.len() + 1), position: snapped });
        }
    }
    Ok((mri, ius, LandmarkSet::new(lms)?))
}

/// Writes every subject under `dir/<id>/` and returns the descriptor paths.
pub fn write_cohort(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, DatasetError> {
    if spec.subjects == 0 || spec.dims < 8 || !(spec.spacing_mm > 0.0) {
        return Err(DatasetError::InvalidOption(format!("bad synthetic spec {spec:?}")));
    }
    let dir = dir.as_ref();
    let mut out = Vec::with_capacity(spec.subjects);
    for i in 0..spec.subjects {
        let pid = subject_id(i);
        let sub = dir.join(&pid);
        fs::create_dir_all(&sub).map_err(|e| DatasetError::io(&sub, e))?;
        let (mri, ius, lms) = render_subject(spec, i)?;
        save_volume(&mri, sub.join("mri.json"))?;
        save_volume(&ius, sub.join("ius.json"))?;
        save_landmarks(&lms, sub.join("landmarks.csv"))?;
        let desc = CaseDescriptor {
            patient_id: pid,
            mri: "mri.json".into(),
            ius: "ius.json".into(),
            landmarks: "landmarks.csv".into(),
            landmark_pairs: None,
        };
        let path = sub.join("case.json");
        fs::write(&path, serde_json::to_string_pretty(&desc).expect("descriptor serializes"))
            .map_err(|e| DatasetError::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subjects_differ_and_repeat() {
        let spec = SyntheticSpec { dims: 24, blobs: 8, ..SyntheticSpec::default() };
        let (m0, u0, l0) = render_subject(&spec, 0).unwrap();
        let (m0b, _, _) = render_subject(&spec, 0).unwrap();
        let (m1, _, _) = render_subject(&spec, 1).unwrap();
        assert_eq!(m0, m0b);
        assert_ne!(m0, m1);
        assert_eq!(l0.len(), 2);
        assert_eq!(u0.get(0, 0, 0), 0.0);
        assert!(u0.get(12, 12, 12) > 0.0);
        for l in l0.entries() {
            assert!(u0.sample_world(l.position) > 0.0);
        }
    }
}
