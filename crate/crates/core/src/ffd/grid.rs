use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FfdError;
use crate::volume::{Geometry, VolumeError};

/// Parameters of a random misalignment draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationSpec {
    pub seed: u64,
    pub max_points_per_axis: usize,
    pub max_displacement_mm: f64,
}

impl DeformationSpec {
    pub const PUBLISHED_MAX_POINTS: usize = 20;
    pub const PUBLISHED_MAX_DISPLACEMENT_MM: f64 = 10.0;

    pub fn published(seed: u64) -> Self {
        DeformationSpec {
            seed,
            max_points_per_axis: Self::PUBLISHED_MAX_POINTS,
            max_displacement_mm: Self::PUBLISHED_MAX_DISPLACEMENT_MM,
        }
    }

    pub fn validate(&self) -> Result<(), FfdError> {
        if self.max_points_per_axis < 1 {
            return Err(FfdError::InvalidSpec("max_points_per_axis must be >= 1".into()));
        }
        if !(self.max_displacement_mm >= 0.0 && self.max_displacement_mm.is_finite()) {
            return Err(FfdError::InvalidSpec(format!(
                "max_displacement_mm must be finite and >= 0, got {}",
                self.max_displacement_mm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub counts: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    /// One displacement per control point, x-fastest.
    pub coeffs: Vec<[f64; 3]>,
    pub seed: Option<u64>,
}

impl ControlGrid {
    /// Grid layout with `interior[a]` points strictly inside the voxel-center
    /// hull of `geometry`. With `isotropic`, every axis uses the spacing and
    /// count of the longest axis, which still covers the shorter ones.
    pub fn layout(geometry: &Geometry, interior: [usize; 3], isotropic: bool) -> Result<ControlGrid, FfdError> {
        geometry.validate()?;
        if interior.iter().any(|&n| n == 0) {
            return Err(FfdError::InvalidSpec("interior control-point count must be >= 1".into()));
        }
        let extent: [f64; 3] =
            std::array::from_fn(|a| ((geometry.dims[a] - 1) as f64 * geometry.spacing[a]).max(geometry.spacing[a]));
        let (counts, spacing) = if isotropic {
            let n = interior[0];
            let longest = extent.iter().cloned().fold(0.0, f64::max);
            ([n + 4; 3], [longest / (n + 1) as f64; 3])
        } else {
            (
                std::array::from_fn(|a| interior[a] + 4),
                std::array::from_fn(|a| extent[a] / (interior[a] + 1) as f64),
            )
        };
        let origin = std::array::from_fn(|a| geometry.origin[a] - spacing[a]);
        let len = counts.iter().product();
        Ok(ControlGrid { counts, spacing_mm: spacing, origin_mm: origin, coeffs: vec![[0.0; 3]; len], seed: None })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        a + self.counts[0] * (b + self.counts[1] * c)
    }

    /// Interior (non-padding) points per axis.
    pub fn interior_counts(&self) -> [usize; 3] {
        self.counts.map(|c| c.saturating_sub(4))
    }

    /// Whether point `(a, b, c)` is an interior point of the layout.
    pub fn is_interior(&self, a: usize, b: usize, c: usize) -> bool {
        [a, b, c].iter().zip(self.counts.iter()).all(|(&i, &n)| i >= 2 && i + 2 < n)
    }

    pub fn validate(&self) -> Result<(), FfdError> {
        if self.counts.iter().any(|&c| c < 4) {
            return Err(FfdError::InvalidSpec(format!("counts {:?}: need >= 4 per axis", self.counts)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(FfdError::InvalidSpec(format!("spacing {:?}", self.spacing_mm)));
        }
        if self.coeffs.len() != self.counts.iter().product::<usize>() {
            return Err(FfdError::InvalidSpec(format!(
                "{} coefficients for counts {:?}",
                self.coeffs.len(),
                self.counts
            )));
        }
        if self.coeffs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FfdError::InvalidSpec("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Largest absolute coefficient component.
    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `alpha * self + beta * other` on a shared layout.
    pub fn combine(&self, alpha: f64, other: &ControlGrid, beta: f64) -> Result<ControlGrid, FfdError> {
        if self.counts != other.counts || self.spacing_mm != other.spacing_mm || self.origin_mm != other.origin_mm {
            return Err(FfdError::GeometryMismatch("control grid layouts differ".into()));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| std::array::from_fn(|c| alpha * a[c] + beta * b[c]))
            .collect();
        Ok(ControlGrid { coeffs, seed: None, ..self.clone() })
    }
}

/// Draws a random isotropic grid over `geometry`.
///
/// One interior count `n ~ U{1..max_points_per_axis}` is shared by all axes;
/// every interior coefficient component is `U[-max, +max]` (rounded to f32 so
/// serialized grids reload exactly); boundary and margin points stay zero.
pub fn sample_random_grid(spec: &DeformationSpec, geometry: &Geometry) -> Result<ControlGrid, FfdError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.random_range(1..=spec.max_points_per_axis);
    let mut grid = ControlGrid::layout(geometry, [n; 3], true)?;
    grid.seed = Some(spec.seed);
    let m = spec.max_displacement_mm;
    if m > 0.0 {
        let [cx, cy, cz] = grid.counts;
        for c in 2..cz - 2 {
            for b in 2..cy - 2 {
                for a in 2..cx - 2 {
                    let idx = grid.index(a, b, c);
                    for comp in 0..3 {
                        let v: f64 = rng.random_range(-m..=m);
                        grid.coeffs[idx][comp] = round_f32_within(v, m);
                    }
                }
            }
        }
    }
    Ok(grid)
}

fn round_f32_within(v: f64, bound: f64) -> f64 {
    let mut r = v as f32;
    while (r as f64).abs() > bound {
        r = f32::from_bits(r.to_bits() - 1);
    }
    r as f64
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    counts: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    seed: Option<u64>,
}

/// `<name>.json` header + `<name>.raw` f32 payload (points x-fastest, the three
/// components of each point adjacent).
pub fn save_grid(grid: &ControlGrid, path: impl AsRef<Path>) -> Result<(), FfdError> {
    grid.validate()?;
    let (hp, rp) = crate::volume::rawjson_paths(path.as_ref());
    if let Some(parent) = hp.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| VolumeError::io(parent, e))?;
    }
    let header = GridHeader {
        counts: grid.counts,
        spacing_mm: grid.spacing_mm,
        origin_mm: grid.origin_mm,
        seed: grid.seed,
    };
    fs::write(&hp, serde_json::to_string_pretty(&header).expect("grid header serializes"))
        .map_err(|e| VolumeError::io(&hp, e))?;
    let mut bytes = Vec::with_capacity(grid.len() * 12);
    for c in &grid.coeffs {
        for v in c {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&rp, bytes).map_err(|e| VolumeError::io(&rp, e).into())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<ControlGrid, FfdError> {
    let (hp, rp) = crate::volume::rawjson_paths(path.as_ref());
    let text = fs::read_to_string(&hp).map_err(|e| VolumeError::io(&hp, e))?;
    let h: GridHeader = serde_json::from_str(&text).map_err(|e| VolumeError::Format(e.to_string()))?;
    let bytes = fs::read(&rp).map_err(|e| VolumeError::io(&rp, e))?;
    let n: usize = h.counts.iter().product();
    if bytes.len() != n * 12 {
        return Err(VolumeError::Format(format!("grid payload has {} bytes, expected {}", bytes.len(), n * 12)).into());
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let grid = ControlGrid {
        counts: h.counts,
        spacing_mm: h.spacing_mm,
        origin_mm: h.origin_mm,
        coeffs: vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        seed: h.seed,
    };
    grid.validate()?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::new([16, 12, 20], [1.0, 1.0, 0.5], [3.0, -4.0, 0.0]).unwrap()
    }

    #[test]
    fn same_seed_same_grid() {
        let spec = DeformationSpec::published(42);
        let a = sample_random_grid(&spec, &geom()).unwrap();
        let b = sample_random_grid(&spec, &geom()).unwrap();
        assert_eq!(a, b);
        let c = sample_random_grid(&DeformationSpec::published(43), &geom()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_amplitude() {
        let spec = DeformationSpec { max_displacement_mm: 0.0, ..DeformationSpec::published(3) };
        let g = sample_random_grid(&spec, &geom()).unwrap();
        assert!(g.coeffs.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_is_isotropic_and_padded() {
        for seed in 0..50 {
            let g = sample_random_grid(&DeformationSpec::published(seed), &geom()).unwrap();
            let n = g.interior_counts();
            assert!(n[0] == n[1] && n[1] == n[2]);
            assert!((1..=20).contains(&n[0]));
            assert!(g.spacing_mm[0] == g.spacing_mm[1] && g.spacing_mm[1] == g.spacing_mm[2]);
            assert!(g.max_abs_coeff() <= 10.0);
            for c in 0..g.counts[2] {
                for b in 0..g.counts[1] {
                    for a in 0..g.counts[0] {
                        if !g.is_interior(a, b, c) {
                            assert_eq!(g.coeffs[g.index(a, b, c)], [0.0; 3]);
                        }
                    }
                }
            }
            // one control cell of margin on every side
            let (lo, hi) = geom().center_bounds();
            for a in 0..3 {
                assert!(g.origin_mm[a] <= lo[a] - g.spacing_mm[a] + 1e-9);
                let top = g.origin_mm[a] + (g.counts[a] - 1) as f64 * g.spacing_mm[a];
                assert!(top >= hi[a] + g.spacing_mm[a] - 1e-9);
            }
        }
    }

    #[test]
    fn serialization_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = sample_random_grid(&DeformationSpec::published(9), &geom()).unwrap();
        let p = dir.path().join("grid.json");
        save_grid(&g, &p).unwrap();
        assert_eq!(load_grid(&p).unwrap(), g);
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = DeformationSpec { max_points_per_axis: 0, ..DeformationSpec::published(1) };
        assert!(sample_random_grid(&spec, &geom()).is_err());
        let spec = DeformationSpec { max_displacement_mm: -1.0, ..DeformationSpec::published(1) };
        assert!(sample_random_grid(&spec, &geom()).is_err());
    }
}
