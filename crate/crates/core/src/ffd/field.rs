use std::path::Path;

use super::{basis::weights, ControlGrid, FfdError};
use crate::volume::{read_raw_json, write_raw_json, Geometry, Modality, RawHeader, Volume};

/// Dense per-voxel displacement (mm) on a volume grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: Geometry,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(geometry: Geometry, vectors: Vec<[f64; 3]>) -> Result<Self, FfdError> {
        geometry.validate()?;
        if vectors.len() != geometry.len() {
            return Err(FfdError::GeometryMismatch(format!(
                "{} vectors for dims {:?}",
                vectors.len(),
                geometry.dims
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FfdError::InvalidSpec("non-finite displacement".into()));
        }
        Ok(DisplacementField { geometry, vectors })
    }

    pub fn constant(geometry: Geometry, d: [f64; 3]) -> Result<Self, FfdError> {
        let n = geometry.len();
        DisplacementField::new(geometry, vec![d; n])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn negated(&self) -> DisplacementField {
        DisplacementField {
            geometry: self.geometry,
            vectors: self.vectors.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }

    pub fn max_abs_component(&self) -> f64 {
        self.vectors.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest component-wise difference to another field on the same grid.
    pub fn max_abs_diff(&self, other: &DisplacementField) -> f64 {
        self.vectors
            .iter()
            .zip(&other.vectors)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Cell index and fractional offset of each voxel along one axis.
fn axis_cells(grid: &ControlGrid, g: &Geometry, axis: usize) -> Result<Vec<(usize, [f64; 4])>, FfdError> {
    let count = grid.counts[axis];
    let s = grid.spacing_mm[axis];
    (0..g.dims[axis])
        .map(|i| {
            let x = g.origin[axis] + i as f64 * g.spacing[axis];
            let r = (x - grid.origin_mm[axis]) / s;
            if !(r >= 1.0 - 1e-9 && r <= (count - 2) as f64 + 1e-9) {
                return Err(FfdError::Coverage(format!(
                    "axis {axis}: voxel {i} at {x} mm maps to grid coordinate {r:.6}, support is [1, {}]",
                    count - 2
                )));
            }
            let cell = (r.floor() as usize).clamp(1, count - 3);
            let t = (r - cell as f64).clamp(0.0, 1.0);
            Ok((cell - 1, weights(t)))
        })
        .collect()
}

/// Dense field by separable contraction over z, then y, then x.
pub fn dense_field(grid: &ControlGrid, geometry: &Geometry) -> Result<DisplacementField, FfdError> {
    grid.validate()?;
    geometry.validate()?;
    let cx = axis_cells(grid, geometry, 0)?;
    let cy = axis_cells(grid, geometry, 1)?;
    let cz = axis_cells(grid, geometry, 2)?;
    let [gx, gy, _] = grid.counts;
    let [nx, ny, nz] = geometry.dims;

    // t1[a, b, k] = sum_n wz[k][n] c[a, b, iz_k + n]
    let mut t1 = vec![[0.0f64; 3]; gx * gy * nz];
    for (k, (iz, wz)) in cz.iter().enumerate() {
        for b in 0..gy {
            for a in 0..gx {
                let mut acc = [0.0; 3];
                for (n, w) in wz.iter().enumerate() {
                    let c = &grid.coeffs[grid.index(a, b, iz + n)];
                    for comp in 0..3 {
                        acc[comp] += w * c[comp];
                    }
                }
                t1[a + gx * (b + gy * k)] = acc;
            }
        }
    }
    // t2[a, j, k] = sum_m wy[j][m] t1[a, iy_j + m, k]
    let mut t2 = vec![[0.0f64; 3]; gx * ny * nz];
    for k in 0..nz {
        for (j, (iy, wy)) in cy.iter().enumerate() {
            for a in 0..gx {
                let mut acc = [0.0; 3];
                for (m, w) in wy.iter().enumerate() {
                    let c = &t1[a + gx * (iy + m + gy * k)];
                    for comp in 0..3 {
                        acc[comp] += w * c[comp];
                    }
                }
                t2[a + gx * (j + ny * k)] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(geometry.len());
    for k in 0..nz {
        for j in 0..ny {
            let row = gx * (j + ny * k);
            for (ix, wx) in cx.iter() {
                let mut acc = [0.0; 3];
                for (l, w) in wx.iter().enumerate() {
                    let c = &t2[row + ix + l];
                    for comp in 0..3 {
                        acc[comp] += w * c[comp];
                    }
                }
                out.push(acc);
            }
        }
    }
    debug_assert_eq!(out.len(), nx * ny * nz);
    DisplacementField::new(*geometry, out)
}

/// Reference evaluation: the full 4×4×4 tensor-product sum at every voxel,
/// with its own coordinate mapping and basis polynomials.
pub fn brute_force_field(grid: &ControlGrid, geometry: &Geometry) -> Result<DisplacementField, FfdError> {
    grid.validate()?;
    geometry.validate()?;
    fn cubic(t: f64) -> [f64; 4] {
        [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t.powi(3) - 6.0 * t.powi(2) + 4.0) / 6.0,
            (-3.0 * t.powi(3) + 3.0 * t.powi(2) + 3.0 * t + 1.0) / 6.0,
            t.powi(3) / 6.0,
        ]
    }
    let mut out = Vec::with_capacity(geometry.len());
    let [nx, ny, nz] = geometry.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = [i, j, k];
                let mut cell = [0usize; 3];
                let mut frac = [0.0f64; 3];
                for a in 0..3 {
                    let x = geometry.origin[a] + idx[a] as f64 * geometry.spacing[a];
                    let u = (x - grid.origin_mm[a]) / grid.spacing_mm[a] - 1.0;
                    let last = grid.counts[a] as f64 - 4.0;
                    if u < -1e-9 || u > last + 1.0 + 1e-9 {
                        return Err(FfdError::Coverage(format!("voxel {idx:?} outside grid support on axis {a}")));
                    }
                    let mut c = u.floor().max(0.0);
                    if c > last {
                        c = last;
                    }
                    cell[a] = c as usize;
                    frac[a] = (u - c).clamp(0.0, 1.0);
                }
                let (bu, bv, bw) = (cubic(frac[0]), cubic(frac[1]), cubic(frac[2]));
                let mut d = [0.0f64; 3];
                for l in 0..4 {
                    for m in 0..4 {
                        for n in 0..4 {
                            let w = bu[l] * bv[m] * bw[n];
                            let a = cell[0] + l;
                            let b = cell[1] + m;
                            let c = cell[2] + n;
                            let coeff = grid.coeffs[a + grid.counts[0] * (b + grid.counts[1] * c)];
                            d[0] += w * coeff[0];
                            d[1] += w * coeff[1];
                            d[2] += w * coeff[2];
                        }
                    }
                }
                out.push(d);
            }
        }
    }
    DisplacementField::new(*geometry, out)
}

/// Per-voxel Euclidean norm of the displacement (mm).
pub fn magnitude_map(field: &DisplacementField) -> Volume {
    let data = field
        .vectors
        .iter()
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() as f32)
        .collect();
    Volume::new(field.geometry, Modality::Error, data).expect("field geometry is valid")
}

/// Backward warping: `out(x) = v(x + d(x))`, trilinear, zero outside `v`.
pub fn warp_volume(v: &Volume, field: &DisplacementField) -> Result<Volume, FfdError> {
    let g = v.geometry();
    if g != field.geometry() {
        return Err(FfdError::GeometryMismatch(format!(
            "volume {:?}/{:?}/{:?} vs field {:?}/{:?}/{:?}",
            g.dims,
            g.spacing,
            g.origin,
            field.geometry.dims,
            field.geometry.spacing,
            field.geometry.origin
        )));
    }
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::with_capacity(g.len());
    let mut idx = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let d = field.vectors[idx];
                let p = [
                    i as f64 + d[0] / g.spacing[0],
                    j as f64 + d[1] / g.spacing[1],
                    k as f64 + d[2] / g.spacing[2],
                ];
                out.push(v.sample_index(p));
                idx += 1;
            }
        }
    }
    Ok(Volume::new(*g, v.modality(), out)?)
}

/// Writes a field in the raw_json format with three interleaved components.
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<(), FfdError> {
    let header = RawHeader::for_geometry(&field.geometry, Modality::Other, 3);
    let payload: Vec<f32> = field.vectors.iter().flat_map(|d| d.map(|v| v as f32)).collect();
    Ok(write_raw_json(path.as_ref(), &header, &payload)?)
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField, FfdError> {
    let (header, payload) = read_raw_json(path.as_ref())?;
    if header.components != 3 {
        return Err(FfdError::InvalidSpec(format!("field needs 3 components, header has {}", header.components)));
    }
    let g = header.geometry()?;
    let vectors = payload.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
    DisplacementField::new(g, vectors)
}

#[cfg(test)]
mod tests {
    use super::super::{sample_random_grid, DeformationSpec};
    use super::*;

    fn cube(n: usize, s: f64) -> Geometry {
        Geometry::new([n; 3], [s; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn zero_and_constant_grids() {
        let g = cube(9, 1.0);
        let mut grid = ControlGrid::layout(&g, [3; 3], true).unwrap();
        let f = dense_field(&grid, &g).unwrap();
        assert!(f.vectors().iter().all(|d| *d == [0.0; 3]));
        for c in grid.coeffs.iter_mut() {
            *c = [3.0, 0.0, 4.0];
        }
        let f = dense_field(&grid, &g).unwrap();
        for d in f.vectors() {
            assert!((d[0] - 3.0).abs() < 1e-9 && d[1].abs() < 1e-9 && (d[2] - 4.0).abs() < 1e-9);
        }
        let m = magnitude_map(&f);
        assert!(m.data().iter().all(|&v| (v as f64 - 5.0).abs() < 1e-6));
        assert_eq!(m.modality(), Modality::Error);
    }

    #[test]
    fn dense_matches_brute_force() {
        let g = Geometry::new([16, 11, 13], [1.0, 0.7, 1.3], [-5.0, 2.0, 0.5]).unwrap();
        for seed in 0..6 {
            let grid = sample_random_grid(&DeformationSpec::published(seed), &g).unwrap();
            let a = dense_field(&grid, &g).unwrap();
            let b = brute_force_field(&grid, &g).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn coverage_error() {
        let g = cube(10, 1.0);
        let grid = ControlGrid::layout(&g, [2; 3], true).unwrap();
        let bigger = cube(30, 1.0);
        assert!(matches!(dense_field(&grid, &bigger), Err(FfdError::Coverage(_))));
        assert!(matches!(brute_force_field(&grid, &bigger), Err(FfdError::Coverage(_))));
    }

    #[test]
    fn warp_identity_and_shift() {
        let g = cube(6, 1.0);
        let v = Volume::from_fn(g, Modality::Ius, |p| (p[0] * 10.0 + p[1] * 3.0 + p[2] * 0.1 + 0.37) as f32).unwrap();
        let same = warp_volume(&v, &DisplacementField::constant(g, [0.0; 3]).unwrap()).unwrap();
        assert!(same.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let shifted = warp_volume(&v, &DisplacementField::constant(g, [1.0, 0.0, 0.0]).unwrap()).unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let expect = if i + 1 < 6 { v.get(i + 1, j, k) } else { 0.0 };
                    assert_eq!(shifted.get(i, j, k), expect);
                }
            }
        }
    }

    #[test]
    fn warp_geometry_mismatch() {
        let v = Volume::zeros(cube(4, 1.0), Modality::Ius).unwrap();
        let f = DisplacementField::constant(cube(5, 1.0), [0.0; 3]).unwrap();
        assert!(matches!(warp_volume(&v, &f), Err(FfdError::GeometryMismatch(_))));
    }

    #[test]
    fn field_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = cube(5, 0.5);
        let f = DisplacementField::new(g, (0..125).map(|i| [i as f64 * 0.25, -1.5, 2.0]).collect()).unwrap();
        let p = dir.path().join("field.json");
        save_field(&f, &p).unwrap();
        assert_eq!(load_field(&p).unwrap(), f);
    }
}
