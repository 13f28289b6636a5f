//! Landmark-driven B-spline fit (silver-standard alignment).
//!
//! The displacement at a point is linear in the coefficients, so each
//! component is an independent ridge regression sharing one design matrix
//! `A` (rows = landmarks, columns = control points).

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use super::{basis::weights, ControlGrid, FfdError};
use crate::landmarks::LandmarkPairs;
use crate::volume::Geometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub interior_counts: [usize; 3],
    pub ridge: f64,
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec { interior_counts: [4; 3], ridge: 1e-6 }
    }
}

/// Nonzero B-spline weights `(coefficient index, weight)` at a world point.
pub(crate) fn point_weights(grid: &ControlGrid, p: [f64; 3]) -> Result<Vec<(usize, f64)>, FfdError> {
    let mut cell = [0usize; 3];
    let mut w = [[0.0; 4]; 3];
    for a in 0..3 {
        let r = (p[a] - grid.origin_mm[a]) / grid.spacing_mm[a];
        let count = grid.counts[a];
        if !(r >= 1.0 - 1e-9 && r <= (count - 2) as f64 + 1e-9) {
            return Err(FfdError::Coverage(format!("point {p:?} outside grid support")));
        }
        let c = (r.floor() as usize).clamp(1, count - 3);
        cell[a] = c - 1;
        w[a] = weights((r - c as f64).clamp(0.0, 1.0));
    }
    let mut out = Vec::with_capacity(64);
    for n in 0..4 {
        for m in 0..4 {
            for l in 0..4 {
                out.push((grid.index(cell[0] + l, cell[1] + m, cell[2] + n), w[0][l] * w[1][m] * w[2][n]));
            }
        }
    }
    Ok(out)
}

/// Displacement of a grid at one world point.
pub(crate) fn eval_point(grid: &ControlGrid, p: [f64; 3]) -> Result<[f64; 3], FfdError> {
    let mut d = [0.0; 3];
    for (idx, w) in point_weights(grid, p)? {
        for c in 0..3 {
            d[c] += w * grid.coeffs[idx][c];
        }
    }
    Ok(d)
}

/// Solves `min_c Σ_k |D(p_k; c) − t_k|² + ridge·|c|²` on a grid laid out
/// over `geometry` with `spec.interior_counts` points per axis.
pub fn fit_landmark_bspline(
    pairs: &LandmarkPairs,
    geometry: &Geometry,
    spec: &FitSpec,
) -> Result<ControlGrid, FfdError> {
    if pairs.is_empty() {
        return Err(FfdError::EmptyPairs);
    }
    if !(spec.ridge >= 0.0 && spec.ridge.is_finite()) {
        return Err(FfdError::InvalidSpec(format!("ridge must be >= 0, got {}", spec.ridge)));
    }
    for p in pairs.pairs() {
        if !geometry.contains_world(p.fixed) {
            return Err(FfdError::OutOfExtent(format!("landmark {:?} at {:?}", p.id, p.fixed)));
        }
    }
    let mut grid = ControlGrid::layout(geometry, spec.interior_counts, false)?;
    let n = pairs.len();
    let m = grid.len();
    let mut a = DMatrix::<f64>::zeros(n, m);
    let mut t = DMatrix::<f64>::zeros(n, 3);
    for (row, p) in pairs.pairs().iter().enumerate() {
        for (col, w) in point_weights(&grid, p.fixed)? {
            a[(row, col)] += w;
        }
        let d = p.target();
        for c in 0..3 {
            t[(row, c)] = d[c];
        }
    }
    let coeffs = if n <= m {
        // dual form: c = Aᵀ (A Aᵀ + ridge I)⁻¹ t
        let mut k = &a * a.transpose();
        for i in 0..n {
            k[(i, i)] += spec.ridge;
        }
        let alpha = solve_spd(k, &t)?;
        a.transpose() * alpha
    } else {
        let mut h = a.transpose() * &a;
        for i in 0..m {
            h[(i, i)] += spec.ridge;
        }
        solve_spd(h, &(a.transpose() * &t))?
    };
    for (i, c) in grid.coeffs.iter_mut().enumerate() {
        *c = [coeffs[(i, 0)], coeffs[(i, 1)], coeffs[(i, 2)]];
    }
    Ok(grid)
}

fn solve_spd(mat: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, FfdError> {
    if let Some(ch) = mat.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let scale = mat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    SVD::new(mat, true, true)
        .solve(rhs, 1e-12 * scale)
        .map_err(|e| FfdError::Solve(e.to_string()))
}

/// `(Σ_k |D(p_k) − t_k|², Σ |c|²)` for a fitted grid.
pub fn fit_objective(grid: &ControlGrid, pairs: &LandmarkPairs) -> Result<(f64, f64), FfdError> {
    let mut residual = 0.0;
    for p in pairs.pairs() {
        let d = eval_point(grid, p.fixed)?;
        let t = p.target();
        residual += (0..3).map(|c| (d[c] - t[c]).powi(2)).sum::<f64>();
    }
    let penalty = grid.coeffs.iter().flatten().map(|v| v * v).sum();
    Ok((residual, penalty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::LandmarkPair;

    fn geom() -> Geometry {
        Geometry::new([20, 20, 20], [1.0; 3], [0.0; 3]).unwrap()
    }

    fn pair(id: &str, fixed: [f64; 3], t: [f64; 3]) -> LandmarkPair {
        LandmarkPair { id: id.into(), fixed, moving: [fixed[0] + t[0], fixed[1] + t[1], fixed[2] + t[2]] }
    }

    #[test]
    fn zero_targets_give_zero_grid() {
        let pairs = LandmarkPairs::new(vec![pair("a", [5.0, 6.0, 7.0], [0.0; 3]), pair("b", [10.0; 3], [0.0; 3])])
            .unwrap();
        let g = fit_landmark_bspline(&pairs, &geom(), &FitSpec::default()).unwrap();
        assert!(g.coeffs.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_reproduced() {
        let pairs = LandmarkPairs::new(vec![pair("a", [8.3, 11.1, 4.7], [2.0, 0.0, 0.0])]).unwrap();
        let spec = FitSpec { interior_counts: [6; 3], ridge: 1e-10 };
        let g = fit_landmark_bspline(&pairs, &geom(), &spec).unwrap();
        let d = eval_point(&g, [8.3, 11.1, 4.7]).unwrap();
        assert!((d[0] - 2.0).abs() < 1e-3 && d[1].abs() < 1e-3 && d[2].abs() < 1e-3);
    }

    #[test]
    fn errors() {
        let empty = LandmarkPairs::new(vec![]).unwrap();
        assert!(matches!(fit_landmark_bspline(&empty, &geom(), &FitSpec::default()), Err(FfdError::EmptyPairs)));
        let outside = LandmarkPairs::new(vec![pair("x", [25.0, 1.0, 1.0], [1.0; 3])]).unwrap();
        assert!(matches!(
            fit_landmark_bspline(&outside, &geom(), &FitSpec::default()),
            Err(FfdError::OutOfExtent(_))
        ));
    }

    #[test]
    fn residual_monotone_in_ridge() {
        let pts = [[3.0, 4.0, 5.0], [12.0, 7.5, 9.0], [15.5, 15.0, 2.0], [6.0, 17.0, 11.0], [9.0, 9.0, 9.0]];
        let pairs = LandmarkPairs::new(
            pts.iter()
                .enumerate()
                .map(|(i, p)| pair(&i.to_string(), *p, [i as f64 - 2.0, 1.5, -(i as f64) * 0.5]))
                .collect(),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for ridge in [10.0, 1.0, 0.1, 1e-2, 1e-4, 1e-8] {
            let g = fit_landmark_bspline(&pairs, &geom(), &FitSpec { interior_counts: [2; 3], ridge }).unwrap();
            let (res, _) = fit_objective(&g, &pairs).unwrap();
            assert!(res <= last * (1.0 + 1e-9) + 1e-15, "ridge {ridge}: {res} > {last}");
            last = res;
        }
    }

    #[test]
    fn primal_branch_matches_dual_optimum() {
        // more landmarks than coefficients forces the normal-equation branch
        let g0 = Geometry::new([6, 6, 6], [1.0; 3], [0.0; 3]).unwrap();
        let mut pairs = Vec::new();
        let mut id = 0;
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let p = [i as f64, j as f64, k as f64];
                    pairs.push(pair(&id.to_string(), p, [0.5, -0.25, 0.1]));
                    id += 1;
                }
            }
        }
        let pairs = LandmarkPairs::new(pairs).unwrap();
        let spec = FitSpec { interior_counts: [1; 3], ridge: 1e-9 };
        let g = fit_landmark_bspline(&pairs, &g0, &spec).unwrap();
        assert!(pairs.len() > g.len());
        // a constant displacement is exactly representable (partition of unity)
        let (res, _) = fit_objective(&g, &pairs).unwrap();
        assert!(res < 1e-10, "{res}");
    }
}
