//! Fast embedded property suite: basis partition of unity, dense-vs-brute
//! FFD equivalence on 8³ grids, and a finite-difference check of the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regerr_core::ffd::{bspline_basis, brute_force_field, dense_field, magnitude_map, sample_random_grid};
use regerr_core::{ControlGrid, DeformationSpec, Geometry};
use regerr_net::loss::{loss, loss_and_grad, SmoothNorm};
use regerr_net::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "ok" } else { "FAILED" };
        write!(f, "{:<24} {status:<6} {}", self.name, self.detail)
    }
}

/// Cubic B-spline weights; `perturb` scales the last polynomial's 1/6
/// normaliser to 1/5.9 (test hook).
fn basis(t: f64, perturb: bool) -> [f64; 4] {
    let mut w = bspline_basis(t).expect("t drawn from [0, 1)");
    if perturb {
        w[3] *= 6.0 / 5.9;
    }
    w
}

pub fn partition_of_unity(perturb: bool) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t: f64 = rng.random_range(0.0..1.0);
        worst = worst.max((basis(t, perturb).iter().sum::<f64>() - 1.0).abs());
    }
    let g = Geometry::new([8; 3], [1.0; 3], [0.0; 3]).expect("valid geometry");
    let mut grid = ControlGrid::layout(&g, [3; 3], false).expect("valid layout");
    grid.coeffs.iter_mut().for_each(|c| *c = [3.0, 0.0, 4.0]);
    let mag = magnitude_map(&dense_field(&grid, &g).expect("grid covers geometry"));
    let const_err = mag.data().iter().map(|&v| (f64::from(v) - 5.0).abs()).fold(0.0, f64::max);
    CheckResult {
        name: "partition-of-unity",
        passed: worst < 1e-9 && const_err < 1e-9,
        detail: format!("max |sum - 1| = {worst:.3e}, constant (3,0,4) deviation = {const_err:.3e}"),
    }
}

pub fn oracle_equivalence() -> CheckResult {
    let g = Geometry::new([8; 3], [1.5, 1.0, 2.0], [-3.0, 0.0, 5.0]).expect("valid geometry");
    let mut worst = 0.0f64;
    for i in 0..5 {
        let spec = DeformationSpec { seed: 100 + i, max_points_per_axis: 6, max_displacement_mm: 10.0 };
        let grid = sample_random_grid(&spec, &g).expect("valid spec");
        let fast = dense_field(&grid, &g).expect("grid covers geometry");
        let slow = brute_force_field(&grid, &g).expect("grid covers geometry");
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    CheckResult {
        name: "ffd-oracle-8^3",
        passed: worst < 1e-6,
        detail: format!("5 grids, max component error = {worst:.3e} mm"),
    }
}

/// Central differences of the total loss at 24 voxels of a toy-size patch.
pub fn loss_gradient() -> CheckResult {
    let p = ModelConfig::toy().patch_size;
    let dims = [p; 3];
    let n = p * p * p;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let phi: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let f: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let lambda = 0.01;
    let (_, grad) = loss_and_grad(&phi, &f, dims, lambda, SmoothNorm::L2).expect("shapes agree");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..24 {
        let i = rng.random_range(0..n);
        let mut x = phi.clone();
        x[i] += h;
        let up = loss(&x, &f, dims, lambda, SmoothNorm::L2).expect("shapes agree").total;
        x[i] -= 2.0 * h;
        let down = loss(&x, &f, dims, lambda, SmoothNorm::L2).expect("shapes agree").total;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-12));
    }
    CheckResult {
        name: "loss-gradient",
        passed: worst < 1e-4,
        detail: format!("{p}^3 patch, 24 voxels, max relative error = {worst:.1e}"),
    }
}

pub fn run_all(perturb_basis: bool) -> Vec<CheckResult> {
    vec![partition_of_unity(perturb_basis), oracle_equivalence(), loss_gradient()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_checks_pass_and_hook_fails() {
        assert!(run_all(false).iter().all(|c| c.passed));
        let r = partition_of_unity(true);
        assert!(!r.passed);
    }
}
