//! Training objective: `sim + λ·smooth` on one `[D, H, W]` map (x fastest).

use serde::{Deserialize, Serialize};

use crate::tensor::Real;
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SmoothNorm {
    /// Mean squared forward difference, summed over axes.
    #[default]
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub sim: f64,
    pub smooth: f64,
}

fn check(phi: usize, f: usize, dims: [usize; 3]) -> Result<(), NetError> {
    let n: usize = dims.iter().product();
    if phi != n || f != n {
        return Err(NetError::Shape(format!("loss inputs hold {phi} and {f} values, grid {dims:?} needs {n}")));
    }
    Ok(())
}

/// Loss terms and `∂total/∂φ`.
pub fn loss_and_grad<T: Real>(phi: &[T], f: &[T], dims: [usize; 3], lambda: f64, norm: SmoothNorm) -> Result<(LossTerms, Vec<T>), NetError> {
    check(phi.len(), f.len(), dims)?;
    let n = phi.len() as f64;
    let mut grad = vec![0.0f64; phi.len()];
    let mut sim = 0.0;
    for ((g, &p), &t) in grad.iter_mut().zip(phi).zip(f) {
        let d = p.to_f64().unwrap() - t.to_f64().unwrap();
        sim += d * d;
        *g = 2.0 * d / n;
    }
    let mut smooth = 0.0;
    let strides = [dims[1] * dims[2], dims[2], 1];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                let c = [z, y, x];
                for a in 0..3 {
                    if c[a] + 1 >= dims[a] {
                        continue;
                    }
                    let j = i + strides[a];
                    let d = phi[j].to_f64().unwrap() - phi[i].to_f64().unwrap();
                    let (v, dv) = match norm {
                        SmoothNorm::L2 => (d * d, 2.0 * d),
                        SmoothNorm::L1 => (d.abs(), if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }),
                    };
                    smooth += v;
                    let s = lambda * dv / n;
                    grad[j] += s;
                    grad[i] -= s;
                }
            }
        }
    }
    let (sim, smooth) = (sim / n, smooth / n);
    let terms = LossTerms { total: sim + lambda * smooth, sim, smooth };
    Ok((terms, grad.into_iter().map(T::c).collect()))
}

pub fn loss<T: Real>(phi: &[T], f: &[T], dims: [usize; 3], lambda: f64, norm: SmoothNorm) -> Result<LossTerms, NetError> {
    loss_and_grad(phi, f, dims, lambda, norm).map(|(t, _)| t)
}
