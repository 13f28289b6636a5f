use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Row index meaning "zero row" in [`Tape::gather_rows`].
pub const PAD_ROW: u32 = u32::MAX;

impl<T: Real> Tape<T> {
    /// Concatenation along the leading axis.
    pub fn concat0(&self, parts: &[&Var<T>]) -> Var<T> {
        let tail = parts[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.value().len()).sum());
        for p in parts {
            assert_eq!(p.shape()[1..], tail[..], "concat0 trailing shape mismatch");
            lead += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let sizes: Vec<(Vec<usize>, usize)> = parts.iter().map(|p| (p.shape().to_vec(), p.value().len())).collect();
        self.record(Tensor::new(shape, data), parts, move |dy, mask| {
            let mut off = 0;
            sizes
                .iter()
                .zip(mask)
                .map(|((shape, n), &m)| {
                    let g = m.then(|| Tensor::new(shape.clone(), dy.data()[off..off + n].to_vec()));
                    off += n;
                    g
                })
                .collect()
        })
    }

    /// Matrix transpose of `x [A, B...]` viewed as `[A, prod(B)]`, returning
    /// `[prod(B), A]`.
    pub fn transpose2d(&self, x: &Var<T>) -> Var<T> {
        let a = x.shape()[0];
        let b = x.value().len() / a;
        let value = Tensor::new(vec![b, a], transpose(x.data(), a, b));
        let shape = x.shape().to_vec();
        self.record(value, &[x], move |dy, _| vec![Some(Tensor::new(shape, transpose(dy.data(), b, a)))])
    }

    pub fn reshape(&self, x: &Var<T>, shape: Vec<usize>) -> Var<T> {
        let old = x.shape().to_vec();
        let value = x.value().clone().reshaped(shape);
        self.record(value, &[x], move |dy, _| vec![Some(dy.clone().reshaped(old))])
    }

    /// `out[r] = x[idx[r]]` over rows of `x [N, C]`; [`PAD_ROW`] yields zeros.
    pub fn gather_rows(&self, x: &Var<T>, idx: &Arc<Vec<u32>>) -> Var<T> {
        assert_eq!(x.shape().len(), 2, "gather_rows expects [N, C]");
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let src = x.data();
        let mut data = vec![T::zero(); idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            if i != PAD_ROW {
                let i = i as usize;
                assert!(i < n, "gather index {i} out of {n} rows");
                data[r * c..(r + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![idx.len(), c], data);
        let idx = idx.clone();
        self.record(value, &[x], move |dy, _| {
            let mut dx = vec![T::zero(); n * c];
            let g = dy.data();
            for (r, &i) in idx.iter().enumerate() {
                if i != PAD_ROW {
                    let i = i as usize;
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + g[r * c + j];
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, c], dx))]
        })
    }
}

fn transpose<T: Real>(x: &[T], a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a * b];
    const BS: usize = 32;
    for i0 in (0..a).step_by(BS) {
        for j0 in (0..b).step_by(BS) {
            for i in i0..(i0 + BS).min(a) {
                for j in j0..(j0 + BS).min(b) {
                    out[j * a + i] = x[i * b + j];
                }
            }
        }
    }
    out
}
