use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Normalizes each contiguous row of length `n`; returns `(x̂, 1/σ)`.
fn normalize_rows<T: Real>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (r, row) in x.chunks(n).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (xhat, rstd)
}

/// `dx = (1/σ)(g − mean(g) − x̂·mean(g·x̂))` per row.
fn normalize_rows_backward<T: Real>(g: &[T], xhat: &[T], rstd: &[T], n: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); g.len()];
    for (r, (gr, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
        let mg = gr.iter().copied().sum::<T>() * inv;
        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv;
        for ((o, &gi), &xi) in dx[r * n..(r + 1) * n].iter_mut().zip(gr).zip(xr) {
            *o = rstd[r] * (gi - mg - xi * mgx);
        }
    }
    dx
}

impl<T: Real> Tape<T> {
    /// Per-channel normalization over the spatial axes of `x [C, ...]`,
    /// biased variance, no affine parameters.
    pub fn instance_norm(&self, x: &Var<T>, eps: f64) -> Var<T> {
        let c = x.shape()[0];
        let n = x.value().len() / c;
        let (xhat, rstd) = normalize_rows(x.data(), n, T::c(eps));
        let shape = x.shape().to_vec();
        if !self.needs_grad(&[x]) {
            return self.constant(Tensor::new(shape, xhat));
        }
        let saved = xhat.clone();
        self.record(Tensor::new(shape.clone(), xhat), &[x], move |dy, _| {
            vec![Some(Tensor::new(shape, normalize_rows_backward(dy.data(), &saved, &rstd, n)))]
        })
    }

    /// Normalization over the last axis of `x [N, C]`, optionally followed by
    /// `γ ⊙ x̂ + β`.
    pub fn layer_norm(&self, x: &Var<T>, affine: Option<(&Var<T>, &Var<T>)>, eps: f64) -> Var<T> {
        let shape = x.shape().to_vec();
        let c = *shape.last().expect("layer_norm on a scalar");
        let (xhat, rstd) = normalize_rows(x.data(), c, T::c(eps));
        let Some((gamma, beta)) = affine else {
            if !self.needs_grad(&[x]) {
                return self.constant(Tensor::new(shape, xhat));
            }
            let saved = xhat.clone();
            return self.record(Tensor::new(shape.clone(), xhat), &[x], move |dy, _| {
                vec![Some(Tensor::new(shape, normalize_rows_backward(dy.data(), &saved, &rstd, c)))]
            });
        };
        assert!(gamma.shape() == [c] && beta.shape() == [c], "layer_norm affine shape");
        let (gd, bd) = (gamma.data(), beta.data());
        let y: Vec<T> = xhat.iter().enumerate().map(|(i, &v)| v * gd[i % c] + bd[i % c]).collect();
        let value = Tensor::new(shape.clone(), y);
        if !self.needs_grad(&[x, gamma, beta]) {
            return self.constant(value);
        }
        let ga = gamma.arc();
        self.record(value, &[x, gamma, beta], move |dy, mask| {
            let dyd = dy.data();
            let gd = ga.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for (row_g, row_x) in dyd.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dgamma[j] = dgamma[j] + row_g[j] * row_x[j];
                    dbeta[j] = dbeta[j] + row_g[j];
                }
            }
            let dx = mask[0].then(|| {
                let scaled: Vec<T> = dyd.iter().enumerate().map(|(i, &g)| g * gd[i % c]).collect();
                Tensor::new(shape.clone(), normalize_rows_backward(&scaled, &xhat, &rstd, c))
            });
            vec![dx, mask[1].then(|| Tensor::new(vec![c], dgamma)), mask[2].then(|| Tensor::new(vec![c], dbeta))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]));
        let y = tape.instance_norm(&x, 1e-5);
        let r: &[f64] = &y.data()[..4];
        assert!(r.iter().sum::<f64>().abs() < 1e-12);
        let var = r.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-12);
        assert!(y.data()[4..].iter().all(|&v| v == 0.0));
    }
}
