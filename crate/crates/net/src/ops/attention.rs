use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Static layout of one windowed attention call.
#[derive(Clone)]
pub struct WindowLayout<T> {
    pub windows: usize,
    /// Tokens per window.
    pub tokens: usize,
    pub heads: usize,
    /// `tokens²` indices into the bias table rows.
    pub rel_index: Arc<Vec<u32>>,
    /// Additive `[windows, tokens, tokens]` mask (shifted windows only).
    pub mask: Option<Arc<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    /// Multi-head self-attention inside each window.
    ///
    /// `qkv [W·T, 3C]` holds, per token, `q`, `k`, `v` blocks each split into
    /// `heads` contiguous groups of `C/heads` (`(3, heads, hd)` order).
    /// `table [R, heads]` is the relative position bias. Output `[W·T, C]`
    /// with heads concatenated along channels.
    pub fn window_attention(&self, qkv: &Var<T>, table: &Var<T>, lay: &WindowLayout<T>) -> Var<T> {
        let (wn, t, nh) = (lay.windows, lay.tokens, lay.heads);
        let c3 = qkv.shape()[1];
        assert!(qkv.shape()[0] == wn * t && c3 % (3 * nh) == 0, "qkv shape {:?}", qkv.shape());
        assert_eq!(lay.rel_index.len(), t * t, "relative index size");
        assert_eq!(table.shape()[1], nh, "bias table heads");
        let c = c3 / 3;
        let hd = c / nh;
        let scale = T::c((hd as f64).powf(-0.5));
        let q = qkv.data();
        let tab = table.data();
        let keep = self.needs_grad(&[qkv, table]);
        let mut probs = if keep { vec![T::zero(); wn * nh * t * t] } else { Vec::new() };
        let mut scratch = vec![T::zero(); t * t];
        let mut out = vec![T::zero(); wn * t * c];
        for w in 0..wn {
            let base = w * t * c3;
            for h in 0..nh {
                let p = if keep { &mut probs[(w * nh + h) * t * t..(w * nh + h + 1) * t * t] } else { &mut scratch[..] };
                let qv = Mat::strided(base + h * hd, t, hd, c3);
                let kv = Mat::strided(base + c + h * hd, t, hd, c3);
                let vv = Mat::strided(base + 2 * c + h * hd, t, hd, c3);
                gemm(scale, q, qv, q, kv.t(), T::zero(), p, Mat::dense(0, t, t));
                for (ij, s) in p.iter_mut().enumerate() {
                    *s = *s + tab[lay.rel_index[ij] as usize * nh + h];
                }
                if let Some(m) = &lay.mask {
                    for (s, &mv) in p.iter_mut().zip(&m[w * t * t..(w + 1) * t * t]) {
                        *s = *s + mv;
                    }
                }
                for row in p.chunks_mut(t) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum = sum + *v;
                    }
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|v| *v = *v * inv);
                }
                gemm(T::one(), p, Mat::dense(0, t, t), q, vv, T::zero(), &mut out, Mat::strided(w * t * c + h * hd, t, hd, c));
            }
        }
        let value = Tensor::new(vec![wn * t, c], out);
        if !keep {
            return self.constant(value);
        }
        let qa = qkv.arc();
        let table_shape = table.shape().to_vec();
        let lay = lay.clone();
        self.record(value, &[qkv, table], move |dy, mask| {
            let q = qa.data();
            let g = dy.data();
            let mut dqkv = vec![T::zero(); wn * t * c3];
            let mut dtab = vec![T::zero(); table_shape[0] * nh];
            let mut dp = vec![T::zero(); t * t];
            for w in 0..wn {
                let base = w * t * c3;
                for h in 0..nh {
                    let p = &probs[(w * nh + h) * t * t..(w * nh + h + 1) * t * t];
                    let qv = Mat::strided(base + h * hd, t, hd, c3);
                    let kv = Mat::strided(base + c + h * hd, t, hd, c3);
                    let vv = Mat::strided(base + 2 * c + h * hd, t, hd, c3);
                    let gv = Mat::strided(w * t * c + h * hd, t, hd, c);
                    // dP = dO · vᵀ, dv = Pᵀ · dO
                    gemm(T::one(), g, gv, q, vv.t(), T::zero(), &mut dp, Mat::dense(0, t, t));
                    gemm(T::one(), p, Mat::dense(0, t, t).t(), g, gv, T::zero(), &mut dqkv, vv);
                    // softmax backward in place: dS = P ⊙ (dP − Σ_j dP·P)
                    for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                        for (d, &pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - dot);
                        }
                    }
                    if mask[1] {
                        for (ij, &d) in dp.iter().enumerate() {
                            let r = lay.rel_index[ij] as usize * nh + h;
                            dtab[r] = dtab[r] + d;
                        }
                    }
                    gemm(scale, &dp, Mat::dense(0, t, t), q, kv, T::zero(), &mut dqkv, qv);
                    gemm(scale, &dp, Mat::dense(0, t, t).t(), q, qv, T::zero(), &mut dqkv, kv);
                }
            }
            vec![
                mask[0].then(|| Tensor::new(vec![wn * t, c3], dqkv)),
                mask[1].then(|| Tensor::new(table_shape, dtab)),
            ]
        })
    }
}
