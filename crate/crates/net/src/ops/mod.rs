//! Differentiable tensor operations, all recorded on a [`Tape`](crate::Tape).
//!
//! Volumes are `[C, D, H, W]` (one sample, x fastest); token sequences are
//! `[N, C]`.

mod attention;
mod conv;
mod elementwise;
mod linear;
mod norm;
mod shape;

pub use attention::WindowLayout;
pub use shape::PAD_ROW;

#[cfg(test)]
mod gradcheck {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::{Tape, Var};
    use crate::tensor::Tensor;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d<r, f(inputs)>/d inputs against central differences.
    fn check(shapes: &[&[usize]], f: impl Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_t(s, &mut rng)).collect();
        let eval = |ins: &[Tensor<f64>]| -> Tensor<f64> {
            let tape = Tape::no_grad();
            let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            f(&tape, &vars).into_tensor()
        };
        let out0 = eval(&inputs);
        let r = rand_t(out0.shape(), &mut rng);
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()))).collect();
        let y = f(&tape, &vars);
        let grads = tape.backward(&y, r.clone());
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads.get(&vars[k]).expect("gradient reaches every input");
            let picks: Vec<usize> = (0..input.len().min(12)).map(|_| rng.random_range(0..input.len())).collect();
            for &i in &picks {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let dot = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
                let fd = (dot(&eval(&plus)) - dot(&eval(&minus))) / (2.0 * h);
                let an = g.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} elem {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn conv3d_grads() {
        check(&[&[2, 4, 5, 3], &[3, 2, 3, 3, 3], &[3]], |t, v| t.conv3d(&v[0], &v[1], Some(&v[2]), 1, 1));
        check(&[&[2, 4, 4, 2], &[3, 2, 2, 2, 2]], |t, v| t.conv3d(&v[0], &v[1], None, 2, 0));
        check(&[&[3, 2, 2, 2], &[2, 3, 1, 1, 1], &[2]], |t, v| t.conv3d(&v[0], &v[1], Some(&v[2]), 1, 0));
    }

    #[test]
    fn conv_transpose_grads() {
        check(&[&[3, 2, 3, 2], &[3, 2, 2, 2, 2], &[2]], |t, v| t.conv_transpose3d_k2s2(&v[0], &v[1], Some(&v[2])));
    }

    #[test]
    fn norm_grads() {
        check(&[&[3, 2, 2, 3]], |t, v| t.instance_norm(&v[0], 1e-5));
        check(&[&[5, 6], &[6], &[6]], |t, v| t.layer_norm(&v[0], Some((&v[1], &v[2])), 1e-5));
        check(&[&[5, 6]], |t, v| t.layer_norm(&v[0], None, 1e-5));
    }

    #[test]
    fn elementwise_grads() {
        check(&[&[20]], |t, v| t.gelu(&v[0]));
        check(&[&[20]], |t, v| t.softplus(&v[0]));
        check(&[&[20]], |t, v| t.leaky_relu(&v[0], 0.01));
        check(&[&[4, 5], &[4, 5]], |t, v| t.add(&v[0], &v[1]));
    }

    #[test]
    fn shape_grads() {
        check(&[&[2, 3], &[4, 3]], |t, v| t.concat0(&[&v[0], &v[1]]));
        check(&[&[3, 2, 2]], |t, v| t.transpose2d(&v[0]));
        let idx = Arc::new(vec![2, PAD_ROW, 0, 2, 1]);
        check(&[&[3, 4]], move |t, v| t.gather_rows(&v[0], &idx));
        check(&[&[6, 4], &[3, 4], &[3]], |t, v| t.linear(&v[0], &v[1], Some(&v[2])));
    }

    #[test]
    fn attention_grads() {
        let (w, tk, heads, c) = (2, 4, 2, 4);
        let rel: Vec<u32> = (0..tk * tk).map(|i| (i % 5) as u32).collect();
        let mask: Vec<f64> = (0..w * tk * tk).map(|i| if i % 7 == 0 { -100.0 } else { 0.0 }).collect();
        let lay = WindowLayout { windows: w, tokens: tk, heads, rel_index: Arc::new(rel), mask: Some(Arc::new(mask)) };
        check(&[&[w * tk, 3 * c], &[5, heads]], move |t, v| t.window_attention(&v[0], &v[1], &lay));
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tk, heads, c) = (3, 2, 4);
        let qkv = rand_t(&[tk, 3 * c], &mut rng);
        let table = rand_t(&[2, heads], &mut rng);
        let rel: Vec<u32> = (0..tk * tk).map(|i| (i % 2) as u32).collect();
        let lay = WindowLayout { windows: 1, tokens: tk, heads, rel_index: Arc::new(rel.clone()), mask: None };
        let tape = Tape::no_grad();
        let y = tape.window_attention(&tape.constant(qkv.clone()), &tape.constant(table.clone()), &lay);
        let hd = c / heads;
        let sc = 1.0 / (hd as f64).sqrt();
        let q = qkv.data();
        for h in 0..heads {
            for i in 0..tk {
                let s: Vec<f64> = (0..tk)
                    .map(|j| {
                        let dot: f64 = (0..hd).map(|e| q[i * 12 + h * hd + e] * q[j * 12 + c + h * hd + e]).sum();
                        dot * sc + table.data()[rel[i * tk + j] as usize * heads + h]
                    })
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for e in 0..hd {
                    let o: f64 = (0..tk).map(|j| s[j].exp() / z * q[j * 12 + 2 * c + h * hd + e]).sum();
                    assert!((o - y.data()[i * c + h * hd + e]).abs() < 1e-12);
                }
            }
        }
    }
}
