use crate::autograd::{Tape, Var};
use crate::tensor::{gemm, Mat, Real, Tensor};

impl<T: Real> Tape<T> {
    /// `x [N, Cin] · wᵀ + b` with `w [Cout, Cin]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let (n, ci) = (x.shape()[0], x.shape()[1]);
        let co = w.shape()[0];
        assert!(x.shape().len() == 2 && w.shape() == [co, ci], "linear {:?} x {:?}", x.shape(), w.shape());
        let mut y = vec![T::zero(); n * co];
        gemm(T::one(), x.data(), Mat::dense(0, n, ci), w.data(), Mat::dense(0, co, ci).t(), T::zero(), &mut y, Mat::dense(0, n, co));
        if let Some(b) = b {
            assert_eq!(b.shape(), [co], "linear bias shape");
            let bd = b.data();
            for row in y.chunks_mut(co) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, co], y);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        if !self.needs_grad(&parents) {
            return self.constant(value);
        }
        let (xa, wa) = (x.arc(), w.arc());
        let has_bias = b.is_some();
        self.record(value, &parents, move |dy, mask| {
            let g = dy.data();
            let dx = mask[0].then(|| {
                let mut dx = vec![T::zero(); n * ci];
                gemm(T::one(), g, Mat::dense(0, n, co), wa.data(), Mat::dense(0, co, ci), T::zero(), &mut dx, Mat::dense(0, n, ci));
                Tensor::new(vec![n, ci], dx)
            });
            let dw = mask[1].then(|| {
                let mut dw = vec![T::zero(); co * ci];
                gemm(T::one(), g, Mat::dense(0, n, co).t(), xa.data(), Mat::dense(0, n, ci), T::zero(), &mut dw, Mat::dense(0, co, ci));
                Tensor::new(vec![co, ci], dw)
            });
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(mask[2].then(|| {
                    let mut db = vec![T::zero(); co];
                    for row in g.chunks(co) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    Tensor::new(vec![co], db)
                }));
            }
            out
        })
    }
}
