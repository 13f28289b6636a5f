use crate::autograd::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[inline]
fn softplus<T: Real>(x: T) -> T {
    // torch threshold: identity above 20
    if x > T::c(20.0) {
        x
    } else {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (T::c(-0.5) * x * x).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
    fn unary(&self, x: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<T> {
        let value = x.value().map(f);
        if !self.needs_grad(&[x]) {
            return self.constant(value);
        }
        let xa = x.arc();
        self.record(value, &[x], move |dy, _| {
            let d = dy.data().iter().zip(xa.data()).map(|(&g, &v)| g * df(v)).collect();
            vec![Some(Tensor::new(xa.shape().to_vec(), d))]
        })
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: f64) -> Var<T> {
        let s = T::c(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, move |v| if v > T::zero() { T::one() } else { s })
    }

    /// Exact (erf) GELU.
    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, gelu, gelu_grad)
    }

    pub fn softplus(&self, x: &Var<T>) -> Var<T> {
        self.unary(x, softplus, |v| if v > T::c(20.0) { T::one() } else { sigmoid(v) })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), d);
        self.record(value, &[a, b], |dy, mask| {
            vec![mask[0].then(|| dy.clone()), mask[1].then(|| dy.clone())]
        })
    }
}
