use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of the engine: `f32` for training, `f64` for gradient checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static + std::iter::Sum {
    /// `C ← alpha·A·B + beta·C` with arbitrary strides (elements).
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn erf(self) -> f32 {
        libm::erff(self)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// Row-major view of a matrix inside a slice: `(offset, rows, cols, row stride, col stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Mat {
    /// Dense row-major `rows × cols` starting at `off`.
    pub fn dense(off: usize, rows: usize, cols: usize) -> Mat {
        Mat { off, rows, cols, rs: cols as isize, cs: 1 }
    }

    /// Same elements read transposed.
    pub fn t(self) -> Mat {
        Mat { off: self.off, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Row-major with an explicit row stride.
    pub fn strided(off: usize, rows: usize, cols: usize, rs: usize) -> Mat {
        Mat { off, rows, cols, rs: rs as isize, cs: 1 }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.off;
        }
        self.off + (self.rows - 1) * self.rs.unsigned_abs() + (self.cols - 1) * self.cs.unsigned_abs()
    }
}

/// `c ← alpha·a·b + beta·c` on views into slices.
pub(crate) fn gemm<T: Real>(alpha: T, a: &[T], am: Mat, b: &[T], bm: Mat, beta: T, c: &mut [T], cm: Mat) {
    assert!(am.cols == bm.rows && am.rows == cm.rows && bm.cols == cm.cols, "gemm shape mismatch");
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    if am.cols == 0 {
        for i in 0..cm.rows {
            for j in 0..cm.cols {
                let idx = (cm.off as isize + i as isize * cm.rs + j as isize * cm.cs) as usize;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(am.last() < a.len() && bm.last() < b.len() && cm.last() < c.len(), "gemm view out of range");
    // SAFETY: views checked to lie inside their slices above.
    unsafe {
        T::gemm_raw(
            cm.rows,
            am.cols,
            cm.cols,
            alpha,
            a.as_ptr().add(am.off),
            am.rs,
            am.cs,
            b.as_ptr().add(bm.off),
            bm.rs,
            bm.cs,
            beta,
            c.as_mut_ptr().add(cm.off),
            cm.rs,
            cm.cs,
        )
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Tensor<T> {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_views() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(1.0, &a, Mat::dense(0, 2, 3), &b, Mat::dense(0, 3, 2), 0.0, &mut c, Mat::dense(0, 2, 2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // aᵀ·a via transposed view: 3x3
        let mut d = [0.0f64; 9];
        gemm(1.0, &a, Mat::dense(0, 2, 3).t(), &a, Mat::dense(0, 2, 3), 0.0, &mut d, Mat::dense(0, 3, 3));
        assert_eq!(d[0], 17.0);
        assert_eq!(d[4], 29.0);
        let mut e = [1.0f32; 2];
        gemm(1.0f32, &[1.0, 2.0], Mat::dense(0, 1, 0), &[], Mat::dense(0, 0, 2), 0.0, &mut e, Mat::dense(0, 1, 2));
        assert_eq!(e, [0.0, 0.0]);
    }
}
