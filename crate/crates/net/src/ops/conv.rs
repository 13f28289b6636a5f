use crate::autograd::{Tape, Var};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_LIMIT: usize = 1 << 17;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Geom {
    ci: usize,
    dims: [usize; 3],
    out: [usize; 3],
    k: usize,
    s: usize,
    p: usize,
}

impl Geom {
    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    fn planes_per_chunk(&self) -> usize {
        (COL_LIMIT / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }

    /// Geometry of the stride-1 input gradient, seen as a forward conv over `dy`.
    fn transposed(&self, co: usize) -> Geom {
        Geom { ci: co, dims: self.out, out: self.dims, k: self.k, s: 1, p: self.k - 1 - self.p }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, kk: usize, s: usize, p: usize) -> (usize, usize) {
    // need 0 <= o*s + kk - p < n_in
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi = if n_in + p <= kk { 0 } else { ((n_in + p - kk - 1) / s + 1).min(n_out) };
    (lo.min(hi), hi)
}

/// Fills `col[K, nz·oh·ow]` for output planes `oz0..oz0+nz`.
fn im2col<T: Real>(x: &[T], g: &Geom, oz0: usize, nz: usize, col: &mut [T]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let (k, s, p) = (g.k, g.s, g.p);
    let ncol = nz * oh * ow;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, ky, s, p);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(w, ow, kx, s, p);
                    let dst = &mut col[row * ncol..(row + 1) * ncol];
                    for (zi, oz) in (oz0..oz0 + nz).enumerate() {
                        let iz = (oz * s + kz) as isize - p as isize;
                        let plane = &mut dst[zi * oh * ow..(zi + 1) * oh * ow];
                        if iz < 0 || iz >= d as isize {
                            plane.fill(T::zero());
                            continue;
                        }
                        let xz = &xc[iz as usize * h * w..];
                        for oy in 0..oh {
                            let line = &mut plane[oy * ow..(oy + 1) * ow];
                            if oy < ylo || oy >= yhi {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = oy * s + ky - p;
                            let src = &xz[iy * w..(iy + 1) * w];
                            line[..xlo].fill(T::zero());
                            line[xhi..].fill(T::zero());
                            if s == 1 {
                                let ix0 = xlo + kx - p;
                                line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for ox in xlo..xhi {
                                    line[ox] = src[ox * s + kx - p];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` into `dx`.
fn col2im<T: Real>(col: &[T], g: &Geom, oz0: usize, nz: usize, dx: &mut [T]) {
    let [d, h, w] = g.dims;
    let [_, oh, ow] = g.out;
    let (k, s, p) = (g.k, g.s, g.p);
    let ncol = nz * oh * ow;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, oh, ky, s, p);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(w, ow, kx, s, p);
                    let src = &col[row * ncol..(row + 1) * ncol];
                    for (zi, oz) in (oz0..oz0 + nz).enumerate() {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        let base = iz as usize * h * w;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let line = &src[zi * oh * ow + oy * ow..];
                            let dst = &mut xc[base + iy * w..base + (iy + 1) * w];
                            if s == 1 {
                                let ix0 = xlo + kx - p;
                                for (a, &b) in dst[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&line[xlo..xhi]) {
                                    *a = *a + b;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    let ix = ox * s + kx - p;
                                    dst[ix] = dst[ix] + line[ox];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, co: usize, g: &Geom) -> Vec<T> {
    let n = g.out.iter().product::<usize>();
    let kk = g.rows();
    let mut out = vec![T::zero(); co * n];
    if g.is_pointwise() {
        gemm(T::one(), w, Mat::dense(0, co, kk), x, Mat::dense(0, kk, n), T::zero(), &mut out, Mat::dense(0, co, n));
    } else {
        let ppc = g.planes_per_chunk();
        let mut col = vec![T::zero(); kk * ppc * g.plane()];
        let mut oz0 = 0;
        while oz0 < g.out[0] {
            let nz = ppc.min(g.out[0] - oz0);
            let nc = nz * g.plane();
            im2col(x, g, oz0, nz, &mut col);
            gemm(
                T::one(),
                w,
                Mat::dense(0, co, kk),
                &col,
                Mat::dense(0, kk, nc),
                T::zero(),
                &mut out,
                Mat::strided(oz0 * g.plane(), co, nc, n),
            );
            oz0 += nz;
        }
    }
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + b[c]);
        }
    }
    out
}

/// Returns `(dx, dw)` as requested.
fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    co: usize,
    g: &Geom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = g.out.iter().product::<usize>();
    let kk = g.rows();
    let mut dx = need_dx.then(|| vec![T::zero(); g.ci * g.dims.iter().product::<usize>()]);
    let mut dw = need_dw.then(|| vec![T::zero(); co * kk]);
    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            gemm(T::one(), dy, Mat::dense(0, co, n), x, Mat::dense(0, kk, n).t(), T::zero(), dw, Mat::dense(0, co, kk));
        }
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), w, Mat::dense(0, co, kk).t(), dy, Mat::dense(0, co, n), T::zero(), dx, Mat::dense(0, kk, n));
        }
        return (dx, dw);
    }
    if g.s == 1 && g.p < g.k && dx.is_some() {
        // dx is a stride-1 correlation of dy with the flipped, transposed kernel.
        dx = Some(conv_forward(dy, &flip_transpose(w, co, g.ci, g.k), None, g.ci, &g.transposed(co)));
    }
    let ppc = g.planes_per_chunk();
    let mut col = vec![T::zero(); kk * ppc * g.plane()];
    let mut oz0 = 0;
    while oz0 < g.out[0] {
        let nz = ppc.min(g.out[0] - oz0);
        let nc = nz * g.plane();
        let dyv = Mat::strided(oz0 * g.plane(), co, nc, n);
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, oz0, nz, &mut col);
            gemm(T::one(), dy, dyv, &col, Mat::dense(0, kk, nc).t(), T::one(), dw, Mat::dense(0, co, kk));
        }
        if let Some(dx) = dx.as_mut().filter(|_| !(g.s == 1 && g.p < g.k)) {
            gemm(T::one(), w, Mat::dense(0, co, kk).t(), dy, dyv, T::zero(), &mut col, Mat::dense(0, kk, nc));
            col2im(&col, g, oz0, nz, dx);
        }
        oz0 += nz;
    }
    (dx, dw)
}

/// `[Co, Ci, k³]` → `[Ci, Co, k³]` with every kernel reversed.
fn flip_transpose<T: Real>(w: &[T], co: usize, ci: usize, k: usize) -> Vec<T> {
    let k3 = k * k * k;
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for i in 0..ci {
            let src = &w[(o * ci + i) * k3..(o * ci + i + 1) * k3];
            let dst = &mut out[(i * co + o) * k3..(i * co + o + 1) * k3];
            for (t, v) in src.iter().enumerate() {
                dst[k3 - 1 - t] = *v;
            }
        }
    }
    out
}

fn channel_sums<T: Real>(dy: &[T], c: usize) -> Vec<T> {
    let n = dy.len() / c;
    dy.chunks(n).map(|ch| ch.iter().copied().sum()).collect()
}

impl<T: Real> Tape<T> {
    /// 3D convolution of `x [Ci, D, H, W]` with `w [Co, Ci, k, k, k]`,
    /// cubic kernel, uniform stride and zero padding.
    pub fn conv3d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let xs = x.shape();
        let ws = w.shape();
        assert_eq!(xs.len(), 4, "conv3d input must be [C, D, H, W], got {xs:?}");
        assert!(ws.len() == 5 && ws[1] == xs[0] && ws[2] == ws[3] && ws[3] == ws[4], "conv3d weight {ws:?} vs input {xs:?}");
        let (co, k) = (ws[0], ws[2]);
        let dims = [xs[1], xs[2], xs[3]];
        let out = dims.map(|n| {
            assert!(n + 2 * pad >= k, "conv3d kernel {k} larger than padded input {n}");
            (n + 2 * pad - k) / stride + 1
        });
        let g = Geom { ci: xs[0], dims, out, k, s: stride, p: pad };
        let bias = b.map(|b| {
            assert_eq!(b.shape(), [co], "conv3d bias shape");
            b.data()
        });
        let y = conv_forward(x.data(), w.data(), bias, co, &g);
        let value = Tensor::new(vec![co, out[0], out[1], out[2]], y);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        if !self.needs_grad(&parents) {
            return self.constant(value);
        }
        let (xa, wa) = (x.arc(), w.arc());
        let (xshape, wshape) = (xs.to_vec(), ws.to_vec());
        let has_bias = b.is_some();
        self.record(value, &parents, move |dy, mask| {
            let (dx, dw) = conv_backward(xa.data(), wa.data(), dy.data(), co, &g, mask[0], mask[1]);
            let mut out = vec![dx.map(|d| Tensor::new(xshape, d)), dw.map(|d| Tensor::new(wshape, d))];
            if has_bias {
                out.push(mask[2].then(|| Tensor::new(vec![co], channel_sums(dy.data(), co))));
            }
            out
        })
    }

    /// Transposed 3D convolution with kernel 2, stride 2:
    /// `x [Ci, D, H, W]`, `w [Ci, Co, 2, 2, 2]` → `[Co, 2D, 2H, 2W]`.
    pub fn conv_transpose3d_k2s2(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let xs = x.shape().to_vec();
        let ws = w.shape().to_vec();
        assert!(xs.len() == 4 && ws.len() == 5 && ws[0] == xs[0] && ws[2..] == [2, 2, 2], "convT shapes {ws:?} / {xs:?}");
        let (ci, co) = (ws[0], ws[1]);
        let [d, h, wd] = [xs[1], xs[2], xs[3]];
        let n = d * h * wd;
        let mut cols = vec![T::zero(); co * 8 * n];
        gemm(
            T::one(),
            w.data(),
            Mat::dense(0, ci, co * 8).t(),
            x.data(),
            Mat::dense(0, ci, n),
            T::zero(),
            &mut cols,
            Mat::dense(0, co * 8, n),
        );
        let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
        let mut y = vec![T::zero(); co * od * oh * ow];
        for c in 0..co {
            let bias = b.map_or(T::zero(), |b| b.data()[c]);
            for tap in 0..8 {
                let (a, bb, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                let src = &cols[(c * 8 + tap) * n..(c * 8 + tap + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        let orow = ((c * od + 2 * z + a) * oh + 2 * yy + bb) * ow;
                        let srow = (z * h + yy) * wd;
                        for xx in 0..wd {
                            y[orow + 2 * xx + e] = src[srow + xx] + bias;
                        }
                    }
                }
            }
        }
        drop(cols);
        let value = Tensor::new(vec![co, od, oh, ow], y);
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
            let dyd = dy.data();
            let mut dcols = vec![T::zero(); co * 8 * n];
            for c in 0..co {
                for tap in 0..8 {
                    let (a, bb, e) = (tap >> 2, (tap >> 1) & 1, tap & 1);
                    let dst = &mut dcols[(c * 8 + tap) * n..(c * 8 + tap + 1) * n];
                    for z in 0..d {
                        for yy in 0..h {
                            let orow = ((c * od + 2 * z + a) * oh + 2 * yy + bb) * ow;
                            let srow = (z * h + yy) * wd;
                            for xx in 0..wd {
                                dst[srow + xx] = dyd[orow + 2 * xx + e];
                            }
                        }
                    }
                }
            }
            let dx = mask[0].then(|| {
                let mut dx = vec![T::zero(); ci * n];
                gemm(
                    T::one(),
                    wa.data(),
                    Mat::dense(0, ci, co * 8),
                    &dcols,
                    Mat::dense(0, co * 8, n),
                    T::zero(),
                    &mut dx,
                    Mat::dense(0, ci, n),
                );
                Tensor::new(xs.clone(), dx)
            });
            let dw = mask[1].then(|| {
                let mut dw = vec![T::zero(); ci * co * 8];
                gemm(
                    T::one(),
                    xa.data(),
                    Mat::dense(0, ci, n),
                    &dcols,
                    Mat::dense(0, co * 8, n).t(),
                    T::zero(),
                    &mut dw,
                    Mat::dense(0, ci, co * 8),
                );
                Tensor::new(ws.clone(), dw)
            });
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(mask[2].then(|| Tensor::new(vec![co], channel_sums(dyd, co))));
            }
            out
        })
    }
}

#[cfg(test)]
pub(crate) fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: usize, p: usize) -> Tensor<f64> {
    let (ci, d, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let o = |n: usize| (n + 2 * p - k) / s + 1;
    let (od, oh, ow) = (o(d), o(h), o(wd));
    let mut y = vec![0.0; co * od * oh * ow];
    for c in 0..co {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[c]);
                    for cc in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = (z * s + kz) as isize - p as isize;
                                    let iy = (yy * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((cc * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                    let wi = (((c * ci + cc) * k + kz) * k + ky) * k + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                    }
                    y[((c * od + z) * oh + yy) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![co, od, oh, ow], y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p, dims) in &[(3, 1, 1, [5, 4, 6]), (2, 2, 0, [4, 6, 2]), (1, 1, 0, [3, 3, 3]), (3, 2, 1, [5, 5, 4])] {
            let x = rand_t(&[2, dims[0], dims[1], dims[2]], &mut rng);
            let w = rand_t(&[3, 2, k, k, k], &mut rng);
            let b = [0.1, -0.2, 0.3];
            let tape = Tape::<f64>::no_grad();
            let y = tape.conv3d(&tape.constant(x.clone()), &tape.constant(w.clone()), Some(&tape.constant(Tensor::new(vec![3], b.to_vec()))), s, p);
            let r = naive_conv3d(&x, &w, Some(&b), s, p);
            assert_eq!(y.shape(), r.shape());
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chunked_matches_unchunked() {
        // a large input forces several im2col chunks
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&[16, 40, 40, 40], &mut rng);
        let w = rand_t(&[2, 16, 3, 3, 3], &mut rng);
        let g = Geom { ci: 16, dims: [40; 3], out: [40; 3], k: 3, s: 1, p: 1 };
        assert!(g.planes_per_chunk() < 40);
        let y = conv_forward(x.data(), w.data(), None, 2, &g);
        let xs = Tensor::new(vec![16, 40, 40, 40], x.data().to_vec());
        let r = naive_conv3d(&xs, &w, None, 1, 1);
        for (a, e) in y.iter().zip(r.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn transpose_is_adjoint_of_strided_conv() {
        // <convT(x), y> == <x, conv_k2s2(y)> with the weight axes swapped
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[3, 2, 3, 2], &mut rng);
        let w = rand_t(&[3, 2, 2, 2, 2], &mut rng);
        let y = rand_t(&[2, 4, 6, 4], &mut rng);
        let tape = Tape::<f64>::no_grad();
        let t = tape.conv_transpose3d_k2s2(&tape.constant(x.clone()), &tape.constant(w.clone()), None);
        let lhs: f64 = t.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        // conv weight [Co=3, Ci=2, 2,2,2] from convT weight [3, 2, ...] is the same memory layout
        let c = naive_conv3d(&y, &Tensor::new(vec![3, 2, 2, 2, 2], w.data().to_vec()), None, 2, 0);
        let rhs: f64 = c.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} {rhs}");
    }
}
