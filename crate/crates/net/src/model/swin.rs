//! Shifted-window geometry (padding, cyclic roll, partition, masks) and the
//! Swin transformer block / patch merging built on top of it.
//!
//! Token sequences are `[D·H·W, C]` with the W axis fastest.

use std::ops::Range;
use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::model::config::MLP_RATIO;
use crate::model::params::{Bound, Registry};
use crate::ops::{WindowLayout, PAD_ROW};
use crate::tensor::Real;

const LN_EPS: f64 = 1e-5;
const MASK_FILL: f64 = -100.0;

/// Window and shift actually used on a `dims` grid: an axis no longer than
/// the window is covered by one window and never shifted.
pub fn effective_window(dims: [usize; 3], window: usize, shifted: bool) -> ([usize; 3], [usize; 3]) {
    let mut ws = [window; 3];
    let mut sh = [if shifted { window / 2 } else { 0 }; 3];
    for a in 0..3 {
        if dims[a] <= window {
            ws[a] = dims[a];
            sh[a] = 0;
        }
    }
    (ws, sh)
}

/// Relative-position index over a full `w³` window, row-major `[n, n]`.
pub fn relative_position_index(w: usize) -> Vec<u32> {
    let n = w * w * w;
    let coord = |i: usize| [i / (w * w), (i / w) % w, i % w];
    let m = 2 * w - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let ci = coord(i);
        for j in 0..n {
            let cj = coord(j);
            let r: [usize; 3] = std::array::from_fn(|a| ci[a] + w - 1 - cj[a]);
            out.push((r[0] * m * m + r[1] * m + r[2]) as u32);
        }
    }
    out
}

/// Python slice `[start:stop]` over `len` elements.
fn py_slice(start: Option<isize>, stop: Option<isize>, len: usize) -> Range<usize> {
    let n = len as isize;
    let fix = |v: isize| if v < 0 { (v + n).max(0) } else { v.min(n) } as usize;
    let a = start.map_or(0, fix);
    let b = stop.map_or(len, fix);
    a..b.max(a)
}

/// Index maps and attention layout for one block on one grid.
pub struct BlockPlan<T> {
    /// Window-ordered rows gathered from the token sequence (`PAD_ROW` for padding).
    pub to_windows: Arc<Vec<u32>>,
    /// Token-ordered rows gathered back from the window sequence.
    pub from_windows: Arc<Vec<u32>>,
    pub layout: WindowLayout<T>,
}

impl<T: Real> BlockPlan<T> {
    pub fn new(dims: [usize; 3], window: usize, shifted: bool, heads: usize) -> Self {
        let (ws, sh) = effective_window(dims, window, shifted);
        let pd: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(ws[a]) * ws[a]);
        let nw: [usize; 3] = std::array::from_fn(|a| pd[a] / ws[a]);
        let t = ws[0] * ws[1] * ws[2];
        let windows = nw[0] * nw[1] * nw[2];
        let mut to_windows = Vec::with_capacity(windows * t);
        // Window-major position of each rolled padded voxel, for the reverse map.
        let rolled_row = |r: [usize; 3]| -> u32 {
            let w = ((r[0] / ws[0]) * nw[1] + r[1] / ws[1]) * nw[2] + r[2] / ws[2];
            let k = ((r[0] % ws[0]) * ws[1] + r[1] % ws[1]) * ws[2] + r[2] % ws[2];
            (w * t + k) as u32
        };
        for bd in 0..nw[0] {
            for bh in 0..nw[1] {
                for bw in 0..nw[2] {
                    for z in 0..ws[0] {
                        for y in 0..ws[1] {
                            for x in 0..ws[2] {
                                let r = [bd * ws[0] + z, bh * ws[1] + y, bw * ws[2] + x];
                                let s: [usize; 3] = std::array::from_fn(|a| (r[a] + sh[a]) % pd[a]);
                                to_windows.push(if s[0] < dims[0] && s[1] < dims[1] && s[2] < dims[2] {
                                    ((s[0] * dims[1] + s[1]) * dims[2] + s[2]) as u32
                                } else {
                                    PAD_ROW
                                });
                            }
                        }
                    }
                }
            }
        }
        let mut from_windows = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let c = [z, y, x];
                    let r: [usize; 3] = std::array::from_fn(|a| (c[a] + pd[a] - sh[a]) % pd[a]);
                    from_windows.push(rolled_row(r));
                }
            }
        }
        let full = relative_position_index(window);
        let tw = window * window * window;
        let rel_index: Vec<u32> = (0..t * t).map(|ij| full[(ij / t) * tw + ij % t]).collect();
        let mask = sh.iter().any(|&s| s > 0).then(|| Arc::new(shift_mask(pd, ws, sh, windows, t, &rolled_row)));
        BlockPlan {
            to_windows: Arc::new(to_windows),
            from_windows: Arc::new(from_windows),
            layout: WindowLayout { windows, tokens: t, heads, rel_index: Arc::new(rel_index), mask },
        }
    }
}

/// Region labels on the padded grid, partitioned into windows, turned into
/// an additive `[windows, t, t]` mask.
fn shift_mask<T: Real>(
    pd: [usize; 3],
    ws: [usize; 3],
    sh: [usize; 3],
    windows: usize,
    t: usize,
    rolled_row: &dyn Fn([usize; 3]) -> u32,
) -> Vec<T> {
    let slices = |a: usize| {
        let (w, s) = (ws[a] as isize, sh[a] as isize);
        [py_slice(None, Some(-w), pd[a]), py_slice(Some(-w), Some(-s), pd[a]), py_slice(Some(-s), None, pd[a])]
    };
    let (sd, shh, sw) = (slices(0), slices(1), slices(2));
    let mut label = vec![0u32; windows * t];
    let mut cnt = 0u32;
    for d in &sd {
        for h in &shh {
            for w in &sw {
                for z in d.clone() {
                    for y in h.clone() {
                        for x in w.clone() {
                            label[rolled_row([z, y, x]) as usize] = cnt;
                        }
                    }
                }
                cnt += 1;
            }
        }
    }
    let fill = T::c(MASK_FILL);
    let mut mask = Vec::with_capacity(windows * t * t);
    for lw in label.chunks(t) {
        for &li in lw {
            mask.extend(lw.iter().map(|&lj| if li == lj { T::zero() } else { fill }));
        }
    }
    mask
}

/// Rows for 2×2×2 patch merging: output voxel-major, then the eight
/// neighbours with the W offset fastest.
pub fn merge_index(dims: [usize; 3]) -> (Vec<u32>, [usize; 3]) {
    let out: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(2));
    let mut idx = Vec::with_capacity(out.iter().product::<usize>() * 8);
    for z in 0..out[0] {
        for y in 0..out[1] {
            for x in 0..out[2] {
                for i in 0..2 {
                    for j in 0..2 {
                        for k in 0..2 {
                            let s = [2 * z + i, 2 * y + j, 2 * x + k];
                            idx.push(if s[0] < dims[0] && s[1] < dims[1] && s[2] < dims[2] {
                                ((s[0] * dims[1] + s[1]) * dims[2] + s[2]) as u32
                            } else {
                                PAD_ROW
                            });
                        }
                    }
                }
            }
        }
    }
    (idx, out)
}

pub(crate) fn register_block(r: &mut Registry, name: &str, dim: usize, heads: usize, window: usize) {
    let rows = (2 * window - 1).pow(3);
    r.layer_norm(&format!("{name}.norm1"), dim);
    r.table(&format!("{name}.attn.relative_position_bias_table"), rows, heads);
    r.linear(&format!("{name}.attn.qkv"), 3 * dim, dim, true);
    r.linear(&format!("{name}.attn.proj"), dim, dim, true);
    r.layer_norm(&format!("{name}.norm2"), dim);
    r.linear(&format!("{name}.mlp.linear1"), MLP_RATIO * dim, dim, true);
    r.linear(&format!("{name}.mlp.linear2"), dim, MLP_RATIO * dim, true);
}

pub(crate) fn register_merge(r: &mut Registry, name: &str, dim: usize) {
    r.layer_norm(&format!("{name}.norm"), 8 * dim);
    r.linear(&format!("{name}.reduction"), 2 * dim, 8 * dim, false);
}

fn ln<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>) -> Var<T> {
    tape.layer_norm(x, Some((p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")))), LN_EPS)
}

fn lin<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>) -> Var<T> {
    let b = format!("{name}.bias");
    tape.linear(x, p.get(&format!("{name}.weight")), p.try_get(&b))
}

pub(crate) fn block<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>, plan: &BlockPlan<T>) -> Var<T> {
    let h = ln(tape, p, &format!("{name}.norm1"), x);
    let hw = tape.gather_rows(&h, &plan.to_windows);
    let qkv = lin(tape, p, &format!("{name}.attn.qkv"), &hw);
    let table = p.get(&format!("{name}.attn.relative_position_bias_table"));
    let a = tape.window_attention(&qkv, table, &plan.layout);
    let a = lin(tape, p, &format!("{name}.attn.proj"), &a);
    let back = tape.gather_rows(&a, &plan.from_windows);
    let x = tape.add(x, &back);
    let m = ln(tape, p, &format!("{name}.norm2"), &x);
    let m = lin(tape, p, &format!("{name}.mlp.linear1"), &m);
    let m = tape.gelu(&m);
    let m = lin(tape, p, &format!("{name}.mlp.linear2"), &m);
    tape.add(&x, &m)
}

pub(crate) fn merge<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>, dims: [usize; 3]) -> (Var<T>, [usize; 3]) {
    let c = x.shape()[1];
    let (idx, out) = merge_index(dims);
    let g = tape.gather_rows(x, &Arc::new(idx));
    let g = tape.reshape(&g, vec![out.iter().product(), 8 * c]);
    let g = ln(tape, p, &format!("{name}.norm"), &g);
    (lin(tape, p, &format!("{name}.reduction"), &g), out)
}
