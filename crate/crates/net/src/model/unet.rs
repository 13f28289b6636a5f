//! Plain 3D UNet feature encoder: `[1, P³] → [C, P³]`.

use crate::autograd::{Tape, Var};
use crate::model::params::{Bound, Registry};
use crate::tensor::Real;

pub(crate) const IN_EPS: f64 = 1e-5;
pub(crate) const SLOPE: f64 = 0.01;

fn register_double(r: &mut Registry, name: &str, ci: usize, co: usize) {
    r.conv(&format!("{name}.conv1"), co, ci, 3, false);
    r.conv(&format!("{name}.conv2"), co, co, 3, false);
}

pub(crate) fn register(r: &mut Registry, name: &str, c: usize, levels: usize) {
    let ch = |l: usize| c << l;
    register_double(r, &format!("{name}.enc0"), 1, ch(0));
    for l in 1..levels {
        r.conv(&format!("{name}.down{l}"), ch(l - 1), ch(l - 1), 2, true);
        register_double(r, &format!("{name}.enc{l}"), ch(l - 1), ch(l));
    }
    for l in (1..levels).rev() {
        r.conv_t(&format!("{name}.up{l}"), ch(l), ch(l - 1));
        register_double(r, &format!("{name}.dec{}", l - 1), 2 * ch(l - 1), ch(l - 1));
    }
    r.conv(&format!("{name}.head"), c, c, 1, true);
}

/// conv → instance norm → leaky ReLU.
pub(crate) fn conv_in_act<T: Real>(tape: &Tape<T>, w: &Var<T>, x: &Var<T>) -> Var<T> {
    let y = tape.conv3d(x, w, None, 1, 1);
    tape.leaky_relu(&tape.instance_norm(&y, IN_EPS), SLOPE)
}

fn double<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>) -> Var<T> {
    let y = conv_in_act(tape, p.get(&format!("{name}.conv1.weight")), x);
    conv_in_act(tape, p.get(&format!("{name}.conv2.weight")), &y)
}

pub(crate) fn forward<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, levels: usize, x: &Var<T>) -> Var<T> {
    let mut skips = vec![double(tape, p, &format!("{name}.enc0"), x)];
    for l in 1..levels {
        let prev = skips.last().unwrap();
        let d = tape.conv3d(prev, p.get(&format!("{name}.down{l}.weight")), Some(p.get(&format!("{name}.down{l}.bias"))), 2, 0);
        skips.push(double(tape, p, &format!("{name}.enc{l}"), &d));
    }
    let mut x = skips.pop().unwrap();
    for l in (1..levels).rev() {
        let u = tape.conv_transpose3d_k2s2(&x, p.get(&format!("{name}.up{l}.weight")), None);
        let cat = tape.concat0(&[&u, &skips[l - 1]]);
        x = double(tape, p, &format!("{name}.dec{}", l - 1), &cat);
    }
    tape.conv3d(&x, p.get(&format!("{name}.head.weight")), Some(p.get(&format!("{name}.head.bias"))), 1, 0)
}
