//! Swin-UNETR: Swin encoder on 2×2×2 patch tokens plus a convolutional
//! decoder with skips from every stage. Parameter names follow the MONAI
//! module layout so external encoder weights can be mapped in.

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::model::config::{ModelConfig, SWIN_STAGES};
use crate::model::params::{Bound, Registry};
use crate::model::swin::{self, BlockPlan};
use crate::model::unet::{conv_in_act, IN_EPS, SLOPE};
use crate::tensor::Real;

pub const PREFIX: &str = "swin_unetr";
/// Parameters under this prefix form the transferable Swin encoder.
pub const ENCODER_PREFIX: &str = "swin_unetr.swinViT.";

fn register_res(r: &mut Registry, name: &str, ci: usize, co: usize) {
    r.conv(&format!("{name}.conv1.conv"), co, ci, 3, false);
    r.conv(&format!("{name}.conv2.conv"), co, co, 3, false);
    if ci != co {
        r.conv(&format!("{name}.conv3.conv"), co, ci, 1, false);
    }
}

fn register_up(r: &mut Registry, name: &str, ci: usize, co: usize) {
    r.conv_t(&format!("{name}.transp_conv.conv"), ci, co);
    register_res(r, &format!("{name}.conv_block"), 2 * co, co);
}

pub(crate) fn register(r: &mut Registry, cfg: &ModelConfig) {
    let cin = 2 * cfg.unet_feature_channels;
    let f = cfg.swin_embed_dim;
    let vit = format!("{PREFIX}.swinViT");
    r.conv(&format!("{vit}.patch_embed.proj"), f, cin, 2, true);
    for s in 0..SWIN_STAGES {
        let dim = f << s;
        for b in 0..cfg.swin_depths[s] {
            swin::register_block(r, &format!("{vit}.layers{}.0.blocks.{b}", s + 1), dim, cfg.swin_heads[s], cfg.window_size);
        }
        swin::register_merge(r, &format!("{vit}.layers{}.0.downsample", s + 1), dim);
    }
    for (name, c_in, c_out) in [("encoder1", cin, f), ("encoder2", f, f), ("encoder3", 2 * f, 2 * f), ("encoder4", 4 * f, 4 * f), ("encoder10", 16 * f, 16 * f)] {
        register_res(r, &format!("{PREFIX}.{name}.layer"), c_in, c_out);
    }
    for (name, c_in, c_out) in [("decoder5", 16 * f, 8 * f), ("decoder4", 8 * f, 4 * f), ("decoder3", 4 * f, 2 * f), ("decoder2", 2 * f, f), ("decoder1", f, f)] {
        register_up(r, &format!("{PREFIX}.{name}"), c_in, c_out);
    }
    r.conv(&format!("{PREFIX}.out.conv.conv"), 1, f, 1, true);
}

fn res_block<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>) -> Var<T> {
    let y = conv_in_act(tape, p.get(&format!("{name}.conv1.conv.weight")), x);
    let y = tape.instance_norm(&tape.conv3d(&y, p.get(&format!("{name}.conv2.conv.weight")), None, 1, 1), IN_EPS);
    let res = match p.try_get(&format!("{name}.conv3.conv.weight")) {
        Some(w) => tape.instance_norm(&tape.conv3d(x, w, None, 1, 0), IN_EPS),
        None => x.clone(),
    };
    tape.leaky_relu(&tape.add(&y, &res), SLOPE)
}

fn up_block<T: Real>(tape: &Tape<T>, p: &Bound<T>, name: &str, x: &Var<T>, skip: &Var<T>) -> Var<T> {
    let u = tape.conv_transpose3d_k2s2(x, p.get(&format!("{name}.transp_conv.conv.weight")), None);
    res_block(tape, p, &format!("{name}.conv_block"), &tape.concat0(&[&u, skip]))
}

/// Tokens `[S, C]` → non-affine LayerNorm → volume `[C, D, H, W]`.
fn proj_out<T: Real>(tape: &Tape<T>, x: &Var<T>, dims: [usize; 3]) -> Var<T> {
    let n = tape.layer_norm(x, None, 1e-5);
    let v = tape.transpose2d(&n);
    let c = v.shape()[0];
    tape.reshape(&v, vec![c, dims[0], dims[1], dims[2]])
}

/// `[2C, P³] → [1, P³]` logits (before the output activation).
pub(crate) fn forward<T: Real>(tape: &Tape<T>, p: &Bound<T>, cfg: &ModelConfig, x_in: &Var<T>) -> Var<T> {
    let vit = format!("{PREFIX}.swinViT");
    let emb = tape.conv3d(x_in, p.get(&format!("{vit}.patch_embed.proj.weight")), Some(p.get(&format!("{vit}.patch_embed.proj.bias"))), 2, 0);
    let mut dims = [emb.shape()[1], emb.shape()[2], emb.shape()[3]];
    let f = emb.shape()[0];
    let mut x = tape.transpose2d(&tape.reshape(&emb, vec![f, dims.iter().product()]));
    let mut hidden = vec![proj_out(tape, &x, dims)];
    let mut plans: HashMap<([usize; 3], bool), BlockPlan<T>> = HashMap::new();
    for s in 0..SWIN_STAGES {
        for b in 0..cfg.swin_depths[s] {
            let shifted = b % 2 == 1;
            let plan = plans
                .entry((dims, shifted))
                .or_insert_with(|| BlockPlan::new(dims, cfg.window_size, shifted, cfg.swin_heads[s]));
            x = swin::block(tape, p, &format!("{vit}.layers{}.0.blocks.{b}", s + 1), &x, plan);
        }
        let (m, out) = swin::merge(tape, p, &format!("{vit}.layers{}.0.downsample", s + 1), &x, dims);
        x = m;
        dims = out;
        hidden.push(proj_out(tape, &x, dims));
    }
    let enc0 = res_block(tape, p, &format!("{PREFIX}.encoder1.layer"), x_in);
    let enc1 = res_block(tape, p, &format!("{PREFIX}.encoder2.layer"), &hidden[0]);
    let enc2 = res_block(tape, p, &format!("{PREFIX}.encoder3.layer"), &hidden[1]);
    let enc3 = res_block(tape, p, &format!("{PREFIX}.encoder4.layer"), &hidden[2]);
    let dec4 = res_block(tape, p, &format!("{PREFIX}.encoder10.layer"), &hidden[4]);
    let dec3 = up_block(tape, p, &format!("{PREFIX}.decoder5"), &dec4, &hidden[3]);
    let dec2 = up_block(tape, p, &format!("{PREFIX}.decoder4"), &dec3, &enc3);
    let dec1 = up_block(tape, p, &format!("{PREFIX}.decoder3"), &dec2, &enc2);
    let dec0 = up_block(tape, p, &format!("{PREFIX}.decoder2"), &dec1, &enc1);
    let out = up_block(tape, p, &format!("{PREFIX}.decoder1"), &dec0, &enc0);
    tape.conv3d(&out, p.get(&format!("{PREFIX}.out.conv.conv.weight")), Some(p.get(&format!("{PREFIX}.out.conv.conv.bias"))), 1, 0)
}
