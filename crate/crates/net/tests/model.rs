use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regerr_net::{ErrorNet, ModelConfig, NetError, ParamStore, Tape, Tensor};

fn random_patch(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Closed-form parameter count, layer by layer.
fn audited_count(cfg: &ModelConfig) -> usize {
    let c = cfg.unet_feature_channels;
    let ch = |l: usize| c << l;
    let mut unet = 27 * c + 27 * c * c;
    for l in 1..cfg.unet_levels {
        let (a, b) = (ch(l - 1), ch(l));
        unet += 8 * a * a + a; // strided conv
        unet += 27 * a * b + 27 * b * b;
        unet += 8 * b * a; // transposed conv
        unet += 27 * 2 * a * a + 27 * a * a;
    }
    unet += c * c + c;

    let f = cfg.swin_embed_dim;
    let w = cfg.window_size;
    let table = (2 * w - 1).pow(3);
    let mut vit = 8 * 2 * c * f + f;
    for s in 0..4 {
        let d = f << s;
        let block = 12 * d * d + 13 * d + table * cfg.swin_heads[s];
        vit += cfg.swin_depths[s] * block + 16 * d * d + 16 * d;
    }
    let res = |i: usize, o: usize| 27 * i * o + 27 * o * o + if i != o { i * o } else { 0 };
    let up = |i: usize, o: usize| 8 * i * o + res(2 * o, o);
    let enc = res(2 * c, f) + res(f, f) + res(2 * f, 2 * f) + res(4 * f, 4 * f) + res(16 * f, 16 * f);
    let dec = up(16 * f, 8 * f) + up(8 * f, 4 * f) + up(4 * f, 2 * f) + up(2 * f, f) + up(f, f);
    2 * unet + vit + enc + dec + f + 1
}

#[test]
fn parameter_count_matches_audit() {
    for cfg in [ModelConfig::toy(), ModelConfig::default()] {
        let net = ErrorNet::new(cfg.clone()).unwrap();
        let n: usize = net.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(n, audited_count(&cfg), "{cfg:?}");
    }
    let p: ParamStore<f32> = ErrorNet::new(ModelConfig::toy()).unwrap().init_params(1);
    assert_eq!(p.num_scalars(), audited_count(&ModelConfig::toy()));
}

#[test]
fn init_is_seeded() {
    let net = ErrorNet::new(ModelConfig::toy()).unwrap();
    let a: ParamStore<f32> = net.init_params(7);
    assert_eq!(a, net.init_params(7));
    assert_ne!(a, net.init_params(8));
    assert!(a.all_finite());
}

#[test]
fn rejects_indivisible_patch_size() {
    let cfg = ModelConfig { patch_size: 48, ..ModelConfig::toy() };
    assert!(matches!(ErrorNet::new(cfg), Err(NetError::Config(_))));
}

#[test]
fn toy_forward_shape_positive_deterministic() {
    let net = ErrorNet::new(ModelConfig::toy()).unwrap();
    let p = net.init_params(3);
    let (m, i) = (random_patch(32, 1), random_patch(32, 2));
    let y = net.predict(&p, &m, &i).unwrap();
    assert_eq!(y.len(), 32 * 32 * 32);
    assert!(y.iter().all(|v| v.is_finite() && *v > 0.0));
    let y2 = net.predict(&p, &m, &i).unwrap();
    assert!(y.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));

    let swapped = net.predict(&p, &i, &m).unwrap();
    assert!(y.iter().zip(&swapped).any(|(a, b)| a != b), "encoders must not be tied");
    let zeros = vec![0.0; m.len()];
    let no_ius = net.predict(&p, &m, &zeros).unwrap();
    assert!(y.iter().zip(&no_ius).any(|(a, b)| a != b), "iUS branch must reach the output");
}

#[test]
fn forward_shape_at_64() {
    let cfg = ModelConfig { patch_size: 64, ..ModelConfig::toy() };
    let net = ErrorNet::new(cfg).unwrap();
    let p = net.init_params(3);
    let y = net.predict(&p, &random_patch(64, 1), &random_patch(64, 2)).unwrap();
    assert_eq!(y.len(), 64 * 64 * 64);
    assert!(y.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn wrong_input_shape_is_shape_error() {
    let net = ErrorNet::new(ModelConfig::toy()).unwrap();
    let p = net.init_params(3);
    let r = net.predict(&p, &random_patch(16, 1), &random_patch(32, 2));
    assert!(matches!(r, Err(NetError::Shape(_))));
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let net = ErrorNet::new(ModelConfig::toy()).unwrap();
    let p32: ParamStore<f32> = net.init_params(11);
    let params: ParamStore<f64> = p32.cast();
    let n = 32;
    let to64 = |v: Vec<f32>| Tensor::new(vec![1, n, n, n], v.into_iter().map(f64::from).collect());
    let (mri, ius) = (to64(random_patch(n, 4)), to64(random_patch(n, 5)));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r: Vec<f64> = (0..n * n * n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let eval = |ps: &ParamStore<f64>| -> f64 {
        let tape = Tape::no_grad();
        let b = ps.bind(&tape);
        let y = net.forward(&tape, &b, &tape.constant(mri.clone()), &tape.constant(ius.clone())).unwrap();
        y.data().iter().zip(&r).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let b = params.bind(&tape);
    let y = net.forward(&tape, &b, &tape.constant(mri.clone()), &tape.constant(ius.clone())).unwrap();
    let vars: Vec<_> = b.vars().to_vec();
    let grads = tape.backward(&y, Tensor::new(y.shape().to_vec(), r.clone()));

    // Cover every tensor once, then fill up with random picks.
    let mut picks: Vec<(usize, usize)> = (0..params.len()).map(|k| (k, rng.random_range(0..params.tensor(k).len()))).collect();
    while picks.len() < params.len() + 40 {
        let k = rng.random_range(0..params.len());
        picks.push((k, rng.random_range(0..params.tensor(k).len())));
    }
    // Leaky-ReLU kinks make the loss piecewise smooth; samples whose ±h
    // interval straddles a kink (one-sided slopes disagree) are skipped.
    let h = 1e-6;
    let f0 = eval(&params);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for &(k, i) in &picks {
        let an = grads.get(&vars[k]).map_or(0.0, |g| g.data()[i]);
        let mut plus = params.clone();
        plus.tensor_mut(k).data_mut()[i] += h;
        let mut minus = params.clone();
        minus.tensor_mut(k).data_mut()[i] -= h;
        let (fp, fm) = (eval(&plus), eval(&minus));
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let floor = 1e-3;
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(floor) {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
        worst = worst.max(err);
        checked += 1;
        assert!(err < 1e-3, "{}[{i}]: fd {fd:e} analytic {an:e}", params.names()[k]);
    }
    eprintln!("{checked} parameters checked ({skipped} at kinks), worst relative error {worst:e}");
    assert!(checked >= 50);
}
