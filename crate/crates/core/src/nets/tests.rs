use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::check::check_gradients;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Finite-difference check of `build` with respect to every parameter.
/// `build` receives the graph and the parameter handles and returns a scalar.
fn check_params<F>(params: &ParameterSet<f64>, tol: f64, build: F)
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let names: Vec<String> = params.names().map(String::from).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(
        |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            build(g, &p)
        },
        &tensors,
        1e-5,
        tol,
    )
    .unwrap();
    for c in &report.inputs {
        assert!(
            c.max_rel_error < tol,
            "{}: rel {:.3e} (abs {:.3e}, scale {:.3e})",
            names[c.input],
            c.max_rel_error,
            c.max_abs_error,
            c.scale
        );
    }
}

#[test]
fn full_config_snapshot() {
    let c = NetConfig::full();
    let e = &c.encoder;
    assert_eq!((e.image_size, e.in_channels), (84, 3));
    let stack: Vec<(usize, usize, usize)> = e.conv.iter().map(|l| (l.out_channels, l.kernel, l.stride)).collect();
    assert_eq!(stack, vec![(32, 8, 4), (64, 4, 2), (64, 3, 1), (16, 2, 1)]);
    assert_eq!(e.fc, vec![128, 128]);
    assert_eq!(e.pixel_scale, 1.0 / 255.0);
    assert_eq!(c.latent_dim(), 128);
    assert_eq!(c.dynamics.action_width, 64);
    assert_eq!(c.bias_width, 20);
    assert_eq!(c.bias_init, 0.1);
    assert_eq!(c.ln_eps, 1e-5);
    assert_eq!(c.ril_hidden, vec![128, 128]);
    assert_eq!(c.ail_hidden, 128);
    assert_eq!(e.conv_out_shape().unwrap(), [16, 6, 6]);
    c.validate().unwrap();
}

#[test]
fn desk_config_fits_42_pixels() {
    let c = NetConfig::desk();
    c.validate().unwrap();
    assert_eq!(c.encoder.conv_out_shape().unwrap(), [8, 6, 6]);
}

#[test]
fn oversized_kernel_is_a_config_error() {
    let mut c = NetConfig::tiny();
    c.encoder.image_size = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = NetConfig::tiny();
    c.dynamics.latent_dim = 7;
    assert!(c.validate().is_err());
}

#[test]
fn parameter_names_and_shapes() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(0)).unwrap();
    assert_eq!(p.get("enc.conv0.w").unwrap().shape(), &[2, 3, 4, 4]);
    assert_eq!(p.get("enc.fc0.w").unwrap().shape(), &[27, 5]);
    assert_eq!(p.get("fuse.fc.w").unwrap().shape(), &[4 + 4 + 3, 4]);
    assert_eq!(p.get("dyn.fc.w").unwrap().shape(), &[4 + 3, 4]);
    assert_eq!(p.get("bias_transform").unwrap().data(), &[0.1, 0.1, 0.1]);
    assert_eq!(p.get("enc.ln1.g").unwrap().data(), &[1.0; 4]);
    let bound = 1.0 / 27f64.sqrt();
    assert!(p.get("enc.fc0.w").unwrap().data().iter().all(|v| v.abs() <= bound));
    let ril: ParameterSet<f64> = init_params(&cfg, ModelKind::Ril, &mut rng(0)).unwrap();
    assert_eq!(ril.get("enc.conv0.w").unwrap().shape(), &[2, 6, 4, 4]);
    assert!(ril.get("dyn.fc.w").is_none());
}

#[test]
fn init_is_seeded() {
    let cfg = NetConfig::tiny();
    let a: ParameterSet<f32> = init_params(&cfg, ModelKind::Upn, &mut rng(5)).unwrap();
    let b: ParameterSet<f32> = init_params(&cfg, ModelKind::Upn, &mut rng(5)).unwrap();
    let c: ParameterSet<f32> = init_params(&cfg, ModelKind::Upn, &mut rng(6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn tiny_images(batch: usize, seed: u64) -> Tensor<f64> {
    random(&[batch, 3, 10, 10], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn tied_encoder_is_deterministic_and_finite() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(1)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let img = tiny_images(1, 2);
    let o1 = g.constant(img.clone());
    let o2 = g.constant(img);
    let x1 = encode(&mut g, &b, &cfg.encoder, cfg.ln_eps, o1).unwrap();
    let x2 = encode(&mut g, &b, &cfg.encoder, cfg.ln_eps, o2).unwrap();
    assert_eq!(g.value(x1), g.value(x2));
    let z = g.constant(Tensor::zeros([1, 3, 10, 10]));
    let xz = encode(&mut g, &b, &cfg.encoder, cfg.ln_eps, z).unwrap();
    assert_eq!(g.shape(xz), &[1, 4]);
    assert!(g.value(xz).all_finite());
}

#[test]
fn encoder_rejects_wrong_image_shape() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(1)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let o = g.constant(Tensor::zeros([1, 3, 12, 12]));
    assert!(encode(&mut g, &b, &cfg.encoder, cfg.ln_eps, o).is_err());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(3)).unwrap();
    let img = tiny_images(2, 4);
    check_params(&p, 1e-4, |g, b| {
        let o = g.constant(img.clone());
        let x = encode(g, b, &cfg.encoder, cfg.ln_eps, o)?;
        let sq = g.square(x);
        Ok(g.sum(sq))
    });
}

#[test]
fn bias_transform_is_tiled() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(1)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let row = [0.3, -0.2, 0.5, 0.9];
    let x = g.constant(Tensor::from_f64([3, 4], &row.repeat(3)).unwrap());
    let q = g.constant(Tensor::from_f64([3, 4], &[0.1, 0.2, 0.3, 0.4].repeat(3)).unwrap());
    let f = fuse_embodiment(&mut g, &b, &cfg, x, q).unwrap();
    let v = g.value(f).clone();
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.row(1), v.row(2));

    let x1 = g.constant(Tensor::from_f64([1, 4], &row).unwrap());
    let q2 = g.constant(Tensor::from_f64([1, 4], &[0.9, 0.1, -0.5, 0.0]).unwrap());
    let f2 = fuse_embodiment(&mut g, &b, &cfg, x1, q2).unwrap();
    assert_ne!(g.value(f2).row(0), v.row(0));

    let bad = g.constant(Tensor::zeros([3, 5]));
    assert!(fuse_embodiment(&mut g, &b, &cfg, x, bad).is_err());
}

#[test]
fn fuse_gradients_match_finite_differences() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(7)).unwrap();
    let mut r = rng(8);
    let x = random(&[3, 4], -1.0, 1.0, &mut r);
    let q = random(&[3, 4], -1.0, 1.0, &mut r);
    let w = random(&[3, 4], -1.0, 1.0, &mut r);
    check_params(&p, 1e-4, |g, b| {
        let (xv, qv, wv) = (g.constant(x.clone()), g.constant(q.clone()), g.constant(w.clone()));
        let f = fuse_embodiment(g, b, &cfg, xv, qv)?;
        let y = g.mul(f, wv)?;
        Ok(g.sum(y))
    });
}

#[test]
fn zero_action_encodes_to_bias_path() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(1)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let a = g.constant(Tensor::zeros([1, 2]));
    let u = encode_action(&mut g, &b, &cfg, a).unwrap();
    let u2 = encode_action(&mut g, &b, &cfg, a).unwrap();
    assert_eq!(g.value(u), g.value(u2));

    // swish(layer_norm(bias)) with unit gain and zero shift, by hand.
    let bias = p.get("act.fc.b").unwrap().data().to_vec();
    let n = bias.len() as f64;
    let mean = bias.iter().sum::<f64>() / n;
    let var = bias.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    for (k, &bv) in bias.iter().enumerate() {
        let z = (bv - mean) / (var + 1e-5).sqrt();
        let expect = z / (1.0 + (-z).exp());
        assert!((g.value(u).data()[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn action_encoder_gradients() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(9)).unwrap();
    let mut r = rng(10);
    let a = random(&[3, 2], -1.0, 1.0, &mut r);
    let w = random(&[3, 3], -1.0, 1.0, &mut r);
    check_params(&p, 1e-4, |g, b| {
        let (av, wv) = (g.constant(a.clone()), g.constant(w.clone()));
        let u = encode_action(g, b, &cfg, av)?;
        let y = g.mul(u, wv)?;
        Ok(g.sum(y))
    });
}

fn unroll(g: &mut Graph<f64>, b: &Bound, cfg: &NetConfig, x0: Var, actions: &[Var]) -> Result<Vec<Var>> {
    let mut xs = vec![x0];
    for &a in actions {
        let u = encode_action(g, b, cfg, a)?;
        let next = dynamics_step(g, b, cfg, *xs.last().unwrap(), u)?;
        xs.push(next);
    }
    Ok(xs)
}

#[test]
fn dynamics_unroll_shapes_and_composition() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(11)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let mut r = rng(12);
    let x0 = g.constant(random(&[2, 4], -1.0, 1.0, &mut r));
    let acts: Vec<Var> = (0..5).map(|_| g.constant(random(&[2, 2], -1.0, 1.0, &mut r))).collect();
    let xs = unroll(&mut g, &b, &cfg, x0, &acts).unwrap();
    assert_eq!(xs.len(), 6);
    for &x in &xs {
        assert_eq!(g.shape(x), &[2, 4]);
    }
    let u = encode_action(&mut g, &b, &cfg, acts[2]).unwrap();
    let again = dynamics_step(&mut g, &b, &cfg, xs[2], u).unwrap();
    assert_eq!(g.value(again), g.value(xs[3]));
}

#[test]
fn five_step_unroll_gradient_wrt_first_action() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Upn, &mut rng(13)).unwrap();
    let mut r = rng(14);
    let x0 = random(&[2, 4], -1.0, 1.0, &mut r);
    let goal = random(&[2, 4], -1.0, 1.0, &mut r);
    let actions: Vec<Tensor<f64>> = (0..5).map(|_| random(&[2, 2], -1.0, 1.0, &mut r)).collect();
    let report = check_gradients(
        |g, vars| {
            let b = p.bind(g, false);
            let x = g.constant(x0.clone());
            let xg = g.constant(goal.clone());
            let mut acts = vec![vars[0]];
            acts.extend(actions[1..].iter().map(|a| g.constant(a.clone())));
            let xs = unroll(g, &b, &cfg, x, &acts)?;
            let d = g.sub(*xs.last().unwrap(), xg)?;
            let h = g.huber(d, 0.85)?;
            Ok(g.sum(h))
        },
        &actions[..1],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
    assert!(report.inputs[0].scale > 1e-6);
}

fn pair_tensor(batch: usize, seed: u64) -> Tensor<f64> {
    random(&[batch, 6, 10, 10], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn ril_outputs_actions_and_checks() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Ril, &mut rng(15)).unwrap();
    let pair = pair_tensor(2, 16);
    let q = random(&[2, 4], -1.0, 1.0, &mut rng(17));
    {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let (o, qv) = (g.constant(pair.clone()), g.constant(q.clone()));
        let a = ril_forward(&mut g, &b, &cfg, o, qv).unwrap();
        let a2 = ril_forward(&mut g, &b, &cfg, o, qv).unwrap();
        assert_eq!(g.shape(a), &[2, 2]);
        assert_eq!(g.value(a), g.value(a2));
    }
    check_params(&p, 1e-4, |g, b| {
        let (o, qv) = (g.constant(pair.clone()), g.constant(q.clone()));
        let a = ril_forward(g, b, &cfg, o, qv)?;
        let sq = g.square(a);
        Ok(g.sum(sq))
    });
}

#[test]
fn ail_shapes_and_recurrence() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Ail, &mut rng(18)).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let o = g.constant(pair_tensor(1, 19));
    let q = g.constant(random(&[1, 4], -1.0, 1.0, &mut rng(20)));
    let one = ail_forward(&mut g, &b, &cfg, o, q, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(g.shape(one[0]), &[1, 2]);
    let two = ail_forward(&mut g, &b, &cfg, o, q, 2).unwrap();
    assert_ne!(g.value(two[0]), g.value(two[1]));
    assert!(ail_forward(&mut g, &b, &cfg, o, q, 0).is_err());
}

#[test]
fn ail_last_action_depends_on_encoder() {
    let cfg = NetConfig::tiny();
    let p: ParameterSet<f64> = init_params(&cfg, ModelKind::Ail, &mut rng(21)).unwrap();
    let pair = pair_tensor(2, 22);
    let q = random(&[2, 4], -1.0, 1.0, &mut rng(23));
    let build = |g: &mut Graph<f64>, b: &Bound| {
        let (o, qv) = (g.constant(pair.clone()), g.constant(q.clone()));
        let acts = ail_forward(g, b, &cfg, o, qv, 3)?;
        Ok(g.sum(acts[2]))
    };
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let out = build(&mut g, &b).unwrap();
    let w = b.get("enc.conv0.w").unwrap();
    let dw = g.grad(out, &[w], false).unwrap()[0];
    assert!(g.value(dw).data().iter().any(|v| v.abs() > 1e-8));
    check_params(&p, 1e-4, build);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::tiny();
    let p32: ParameterSet<f32> = init_params(&cfg, ModelKind::Upn, &mut rng(24)).unwrap();
    let path = dir.path().join("a.ckpt");
    p32.save(&path, "kind = \"upn\"\n").unwrap();
    let (back, header) = ParameterSet::<f32>::load(&path).unwrap();
    assert_eq!(header, "kind = \"upn\"\n");
    for ((n1, t1), (n2, t2)) in p32.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }
    assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes(&header));
    assert!(matches!(ParameterSet::<f64>::load(&path), Err(Error::Format { .. })));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ParameterSet::<f32>::load(&cut), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ParameterSet::<f32>::from_bytes(&path, &bad).is_err());
    assert!(matches!(
        ParameterSet::<f32>::load(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn image_tensor_layout_is_nchw() {
    let img = Image {
        width: 2,
        height: 1,
        data: vec![10, 20, 30, 40, 50, 60],
    };
    let t: Tensor<f64> = images_to_tensor(&[&img], 1.0).unwrap();
    assert_eq!(t.shape(), &[1, 3, 1, 2]);
    assert_eq!(t.data(), &[10.0, 40.0, 20.0, 50.0, 30.0, 60.0]);
    let p: Tensor<f64> = image_pairs_to_tensor(&[(&img, &img)], 0.5).unwrap();
    assert_eq!(p.shape(), &[1, 6, 1, 2]);
    assert_eq!(p.data()[6], 5.0);
}

#[test]
fn model_kind_parses() {
    assert_eq!("RIL".parse::<ModelKind>().unwrap(), ModelKind::Ril);
    assert_eq!(ModelKind::Ail.to_string(), "ail");
    assert!("vae".parse::<ModelKind>().is_err());
}
