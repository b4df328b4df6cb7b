use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_grad, relative_l2_error, singular_values, Graph, ParamContainer};
use crate::tasks::{
    generate_gaussian_mask, generate_mask, generate_phantom, undersample, Contrast, MaskSpec, MaskType,
};

/// Adds uniform noise to every tensor so no gradient path is trivially zero.
fn perturbed(p: &ParameterSet<f64>, seed: u64, scale: f64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = p.clone();
    for t in out.visit_mut() {
        for v in t.data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
    out
}

fn sample(seed: u64, n: usize, acc: f64, mask_type: MaskType) -> Sample {
    let x_fs = generate_phantom(seed, Contrast((seed % 2) as u32), n, n).unwrap();
    let mask = generate_mask(n, n, &MaskSpec::new(mask_type, acc, 0.125 / acc.max(1.0)), seed).unwrap();
    let (x_us, y) = undersample(&x_fs, &mask, 0.0, 0).unwrap();
    Sample {
        source: 0,
        x_us,
        y,
        mask,
        x_fs,
    }
}

fn full_mask(n: usize) -> SamplingMask {
    generate_gaussian_mask(n, n, 1.0, 0.0, 0).unwrap()
}

fn empty_mask(n: usize) -> SamplingMask {
    let mut m = full_mask(n);
    m.kept.iter_mut().for_each(|k| *k = false);
    m
}

#[test]
fn layer_table_matches_the_u_shape() {
    let layers = BaseNetConfig::default().layers();
    let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "conv_down_0",
            "conv_down_1",
            "conv_down_2",
            "latent_layer",
            "conv_up_0",
            "conv_up_1",
            "conv_up_2"
        ]
    );
    let io: Vec<(usize, usize)> = layers.iter().map(|l| (l.n_in, l.n_out)).collect();
    assert_eq!(io, [(2, 8), (8, 16), (16, 32), (32, 64), (96, 32), (48, 16), (24, 2)]);
    assert!(!layers[6].relu && layers[..6].iter().all(|l| l.relu));
}

#[test]
fn hypernet_output_counts() {
    let cfg = ModelConfig::default();
    let latent = &cfg.base.layers()[3];
    assert_eq!((latent.n_out, latent.n_in), (64, 32));
    assert_eq!(cfg.hyper.output_len(latent), 96);
    let p = ParameterSet::<f64>::init(&cfg, Modulation::Kernel, 0).unwrap();
    assert_eq!(p.omega.expect("latent_layer/out/weight").unwrap().shape(), &[96, 64]);
    for l in cfg.base.layers() {
        assert_eq!(
            p.omega.expect(&format!("{}/out/bias", l.name)).unwrap().len(),
            l.n_in + l.n_out
        );
    }
}

#[test]
fn rank_two_split_shapes() {
    let mut cfg = ModelConfig::micro();
    cfg.hyper.rank = 2;
    let layer = LayerSpec {
        name: "probe".into(),
        n_in: 4,
        n_out: 8,
        stride: 1,
        relu: true,
        role: LayerRole::Down,
    };
    assert_eq!(cfg.hyper.output_len(&layer), 24);
    let g = Graph::<f64>::new();
    let mut omega = TensorMap::new();
    omega.insert("probe/hidden/weight", Tensor::ones([3, 4])).unwrap();
    omega.insert("probe/hidden/bias", Tensor::zeros([3])).unwrap();
    omega.insert("probe/out/weight", Tensor::zeros([24, 3])).unwrap();
    let bias: Vec<f64> = (0..24).map(|i| i as f64).collect();
    omega
        .insert("probe/out/bias", Tensor::from_f64([24], &bias).unwrap())
        .unwrap();
    let vars = VarMap::bind(&g, &omega, false);
    let gamma = g.constant(Tensor::ones([1, 4]));
    let (b, a) = Pipeline::new(&cfg, Modulation::Kernel)
        .hypernet_forward(&g, &layer, gamma, &vars)
        .unwrap();
    assert_eq!(g.value(b).shape(), &[8, 2]);
    assert_eq!(g.value(a).shape(), &[2, 4]);
    assert_eq!(g.value(b).data()[..16], bias[..16]);
    assert_eq!(g.value(a).data(), &bias[16..]);
}

#[test]
fn zero_hypernet_gives_zero_factors() {
    let cfg = ModelConfig::micro();
    let mut p = ParameterSet::<f64>::init(&cfg, Modulation::Kernel, 0).unwrap();
    p.omega = p.omega.zeros_like();
    let img = generate_phantom(1, Contrast(0), 8, 8).unwrap();
    for (b, a, _) in modulation_factors(&cfg, &p, &img).unwrap() {
        assert!(b.data().iter().chain(a.data()).all(|&v| v == 0.0));
    }
}

fn modulate_values(theta: Tensor<f64>, beta: Tensor<f64>, alpha: Tensor<f64>) -> Tensor<f64> {
    let g = Graph::new();
    let (t, b, a) = (g.constant(theta), g.constant(beta), g.constant(alpha));
    (*g.value(modulate(&g, t, b, a).unwrap())).clone()
}

#[test]
fn outer_product_modulation() {
    let theta = Tensor::from_f64([2, 2, 1, 2], &[1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0]).unwrap();
    let out = modulate_values(
        theta,
        Tensor::from_f64([2, 1], &[1.0, 2.0]).unwrap(),
        Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap(),
    );
    assert_eq!(out.data(), &[3.0, 3.0, 4.0, 4.0, 6.0, 12.0, 8.0, 8.0]);
}

#[test]
fn identity_left_factor_passes_alpha_through() {
    let (a, b, c, d) = (0.5, -1.5, 2.0, 3.25);
    let out = modulate_values(
        Tensor::ones([2, 2, 1, 1]),
        Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
        Tensor::from_f64([2, 2], &[a, b, c, d]).unwrap(),
    );
    assert_eq!(out.data(), &[a, b, c, d]);
}

#[test]
fn identity_modulation_is_bit_identical() {
    for rank in [1, 3] {
        let mut cfg = ModelConfig::micro();
        cfg.hyper.rank = rank;
        let p = ParameterSet::<f64>::init(&cfg, Modulation::Kernel, 9).unwrap();
        let s = sample(4, 8, 2.0, MaskType::Gaussian);
        let modulated = reconstruct(&cfg, Modulation::Kernel, &p, None, &s.x_us, &s.y, &s.mask).unwrap();
        let plain = reconstruct(&cfg, Modulation::None, &p, None, &s.x_us, &s.y, &s.mask).unwrap();
        assert_eq!(modulated, plain);
        for (_, _, w) in modulation_factors(&cfg, &p, &s.x_us).unwrap() {
            assert!(w.data().iter().all(|&v| v == 1.0));
        }
    }
}

#[test]
fn zero_weights_give_residual_identity() {
    let cfg = ModelConfig::micro();
    let mut p = ParameterSet::<f64>::init(&cfg, Modulation::None, 0).unwrap();
    p.theta = p.theta.zeros_like();
    let s = sample(2, 8, 3.0, MaskType::Cartesian);
    let g = Graph::new();
    let bound = BoundParams::bind(&g, &p, None, Trainable::NONE);
    let st = SampleTensors::<f64>::new(&s);
    let fwd = Pipeline::new(&cfg, Modulation::None)
        .forward(&g, &bound, &st.x_us, &st.y, &st.kept)
        .unwrap();
    assert_eq!(*g.value(fwd.x_cnn), st.x_us);
}

#[test]
fn output_shape_follows_input() {
    let cfg = ModelConfig::default();
    let p = ParameterSet::<f32>::init(&cfg, Modulation::Kernel, 1).unwrap();
    for n in [64, 96] {
        let s = sample(3, n, 4.0, MaskType::Cartesian);
        let out = reconstruct(&cfg, Modulation::Kernel, &p, None, &s.x_us, &s.y, &s.mask).unwrap();
        assert_eq!((out.height, out.width), (n, n));
    }
    let s = sample(3, 12, 4.0, MaskType::Cartesian);
    let err = reconstruct(&cfg, Modulation::Kernel, &p, None, &s.x_us, &s.y, &s.mask).unwrap_err();
    assert!(err.to_string().contains("multiple of 8"), "{err}");
}

#[test]
fn non_finite_activation_names_the_layer() {
    let cfg = ModelConfig::micro();
    let mut p = ParameterSet::<f64>::init(&cfg, Modulation::None, 0).unwrap();
    p.theta
        .get_mut("conv_down_0/weight")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 1e308);
    let s = sample(5, 8, 2.0, MaskType::Gaussian);
    let err = reconstruct(&cfg, Modulation::None, &p, None, &s.x_us, &s.y, &s.mask).unwrap_err();
    assert!(err.is_numeric());
    assert!(err.to_string().contains("conv_down_0"), "{err}");
}

#[test]
fn context_embedding_cases() {
    let cfg = ModelConfig::default();
    let p = ParameterSet::<f32>::init(&cfg, Modulation::Kernel, 2).unwrap();
    let g = Graph::new();
    let ce = VarMap::bind(&g, &p.ce, false);
    let pipe = Pipeline::new(&cfg, Modulation::Kernel);
    let x = g.constant(generate_phantom(1, Contrast(0), 32, 32).unwrap().to_tensor());
    let e = pipe.context_embed(&g, x, &ce).unwrap();
    assert_eq!(g.shape(e.gamma), [1, 256]);
    assert_eq!(g.shape(e.recon), [1, 2, 32, 32]);

    let zero_ce = p.ce.zeros_like();
    let ce0 = VarMap::bind(&g, &zero_ce, false);
    let x0 = g.constant(Tensor::zeros([1, 2, 32, 32]));
    let e0 = pipe.context_embed(&g, x0, &ce0).unwrap();
    assert!(g.value(e0.gamma).data().iter().all(|&v| v == 0.0));

    // Zero latent weights with bias k make every latent pixel equal k.
    let mut hooked = p.ce.clone();
    hooked
        .get_mut("enc_2/weight")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    hooked
        .get_mut("enc_2/bias")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.75);
    let ceh = VarMap::bind(&g, &hooked, false);
    let eh = pipe.context_embed(&g, x, &ceh).unwrap();
    assert!(g.value(eh.gamma).data().iter().all(|&v| v == 0.75));
}

#[test]
fn data_fidelity_cases() {
    let s = sample(7, 8, 2.0, MaskType::Gaussian);
    let noise = generate_phantom(99, Contrast(1), 8, 8).unwrap();
    let full = full_mask(8);
    let replaced = apply_data_fidelity(&noise, &s.x_fs.dft2(), &full, f64::INFINITY).unwrap();
    for (a, b) in replaced.re.iter().zip(&s.x_fs.re) {
        assert!((a - b).abs() < 1e-12);
    }
    let untouched = apply_data_fidelity(&noise, &s.y, &empty_mask(8), f64::INFINITY).unwrap();
    for (a, b) in untouched.re.iter().zip(&noise.re) {
        assert!((a - b).abs() < 1e-12);
    }
    let blended = apply_data_fidelity(&noise, &s.y, &s.mask, 1.0).unwrap().dft2();
    let pred = noise.dft2();
    for i in 0..64 {
        if s.mask.kept[i] {
            assert!((blended.re[i] - 0.5 * (pred.re[i] + s.y.re[i])).abs() < 1e-12);
            assert!((blended.im[i] - 0.5 * (pred.im[i] + s.y.im[i])).abs() < 1e-12);
        }
    }
    for lambda in [0.0, -1.0, f64::NAN] {
        assert!(matches!(
            apply_data_fidelity(&noise, &s.y, &s.mask, lambda),
            Err(Error::Parameter(_))
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hard_fidelity_is_idempotent_and_honors_measurements(seed in any::<u64>(), acc in 1.5f64..6.0) {
        let s = sample(seed, 16, acc, if seed % 2 == 0 { MaskType::Gaussian } else { MaskType::Cartesian });
        let x = generate_phantom(seed ^ 77, Contrast(2), 16, 16).unwrap();
        let once = apply_data_fidelity(&x, &s.y, &s.mask, f64::INFINITY).unwrap();
        let twice = apply_data_fidelity(&once, &s.y, &s.mask, f64::INFINITY).unwrap();
        for (a, b) in once.re.iter().chain(&once.im).zip(twice.re.iter().chain(&twice.im)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let k = once.dft2();
        for i in 0..256 {
            if s.mask.kept[i] {
                prop_assert!((k.re[i] - s.y.re[i]).abs() < 1e-6 && (k.im[i] - s.y.im[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn modulation_rank_is_bounded(seed in any::<u64>(), rank in 1usize..4) {
        let mut cfg = ModelConfig::micro();
        cfg.base.channels = vec![5];
        cfg.base.bottleneck = 6;
        cfg.hyper.rank = rank;
        let p = perturbed(&ParameterSet::init(&cfg, Modulation::Kernel, seed).unwrap(), seed, 0.5);
        let img = generate_phantom(seed, Contrast(0), 8, 8).unwrap();
        for (layer, (_, _, w)) in cfg.base.layers().iter().zip(modulation_factors(&cfg, &p, &img).unwrap()) {
            let sv = singular_values(w.data(), layer.n_out, layer.n_in);
            prop_assert!(sv.iter().skip(rank).all(|&s| s < 1e-8 * sv[0].max(1.0)), "{}: {sv:?}", layer.name);
        }
    }
}

#[test]
fn full_mask_reconstructs_ground_truth() {
    let cfg = ModelConfig::micro();
    let p = perturbed(&ParameterSet::init(&cfg, Modulation::Kernel, 3).unwrap(), 3, 0.3);
    let mut s = sample(8, 8, 2.0, MaskType::Gaussian);
    s.mask = full_mask(8);
    let (x_us, y) = undersample(&s.x_fs, &s.mask, 0.0, 0).unwrap();
    let out = reconstruct(&cfg, Modulation::Kernel, &p, None, &x_us, &y, &s.mask).unwrap();
    let norm = s.x_fs.re.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = out
        .re
        .iter()
        .zip(&s.x_fs.re)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(err / norm < 1e-5);
}

#[test]
fn manual_composition_matches_reconstruct() {
    let cfg = ModelConfig::micro();
    let p = perturbed(&ParameterSet::init(&cfg, Modulation::Kernel, 4).unwrap(), 4, 0.3);
    let s = sample(6, 8, 2.0, MaskType::Cartesian);
    let expected = reconstruct(&cfg, Modulation::Kernel, &p, None, &s.x_us, &s.y, &s.mask).unwrap();

    let g = Graph::<f64>::new();
    let pipe = Pipeline::new(&cfg, Modulation::Kernel);
    let ce = VarMap::bind(&g, &p.ce, false);
    let omega = VarMap::bind(&g, &p.omega, false);
    let theta = VarMap::bind(&g, &p.theta, false);
    let x = g.constant(s.x_us.to_tensor());
    let gamma = pipe.context_embed(&g, x, &ce).unwrap().gamma;
    let mut weights = Vec::new();
    for layer in cfg.base.layers() {
        let (b, a) = pipe.hypernet_forward(&g, &layer, gamma, &omega).unwrap();
        let w = modulate(&g, theta.get(&format!("{}/weight", layer.name)).unwrap(), b, a).unwrap();
        let bias = theta.get(&format!("{}/bias", layer.name)).unwrap();
        weights.push(LayerWeights {
            weight: w,
            bias,
            scale: None,
        });
    }
    let x_cnn = pipe.base_forward(&g, x, &weights).unwrap().out;
    let x_rec = data_fidelity(&g, x_cnn, &s.y.to_tensor(), &s.mask.kept, f64::INFINITY).unwrap();
    assert_eq!(ComplexImage::from_tensor(&g.value(x_rec)).unwrap(), expected);
}

/// Reverse-mode gradient of the full batch objective against central
/// differences for every parameter of the micro model.
fn pipeline_gradient_error(modulation: Modulation, kind: LossKind, seed: u64) -> f64 {
    let cfg = ModelConfig::micro();
    let params = perturbed(&ParameterSet::init(&cfg, modulation, seed).unwrap(), seed, 0.3);
    let batch: Vec<SampleTensors<f64>> = [
        sample(seed, 8, 2.0, MaskType::Gaussian),
        sample(seed + 1, 8, 2.0, MaskType::Cartesian),
    ]
    .iter()
    .map(SampleTensors::new)
    .collect();
    let pipe = Pipeline::new(&cfg, modulation);
    let loss_of = |p: &ParameterSet<f64>, with_grad: bool| -> Result<(f64, Option<ParameterSet<f64>>)> {
        let g = Graph::new();
        let train = if with_grad { Trainable::ALL } else { Trainable::NONE };
        let bound = BoundParams::bind(&g, p, None, train);
        let loss = batch_loss(&pipe, &g, &bound, &batch, kind, true)?;
        let value = g.value(loss.total).item();
        if !with_grad {
            return Ok((value, None));
        }
        let mut grads = g.backward(loss.total)?;
        Ok((value, Some(bound.collect(&mut grads, p)?)))
    };
    assert!(params.num_scalars() <= 500, "{} parameters", params.num_scalars());
    let reverse = loss_of(&params, true).unwrap().1.unwrap();
    let numeric =
        finite_difference_grad(|p: &ParameterSet<f64>| loss_of(p, false).map(|r| r.0), &params, 1e-6).unwrap();
    let reverse: Vec<Tensor<f64>> = reverse.visit().into_iter().cloned().collect();
    relative_l2_error(&reverse, &numeric, 1e-12)
}

#[test]
fn composed_pipeline_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let err = pipeline_gradient_error(Modulation::Kernel, LossKind::Complex, seed);
        assert!(err < 1e-4, "kernel modulation relative error {err}");
    }
    let err = pipeline_gradient_error(Modulation::Scalar, LossKind::Complex, 3);
    assert!(err < 1e-4, "scalar modulation relative error {err}");
    let err = pipeline_gradient_error(Modulation::Kernel, LossKind::Magnitude, 4);
    assert!(err < 1e-4, "magnitude loss relative error {err}");
}

#[test]
fn init_is_deterministic_and_grouped() {
    let cfg = ModelConfig::micro();
    let a = ParameterSet::<f64>::init(&cfg, Modulation::Kernel, 5).unwrap();
    assert!(a.bit_equal(&ParameterSet::init(&cfg, Modulation::Kernel, 5).unwrap()));
    assert!(!a.bit_equal(&ParameterSet::init(&cfg, Modulation::Kernel, 6).unwrap()));
    assert!(a.tau.is_empty() && !a.omega.is_empty() && !a.ce.is_empty());
    let m = ParameterSet::<f64>::init(&cfg, Modulation::Scalar, 5).unwrap();
    assert!(m.omega.is_empty() && !m.tau.is_empty());
    let plain = ParameterSet::<f64>::init(&cfg, Modulation::None, 5).unwrap();
    assert!(plain.ce.is_empty() && plain.omega.is_empty());
}
