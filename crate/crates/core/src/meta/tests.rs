use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ModelConfig, Modulation, ParameterSet, Pipeline, SampleTensors, Trainable};
use crate::numerics::{finite_difference_grad, relative_l2_error, ParamContainer, Tensor, TensorMap};
use crate::tasks::{build_suite, phantom_set, Contrast, MaskSpec, MaskType, Task};

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

/// Two contrasts × two mask types × 4x/8x, `n` images per contrast.
fn suite(n: usize, size: usize, seed: u64) -> Vec<Task> {
    let images: Vec<_> = [Contrast(1), Contrast(2)]
        .into_iter()
        .map(|c| (c, phantom_set(c, n, size, size, seed * 1000).unwrap()))
        .collect();
    let masks: Vec<MaskSpec> = [MaskType::Cartesian, MaskType::Gaussian]
        .into_iter()
        .flat_map(|t| [4.0, 8.0].map(|a| MaskSpec::new(t, a, 0.08)))
        .collect();
    build_suite(&images, &masks, seed).unwrap()
}

fn micro_data(seed: u64) -> Vec<TaskData<f64>> {
    suite(4, 8, seed).iter().map(TaskData::new).collect()
}

fn micro_params(modulation: Modulation, seed: u64) -> ParameterSet<f64> {
    perturbed(
        &ParameterSet::init(&ModelConfig::micro(), modulation, seed).unwrap(),
        seed + 1,
        0.3,
    )
}

fn cfg(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs: 1,
        ..TrainConfig::default()
    }
}

fn with_group(p: &ParameterSet<f64>, group: Group, values: &TensorMap<f64>) -> ParameterSet<f64> {
    let mut out = p.clone();
    *out.group_mut(group) = values.clone();
    out
}

#[test]
fn strategy_dispatch_is_total() {
    for s in Strategy::ALL {
        assert_eq!(s.tag().parse::<Strategy>().unwrap(), s);
        let expected = match s {
            Strategy::Joint => (Modulation::None, None),
            Strategy::Maml => (Modulation::None, Some(Group::Theta)),
            Strategy::Mmaml => (Modulation::Scalar, Some(Group::Theta)),
            Strategy::KmMaml => (Modulation::Kernel, Some(Group::Omega)),
        };
        assert_eq!((s.modulation(), s.inner_group()), expected);
    }
    assert!("reptile".parse::<Strategy>().is_err());
    assert_eq!("unrolled".parse::<InnerMode>().unwrap(), InnerMode::Unrolled);
    assert_eq!("adapt_base".parse::<AdaptMode>().unwrap(), AdaptMode::AdaptBase);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            outer_lr: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            inner_lr: f64::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            task_batch: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(AdaptConfig {
        lr: -0.1,
        ..AdaptConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn adam_first_step_and_zero_rate() {
    let mut p = ParameterSet::<f64>::empty();
    p.theta
        .insert("w", Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let mut g = p.zeros_like();
    *g.theta.get_mut("w").unwrap() = Tensor::from_f64([3], &[0.5, -2.0, 0.0]).unwrap();

    let mut frozen = p.clone();
    Adam::new(&frozen).update(&mut frozen, &g, 0.0).unwrap();
    assert!(frozen.bit_equal(&p));

    let mut adam = Adam::new(&p);
    let mut q = p.clone();
    adam.update(&mut q, &g, 0.1).unwrap();
    let d = q.theta.expect("w").unwrap().data();
    // Bias-corrected first step is lr·g/(|g|+ε).
    assert!((d[0] - (1.0 - 0.1 * 0.5 / (0.5 + ADAM_EPS))).abs() < 1e-12);
    assert!((d[1] - (2.0 + 0.1 * 2.0 / (2.0 + ADAM_EPS))).abs() < 1e-12);
    assert_eq!(d[2], 3.0);
    assert_eq!(adam.step, 1);
}

#[test]
fn batch_selection_is_seeded_and_distinct() {
    let data = micro_data(3);
    let c = TrainConfig {
        support_batch: 1,
        query_batch: 2,
        ..cfg(Strategy::KmMaml)
    };
    let a = select_batches(&data, &c, 4).unwrap();
    let b = select_batches(
        &data,
        &TrainConfig {
            strategy: Strategy::Joint,
            ..c.clone()
        },
        4,
    )
    .unwrap();
    let ids = |v: &[TaskBatch<f64>]| v.iter().map(|t| t.task).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
    assert_eq!(a.len(), 3);
    let mut sorted = ids(&a);
    sorted.dedup();
    assert_eq!(sorted.len(), 3);
    assert!(a.iter().all(|t| t.support.len() == 1 && t.query.len() == 2));
    assert!(a.iter().zip(&b).all(|(x, y)| x.query[1].x_us == y.query[1].x_us));
    let other = select_batches(&data, &c, 5).unwrap();
    assert!(ids(&other) != ids(&a) || other[0].query[0].x_us != a[0].query[0].x_us);
    assert!(select_batches::<f64>(&[], &c, 0).is_err());
}

#[test]
fn inner_degeneracies_are_exact() {
    let data = micro_data(1);
    let cfg_m = ModelConfig::micro();
    for strategy in [Strategy::KmMaml, Strategy::Maml, Strategy::Mmaml] {
        let pipe = Pipeline::new(&cfg_m, strategy.modulation());
        let p = micro_params(strategy.modulation(), 2);
        let group = strategy.inner_group().unwrap();
        let none = inner_adapt(&pipe, &p, group, &data[0].support, 0.1, 0, LossKind::Complex).unwrap();
        assert!(none.params.bit_equal(&p) && none.trace.is_empty());
        let frozen = inner_adapt(&pipe, &p, group, &data[0].support, 0.0, 3, LossKind::Complex).unwrap();
        assert!(frozen.params.bit_equal(&p));
        assert_eq!(frozen.trace.len(), 3);
    }
}

#[test]
fn inner_loop_touches_only_its_group() {
    let data = micro_data(2);
    let cfg_m = ModelConfig::micro();
    for strategy in [Strategy::KmMaml, Strategy::Maml, Strategy::Mmaml] {
        let pipe = Pipeline::new(&cfg_m, strategy.modulation());
        let p = micro_params(strategy.modulation(), 5);
        let before = p.clone();
        let group = strategy.inner_group().unwrap();
        let r = inner_adapt(&pipe, &p, group, &data[1].support, 0.05, 2, LossKind::Complex).unwrap();
        assert!(p.bit_equal(&before));
        for g in Group::ALL {
            let same = r.params.group(g).bit_equal(p.group(g));
            assert_eq!(same, g != group, "{strategy} group {g:?}");
        }
    }
}

#[test]
fn inner_step_matches_finite_differences() {
    let data = micro_data(4);
    let cfg_m = ModelConfig::micro();
    let lr = 0.01;
    for strategy in [Strategy::KmMaml, Strategy::Maml] {
        let pipe = Pipeline::new(&cfg_m, strategy.modulation());
        let group = strategy.inner_group().unwrap();
        let p = micro_params(strategy.modulation(), 7);
        let support = &data[2].support;
        let r = inner_adapt(&pipe, &p, group, support, lr, 1, LossKind::Complex).unwrap();
        let fd = finite_difference_grad(
            |m: &TensorMap<f64>| {
                Ok(loss_value(
                    &pipe,
                    &with_group(&p, group, m),
                    None,
                    support,
                    LossKind::Complex,
                    false,
                )?
                .0)
            },
            p.group(group),
            1e-6,
        )
        .unwrap();
        let mut delta = r.params.group(group).clone();
        delta.axpy(-1.0, p.group(group)).unwrap();
        let expected: Vec<Tensor<f64>> = fd.iter().map(|t| t.scale(-lr)).collect();
        let actual: Vec<Tensor<f64>> = delta.tensors().cloned().collect();
        let err = relative_l2_error(&actual, &expected, 1e-12);
        assert!(err < 1e-4, "{strategy}: relative error {err}");
    }
}

#[test]
fn first_order_gradient_is_query_gradient_at_adapted_point() {
    let data = micro_data(5);
    let cfg_m = ModelConfig::micro();
    let c = TrainConfig {
        inner_lr: 0.05,
        inner_steps: 2,
        support_batch: 2,
        query_batch: 2,
        ..cfg(Strategy::KmMaml)
    };
    let pipe = Pipeline::new(&cfg_m, Modulation::Kernel);
    let p = micro_params(Modulation::Kernel, 11);
    let batch = &select_batches(&data, &c, 0).unwrap()[0];
    let mg = meta_gradient(&pipe, &p, batch, &c).unwrap();
    let adapted = inner_adapt(
        &pipe,
        &p,
        Group::Omega,
        &batch.support,
        c.inner_lr,
        c.inner_steps,
        c.loss,
    )
    .unwrap();
    let fd = finite_difference_grad(
        |m: &TensorMap<f64>| {
            let q = with_group(&adapted.params, Group::Omega, m);
            Ok(loss_value(&pipe, &q, None, &batch.query, c.loss, true)?.0)
        },
        &adapted.params.omega,
        1e-6,
    )
    .unwrap();
    let actual: Vec<Tensor<f64>> = mg.grads.omega.tensors().cloned().collect();
    let err = relative_l2_error(&actual, &fd, 1e-12);
    assert!(err < 1e-4, "relative error {err}");
}

/// Full bi-level objective: query loss after the inner loop, as a function
/// of every outer parameter.
fn bilevel_loss(
    pipe: &Pipeline<'_>,
    p: &ParameterSet<f64>,
    batch: &TaskBatch<f64>,
    c: &TrainConfig,
) -> crate::Result<f64> {
    let group = c.strategy.inner_group().unwrap();
    let inner = inner_adapt(pipe, p, group, &batch.support, c.inner_lr, c.inner_steps, c.loss)?;
    Ok(loss_value(pipe, &inner.params, None, &batch.query, c.loss, true)?.0)
}

#[test]
fn unrolled_gradient_matches_bilevel_finite_differences() {
    let data = micro_data(6);
    let cfg_m = ModelConfig::micro();
    for strategy in [Strategy::KmMaml, Strategy::Maml, Strategy::Mmaml] {
        let c = TrainConfig {
            inner_lr: 0.2,
            inner_steps: 2,
            support_batch: 2,
            query_batch: 2,
            inner_mode: InnerMode::Unrolled,
            ..cfg(strategy)
        };
        let pipe = Pipeline::new(&cfg_m, strategy.modulation());
        let p = micro_params(strategy.modulation(), 13);
        let batch = &select_batches(&data, &c, 1).unwrap()[0];
        let fd = finite_difference_grad(|q: &ParameterSet<f64>| bilevel_loss(&pipe, q, batch, &c), &p, 1e-6).unwrap();
        let unrolled = meta_gradient(&pipe, &p, batch, &c).unwrap();
        let actual: Vec<Tensor<f64>> = unrolled.grads.visit().into_iter().cloned().collect();
        let err = relative_l2_error(&actual, &fd, 1e-12);
        assert!(err < 1e-3, "{strategy}: unrolled relative error {err}");

        let first = meta_gradient(
            &pipe,
            &p,
            batch,
            &TrainConfig {
                inner_mode: InnerMode::FirstOrder,
                ..c.clone()
            },
        )
        .unwrap();
        let first: Vec<Tensor<f64>> = first.grads.visit().into_iter().cloned().collect();
        assert!(
            relative_l2_error(&first, &fd, 1e-12) > err,
            "{strategy}: second-order terms vanished"
        );
    }
}

#[test]
fn zero_rates_leave_parameters_unchanged() {
    let data = micro_data(7);
    let cfg_m = ModelConfig::micro();
    for strategy in Strategy::ALL {
        let c = TrainConfig {
            outer_lr: 0.0,
            inner_lr: 0.0,
            support_batch: 2,
            query_batch: 2,
            ..cfg(strategy)
        };
        let mut state = TrainState::new(micro_params(strategy.modulation(), 17));
        let before = state.params.clone();
        let report = meta_train_epoch(&cfg_m, &c, &mut state, &data).unwrap();
        assert!(state.params.bit_equal(&before), "{strategy}");
        assert_eq!(report.records.len(), 3);
        assert_eq!(state.epoch, 1);
        assert!(report
            .records
            .iter()
            .all(|r| r.epoch == 1 && r.strategy == strategy.tag()));
    }
}

#[test]
fn km_maml_without_inner_steps_reduces_to_joint() {
    let tasks = suite(4, 8, 8);
    let km_data: Vec<TaskData<f64>> = tasks.iter().map(TaskData::new).collect();
    // Joint tasks whose support and query are both the km query set.
    let joint_data: Vec<TaskData<f64>> = km_data
        .iter()
        .map(|t| TaskData {
            id: t.id.clone(),
            support: t.query.clone(),
            query: t.query.clone(),
        })
        .collect();
    let cfg_m = ModelConfig::micro();
    let km = TrainConfig {
        inner_steps: 0,
        ..cfg(Strategy::KmMaml)
    };
    let joint = TrainConfig {
        strategy: Strategy::Joint,
        ..km.clone()
    };
    let mut km_state = TrainState::init(&cfg_m, &km).unwrap();
    let mut joint_state = TrainState::init(&cfg_m, &joint).unwrap();
    assert!(km_state.params.theta.bit_equal(&joint_state.params.theta));
    let theta0 = km_state.params.theta.clone();
    // One meta-step: afterwards the hypernetworks leave the identity.
    meta_train_epoch(&cfg_m, &km, &mut km_state, &km_data).unwrap();
    meta_train_epoch(&cfg_m, &joint, &mut joint_state, &joint_data).unwrap();
    let mut dk = km_state.params.theta.clone();
    dk.axpy(-1.0, &theta0).unwrap();
    let mut dj = joint_state.params.theta.clone();
    dj.axpy(-1.0, &theta0).unwrap();
    assert!(dk.max_abs_diff(&dk.zeros_like()) > 1e-6);
    let diff = dk.max_abs_diff(&dj);
    assert!(diff < 1e-9, "theta deltas differ by {diff}");
}

/// Independent single-level Adam, element by element.
struct AdamOracle {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamOracle {
    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        for i in 0..p.len() {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            p[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn flatten(p: &ParameterSet<f64>) -> Vec<f64> {
    p.visit().into_iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn joint_update_matches_adam_oracle() {
    let data = micro_data(9);
    let cfg_m = ModelConfig::micro();
    let c = TrainConfig {
        outer_lr: 0.01,
        support_batch: 2,
        query_batch: 2,
        ..cfg(Strategy::Joint)
    };
    let pipe = Pipeline::new(&cfg_m, Modulation::None);
    let mut state = TrainState::init(&cfg_m, &c).unwrap();
    let mut oracle_params = state.params.clone();
    let n = oracle_params.num_scalars();
    let mut oracle = AdamOracle {
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    for epoch in 0..3u64 {
        let mut g = vec![0.0; n];
        for b in select_batches(&data, &c, epoch).unwrap() {
            let pooled: Vec<SampleTensors<f64>> = b.support.iter().chain(&b.query).cloned().collect();
            let lg = loss_and_grads(&pipe, &oracle_params, Trainable::ALL, &pooled, c.loss, true).unwrap();
            g.iter_mut().zip(flatten(&lg.grads)).for_each(|(a, b)| *a += b);
        }
        let mut flat = flatten(&oracle_params);
        oracle.step(&mut flat, &g, c.outer_lr);
        let mut it = flat.into_iter();
        for t in oracle_params.visit_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        meta_train_epoch(&cfg_m, &c, &mut state, &data).unwrap();
        let diff = state.params.max_abs_diff(&oracle_params);
        assert!(diff < 1e-9, "epoch {epoch}: {diff}");
    }
}

#[test]
fn joint_reports_split_losses() {
    let data = micro_data(10);
    let cfg_m = ModelConfig::micro();
    let c = TrainConfig {
        support_batch: 2,
        query_batch: 2,
        ..cfg(Strategy::Joint)
    };
    let pipe = Pipeline::new(&cfg_m, Modulation::None);
    let p = micro_params(Modulation::None, 3);
    let b = &select_batches(&data, &c, 0).unwrap()[0];
    let mg = meta_gradient(&pipe, &p, b, &c).unwrap();
    let s = loss_value(&pipe, &p, None, &b.support, c.loss, false).unwrap().1;
    let q = loss_value(&pipe, &p, None, &b.query, c.loss, false).unwrap().1;
    assert!((mg.support_loss - s).abs() < 1e-12 && (mg.query_loss - q).abs() < 1e-12);
    assert!((mg.loss - 0.5 * (s + q)).abs() < 1e-12);
}

#[test]
fn non_finite_loss_reports_its_location() {
    let data = micro_data(11);
    let cfg_m = ModelConfig::micro();
    let c = TrainConfig {
        support_batch: 2,
        query_batch: 2,
        ..cfg(Strategy::KmMaml)
    };
    let mut p = micro_params(Modulation::Kernel, 1);
    p.theta.get_mut("conv_down_0/weight").unwrap().data_mut()[0] = f64::NAN;
    let mut state = TrainState::new(p);
    let before = state.clone();
    let err = meta_train_epoch(&cfg_m, &c, &mut state, &data).unwrap_err();
    assert!(err.is_numeric());
    let msg = err.to_string();
    assert!(msg.contains("epoch 1, task") && msg.contains("inner step 0"), "{msg}");
    assert_eq!(state.epoch, before.epoch);
}

#[test]
fn finetune_degenerate_cases() {
    let data = micro_data(12);
    let cfg_m = ModelConfig::micro();
    let p = micro_params(Modulation::Kernel, 21);
    let support = &data[0].support;
    let fly = finetune(
        &cfg_m,
        Modulation::Kernel,
        &p,
        &[],
        &AdaptConfig::default(),
        LossKind::Complex,
    )
    .unwrap();
    assert!(fly.params.bit_equal(&p) && fly.delta.is_none() && fly.trace.is_empty());
    for mode in [AdaptMode::AdaptBase, AdaptMode::AdaptHypernet] {
        let a = AdaptConfig {
            mode,
            steps: 0,
            lr: 0.1,
        };
        let r = finetune(&cfg_m, Modulation::Kernel, &p, support, &a, LossKind::Complex).unwrap();
        assert!(r.params.bit_equal(&p));
        if let Some(d) = &r.delta {
            assert!(d.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
        }
        assert_eq!(r.trace.len(), 1);
        let err = finetune(
            &cfg_m,
            Modulation::Kernel,
            &p,
            &[],
            &AdaptConfig { steps: 1, ..a },
            LossKind::Complex,
        );
        assert!(err.is_err());
    }
    let a = AdaptConfig {
        mode: AdaptMode::AdaptHypernet,
        steps: 1,
        lr: 0.1,
    };
    let none = finetune(
        &cfg_m,
        Modulation::None,
        &micro_params(Modulation::None, 1),
        support,
        &a,
        LossKind::Complex,
    );
    assert!(none.is_err());
}

#[test]
fn finetune_steps_match_finite_differences() {
    let data = micro_data(13);
    let cfg_m = ModelConfig::micro();
    let pipe = Pipeline::new(&cfg_m, Modulation::Kernel);
    let p = micro_params(Modulation::Kernel, 23);
    let support = &data[3].support;
    let lr = 0.01;

    let hyper = finetune(
        &cfg_m,
        Modulation::Kernel,
        &p,
        support,
        &AdaptConfig {
            mode: AdaptMode::AdaptHypernet,
            steps: 1,
            lr,
        },
        LossKind::Complex,
    )
    .unwrap();
    let fd = finite_difference_grad(
        |m: &TensorMap<f64>| {
            Ok(loss_value(
                &pipe,
                &with_group(&p, Group::Omega, m),
                None,
                support,
                LossKind::Complex,
                false,
            )?
            .0)
        },
        &p.omega,
        1e-6,
    )
    .unwrap();
    let mut delta = hyper.params.omega.clone();
    delta.axpy(-1.0, &p.omega).unwrap();
    let expected: Vec<Tensor<f64>> = fd.iter().map(|t| t.scale(-lr)).collect();
    let actual: Vec<Tensor<f64>> = delta.tensors().cloned().collect();
    assert!(relative_l2_error(&actual, &expected, 1e-12) < 1e-4);
    assert!(hyper.params.theta.bit_equal(&p.theta) && hyper.params.ce.bit_equal(&p.ce));

    let base = finetune(
        &cfg_m,
        Modulation::Kernel,
        &p,
        support,
        &AdaptConfig {
            mode: AdaptMode::AdaptBase,
            steps: 1,
            lr,
        },
        LossKind::Complex,
    )
    .unwrap();
    let zero = p.theta.zeros_like();
    let fd = finite_difference_grad(
        |d: &TensorMap<f64>| Ok(loss_value(&pipe, &p, Some(d), support, LossKind::Complex, false)?.0),
        &zero,
        1e-6,
    )
    .unwrap();
    let expected: Vec<Tensor<f64>> = fd.iter().map(|t| t.scale(-lr)).collect();
    let actual: Vec<Tensor<f64>> = base.delta.unwrap().tensors().cloned().collect();
    assert!(relative_l2_error(&actual, &expected, 1e-12) < 1e-4);
    assert!(base.params.bit_equal(&p));
}

#[test]
fn evaluation_records_and_degenerate_adaptation() {
    let tasks = suite(4, 16, 14);
    let cfg_m = ModelConfig::micro();
    let p = micro_params(Modulation::Kernel, 25);
    let fly = evaluate(
        &cfg_m,
        Modulation::Kernel,
        &p,
        &tasks,
        &AdaptConfig::default(),
        LossKind::Complex,
    )
    .unwrap();
    let again = evaluate(
        &cfg_m,
        Modulation::Kernel,
        &p,
        &tasks,
        &AdaptConfig::default(),
        LossKind::Complex,
    )
    .unwrap();
    assert_eq!(fly.len(), tasks.len());
    for (e, task) in fly.iter().zip(&tasks) {
        assert_eq!(e.records.len(), task.query.len());
        let mean = e.records.iter().map(|r| r.psnr).sum::<f64>() / e.records.len() as f64;
        assert!((mean - e.psnr.0).abs() < 1e-12);
        for (b, s) in e.baseline.iter().zip(&task.query) {
            let (psnr, ssim) = crate::metrics::image_quality(&s.x_us, &s.x_fs).unwrap();
            assert_eq!((b.psnr, b.ssim), (psnr, ssim));
        }
    }
    let recs = |v: &[TaskEvaluation]| v.iter().flat_map(|e| e.records.clone()).collect::<Vec<_>>();
    assert_eq!(recs(&fly), recs(&again));
    for mode in [AdaptMode::AdaptBase, AdaptMode::AdaptHypernet] {
        let a = AdaptConfig {
            mode,
            steps: 0,
            lr: 0.01,
        };
        let r = evaluate(&cfg_m, Modulation::Kernel, &p, &tasks, &a, LossKind::Complex).unwrap();
        assert_eq!(recs(&r), recs(&fly), "{}", mode.tag());
    }
}

#[test]
fn small_step_adaptation_descends_on_most_tasks() {
    let tasks = suite(6, 16, 15);
    let cfg_m = ModelConfig {
        base: crate::model::BaseNetConfig {
            channels: vec![4, 8],
            bottleneck: 8,
            ..Default::default()
        },
        hyper: crate::model::HyperNetConfig {
            embed_dim: 16,
            bottleneck: 8,
            rank: 1,
        },
        encoder: crate::model::EncoderConfig {
            channels: vec![4],
            kernel_size: 3,
        },
        ..ModelConfig::default()
    };
    let mut total = 0;
    let mut descended = 0;
    for (k, task) in tasks.iter().enumerate() {
        let support = SampleTensors::<f64>::batch(&task.support);
        for (mode, modulation) in [
            (AdaptMode::AdaptHypernet, Modulation::Kernel),
            (AdaptMode::AdaptBase, Modulation::Kernel),
            (AdaptMode::AdaptBase, Modulation::None),
        ] {
            let p = ParameterSet::init(&cfg_m, modulation, k as u64).unwrap();
            let r = finetune(
                &cfg_m,
                modulation,
                &p,
                &support,
                &AdaptConfig {
                    mode,
                    steps: 1,
                    lr: 1e-3,
                },
                LossKind::Complex,
            )
            .unwrap();
            total += 1;
            descended += usize::from(r.trace[1] <= r.trace[0]);
        }
    }
    assert!(descended * 10 >= total * 9, "{descended}/{total}");
}

#[test]
fn training_smoke_halves_query_loss() {
    let tasks = suite(20, 32, 16);
    let data: Vec<TaskData<f32>> = tasks.iter().map(TaskData::new).collect();
    let cfg_m = ModelConfig::default();
    let c = TrainConfig {
        epochs: 50,
        seed: 16,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::init(&cfg_m, &c).unwrap();
    let mut means = Vec::new();
    let start = std::time::Instant::now();
    for _ in 0..c.epochs {
        let r = meta_train_epoch(&cfg_m, &c, &mut state, &data).unwrap();
        means.push(r.records.iter().map(|r| r.query_loss).sum::<f64>() / r.records.len() as f64);
    }
    eprintln!("smoke: {:?} in {:?}", [means[0], means[24], means[49]], start.elapsed());
    assert!(means[49] < 0.5 * means[0], "query loss {} -> {}", means[0], means[49]);
}
