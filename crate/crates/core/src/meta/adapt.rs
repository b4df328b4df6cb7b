use super::train::{inner_adapt, loss_value};
use super::{locate, AdaptConfig, AdaptMode};
use crate::error::{Error, Result};
use crate::metrics::{image_quality, mean_std, MetricRecord};
use crate::model::{
    batch_loss, reconstruct, BoundParams, Group, LossKind, ModelConfig, Modulation, ParameterSet, Pipeline,
    SampleTensors, Trainable,
};
use crate::numerics::{Graph, Scalar, TensorMap};
use crate::tasks::Task;

/// Result of test-time adaptation.
#[derive(Clone, Debug)]
pub struct Adapted<T> {
    pub params: ParameterSet<T>,
    /// Offset on the modulated base weights (`adapt_base` only).
    pub delta: Option<TensorMap<T>>,
    /// Support reconstruction loss before each step and after the last.
    pub trace: Vec<f64>,
}

/// Adapts to a test task's support samples.
///
/// `adapt_base` starts from the modulated weights (a zero offset) and
/// descends on the offset with the modulation frozen. `adapt_hypernet`
/// descends on the modulation networks with the base network frozen.
pub fn finetune<T: Scalar>(
    model: &ModelConfig,
    modulation: Modulation,
    params: &ParameterSet<T>,
    support: &[SampleTensors<T>],
    cfg: &AdaptConfig,
    kind: LossKind,
) -> Result<Adapted<T>> {
    cfg.validate()?;
    if cfg.mode == AdaptMode::OnTheFly {
        return Ok(Adapted {
            params: params.clone(),
            delta: None,
            trace: Vec::new(),
        });
    }
    if support.is_empty() {
        return Err(Error::Parameter(format!(
            "{} needs a non-empty support set",
            cfg.mode.tag()
        )));
    }
    let pipe = Pipeline::new(model, modulation);
    let (params, delta, mut trace) = match cfg.mode {
        AdaptMode::AdaptBase => {
            let (delta, trace) = descend_offset(&pipe, params, support, cfg, kind)?;
            (params.clone(), Some(delta), trace)
        }
        _ => {
            let group = match modulation {
                Modulation::Kernel => Group::Omega,
                Modulation::Scalar => Group::Tau,
                Modulation::None => {
                    return Err(Error::Parameter("adapt_hypernet requires a modulated model".into()));
                }
            };
            let inner = inner_adapt(&pipe, params, group, support, cfg.lr, cfg.steps, kind)?;
            (inner.params, None, inner.trace)
        }
    };
    trace.push(loss_value(&pipe, &params, delta.as_ref(), support, kind, false)?.1);
    Ok(Adapted { params, delta, trace })
}

fn descend_offset<T: Scalar>(
    pipe: &Pipeline<'_>,
    params: &ParameterSet<T>,
    support: &[SampleTensors<T>],
    cfg: &AdaptConfig,
    kind: LossKind,
) -> Result<(TensorMap<T>, Vec<f64>)> {
    let mut delta = params.theta.zeros_like();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let trainable = Trainable {
        delta: true,
        ..Trainable::NONE
    };
    for u in 0..cfg.steps {
        let g = Graph::new();
        let bound = BoundParams::bind(&g, params, Some(&delta), trainable);
        let loss =
            batch_loss(pipe, &g, &bound, support, kind, false).map_err(|e| locate(e, || format!("adapt step {u}")))?;
        if !g.value(loss.total).item().is_finite() {
            return Err(Error::non_finite(format!("adapt step {u}: support loss")));
        }
        let mut raw = g.backward(loss.total)?;
        let grads = bound.delta.as_ref().expect("offset bound").collect(&mut raw, &delta)?;
        trace.push(loss.recon);
        delta.axpy(T::from_f64(-cfg.lr), &grads)?;
        delta
            .tensors()
            .try_for_each(|t| t.check_finite(&format!("adapt step {u} update")))?;
    }
    Ok((delta, trace))
}

/// Metrics of one evaluated task.
#[derive(Clone, Debug)]
pub struct TaskEvaluation {
    pub task: String,
    /// One record per query sample.
    pub records: Vec<MetricRecord>,
    /// Zero-filled input scored against the fully sampled target.
    pub baseline: Vec<MetricRecord>,
    /// Population mean and standard deviation.
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub baseline_psnr: (f64, f64),
    pub baseline_ssim: (f64, f64),
    pub trace: Vec<f64>,
}

fn summarize(records: &[MetricRecord]) -> ((f64, f64), (f64, f64)) {
    let p: Vec<f64> = records.iter().map(|r| r.psnr).collect();
    let s: Vec<f64> = records.iter().map(|r| r.ssim).collect();
    (mean_std(&p), mean_std(&s))
}

/// Adapts to each task's support set with `adapt`, then scores every query
/// reconstruction by magnitude PSNR and SSIM.
pub fn evaluate<T: Scalar>(
    model: &ModelConfig,
    modulation: Modulation,
    params: &ParameterSet<T>,
    tasks: &[Task],
    adapt: &AdaptConfig,
    kind: LossKind,
) -> Result<Vec<TaskEvaluation>> {
    tasks
        .iter()
        .map(|task| {
            let id = task.id();
            if task.query.is_empty() {
                return Err(Error::Parameter(format!("task {id} has no query samples")));
            }
            let support = if adapt.mode == AdaptMode::OnTheFly {
                Vec::new()
            } else {
                SampleTensors::batch(&task.support)
            };
            let adapted = finetune(model, modulation, params, &support, adapt, kind)
                .map_err(|e| locate(e, || format!("task {id}")))?;
            let mut records = Vec::with_capacity(task.query.len());
            let mut baseline = Vec::with_capacity(task.query.len());
            for (i, s) in task.query.iter().enumerate() {
                let rec = reconstruct(
                    model,
                    modulation,
                    &adapted.params,
                    adapted.delta.as_ref(),
                    &s.x_us,
                    &s.y,
                    &s.mask,
                )?;
                let (psnr, ssim) = image_quality(&rec, &s.x_fs)?;
                records.push(MetricRecord {
                    task: id.clone(),
                    sample: i,
                    psnr,
                    ssim,
                });
                let (psnr, ssim) = image_quality(&s.x_us, &s.x_fs)?;
                baseline.push(MetricRecord {
                    task: id.clone(),
                    sample: i,
                    psnr,
                    ssim,
                });
            }
            let (psnr, ssim) = summarize(&records);
            let (baseline_psnr, baseline_ssim) = summarize(&baseline);
            Ok(TaskEvaluation {
                task: id,
                records,
                baseline,
                psnr,
                ssim,
                baseline_psnr,
                baseline_ssim,
                trace: adapted.trace,
            })
        })
        .collect()
}
