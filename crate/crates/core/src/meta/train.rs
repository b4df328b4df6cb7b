use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{locate, Adam, InnerMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, BoundParams, Group, LossKind, ModelConfig, ParameterSet, Pipeline, SampleTensors, Trainable,
};
use crate::numerics::{Dual, Graph, Scalar, Tensor, TensorMap};
use crate::tasks::{derive_seed, Task};

/// A task with its samples converted to graph tensors once.
#[derive(Clone, Debug)]
pub struct TaskData<T> {
    pub id: String,
    pub support: Vec<SampleTensors<T>>,
    pub query: Vec<SampleTensors<T>>,
}

impl<T: Scalar> TaskData<T> {
    pub fn new(task: &Task) -> Self {
        TaskData {
            id: task.id(),
            support: SampleTensors::batch(&task.support),
            query: SampleTensors::batch(&task.query),
        }
    }
}

/// Samples drawn from one task for one meta-step.
#[derive(Clone, Debug)]
pub struct TaskBatch<T> {
    /// Index into the task list.
    pub task: usize,
    pub id: String,
    pub support: Vec<SampleTensors<T>>,
    pub query: Vec<SampleTensors<T>>,
}

/// Picks the task mini-batch of `epoch` (distinct tasks, random order) and
/// each task's support and query samples, without replacement. The draw
/// depends only on the seed, the epoch, the batch sizes and the set sizes,
/// so every strategy sees the same batches.
pub fn select_batches<T: Scalar>(tasks: &[TaskData<T>], cfg: &TrainConfig, epoch: u64) -> Result<Vec<TaskBatch<T>>> {
    if tasks.is_empty() {
        return Err(Error::Parameter("meta-training needs at least one task".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch));
    let chosen = index::sample(&mut rng, tasks.len(), cfg.task_batch.min(tasks.len())).into_vec();
    chosen
        .into_iter()
        .map(|t| {
            let task = &tasks[t];
            if task.support.is_empty() || task.query.is_empty() {
                return Err(Error::Parameter(format!(
                    "task {} has an empty support or query set",
                    task.id
                )));
            }
            let mut pick = |set: &[SampleTensors<T>], n: usize| -> Vec<SampleTensors<T>> {
                index::sample(&mut rng, set.len(), n.min(set.len()))
                    .into_iter()
                    .map(|i| set[i].clone())
                    .collect()
            };
            let support = pick(&task.support, cfg.support_batch);
            let query = pick(&task.query, cfg.query_batch);
            Ok(TaskBatch {
                task: t,
                id: task.id.clone(),
                support,
                query,
            })
        })
        .collect()
}

/// Objective value with its gradient.
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    /// Full objective, including the weighted autoencoder term if enabled.
    pub loss: f64,
    /// Mean reconstruction L1.
    pub recon: f64,
    pub per_sample: Vec<f64>,
    /// Zero for frozen groups.
    pub grads: ParameterSet<T>,
}

/// Loss without gradients; returns `(loss, recon, per_sample)`.
pub fn loss_value<T: Scalar>(
    pipe: &Pipeline<'_>,
    params: &ParameterSet<T>,
    delta: Option<&TensorMap<T>>,
    samples: &[SampleTensors<T>],
    kind: LossKind,
    with_aux: bool,
) -> Result<(f64, f64, Vec<f64>)> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, delta, Trainable::NONE);
    let loss = batch_loss(pipe, &g, &bound, samples, kind, with_aux)?;
    let total = finite_total(&g, loss.total)?;
    Ok((total, loss.recon, loss.per_sample))
}

fn finite_total<T: Scalar>(g: &Graph<T>, v: crate::numerics::Var) -> Result<f64> {
    let t = g.value(v).item();
    if !t.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    Ok(t.to_f64())
}

pub fn loss_and_grads<T: Scalar>(
    pipe: &Pipeline<'_>,
    params: &ParameterSet<T>,
    trainable: Trainable,
    samples: &[SampleTensors<T>],
    kind: LossKind,
    with_aux: bool,
) -> Result<LossGrads<T>> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, None, trainable);
    let loss = batch_loss(pipe, &g, &bound, samples, kind, with_aux)?;
    let total = finite_total(&g, loss.total)?;
    let mut raw = g.backward(loss.total)?;
    let grads = bound.collect(&mut raw, params)?;
    grads.check_finite("gradient")?;
    Ok(LossGrads {
        loss: total,
        recon: loss.recon,
        per_sample: loss.per_sample,
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct InnerResult<T> {
    /// Parameters with the adapted group replaced by its final value.
    pub params: ParameterSet<T>,
    /// Support reconstruction loss before each step.
    pub trace: Vec<f64>,
    /// Value of the adapted group before each step.
    pub path: Vec<TensorMap<T>>,
}

/// `steps` plain gradient steps of size `lr` on `group` against the support
/// reconstruction loss; every other group stays frozen. The embedding is
/// recomputed from the support inputs at every step.
pub fn inner_adapt<T: Scalar>(
    pipe: &Pipeline<'_>,
    params: &ParameterSet<T>,
    group: Group,
    support: &[SampleTensors<T>],
    lr: f64,
    steps: usize,
    kind: LossKind,
) -> Result<InnerResult<T>> {
    if support.is_empty() {
        return Err(Error::Parameter(
            "inner adaptation needs a non-empty support batch".into(),
        ));
    }
    let mut current = params.clone();
    let mut trace = Vec::with_capacity(steps);
    let mut path = Vec::with_capacity(steps);
    for u in 0..steps {
        let lg = loss_and_grads(pipe, &current, Trainable::only(group), support, kind, false)
            .map_err(|e| locate(e, || format!("inner step {u}")))?;
        path.push(current.group(group).clone());
        trace.push(lg.recon);
        current.group_mut(group).axpy(T::from_f64(-lr), lg.grads.group(group))?;
        current
            .group(group)
            .tensors()
            .try_for_each(|t| t.check_finite(&format!("inner step {u} update")))?;
    }
    Ok(InnerResult {
        params: current,
        trace,
        path,
    })
}

/// Outer gradient contribution of one task.
#[derive(Clone, Debug)]
pub struct MetaGradient<T> {
    /// Objective value summed into the meta loss.
    pub loss: f64,
    /// Support reconstruction loss before adaptation.
    pub support_loss: f64,
    /// Query reconstruction loss after adaptation.
    pub query_loss: f64,
    pub grads: ParameterSet<T>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn meta_gradient<T: Scalar>(
    pipe: &Pipeline<'_>,
    params: &ParameterSet<T>,
    batch: &TaskBatch<T>,
    cfg: &TrainConfig,
) -> Result<MetaGradient<T>> {
    let Some(group) = cfg.strategy.inner_group() else {
        let pooled: Vec<SampleTensors<T>> = batch.support.iter().chain(&batch.query).cloned().collect();
        let lg = loss_and_grads(pipe, params, Trainable::ALL, &pooled, cfg.loss, true)?;
        let ns = batch.support.len();
        return Ok(MetaGradient {
            loss: lg.loss,
            support_loss: mean(&lg.per_sample[..ns]),
            query_loss: mean(&lg.per_sample[ns..]),
            grads: lg.grads,
        });
    };
    let inner = inner_adapt(
        pipe,
        params,
        group,
        &batch.support,
        cfg.inner_lr,
        cfg.inner_steps,
        cfg.loss,
    )?;
    let support_loss = match inner.trace.first() {
        Some(&l) => l,
        None => loss_value(pipe, params, None, &batch.support, cfg.loss, false)?.1,
    };
    let query = loss_and_grads(pipe, &inner.params, Trainable::ALL, &batch.query, cfg.loss, true)
        .map_err(|e| locate(e, || "query loss".into()))?;
    let mut grads = query.grads;
    if cfg.inner_mode == InnerMode::Unrolled {
        let mut adjoint = grads.group(group).clone();
        for u in (0..inner.path.len()).rev() {
            let mut point = params.clone();
            *point.group_mut(group) = inner.path[u].clone();
            let h = hessian_vector(pipe, &point, group, &adjoint, &batch.support, cfg.loss)?;
            let step = T::from_f64(-cfg.inner_lr);
            for g in Group::ALL {
                let target = if g == group { &mut adjoint } else { grads.group_mut(g) };
                target.axpy(step, h.group(g))?;
            }
        }
        *grads.group_mut(group) = adjoint;
    }
    Ok(MetaGradient {
        loss: query.loss,
        support_loss,
        query_loss: query.recon,
        grads,
    })
}

/// `∇²L·v` of the support reconstruction loss at `point`, where `v` is
/// `direction` on `group` and zero elsewhere. Evaluated exactly by running
/// the reverse pass over dual numbers.
fn hessian_vector<T: Scalar>(
    pipe: &Pipeline<'_>,
    point: &ParameterSet<T>,
    group: Group,
    direction: &TensorMap<T>,
    samples: &[SampleTensors<T>],
    kind: LossKind,
) -> Result<ParameterSet<T>> {
    let mut dual: ParameterSet<Dual> = point.cast();
    dual.group(group).check_layout(&direction.cast())?;
    for (t, d) in dual.group_mut(group).tensors_mut().zip(direction.tensors()) {
        for (x, &e) in t.data_mut().iter_mut().zip(d.data()) {
            x.eps = e.to_f64();
        }
    }
    let samples: Vec<SampleTensors<Dual>> = samples
        .iter()
        .map(|s| SampleTensors {
            x_us: s.x_us.cast(),
            y: s.y.cast(),
            x_fs: s.x_fs.cast(),
            kept: s.kept.clone(),
        })
        .collect();
    let lg = loss_and_grads(pipe, &dual, Trainable::ALL, &samples, kind, false)?;
    let tangent = |m: &TensorMap<Dual>| -> Result<TensorMap<T>> {
        let mut out = TensorMap::new();
        for (name, t) in m.iter() {
            let data = t.data().iter().map(|d| T::from_f64(d.eps)).collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
        }
        Ok(out)
    };
    Ok(ParameterSet {
        theta: tangent(&lg.grads.theta)?,
        omega: tangent(&lg.grads.omega)?,
        ce: tangent(&lg.grads.ce)?,
        tau: tangent(&lg.grads.tau)?,
    })
}

/// Parameters and optimizer state of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub adam: Adam<T>,
    /// Completed epochs.
    pub epoch: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParameterSet<T>) -> Self {
        TrainState {
            adam: Adam::new(&params),
            params,
            epoch: 0,
        }
    }

    pub fn init(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self::new(ParameterSet::init(
            model,
            cfg.strategy.modulation(),
            cfg.seed,
        )?))
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct LogRecord {
    /// 1-based epoch.
    pub epoch: u64,
    pub strategy: String,
    pub task: String,
    pub support_loss: f64,
    pub query_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub records: Vec<LogRecord>,
    /// Sum of the per-task objectives.
    pub meta_loss: f64,
}

/// One meta-step: per-task gradients summed in task order, then one Adam
/// update of every outer-trained group.
pub fn meta_train_epoch<T: Scalar>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    tasks: &[TaskData<T>],
) -> Result<EpochReport> {
    let epoch = state.epoch + 1;
    let pipe = Pipeline::new(model, cfg.strategy.modulation());
    let batches = select_batches(tasks, cfg, state.epoch)?;
    let mut total = state.params.zeros_like();
    let mut meta_loss = 0.0;
    let mut records = Vec::with_capacity(batches.len());
    for b in &batches {
        let mg = meta_gradient(&pipe, &state.params, b, cfg)
            .map_err(|e| locate(e, || format!("epoch {epoch}, task {}", b.id)))?;
        total.axpy(T::one(), &mg.grads)?;
        meta_loss += mg.loss;
        records.push(LogRecord {
            epoch,
            strategy: cfg.strategy.tag().into(),
            task: b.id.clone(),
            support_loss: mg.support_loss,
            query_loss: mg.query_loss,
        });
    }
    if !meta_loss.is_finite() {
        return Err(Error::non_finite(format!("epoch {epoch}: meta loss")));
    }
    let mut next = state.params.clone();
    let mut adam = state.adam.clone();
    adam.update(&mut next, &total, cfg.outer_lr)?;
    next.check_finite(&format!("epoch {epoch}: outer update"))?;
    state.params = next;
    state.adam = adam;
    state.epoch = epoch;
    Ok(EpochReport { records, meta_loss })
}
