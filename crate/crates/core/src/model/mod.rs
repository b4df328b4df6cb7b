//! Context encoder, per-layer kernel-modulation hypernetworks, the U-shaped
//! base network and k-space data fidelity.
//!
//! Complex images travel as two real channels. Graph-level building blocks
//! live on [`Pipeline`]; the free functions here wrap them for plain
//! (non-differentiated) inference.

mod config;
mod forward;
mod params;

pub use config::{BaseNetConfig, EncoderConfig, HyperNetConfig, LayerRole, LayerSpec, ModelConfig, Modulation};
pub use forward::{data_fidelity, magnitude, modulate, BaseOutput, Embedding, Forward, LayerWeights, Pipeline};
pub use params::{BoundParams, Group, ParameterSet, Trainable, VarMap, GROUPS};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, TensorMap, Var};
use crate::tasks::{ComplexImage, KSpace, Sample, SamplingMask};

/// Reconstruction loss on the two-channel image or on its magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    #[default]
    Complex,
    Magnitude,
}

/// A sample converted to the scalar type of a graph.
#[derive(Clone, Debug)]
pub struct SampleTensors<T> {
    pub x_us: Tensor<T>,
    pub y: Tensor<T>,
    pub x_fs: Tensor<T>,
    pub kept: Vec<bool>,
}

impl<T: Scalar> SampleTensors<T> {
    pub fn new(sample: &Sample) -> Self {
        SampleTensors {
            x_us: sample.x_us.to_tensor(),
            y: sample.y.to_tensor(),
            x_fs: sample.x_fs.to_tensor(),
            kept: sample.mask.kept.clone(),
        }
    }

    pub fn batch(samples: &[Sample]) -> Vec<Self> {
        samples.iter().map(Self::new).collect()
    }
}

/// Batch objective recorded on a graph.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Reconstruction loss plus the weighted autoencoder term when enabled.
    pub total: Var,
    /// Mean reconstruction L1 over the batch.
    pub recon: f64,
    /// Mean autoencoder L1 over the batch (zero without an encoder).
    pub aux: f64,
    /// Reconstruction L1 of each sample, in batch order.
    pub per_sample: Vec<f64>,
}

/// Mean per-sample L1 of the data-consistent reconstruction, plus
/// `aux_weight` times the autoencoder L1 when `with_aux` is set.
pub fn batch_loss<T: Scalar>(
    pipe: &Pipeline<'_>,
    g: &Graph<T>,
    bound: &BoundParams,
    samples: &[SampleTensors<T>],
    kind: LossKind,
    with_aux: bool,
) -> Result<BatchLoss> {
    if samples.is_empty() {
        return Err(Error::Parameter("loss over an empty batch".into()));
    }
    let inv_n = 1.0 / samples.len() as f64;
    let mut recon_sum: Option<Var> = None;
    let mut aux_sum: Option<Var> = None;
    let mut per_sample = Vec::with_capacity(samples.len());
    let accumulate = |acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for s in samples {
        let fwd = pipe.forward(g, bound, &s.x_us, &s.y, &s.kept)?;
        let l = match kind {
            LossKind::Complex => g.l1_loss(fwd.x_rec, &s.x_fs)?,
            LossKind::Magnitude => {
                let target = magnitude_tensor(&s.x_fs)?;
                let m = magnitude(g, fwd.x_rec)?;
                g.l1_loss(m, &target)?
            }
        };
        per_sample.push(g.value(l).item().to_f64());
        accumulate(&mut recon_sum, l)?;
        if let (true, Some(e)) = (with_aux, fwd.embedding) {
            accumulate(&mut aux_sum, g.l1_loss(e.recon, &s.x_us)?)?;
        }
    }
    let recon = g.mul_scalar(recon_sum.expect("non-empty batch"), inv_n)?;
    let recon_value = g.value(recon).item().to_f64();
    let (total, aux_value) = match aux_sum {
        Some(a) if pipe.cfg.aux_weight > 0.0 => {
            let aux = g.mul_scalar(a, inv_n)?;
            let aux_value = g.value(aux).item().to_f64();
            let weighted = g.mul_scalar(aux, pipe.cfg.aux_weight)?;
            (g.add(recon, weighted)?, aux_value)
        }
        Some(a) => (recon, g.value(a).item().to_f64() * inv_n),
        None => (recon, 0.0),
    };
    Ok(BatchLoss {
        total,
        recon: recon_value,
        aux: aux_value,
        per_sample,
    })
}

fn magnitude_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4("magnitude")?;
    let d = x.data();
    let plane = h * w;
    Tensor::new(
        [1, 1, h, w],
        (0..plane)
            .map(|i| (d[i] * d[i] + d[plane + i] * d[plane + i]).sqrt())
            .collect(),
    )
}

/// Inference without gradients: returns the data-consistent reconstruction.
pub fn reconstruct<T: Scalar>(
    cfg: &ModelConfig,
    modulation: Modulation,
    params: &ParameterSet<T>,
    delta: Option<&TensorMap<T>>,
    x_us: &ComplexImage,
    y: &KSpace,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, delta, Trainable::NONE);
    let fwd = Pipeline::new(cfg, modulation).forward(&g, &bound, &x_us.to_tensor(), &y.to_tensor(), &mask.kept)?;
    ComplexImage::from_tensor(&g.value(fwd.x_rec))
}

/// Per-layer base-network outputs for one input, in layer order.
pub fn layer_activations<T: Scalar>(
    cfg: &ModelConfig,
    modulation: Modulation,
    params: &ParameterSet<T>,
    x_us: &ComplexImage,
    y: &KSpace,
    mask: &SamplingMask,
) -> Result<Vec<Tensor<T>>> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, None, Trainable::NONE);
    let fwd = Pipeline::new(cfg, modulation).forward(&g, &bound, &x_us.to_tensor(), &y.to_tensor(), &mask.kept)?;
    Ok(fwd.base.activations.iter().map(|&v| (*g.value(v)).clone()).collect())
}

/// `(β, α, W)` of one base layer.
pub type LayerFactors<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

/// Modulation factors of every base layer for one input.
pub fn modulation_factors<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParameterSet<T>,
    x_us: &ComplexImage,
) -> Result<Vec<LayerFactors<T>>> {
    let g = Graph::new();
    let bound = BoundParams::bind(&g, params, None, Trainable::NONE);
    let pipe = Pipeline::new(cfg, Modulation::Kernel);
    let x = g.constant(x_us.to_tensor());
    let gamma = pipe.context_embed(&g, x, &bound.ce)?.gamma;
    cfg.base
        .layers()
        .iter()
        .map(|layer| {
            let (b, a) = pipe.hypernet_forward(&g, layer, gamma, &bound.omega)?;
            let w = g.matmul(b, a)?;
            Ok(((*g.value(b)).clone(), (*g.value(a)).clone(), (*g.value(w)).clone()))
        })
        .collect()
}

/// Data fidelity applied to a plain image.
pub fn apply_data_fidelity(x: &ComplexImage, y: &KSpace, mask: &SamplingMask, lambda: f64) -> Result<ComplexImage> {
    let g = Graph::<f64>::new();
    let xv = g.constant(x.to_tensor());
    let out = data_fidelity(&g, xv, &y.to_tensor(), &mask.kept, lambda)?;
    ComplexImage::from_tensor(&g.value(out))
}

#[cfg(test)]
mod tests;
