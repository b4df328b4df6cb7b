use super::config::{LayerRole, LayerSpec, ModelConfig, Modulation};
use super::params::{encoder_layers, BoundParams, VarMap};
use crate::error::{Error, Result};
use crate::numerics::{dft2_tensor, Graph, Scalar, Tensor, Var};

/// Output of the context encoder.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    /// `1 × embed_dim`.
    pub gamma: Var,
    /// Autoencoder reconstruction of the input, `1 × 2 × H × W`.
    pub recon: Var,
}

/// Effective parameters of one base layer for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LayerWeights {
    pub weight: Var,
    pub bias: Var,
    /// One-element activation scale (scalar modulation only).
    pub scale: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BaseOutput {
    /// Network output plus the residual input.
    pub out: Var,
    /// Per-layer outputs after activation and scaling, in layer order.
    pub activations: Vec<Var>,
}

/// Full per-sample forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub embedding: Option<Embedding>,
    pub base: BaseOutput,
    pub x_cnn: Var,
    pub x_rec: Var,
}

/// Rewrites a non-finite error so it names `layer`.
fn in_layer(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { context } => Error::non_finite(format!("layer {layer} ({context})")),
        other => other,
    }
}

/// `W = β·α`, then every `k×k` kernel `(i, j)` of `theta` scaled by `W[i, j]`.
pub fn modulate<T: Scalar>(g: &Graph<T>, theta: Var, beta: Var, alpha: Var) -> Result<Var> {
    let w = g.matmul(beta, alpha)?;
    g.scale_kernels(theta, w)
}

/// k-space projection onto the measurements.
///
/// On kept frequencies the prediction becomes `(x̂ + λ·y) / (1 + λ)`, or
/// `y` when `lambda` is infinite; other frequencies pass through.
pub fn data_fidelity<T: Scalar>(g: &Graph<T>, x: Var, y: &Tensor<T>, kept: &[bool], lambda: f64) -> Result<Var> {
    let vx = g.value(x);
    let (n, c, h, w) = vx.dims4("data_fidelity")?;
    if n != 1 || c != 2 || y.shape() != vx.shape() || kept.len() != h * w {
        return Err(Error::shape(
            "data_fidelity",
            format!(
                "image {:?}, k-space {:?}, mask of {}",
                vx.shape(),
                y.shape(),
                kept.len()
            ),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::Parameter(format!(
            "data-fidelity lambda must be > 0, got {lambda}"
        )));
    }
    let (keep_pred, keep_meas) = if lambda.is_infinite() {
        (0.0, 1.0)
    } else {
        (1.0 / (1.0 + lambda), lambda / (1.0 + lambda))
    };
    let (kp, km) = (T::from_f64(keep_pred), T::from_f64(keep_meas));
    let plane = h * w;
    let mut k = dft2_tensor(&vx, false)?;
    {
        let yd = y.data();
        let kd = k.data_mut();
        for (i, _) in kept.iter().enumerate().filter(|(_, &m)| m) {
            for ch in [i, plane + i] {
                kd[ch] = if lambda.is_infinite() {
                    yd[ch]
                } else {
                    kp * kd[ch] + km * yd[ch]
                };
            }
        }
    }
    let out = dft2_tensor(&k, true)?;
    let kept = kept.to_vec();
    g.record("data_fidelity", &[x], out, move |grad, _| {
        let mut gk = dft2_tensor(grad, false).expect("shape");
        let d = gk.data_mut();
        for (i, _) in kept.iter().enumerate().filter(|(_, &m)| m) {
            d[i] *= kp;
            d[plane + i] *= kp;
        }
        vec![Some(dft2_tensor(&gk, true).expect("shape"))]
    })
}

/// Pixel magnitude `|re + i·im|` of a `1×2×H×W` tensor as `1×1×H×W`.
pub fn magnitude<T: Scalar>(g: &Graph<T>, x: Var) -> Result<Var> {
    let vx = g.value(x);
    let (n, c, h, w) = vx.dims4("magnitude")?;
    if n != 1 || c != 2 {
        return Err(Error::shape(
            "magnitude",
            format!("expected 1x2xHxW, got {:?}", vx.shape()),
        ));
    }
    let plane = h * w;
    let d = vx.data();
    let eps = T::from_f64(1e-12);
    let mag: Vec<T> = (0..plane)
        .map(|i| (d[i] * d[i] + d[plane + i] * d[plane + i] + eps).sqrt())
        .collect();
    let out = Tensor::new([1, 1, h, w], mag.clone())?;
    g.record("magnitude", &[x], out, move |grad, _| {
        let gd = grad.data();
        let d = vx.data();
        let mut gx = vec![T::zero(); 2 * plane];
        for i in 0..plane {
            gx[i] = gd[i] * d[i] / mag[i];
            gx[plane + i] = gd[i] * d[plane + i] / mag[i];
        }
        vec![Some(Tensor::new([1, 2, h, w], gx).expect("shape"))]
    })
}

/// The composed reconstruction network for one configuration and
/// conditioning mode.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub cfg: &'a ModelConfig,
    pub modulation: Modulation,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ModelConfig, modulation: Modulation) -> Self {
        Pipeline { cfg, modulation }
    }

    /// Encodes `x` (`1×2×H×W`) and averages the latent block over space.
    pub fn context_embed<T: Scalar>(&self, g: &Graph<T>, x: Var, ce: &VarMap) -> Result<Embedding> {
        let (enc, dec) = encoder_layers(self.cfg);
        let conv = |h: Var, name: &str, k: usize, stride: usize, relu: bool| -> Result<Var> {
            let w = ce.get(&format!("{name}/weight"))?;
            let b = ce.get(&format!("{name}/bias"))?;
            let out = g.conv2d(h, w, Some(b), stride, k / 2).map_err(in_layer(name))?;
            if relu {
                g.relu(out)
            } else {
                Ok(out)
            }
        };
        let mut h = x;
        for l in &enc {
            h = conv(h, &l.name, l.kernel, 2, l.relu)?;
        }
        let gamma = g.spatial_mean(h)?;
        for (j, l) in dec.iter().enumerate() {
            if j > 0 {
                h = g.upsample2x(h)?;
            }
            h = conv(h, &l.name, l.kernel, 1, l.relu)?;
        }
        Ok(Embedding { gamma, recon: h })
    }

    /// Per-layer factors `(β: n_out×r, α: r×n_in)` from `gamma`.
    pub fn hypernet_forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        layer: &LayerSpec,
        gamma: Var,
        omega: &VarMap,
    ) -> Result<(Var, Var)> {
        let r = self.cfg.hyper.rank;
        let name = &layer.name;
        let hidden = g.linear(
            gamma,
            omega.get(&format!("{name}/hidden/weight"))?,
            omega.get(&format!("{name}/hidden/bias"))?,
        )?;
        let out = g.linear(
            hidden,
            omega.get(&format!("{name}/out/weight"))?,
            omega.get(&format!("{name}/out/bias"))?,
        )?;
        let expected = self.cfg.hyper.output_len(layer);
        if g.shape(out) != [1, expected] {
            return Err(Error::shape(
                "hypernet",
                format!("layer {name} produced {:?}, expected [1, {expected}]", g.shape(out)),
            ));
        }
        let beta = g.narrow_cols(out, 0, r * layer.n_out)?;
        let beta = g.reshape(beta, &[layer.n_out, r])?;
        let alpha = g.narrow_cols(out, r * layer.n_out, r * layer.n_in)?;
        let alpha = g.reshape(alpha, &[r, layer.n_in])?;
        Ok((beta, alpha))
    }

    fn tau_forward<T: Scalar>(&self, g: &Graph<T>, layer: &LayerSpec, gamma: Var, tau: &VarMap) -> Result<Var> {
        let name = &layer.name;
        let hidden = g.linear(
            gamma,
            tau.get(&format!("{name}/hidden/weight"))?,
            tau.get(&format!("{name}/hidden/bias"))?,
        )?;
        g.linear(
            hidden,
            tau.get(&format!("{name}/out/weight"))?,
            tau.get(&format!("{name}/out/bias"))?,
        )
    }

    /// Effective weights of every base layer: modulated by `gamma` per the
    /// conditioning mode, then offset by `bound.delta` when present.
    pub fn layer_weights<T: Scalar>(
        &self,
        g: &Graph<T>,
        bound: &BoundParams,
        gamma: Option<Var>,
    ) -> Result<Vec<LayerWeights>> {
        let need_gamma =
            || gamma.ok_or_else(|| Error::Parameter(format!("{:?} modulation needs an embedding", self.modulation)));
        let mut out = Vec::new();
        for layer in self.cfg.base.layers() {
            let name = &layer.name;
            let mut weight = bound.theta.get(&format!("{name}/weight"))?;
            let mut bias = bound.theta.get(&format!("{name}/bias"))?;
            let mut scale = None;
            match self.modulation {
                Modulation::None => {}
                Modulation::Kernel => {
                    let (beta, alpha) = self.hypernet_forward(g, &layer, need_gamma()?, &bound.omega)?;
                    weight = modulate(g, weight, beta, alpha)?;
                }
                Modulation::Scalar => scale = Some(self.tau_forward(g, &layer, need_gamma()?, &bound.tau)?),
            }
            if let Some(delta) = &bound.delta {
                weight = g.add(weight, delta.get(&format!("{name}/weight"))?)?;
                bias = g.add(bias, delta.get(&format!("{name}/bias"))?)?;
            }
            out.push(LayerWeights { weight, bias, scale });
        }
        Ok(out)
    }

    /// U-shaped forward pass with concatenative skips and the global
    /// residual `x + net(x)`.
    pub fn base_forward<T: Scalar>(&self, g: &Graph<T>, x: Var, weights: &[LayerWeights]) -> Result<BaseOutput> {
        let layers = self.cfg.base.layers();
        if weights.len() != layers.len() {
            return Err(Error::shape(
                "base_forward",
                format!("{} layer weights for {} layers", weights.len(), layers.len()),
            ));
        }
        let pad = self.cfg.base.kernel_size / 2;
        let mut skips = Vec::new();
        let mut activations = Vec::with_capacity(layers.len());
        let mut h = x;
        for (layer, lw) in layers.iter().zip(weights) {
            let ctx = in_layer(&layer.name);
            if let LayerRole::Up { skip } = layer.role {
                h = g.upsample2x(h).map_err(&ctx)?;
                h = g.concat_channels(h, skips[skip]).map_err(&ctx)?;
            }
            h = g.conv2d(h, lw.weight, Some(lw.bias), layer.stride, pad).map_err(&ctx)?;
            if layer.relu {
                h = g.relu(h).map_err(&ctx)?;
            }
            if let Some(s) = lw.scale {
                h = g.scale_by(h, s).map_err(&ctx)?;
            }
            if layer.role == LayerRole::Down {
                skips.push(h);
            }
            activations.push(h);
        }
        let out = g.add(h, x).map_err(in_layer("residual"))?;
        Ok(BaseOutput { out, activations })
    }

    /// Embedding, conditioning, base network and data fidelity for one
    /// sample. `y` is the measured k-space as `1×2×H×W`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        bound: &BoundParams,
        x_us: &Tensor<T>,
        y: &Tensor<T>,
        kept: &[bool],
    ) -> Result<Forward> {
        let (_, _, h, w) = x_us.dims4("model input")?;
        self.cfg.check_image_size(h, w, self.modulation)?;
        let x = g.constant(x_us.clone());
        let embedding = if self.modulation.uses_encoder() {
            Some(self.context_embed(g, x, &bound.ce)?)
        } else {
            None
        };
        let weights = self.layer_weights(g, bound, embedding.map(|e| e.gamma))?;
        let base = self.base_forward(g, x, &weights)?;
        let x_rec = data_fidelity(g, base.out, y, kept, self.cfg.lambda)?;
        Ok(Forward {
            embedding,
            x_cnn: base.out,
            base,
            x_rec,
        })
    }
}
