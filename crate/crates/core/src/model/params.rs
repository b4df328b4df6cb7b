use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerSpec, ModelConfig, Modulation};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, ParamContainer, Scalar, Tensor, TensorMap, Var};

/// Every trainable tensor of the model, grouped by sub-network. Names are
/// `layer/role`, unique within a group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    /// Base network.
    pub theta: TensorMap<T>,
    /// Kernel-modulation hypernetworks.
    pub omega: TensorMap<T>,
    /// Context encoder.
    pub ce: TensorMap<T>,
    /// Scalar-modulation network.
    pub tau: TensorMap<T>,
}

pub const GROUPS: [&str; 4] = ["theta", "omega", "ce", "tau"];

/// Selector for one tensor group of a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Theta,
    Omega,
    Ce,
    Tau,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Theta, Group::Omega, Group::Ce, Group::Tau];
}

/// One context-encoder convolution.
pub(crate) struct EncoderLayer {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub kernel: usize,
    pub relu: bool,
}

/// Encoder stages (stride 2) followed by decoder stages; decoder stages
/// after the first are preceded by a 2× upsample.
pub(crate) fn encoder_layers(cfg: &ModelConfig) -> (Vec<EncoderLayer>, Vec<EncoderLayer>) {
    let ch = &cfg.encoder.channels;
    let k = cfg.encoder.kernel_size;
    let embed = cfg.hyper.embed_dim;
    let mut enc = Vec::new();
    let mut prev = cfg.base.in_channels;
    for (i, &c) in ch.iter().chain(std::iter::once(&embed)).enumerate() {
        enc.push(EncoderLayer {
            name: format!("enc_{i}"),
            n_in: prev,
            n_out: c,
            kernel: k,
            relu: i < ch.len(),
        });
        prev = c;
    }
    let widest = ch.last().copied().unwrap_or(embed);
    let mut dec = vec![EncoderLayer {
        name: "dec_0".into(),
        n_in: embed,
        n_out: widest,
        kernel: 1,
        relu: true,
    }];
    prev = widest;
    let outs: Vec<usize> = std::iter::once(widest)
        .chain(ch.iter().rev().skip(1).copied())
        .chain(std::iter::once(cfg.base.in_channels))
        .collect();
    for (j, &c) in outs.iter().enumerate() {
        let last = j + 1 == outs.len();
        dec.push(EncoderLayer {
            name: format!("dec_{}", j + 1),
            n_in: prev,
            n_out: c,
            kernel: k,
            relu: !last,
        });
        prev = c;
    }
    (enc, dec)
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64(dist.sample(rng))).collect()).expect("shape")
}

fn conv_entry<T: Scalar>(
    map: &mut TensorMap<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    n_out: usize,
    n_in: usize,
    k: usize,
    relu: bool,
) -> Result<()> {
    let fan_in = (n_in * k * k) as f64;
    let gain = if relu { 2.0 } else { 1.0 };
    map.insert(
        format!("{name}/weight"),
        normal_tensor(rng, &[n_out, n_in, k, k], (gain / fan_in).sqrt()),
    )?;
    map.insert(format!("{name}/bias"), Tensor::zeros([n_out]))
}

/// Two affine maps `embed → hidden → out_len` whose output layer starts at
/// zero weights and the given bias.
fn mlp_entry<T: Scalar>(
    map: &mut TensorMap<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    embed: usize,
    hidden: usize,
    out_bias: Vec<f64>,
) -> Result<()> {
    let out_len = out_bias.len();
    map.insert(
        format!("{name}/hidden/weight"),
        normal_tensor(rng, &[hidden, embed], (1.0 / embed as f64).sqrt()),
    )?;
    map.insert(format!("{name}/hidden/bias"), Tensor::zeros([hidden]))?;
    map.insert(format!("{name}/out/weight"), Tensor::zeros([out_len, hidden]))?;
    map.insert(format!("{name}/out/bias"), Tensor::from_f64([out_len], &out_bias)?)
}

/// Output bias giving `β·α = 1`: β all ones, first row of α ones, the
/// remaining rows zero.
pub(crate) fn identity_bias(rank: usize, layer: &LayerSpec) -> Vec<f64> {
    let mut b = vec![1.0; rank * layer.n_out];
    b.extend((0..rank * layer.n_in).map(|i| if i < layer.n_in { 1.0 } else { 0.0 }));
    b
}

impl<T: Scalar> ParameterSet<T> {
    pub fn empty() -> Self {
        ParameterSet {
            theta: TensorMap::new(),
            omega: TensorMap::new(),
            ce: TensorMap::new(),
            tau: TensorMap::new(),
        }
    }

    /// Seeded initialization. Conv layers use He-normal weights and zero
    /// biases; modulation networks start at the identity modulation.
    pub fn init(cfg: &ModelConfig, modulation: Modulation, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::empty();
        let layers = cfg.base.layers();
        let k = cfg.base.kernel_size;
        for l in &layers {
            conv_entry(&mut p.theta, &mut rng, &l.name, l.n_out, l.n_in, k, l.relu)?;
        }
        if modulation.uses_encoder() {
            let (enc, dec) = encoder_layers(cfg);
            for l in enc.iter().chain(&dec) {
                conv_entry(&mut p.ce, &mut rng, &l.name, l.n_out, l.n_in, l.kernel, l.relu)?;
            }
        }
        let (embed, hidden) = (cfg.hyper.embed_dim, cfg.hyper.bottleneck);
        for l in &layers {
            match modulation {
                Modulation::Kernel => mlp_entry(
                    &mut p.omega,
                    &mut rng,
                    &l.name,
                    embed,
                    hidden,
                    identity_bias(cfg.hyper.rank, l),
                )?,
                Modulation::Scalar => mlp_entry(&mut p.tau, &mut rng, &l.name, embed, hidden, vec![1.0])?,
                Modulation::None => {}
            }
        }
        Ok(p)
    }

    pub fn group(&self, g: Group) -> &TensorMap<T> {
        match g {
            Group::Theta => &self.theta,
            Group::Omega => &self.omega,
            Group::Ce => &self.ce,
            Group::Tau => &self.tau,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut TensorMap<T> {
        match g {
            Group::Theta => &mut self.theta,
            Group::Omega => &mut self.omega,
            Group::Ce => &mut self.ce,
            Group::Tau => &mut self.tau,
        }
    }

    pub fn groups(&self) -> [(&'static str, &TensorMap<T>); 4] {
        [
            (GROUPS[0], &self.theta),
            (GROUPS[1], &self.omega),
            (GROUPS[2], &self.ce),
            (GROUPS[3], &self.tau),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut TensorMap<T>); 4] {
        [
            (GROUPS[0], &mut self.theta),
            (GROUPS[1], &mut self.omega),
            (GROUPS[2], &mut self.ce),
            (GROUPS[3], &mut self.tau),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.groups().iter().map(|(_, m)| m.num_scalars()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            theta: self.theta.zeros_like(),
            omega: self.omega.zeros_like(),
            ce: self.ce.zeros_like(),
            tau: self.tau.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            theta: self.theta.cast(),
            omega: self.omega.cast(),
            ce: self.ce.cast(),
            tau: self.tau.cast(),
        }
    }

    /// `self += alpha · other`, group by group.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.theta.axpy(alpha, &other.theta)?;
        self.omega.axpy(alpha, &other.omega)?;
        self.ce.axpy(alpha, &other.ce)?;
        self.tau.axpy(alpha, &other.tau)
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.groups().iter().zip(other.groups().iter()) {
            a.check_layout(b)?;
        }
        Ok(())
    }

    pub fn bit_equal(&self, other: &Self) -> bool {
        self.groups()
            .iter()
            .zip(other.groups().iter())
            .all(|((_, a), (_, b))| a.bit_equal(b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.groups()
            .iter()
            .zip(other.groups().iter())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (group, map) in self.groups() {
            for (name, t) in map.iter() {
                if !t.is_finite() {
                    return Err(Error::non_finite(format!("{context}: {group}/{name}")));
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ParamContainer<T> for ParameterSet<T> {
    fn visit(&self) -> Vec<&Tensor<T>> {
        self.theta
            .tensors()
            .chain(self.omega.tensors())
            .chain(self.ce.tensors())
            .chain(self.tau.tensors())
            .collect()
    }

    fn visit_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.theta
            .tensors_mut()
            .chain(self.omega.tensors_mut())
            .chain(self.ce.tensors_mut())
            .chain(self.tau.tensors_mut())
            .collect()
    }
}

/// Graph variables bound to the tensors of one [`TensorMap`].
#[derive(Clone, Debug, Default)]
pub struct VarMap {
    entries: Vec<(String, Var)>,
}

impl VarMap {
    pub fn bind<T: Scalar>(g: &Graph<T>, map: &TensorMap<T>, trainable: bool) -> Self {
        VarMap {
            entries: map
                .iter()
                .map(|(n, t)| (n.to_string(), g.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Parameter(format!("missing tensor `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    /// Gradients for every bound tensor, zeros where the root did not
    /// depend on it.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>, like: &TensorMap<T>) -> Result<TensorMap<T>> {
        let mut out = TensorMap::new();
        for ((name, var), (_, t)) in self.entries.iter().zip(like.iter()) {
            out.insert(name.clone(), grads.take_or_zeros(*var, t))?;
        }
        Ok(out)
    }
}

/// Which groups receive gradients when bound to a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub theta: bool,
    pub omega: bool,
    pub ce: bool,
    pub tau: bool,
    pub delta: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        theta: false,
        omega: false,
        ce: false,
        tau: false,
        delta: false,
    };
    pub const ALL: Trainable = Trainable {
        theta: true,
        omega: true,
        ce: true,
        tau: true,
        delta: false,
    };

    pub fn only(g: Group) -> Self {
        let mut t = Trainable::NONE;
        match g {
            Group::Theta => t.theta = true,
            Group::Omega => t.omega = true,
            Group::Ce => t.ce = true,
            Group::Tau => t.tau = true,
        }
        t
    }
}

/// A [`ParameterSet`] (plus an optional additive base-weight offset) bound
/// to a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub theta: VarMap,
    pub omega: VarMap,
    pub ce: VarMap,
    pub tau: VarMap,
    /// Offsets added to the effective base weights, named like `theta`.
    pub delta: Option<VarMap>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(
        g: &Graph<T>,
        params: &ParameterSet<T>,
        delta: Option<&TensorMap<T>>,
        trainable: Trainable,
    ) -> Self {
        BoundParams {
            theta: VarMap::bind(g, &params.theta, trainable.theta),
            omega: VarMap::bind(g, &params.omega, trainable.omega),
            ce: VarMap::bind(g, &params.ce, trainable.ce),
            tau: VarMap::bind(g, &params.tau, trainable.tau),
            delta: delta.map(|d| VarMap::bind(g, d, trainable.delta)),
        }
    }

    /// Gradients of every group, zero-filled for groups that were frozen.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>, params: &ParameterSet<T>) -> Result<ParameterSet<T>> {
        Ok(ParameterSet {
            theta: self.theta.collect(grads, &params.theta)?,
            omega: self.omega.collect(grads, &params.omega)?,
            ce: self.ce.collect(grads, &params.ce)?,
            tau: self.tau.collect(grads, &params.tau)?,
        })
    }
}
