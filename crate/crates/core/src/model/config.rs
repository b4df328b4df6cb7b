use crate::error::{Error, Result};

/// U-shaped base network: `levels` encoder convolutions, one bottleneck
/// convolution and `levels` decoder convolutions with concatenative skips.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseNetConfig {
    /// Output channels of each encoder level, finest first.
    pub channels: Vec<usize>,
    pub bottleneck: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        BaseNetConfig {
            channels: vec![8, 16, 32],
            bottleneck: 64,
            kernel_size: 3,
            in_channels: 2,
            out_channels: 2,
        }
    }
}

/// Position of a convolution inside the U-shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerRole {
    Down,
    Bottleneck,
    /// Decoder layer whose input is the upsampled previous output
    /// concatenated with the output of encoder level `skip`.
    Up {
        skip: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub stride: usize,
    pub relu: bool,
    pub role: LayerRole,
}

impl BaseNetConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels()
    }

    /// Weighted layers in forward order; `2·levels + 1` entries.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let levels = self.levels();
        let mut out = Vec::with_capacity(2 * levels + 1);
        let mut prev = self.in_channels;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push(LayerSpec {
                name: format!("conv_down_{i}"),
                n_in: prev,
                n_out: c,
                stride: if i == 0 { 1 } else { 2 },
                relu: true,
                role: LayerRole::Down,
            });
            prev = c;
        }
        out.push(LayerSpec {
            name: "latent_layer".into(),
            n_in: prev,
            n_out: self.bottleneck,
            stride: 2,
            relu: true,
            role: LayerRole::Bottleneck,
        });
        prev = self.bottleneck;
        for j in 0..levels {
            let skip = levels - 1 - j;
            let last = j + 1 == levels;
            let n_out = if last { self.out_channels } else { self.channels[skip] };
            out.push(LayerSpec {
                name: format!("conv_up_{j}"),
                n_in: prev + self.channels[skip],
                n_out,
                stride: 1,
                relu: !last,
                role: LayerRole::Up { skip },
            });
            prev = n_out;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.channels.is_empty() || self.channels.contains(&0) || self.bottleneck == 0 {
            return bad(format!(
                "base channels {:?} / bottleneck {} must be positive",
                self.channels, self.bottleneck
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.in_channels != 2 || self.out_channels != 2 {
            return bad("base network maps 2 channels to 2 channels".into());
        }
        Ok(())
    }
}

/// Per-layer hypernetwork shape: `embed_dim → bottleneck → rank·(n_out+n_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetConfig {
    pub embed_dim: usize,
    pub bottleneck: usize,
    pub rank: usize,
}

impl Default for HyperNetConfig {
    fn default() -> Self {
        HyperNetConfig {
            embed_dim: 256,
            bottleneck: 64,
            rank: 1,
        }
    }
}

impl HyperNetConfig {
    pub fn output_len(&self, layer: &LayerSpec) -> usize {
        self.rank * (layer.n_out + layer.n_in)
    }
}

/// Convolutional autoencoder producing the context embedding. The encoder
/// has `channels.len() + 1` stride-2 stages, the last one linear with
/// `embed_dim` output channels.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![16, 32],
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() + 1)
    }
}

/// Which conditioning the base network receives from the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modulation {
    /// Plain base network; no context encoder.
    None,
    /// Rank-r kernel modulation from per-layer hypernetworks.
    Kernel,
    /// One scalar per layer scaling that layer's activations.
    Scalar,
}

impl Modulation {
    pub fn uses_encoder(self) -> bool {
        self != Modulation::None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base: BaseNetConfig,
    pub hyper: HyperNetConfig,
    pub encoder: EncoderConfig,
    /// Weight of the autoencoder reconstruction term in the training loss.
    pub aux_weight: f64,
    /// Data-fidelity weight; `f64::INFINITY` replaces measured frequencies.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base: BaseNetConfig::default(),
            hyper: HyperNetConfig::default(),
            encoder: EncoderConfig::default(),
            aux_weight: 0.1,
            lambda: f64::INFINITY,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration with every component present (under 500
    /// parameters with kernel modulation); inputs must be multiples of 4.
    pub fn micro() -> Self {
        ModelConfig {
            base: BaseNetConfig {
                channels: vec![2],
                bottleneck: 2,
                ..BaseNetConfig::default()
            },
            hyper: HyperNetConfig {
                embed_dim: 4,
                bottleneck: 3,
                rank: 1,
            },
            encoder: EncoderConfig {
                channels: vec![2],
                kernel_size: 3,
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.hyper.embed_dim == 0 || self.hyper.bottleneck == 0 || self.hyper.rank == 0 {
            return Err(Error::Parameter(format!(
                "hypernetwork sizes must be positive: {:?}",
                self.hyper
            )));
        }
        if self.encoder.channels.contains(&0) || self.encoder.kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter(format!("invalid encoder config {:?}", self.encoder)));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Parameter(format!(
                "aux weight must be >= 0, got {}",
                self.aux_weight
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Parameter(format!(
                "data-fidelity lambda must be > 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Checks that an `height × width` image fits the strided layers.
    pub fn check_image_size(&self, height: usize, width: usize, modulation: Modulation) -> Result<()> {
        let mut multiple = self.base.size_multiple();
        if modulation.uses_encoder() {
            multiple = multiple.max(self.encoder.size_multiple());
        }
        if height == 0 || width == 0 || !height.is_multiple_of(multiple) || !width.is_multiple_of(multiple) {
            return Err(Error::shape(
                "model input",
                format!("{height}x{width} must be a non-empty multiple of {multiple}"),
            ));
        }
        Ok(())
    }
}
