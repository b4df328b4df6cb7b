//! Multimodal reconstruction tasks: k-space sampling masks, retrospective
//! undersampling, synthetic multi-contrast phantoms and support/query task
//! construction.
//!
//! Rasters are stored unshifted: the DC coefficient sits at index `(0, 0)`
//! and signed frequencies follow the usual `0, 1, …, −2, −1` ordering.

mod io;
mod mask;
mod phantom;

pub use io::{read_kmr1, read_png, read_raster, write_kmr1, write_mask, Raster};
pub use mask::{generate_cartesian_mask, generate_gaussian_mask, generate_mask, MaskSpec, MaskType, SamplingMask};
pub use phantom::{generate_phantom, Contrast};

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{dft2, idft2, Scalar, Tensor};

/// Complex raster in the image domain, stored as real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

/// Complex raster in the frequency domain (unshifted layout).
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        ComplexImage {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn from_real(height: usize, width: usize, re: Vec<f64>) -> Result<Self> {
        if re.len() != height * width {
            return Err(Error::shape(
                "image",
                format!("{} values for {height}x{width}", re.len()),
            ));
        }
        Ok(ComplexImage {
            height,
            width,
            im: vec![0.0; re.len()],
            re,
        })
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn dft2(&self) -> KSpace {
        let (re, im) = dft2(&self.re, &self.im, self.height, self.width);
        KSpace {
            height: self.height,
            width: self.width,
            re,
            im,
        }
    }

    /// `1×2×H×W` tensor with real and imaginary channels.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        planes_to_tensor(self.height, self.width, &self.re, &self.im)
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (height, width, re, im) = tensor_to_planes(t)?;
        Ok(ComplexImage { height, width, re, im })
    }

    /// Scales so the largest magnitude is 1 (no-op for an all-zero image).
    pub fn normalize_magnitude(&mut self) {
        let peak = self.magnitude().into_iter().fold(0.0, f64::max);
        if peak > 0.0 {
            for v in self.re.iter_mut().chain(self.im.iter_mut()) {
                *v /= peak;
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.re.iter().chain(&self.im).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite("image"))
        }
    }
}

impl KSpace {
    pub fn idft2(&self) -> ComplexImage {
        let (re, im) = idft2(&self.re, &self.im, self.height, self.width);
        ComplexImage {
            height: self.height,
            width: self.width,
            re,
            im,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        planes_to_tensor(self.height, self.width, &self.re, &self.im)
    }
}

fn planes_to_tensor<T: Scalar>(h: usize, w: usize, re: &[f64], im: &[f64]) -> Tensor<T> {
    let data = re.iter().chain(im).map(|&v| T::from_f64(v)).collect();
    Tensor::new([1, 2, h, w], data).expect("planes match raster size")
}

fn tensor_to_planes<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = t.dims4("complex raster")?;
    if n != 1 || c != 2 {
        return Err(Error::shape(
            "complex raster",
            format!("expected 1x2xHxW, got {:?}", t.shape()),
        ));
    }
    let v = t.to_f64_vec();
    let (re, im) = v.split_at(h * w);
    Ok((h, w, re.to_vec(), im.to_vec()))
}

/// Retrospective undersampling `y = mask ⊙ (F·x_FS + ε)`, `x_US = Fᴴ·y`.
///
/// `noise_sigma` adds complex Gaussian noise of that standard deviation per
/// component on the sampled frequencies; zero keeps the forward model
/// noiseless.
pub fn undersample(
    x_fs: &ComplexImage,
    mask: &SamplingMask,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<(ComplexImage, KSpace)> {
    if (x_fs.height, x_fs.width) != (mask.height, mask.width) {
        return Err(Error::shape(
            "undersample",
            format!(
                "image {}x{} vs mask {}x{}",
                x_fs.height, x_fs.width, mask.height, mask.width
            ),
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut y = x_fs.dft2();
    let mut noise = (noise_sigma > 0.0).then(|| {
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        (normal, ChaCha8Rng::seed_from_u64(noise_seed))
    });
    for (i, &keep) in mask.kept.iter().enumerate() {
        if keep {
            if let Some((normal, rng)) = noise.as_mut() {
                y.re[i] += normal.sample(rng);
                y.im[i] += normal.sample(rng);
            }
        } else {
            y.re[i] = 0.0;
            y.im[i] = 0.0;
        }
    }
    let x_us = y.idft2();
    Ok((x_us, y))
}

/// One training or evaluation example of a task.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Index of the source image in the pool the task was built from.
    pub source: usize,
    pub x_us: ComplexImage,
    pub y: KSpace,
    pub mask: SamplingMask,
    pub x_fs: ComplexImage,
}

/// Everything that defines a task apart from its images.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub contrast: Contrast,
    pub mask: MaskSpec,
    pub split_ratio: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(contrast: Contrast, mask: MaskSpec, seed: u64) -> Self {
        TaskSpec {
            contrast,
            mask,
            split_ratio: 0.5,
            noise_sigma: 0.0,
            seed,
        }
    }
}

/// One data mode (contrast × mask type × acceleration) with disjoint
/// support and query partitions.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: TaskSpec,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl Task {
    /// Short id such as `T1-C-4x`.
    pub fn id(&self) -> String {
        format!(
            "{}-{}-{}x",
            self.spec.contrast,
            self.spec.mask.mask_type.letter(),
            fmt_acc(self.spec.mask.acceleration)
        )
    }
}

fn fmt_acc(a: f64) -> String {
    if a.fract() == 0.0 {
        format!("{}", a as i64)
    } else {
        format!("{a}")
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} support, {} query)",
            self.id(),
            self.support.len(),
            self.query.len()
        )
    }
}

/// Mixes a base seed with a salt into an independent stream seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffles `images` deterministically, splits them by `split_ratio` and
/// undersamples every image with its own mask realization of the spec.
pub fn build_task(images: &[ComplexImage], spec: &TaskSpec) -> Result<Task> {
    if images.len() < 2 {
        return Err(Error::Parameter(format!(
            "a task needs at least 2 images, got {}",
            images.len()
        )));
    }
    if !(0.0..=1.0).contains(&spec.split_ratio) {
        return Err(Error::Parameter(format!(
            "split ratio {} outside [0, 1]",
            spec.split_ratio
        )));
    }
    let n = images.len();
    let n_support = (n as f64 * spec.split_ratio).round() as usize;
    if n_support == 0 || n_support == n {
        return Err(Error::Parameter(format!(
            "split ratio {} leaves an empty partition for {n} images",
            spec.split_ratio
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1)));

    let mut samples = Vec::with_capacity(n);
    for &source in &order {
        let x_fs = &images[source];
        x_fs.check_finite()?;
        let mask_seed = derive_seed(spec.seed, 1000 + source as u64);
        let mask = generate_mask(x_fs.height, x_fs.width, &spec.mask, mask_seed)?;
        let (x_us, y) = undersample(x_fs, &mask, spec.noise_sigma, derive_seed(mask_seed, 7))?;
        samples.push(Sample {
            source,
            x_us,
            y,
            mask,
            x_fs: x_fs.clone(),
        });
    }
    let query = samples.split_off(n_support);
    Ok(Task {
        spec: spec.clone(),
        support: samples,
        query,
    })
}

/// Phantoms with seeds `base_seed..base_seed + n` in one contrast. Equal
/// seeds share anatomy across contrasts.
pub fn phantom_set(
    contrast: Contrast,
    n: usize,
    height: usize,
    width: usize,
    base_seed: u64,
) -> Result<Vec<ComplexImage>> {
    (0..n as u64)
        .map(|i| generate_phantom(base_seed + i, contrast, height, width))
        .collect()
}

/// One task per (contrast, mask) pair, contrasts outermost. Task `k` is
/// seeded with `derive_seed(seed, k)`.
pub fn build_suite(images: &[(Contrast, Vec<ComplexImage>)], masks: &[MaskSpec], seed: u64) -> Result<Vec<Task>> {
    let mut tasks = Vec::with_capacity(images.len() * masks.len());
    for (contrast, imgs) in images {
        for mask in masks {
            let spec = TaskSpec::new(*contrast, *mask, derive_seed(seed, tasks.len() as u64));
            tasks.push(build_task(imgs, &spec)?);
        }
    }
    Ok(tasks)
}
