use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Sampling pattern family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskType {
    /// Full phase-encode columns.
    Cartesian,
    /// Individual points with a radially decaying density.
    Gaussian,
}

impl MaskType {
    pub fn letter(self) -> char {
        match self {
            MaskType::Cartesian => 'C',
            MaskType::Gaussian => 'G',
        }
    }
}

impl fmt::Display for MaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskType::Cartesian => "cartesian",
            MaskType::Gaussian => "gaussian",
        })
    }
}

impl FromStr for MaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cartesian" | "c" => Ok(MaskType::Cartesian),
            "gaussian" | "g" => Ok(MaskType::Gaussian),
            _ => Err(Error::Parameter(format!("unknown mask type `{s}`"))),
        }
    }
}

/// Mask family parameters shared by every realization in a task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask_type: MaskType,
    pub acceleration: f64,
    pub center_fraction: f64,
}

impl MaskSpec {
    pub fn new(mask_type: MaskType, acceleration: f64, center_fraction: f64) -> Self {
        MaskSpec {
            mask_type,
            acceleration,
            center_fraction,
        }
    }
}

/// Binary k-space mask in unshifted layout, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub height: usize,
    pub width: usize,
    pub kept: Vec<bool>,
    pub spec: MaskSpec,
    pub seed: u64,
}

impl SamplingMask {
    pub fn count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Total points divided by kept points.
    pub fn realized_acceleration(&self) -> f64 {
        (self.height * self.width) as f64 / self.count() as f64
    }

    pub fn is_kept(&self, row: usize, col: usize) -> bool {
        self.kept[row * self.width + col]
    }
}

/// Signed frequency of an unshifted index: `0, 1, …, ⌈n/2⌉−1, −⌊n/2⌋, …, −1`.
pub(crate) fn signed_frequency(idx: usize, n: usize) -> i64 {
    if idx < n.div_ceil(2) {
        idx as i64
    } else {
        idx as i64 - n as i64
    }
}

/// `⌊x⌋` tolerant of representation error just below an integer.
fn floor_tol(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

fn validate(height: usize, width: usize, acceleration: f64, center_fraction: f64) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Parameter(format!(
            "mask size {height}x{width} must be non-empty"
        )));
    }
    if !acceleration.is_finite() || acceleration < 1.0 {
        return Err(Error::Parameter(format!(
            "acceleration must be >= 1, got {acceleration}"
        )));
    }
    if !(center_fraction >= 0.0) || center_fraction > 1.0 / acceleration + 1e-12 {
        return Err(Error::Parameter(format!(
            "center fraction {center_fraction} outside [0, 1/acceleration] for acceleration {acceleration}"
        )));
    }
    Ok(())
}

fn required_count(total: usize, acceleration: f64) -> usize {
    ((total as f64 / acceleration).round() as usize).clamp(1, total)
}

/// Cartesian mask: `⌊cf·w⌋` lowest-frequency columns plus uniformly drawn
/// columns until `round(w/acceleration)` columns are kept. Each kept column
/// is sampled along its full height.
pub fn generate_cartesian_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    validate(height, width, acceleration, center_fraction)?;
    let n_center = floor_tol(center_fraction * width as f64);
    let required = required_count(width, acceleration);
    if required < n_center {
        return Err(Error::Parameter(format!(
            "infeasible mask: {required} lines required but {n_center} central lines fixed"
        )));
    }
    let lo = -((n_center / 2) as i64);
    let is_center = |col: usize| {
        let f = signed_frequency(col, width);
        f >= lo && f < lo + n_center as i64
    };
    let mut lines: Vec<bool> = (0..width).map(is_center).collect();
    let free: Vec<usize> = (0..width).filter(|&c| !lines[c]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pick in index::sample(&mut rng, free.len(), required - n_center) {
        lines[free[pick]] = true;
    }
    let kept = (0..height).flat_map(|_| lines.iter().copied()).collect();
    Ok(SamplingMask {
        height,
        width,
        kept,
        spec: MaskSpec::new(MaskType::Cartesian, acceleration, center_fraction),
        seed,
    })
}

/// Gaussian point mask: every point within radius `⌊cf·min(h,w)/2⌋` of DC,
/// plus points drawn without replacement with probability proportional to
/// `exp(−d²/2σ²)`, `σ = min(h,w)/6`, until `round(h·w/acceleration)` are kept.
pub fn generate_gaussian_mask(
    height: usize,
    width: usize,
    acceleration: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    validate(height, width, acceleration, center_fraction)?;
    let total = height * width;
    let required = required_count(total, acceleration);
    let short = height.min(width) as f64;
    let radius = floor_tol(center_fraction * short / 2.0) as f64;
    let sigma = short / 6.0;
    let dist2 = |i: usize| {
        let fy = signed_frequency(i / width, height) as f64;
        let fx = signed_frequency(i % width, width) as f64;
        fy * fy + fx * fx
    };

    let mut kept = vec![false; total];
    let mut n_center = 0;
    if center_fraction > 0.0 {
        for (i, k) in kept.iter_mut().enumerate() {
            if dist2(i) <= radius * radius {
                *k = true;
                n_center += 1;
            }
        }
    }
    if required < n_center {
        return Err(Error::Parameter(format!(
            "infeasible mask: {required} points required but {n_center} central points fixed"
        )));
    }

    // Weighted sampling without replacement: keep the largest ln(u)/w keys.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = (0..total)
        .filter(|&i| !kept[i])
        .map(|i| {
            let weight = (-dist2(i) / (2.0 * sigma * sigma)).exp();
            let u: f64 = 1.0 - rng.random::<f64>();
            (u.ln() / weight, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in keyed.iter().take(required - n_center) {
        kept[i] = true;
    }
    Ok(SamplingMask {
        height,
        width,
        kept,
        spec: MaskSpec::new(MaskType::Gaussian, acceleration, center_fraction),
        seed,
    })
}

pub fn generate_mask(height: usize, width: usize, spec: &MaskSpec, seed: u64) -> Result<SamplingMask> {
    match spec.mask_type {
        MaskType::Cartesian => generate_cartesian_mask(height, width, spec.acceleration, spec.center_fraction, seed),
        MaskType::Gaussian => generate_gaussian_mask(height, width, spec.acceleration, spec.center_fraction, seed),
    }
}
