use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ComplexImage;
use crate::error::{Error, Result};

/// Imaging contrast. Ids 0..=3 carry the tags `T1`, `T2`, `PD`, `FLAIR`;
/// other ids print as `C<id>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Contrast(pub u32);

const TAGS: [&str; 4] = ["T1", "T2", "PD", "FLAIR"];

impl Contrast {
    /// Monotone intensity remap on the tissue support; zero stays zero.
    fn remap(self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        match self.0 {
            0 => v,
            1 => 1.0 - 0.8 * v,
            2 => v.sqrt(),
            3 => v * v,
            n => v.powf(0.4 + 0.3 * (n % 5) as f64),
        }
    }
}

impl fmt::Display for Contrast {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match TAGS.get(self.0 as usize) {
            Some(tag) => f.write_str(tag),
            None => write!(f, "C{}", self.0),
        }
    }
}

impl FromStr for Contrast {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase();
        if let Some(i) = TAGS.iter().position(|t| *t == upper) {
            return Ok(Contrast(i as u32));
        }
        upper
            .strip_prefix('C')
            .and_then(|n| n.parse().ok())
            .map(Contrast)
            .ok_or_else(|| Error::Parameter(format!("unknown contrast `{s}`")))
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    intensity: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, outline: bool) -> Self {
        let (center, axes, intensity) = if outline {
            (0.05, 0.7..0.9, 0.3..0.5)
        } else {
            (0.5, 0.1..0.45, 0.1..0.8)
        };
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cx: rng.random_range(-center..=center),
            cy: rng.random_range(-center..=center),
            a: rng.random_range(axes.clone()),
            b: rng.random_range(axes),
            cos: angle.cos(),
            sin: angle.sin(),
            intensity: rng.random_range(intensity),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Synthetic anatomy of 5 to 9 overlapping ellipses. The geometry depends on
/// `seed` only; `contrast` selects the intensity remap. Magnitudes lie in
/// `[0, 1]` and the imaginary part is zero.
pub fn generate_phantom(seed: u64, contrast: Contrast, height: usize, width: usize) -> Result<ComplexImage> {
    if height == 0 || width == 0 {
        return Err(Error::Parameter(format!(
            "phantom size {height}x{width} must be non-empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(5..=9);
    let ellipses: Vec<Ellipse> = (0..count).map(|i| Ellipse::random(&mut rng, i == 0)).collect();

    let mut values = vec![0.0; height * width];
    for (i, v) in values.iter_mut().enumerate() {
        let y = 2.0 * ((i / width) as f64 + 0.5) / height as f64 - 1.0;
        let x = 2.0 * ((i % width) as f64 + 0.5) / width as f64 - 1.0;
        *v = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
    }
    normalize_peak(&mut values);
    for v in &mut values {
        *v = contrast.remap(*v);
    }
    normalize_peak(&mut values);
    ComplexImage::from_real(height, width, values)
}

fn normalize_peak(values: &mut [f64]) {
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
}
