//! Image quality and representation similarity: PSNR, SSIM, linear CKA and
//! the per-layer CKA profile between unmodulated and modulated activations.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{layer_activations, ModelConfig, Modulation, ParameterSet};
use crate::numerics::Scalar;
use crate::tasks::{ComplexImage, Task};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Quality of one reconstructed sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub task: String,
    pub sample: usize,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// `20·log10(max(target) / √MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("psnr", pred, target)?;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let peak = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!(
            "PSNR needs a positive target peak, got {peak}"
        )));
    }
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = win.iter().enumerate().map(|(j, &wj)| wj * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = win.iter().enumerate().map(|(i, &wi)| wi * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11×11 Gaussian window, with the
/// dynamic range taken from `max(target)`.
pub fn ssim(pred: &[f64], target: &[f64], height: usize, width: usize) -> Result<f64> {
    let range = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ssim_with_range(pred, target, height, width, range)
}

/// [`ssim`] with an explicit dynamic range.
pub fn ssim_with_range(pred: &[f64], target: &[f64], height: usize, width: usize, range: f64) -> Result<f64> {
    check_len("ssim", pred, target)?;
    if pred.len() != height * width {
        return Err(Error::shape(
            "ssim",
            format!("{} values for {height}x{width}", pred.len()),
        ));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::Parameter(format!(
            "SSIM dynamic range must be positive, got {range}"
        )));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let win = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, height, width, &win);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mx, my) = (f(pred), f(target));
    let (sxx, syy, sxy) = (f(&prod(pred, pred)), f(&prod(target, target)), f(&prod(pred, target)));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// PSNR and SSIM between the magnitudes of two images.
pub fn image_quality(pred: &ComplexImage, target: &ComplexImage) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::shape(
            "image quality",
            format!("{}x{} vs {}x{}", pred.height, pred.width, target.height, target.width),
        ));
    }
    let (p, t) = (pred.magnitude(), target.magnitude());
    Ok((psnr(&p, &t)?, ssim(&p, &t, target.height, target.width)?))
}

/// Linear CKA between `n × d1` and `n × d2` row-major activation matrices:
/// `‖XcᵀYc‖²_F / (‖XcᵀXc‖_F · ‖YcᵀYc‖_F)` with column-centered `Xc`, `Yc`.
pub fn linear_cka(x: &[f64], y: &[f64], n: usize) -> Result<f64> {
    if n < 2 || x.is_empty() || y.is_empty() || !x.len().is_multiple_of(n) || !y.len().is_multiple_of(n) {
        return Err(Error::shape(
            "linear_cka",
            format!(
                "{} and {} values do not split into {n} rows (need n >= 2)",
                x.len(),
                y.len()
            ),
        ));
    }
    let xc = centered(x, n);
    let yc = centered(y, n);
    let (dx, dy) = (x.len() / n, y.len() / n);
    let hxy = cross_frobenius_sq(&xc, dx, &yc, dy, n);
    let hxx = cross_frobenius_sq(&xc, dx, &xc, dx, n);
    let hyy = cross_frobenius_sq(&yc, dy, &yc, dy, n);
    if hxx == 0.0 || hyy == 0.0 {
        return Err(Error::Parameter(
            "CKA is undefined for zero-variance activations".into(),
        ));
    }
    Ok(hxy / (hxx * hyy).sqrt())
}

fn centered(m: &[f64], n: usize) -> Vec<f64> {
    let d = m.len() / n;
    let mut means = vec![0.0; d];
    for row in m.chunks(d) {
        for (acc, v) in means.iter_mut().zip(row) {
            *acc += v;
        }
    }
    means.iter_mut().for_each(|v| *v /= n as f64);
    m.chunks(d)
        .flat_map(|row| row.iter().zip(&means).map(|(v, mu)| v - mu))
        .collect()
}

/// `‖AᵀB‖²_F` for `n × da` and `n × db` row-major matrices.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut gram = vec![0.0; da * db];
    for r in 0..n {
        let (ra, rb) = (&a[r * da..(r + 1) * da], &b[r * db..(r + 1) * db]);
        for (i, &ai) in ra.iter().enumerate() {
            for (g, &bj) in gram[i * db..(i + 1) * db].iter_mut().zip(rb) {
                *g += ai * bj;
            }
        }
    }
    gram.iter().map(|v| v * v).sum()
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaLayer {
    pub layer: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-layer CKA between unmodulated and modulated activations, in
/// encoder → bottleneck → decoder order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaProfile {
    pub layers: Vec<CkaLayer>,
    /// `per_task[t][l]`: CKA of task `t` at layer `l`.
    pub per_task: Vec<Vec<f64>>,
}

/// Appends the `positions × channels` rows of a `1×C×H×W` activation.
fn append_rows<T: Scalar>(rows: &mut Vec<f64>, act: &crate::numerics::Tensor<T>, limit: usize) -> Result<usize> {
    let (_, c, h, w) = act.dims4("cka activations")?;
    let plane = h * w;
    let d = act.data();
    let take = plane.min(limit);
    for p in 0..take {
        rows.extend((0..c).map(|ch| d[ch * plane + p].to_f64()));
    }
    Ok(take)
}

/// Compares each base layer's output with and without the embedding's
/// modulation on the same inputs. Each task contributes up to `budget`
/// rows per layer, spatial positions folded into rows, taken from its query
/// samples in order.
pub fn cka_profile<T: Scalar>(
    cfg: &ModelConfig,
    modulation: Modulation,
    params: &ParameterSet<T>,
    tasks: &[Task],
    budget: usize,
) -> Result<CkaProfile> {
    if budget < 2 {
        return Err(Error::Parameter(format!(
            "CKA sample budget must be >= 2, got {budget}"
        )));
    }
    if tasks.is_empty() {
        return Err(Error::Parameter("CKA profile needs at least one task".into()));
    }
    let names: Vec<String> = cfg.base.layers().into_iter().map(|l| l.name).collect();
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut plain_rows = vec![Vec::new(); names.len()];
        let mut modulated_rows = vec![Vec::new(); names.len()];
        let mut counts = vec![0usize; names.len()];
        for s in &task.query {
            if counts.iter().all(|&c| c >= budget) {
                break;
            }
            let plain = layer_activations(cfg, Modulation::None, params, &s.x_us, &s.y, &s.mask)?;
            let modulated = layer_activations(cfg, modulation, params, &s.x_us, &s.y, &s.mask)?;
            for l in 0..names.len() {
                let room = budget - counts[l];
                if room == 0 {
                    continue;
                }
                append_rows(&mut plain_rows[l], &plain[l], room)?;
                counts[l] += append_rows(&mut modulated_rows[l], &modulated[l], room)?;
            }
        }
        let scores = (0..names.len())
            .map(|l| linear_cka(&plain_rows[l], &modulated_rows[l], counts[l]))
            .collect::<Result<Vec<f64>>>()?;
        per_task.push(scores);
    }
    let layers = names
        .into_iter()
        .enumerate()
        .map(|(l, layer)| {
            let vals: Vec<f64> = per_task.iter().map(|t| t[l]).collect();
            let (mean, std) = mean_std(&vals);
            CkaLayer { layer, mean, std }
        })
        .collect();
    Ok(CkaProfile { layers, per_task })
}
