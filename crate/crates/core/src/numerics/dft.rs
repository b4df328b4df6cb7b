//! Unitary 2-D discrete Fourier transform.
//!
//! Both directions carry a `1/√(H·W)` factor, so the transform preserves
//! energy and `idft2` is the exact adjoint of `dft2`. The transform is
//! separable and each pass is a dense complex matrix product, which keeps it
//! generic over [`Scalar`] (including dual numbers) and supports any size.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

struct Twiddles<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    neg_sin: Vec<T>,
}

thread_local! {
    static TWIDDLES: RefCell<HashMap<(TypeId, usize), Rc<dyn Any>>> = RefCell::new(HashMap::new());
}

fn twiddles<T: Scalar>(n: usize) -> Rc<Twiddles<T>> {
    let key = (TypeId::of::<T>(), n);
    if let Some(hit) = TWIDDLES.with(|c| c.borrow().get(&key).cloned()) {
        return hit.downcast::<Twiddles<T>>().expect("twiddle cache type");
    }
    let norm = 1.0 / (n as f64).sqrt();
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let phase = 2.0 * PI * ((a * b) % n) as f64 / n as f64;
            cos.push(T::from_f64(phase.cos() * norm));
            sin.push(T::from_f64(phase.sin() * norm));
        }
    }
    let neg_sin = sin.iter().map(|&v| -v).collect();
    let tw = Rc::new(Twiddles { cos, sin, neg_sin });
    TWIDDLES.with(|c| c.borrow_mut().insert(key, tw.clone() as Rc<dyn Any>));
    tw
}

fn transform<T: Scalar>(re: &[T], im: &[T], h: usize, w: usize, inverse: bool) -> (Vec<T>, Vec<T>) {
    assert_eq!(re.len(), h * w);
    assert_eq!(im.len(), h * w);
    let tw = twiddles::<T>(w);
    // forward kernel e^{-iφ}: imaginary part -sin
    let (fi, nfi) = if inverse {
        (&tw.sin, &tw.neg_sin)
    } else {
        (&tw.neg_sin, &tw.sin)
    };
    let mut xr = vec![T::zero(); h * w];
    let mut xi = vec![T::zero(); h * w];
    let rm = (w, 1);
    T::gemm(h, w, w, re, rm, &tw.cos, rm, &mut xr, rm, false);
    T::gemm(h, w, w, im, rm, nfi, rm, &mut xr, rm, true);
    T::gemm(h, w, w, re, rm, fi, rm, &mut xi, rm, false);
    T::gemm(h, w, w, im, rm, &tw.cos, rm, &mut xi, rm, true);

    let th = twiddles::<T>(h);
    let (gi, ngi) = if inverse {
        (&th.sin, &th.neg_sin)
    } else {
        (&th.neg_sin, &th.sin)
    };
    let hm = (h, 1);
    let mut yr = vec![T::zero(); h * w];
    let mut yi = vec![T::zero(); h * w];
    T::gemm(h, h, w, &th.cos, hm, &xr, rm, &mut yr, rm, false);
    T::gemm(h, h, w, ngi, hm, &xi, rm, &mut yr, rm, true);
    T::gemm(h, h, w, &th.cos, hm, &xi, rm, &mut yi, rm, false);
    T::gemm(h, h, w, gi, hm, &xr, rm, &mut yi, rm, true);
    (yr, yi)
}

/// Forward unitary DFT of a complex `h×w` raster given as planes.
pub fn dft2<T: Scalar>(re: &[T], im: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    transform(re, im, h, w, false)
}

/// Inverse unitary DFT.
pub fn idft2<T: Scalar>(re: &[T], im: &[T], h: usize, w: usize) -> (Vec<T>, Vec<T>) {
    transform(re, im, h, w, true)
}

/// Applies the transform to every `(real, imag)` channel pair of an
/// `N×2×H×W` tensor.
pub fn dft2_tensor<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("dft2")?;
    if c != 2 {
        return Err(Error::shape("dft2", format!("expected 2 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        let base = s * 2 * plane;
        let re = &x.data()[base..base + plane];
        let im = &x.data()[base + plane..base + 2 * plane];
        let (yr, yi) = transform(re, im, h, w, inverse);
        out.extend(yr);
        out.extend(yi);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N²)-per-output DFT over all pixels, independent of the
    /// separable implementation.
    fn direct_dft(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut yr = vec![0.0; h * w];
        let mut yi = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ph = sign * 2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                        let (c, s) = (ph.cos(), ph.sin());
                        let (a, b) = (re[y * w + x], im[y * w + x]);
                        sr += a * c - b * s;
                        si += a * s + b * c;
                    }
                }
                yr[u * w + v] = sr * norm;
                yi[u * w + v] = si * norm;
            }
        }
        (yr, yi)
    }

    fn random(h: usize, w: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        (re, im)
    }

    #[test]
    fn roundtrip_16x16() {
        let (re, im) = random(16, 16, 3);
        let (fr, fi) = dft2(&re, &im, 16, 16);
        let (br, bi) = idft2(&fr, &fi, 16, 16);
        let err = re
            .iter()
            .zip(&br)
            .chain(im.iter().zip(&bi))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "roundtrip error {err}");
    }

    #[test]
    fn zeros_map_to_zeros() {
        let z = vec![0.0f64; 64];
        let (fr, fi) = dft2(&z, &z, 8, 8);
        assert!(fr.iter().chain(&fi).all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_is_flat_one_eighth() {
        let mut re = vec![0.0f64; 64];
        re[0] = 1.0;
        let im = vec![0.0; 64];
        let (fr, fi) = dft2(&re, &im, 8, 8);
        let (or, oi) = direct_dft(&re, &im, 8, 8, -1.0);
        for k in 0..64 {
            assert!((fr[k] - 0.125).abs() < 1e-14 && fi[k].abs() < 1e-14);
            assert!((or[k] - 0.125).abs() < 1e-14 && oi[k].abs() < 1e-14);
        }
    }

    #[test]
    fn matches_direct_oracle_on_non_square() {
        let (re, im) = random(6, 10, 9);
        let (fr, fi) = dft2(&re, &im, 6, 10);
        let (or, oi) = direct_dft(&re, &im, 6, 10, -1.0);
        let (br, bi) = idft2(&re, &im, 6, 10);
        let (ibr, ibi) = direct_dft(&re, &im, 6, 10, 1.0);
        for k in 0..60 {
            assert!((fr[k] - or[k]).abs() < 1e-12 && (fi[k] - oi[k]).abs() < 1e-12);
            assert!((br[k] - ibr[k]).abs() < 1e-12 && (bi[k] - ibi[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval() {
        let (re, im) = random(12, 20, 5);
        let (fr, fi) = dft2(&re, &im, 12, 20);
        let e_in: f64 = re.iter().chain(&im).map(|v| v * v).sum();
        let e_out: f64 = fr.iter().chain(&fi).map(|v| v * v).sum();
        assert!(((e_in - e_out) / e_in).abs() < 1e-10);
    }
}
