use super::{ParamContainer, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient `(f(p+h) − f(p−h)) / 2h`, one scalar at a
/// time, in the container's visiting order.
pub fn finite_difference_grad<P, F>(mut f: F, params: &P, h: f64) -> Result<Vec<Tensor<f64>>>
where
    P: ParamContainer<f64> + Clone,
    F: FnMut(&P) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let shapes: Vec<Vec<usize>> = params.visit().iter().map(|t| t.shape().to_vec()).collect();
    let mut grads = Vec::with_capacity(shapes.len());
    for (ti, shape) in shapes.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.visit()[ti].data()[i];
            probe.visit_mut()[ti].data_mut()[i] = orig + h;
            let up = eval(&mut f, &probe)?;
            probe.visit_mut()[ti].data_mut()[i] = orig - h;
            let down = eval(&mut f, &probe)?;
            probe.visit_mut()[ti].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(shape.clone(), g)?);
    }
    Ok(grads)
}

fn eval<P, F: FnMut(&P) -> Result<f64>>(f: &mut F, p: &P) -> Result<f64> {
    let v = f(p)?;
    if !v.is_finite() {
        return Err(Error::non_finite("finite-difference evaluation"));
    }
    Ok(v)
}

/// Largest `|a−b| / max(|a|, |b|, floor)` over matched entries.
pub fn max_relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `‖a−b‖₂ / max(‖b‖₂, floor)` over all entries.
pub fn relative_l2_error(a: &[Tensor<f64>], b: &[Tensor<f64>], floor: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            num += (p - q) * (p - q);
            den += q * q;
        }
    }
    num.sqrt() / den.sqrt().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new([1], vec![3.0]).unwrap();
        let g = finite_difference_grad(|t: &Tensor<f64>| Ok(t.data()[0] * t.data()[0]), &p, 1e-5).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_gives_zero() {
        let p = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_difference_grad(|_: &Tensor<f64>| Ok(4.2), &p, 1e-5).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let p = Tensor::new([1], vec![0.0]).unwrap();
        let r = finite_difference_grad(|_: &Tensor<f64>| Ok(f64::NAN), &p, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert!(finite_difference_grad(|_: &Tensor<f64>| Ok(0.0), &p, 0.0).is_err());
    }
}
