use crate::error::Result;
use crate::model::ParameterSet;
use crate::numerics::{ParamContainer, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments persist across epochs and share the
/// layout of the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: ParameterSet<T>,
    pub v: ParameterSet<T>,
    /// Updates applied so far.
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One update at rate `lr`. Moment arithmetic runs in `f64`.
    pub fn update(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>, lr: f64) -> Result<()> {
        params.check_layout(grads)?;
        params.check_layout(&self.m)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (ms, vs) = (self.m.visit_mut(), self.v.visit_mut());
        for (((p, g), m), v) in params.visit_mut().into_iter().zip(grads.visit()).zip(ms).zip(vs) {
            let slots = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((pi, &gi), mi), vi) in slots {
                let gi = gi.to_f64();
                let m_new = ADAM_BETA1 * mi.to_f64() + (1.0 - ADAM_BETA1) * gi;
                let v_new = ADAM_BETA2 * vi.to_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
                let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + ADAM_EPS);
                *pi = T::from_f64(pi.to_f64() - step);
            }
        }
        Ok(())
    }
}
