use crate::params::ParamSet;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{NumError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out per parameter in
/// ParamSet order.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let m = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        let v = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update from the gradient buffers currently held by `params`.
    /// Parameters without a gradient (e.g. unreached by the loss) and
    /// non-trainable parameters are left untouched; the step counter always
    /// advances by exactly one.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = &p.grad {
                if p.trainable && !g.all_finite() {
                    return Err(NumError::NonFiniteGradient {
                        name: p.name.clone(),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let lr = T::from_f64(self.config.learning_rate);
        let eps = T::from_f64(self.config.epsilon);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);

        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = match &p.grad {
                Some(g) => g,
                None => continue,
            };
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = p.value.data_mut();
            for ((mi, vi), (wi, &gi)) in m.iter_mut().zip(v).zip(w.iter_mut().zip(g.data())) {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *wi = *wi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
