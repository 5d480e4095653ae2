//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters and per-parameter moment buffers.
///
/// `m`/`v` are allocated lazily on the first step and keep the shape of the
/// parameter they track; `t` counts completed steps.
#[derive(Clone, Debug)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.epsilon = epsilon;
        self
    }

    /// One Adam update over a fixed-order parameter list.
    ///
    /// `grads[i] = None` means the loss did not touch parameter `i` this step;
    /// its moments still decay, matching an explicit zero gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "adam_step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "adam_step: state tracks {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim(
                        "adam_step",
                        format!(
                            "param {i} shape {:?} vs grad shape {:?}",
                            p.shape(),
                            g.shape()
                        ),
                    ));
                }
            }
        }

        self.t += 1;
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let one_m_b1 = T::of_f64(1.0 - self.beta1);
        let one_m_b2 = T::of_f64(1.0 - self.beta2);
        let corr1 = T::of_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = T::of_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = T::of_f64(self.lr);
        let eps = T::of_f64(self.epsilon);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            match grad {
                Some(g) => {
                    for ((p, (mi, vi)), &gi) in
                        pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())).zip(g.data())
                    {
                        *mi = b1 * *mi + one_m_b1 * gi;
                        *vi = b2 * *vi + one_m_b2 * gi * gi;
                        let m_hat = *mi * corr1;
                        let v_hat = *vi * corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                None => {
                    // Zero gradient: moments decay, update applied consistently.
                    for (p, (mi, vi)) in pd.iter_mut().zip(md.iter_mut().zip(vd.iter_mut())) {
                        *mi = b1 * *mi;
                        *vi = b2 * *vi;
                        let m_hat = *mi * corr1;
                        let v_hat = *vi * corr2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
