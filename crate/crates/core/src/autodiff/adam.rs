use super::params::ParamStore;
use crate::tensor::Tensor2D;

/// Adam with bias correction. Moments live here and persist across steps;
/// only trainable parameters are touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<Option<(Tensor2D, Tensor2D)>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, moments: Vec::new() }
    }

    /// Defaults `(0.9, 0.999)` and `eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let grad = store.grad(id).clone();
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (Tensor2D::zeros(grad.rows(), grad.cols()), Tensor2D::zeros(grad.rows(), grad.cols())));
            let value = store.value_mut(id);
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
