use super::{NumericsError, ParameterStore};

/// Adam with bias correction. First/second moment buffers are kept per
/// parameter, indexed the same way as the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter in the store. Gradients are read but
    /// left untouched; call [`ParameterStore::zero_grads`] afterwards.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<(), NumericsError> {
        let missing: Vec<String> = store
            .iter()
            .filter(|(_, p)| p.value.grad.is_none())
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(NumericsError::MissingGradients { names: missing });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, param) in store.iter_mut() {
            let idx = id.index();
            while self.m.len() <= idx {
                self.m.push(Vec::new());
                self.v.push(Vec::new());
            }
            let n = param.value.data.len();
            if self.m[idx].is_empty() {
                self.m[idx] = vec![0.0; n];
                self.v[idx] = vec![0.0; n];
            }
            let grad = param.value.grad.as_ref().expect("checked above");
            for i in 0..n {
                let g = grad[i];
                self.m[idx][i] = self.beta1 * self.m[idx][i] + (1.0 - self.beta1) * g;
                self.v[idx][i] = self.beta2 * self.v[idx][i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[idx][i] / bc1;
                let v_hat = self.v[idx][i] / bc2;
                param.value.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

impl super::ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}
