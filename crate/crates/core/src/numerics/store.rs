use super::Tensor;

/// Handle to a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Named trainable tensors that persist across graph rebuilds. Gradients
/// accumulate in `value.grad` until [`ParameterStore::zero_grads`].
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.requires_grad = true;
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Adds `delta * scale` into the gradient of `id`, allocating it if absent.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let value = &mut self.params[id.0].value;
        let grad = grad_slot(value);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

fn grad_slot(value: &mut Tensor) -> &mut Vec<f64> {
    if value.grad.is_none() {
        value.grad = Some(vec![0.0; value.data.len()]);
    }
    value.grad.as_mut().unwrap()
}
