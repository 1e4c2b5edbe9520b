use serde::{Deserialize, Serialize};

/// A trainable tensor stored flat, with its gradient accumulator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    grad: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Gradient buffer, allocated on first use after deserialization.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.value.len(), 0.0);
    }

    /// Value and gradient together, for optimizers.
    pub fn split_mut(&mut self) -> (&mut [f64], &[f64]) {
        self.grad_mut();
        (&mut self.value, &self.grad)
    }
}

pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    /// Bit patterns of every parameter, for exact before/after comparisons.
    fn snapshot(&self) -> Vec<u64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend(p.value.iter().map(|v| v.to_bits())));
        out
    }

    fn grads_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |p| ok &= p.grad().iter().all(|g| g.is_finite()));
        ok
    }
}
