use super::Parameters;

/// Adam with bias correction. Moment buffers follow the parameter visiting
/// order of the module it is stepped on, so one optimizer serves one module.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Parameters) {
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (first, second) = (&mut self.first, &mut self.second);
        let mut k = 0;
        module.visit_mut(&mut |p| {
            if first.len() <= k {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut first[k], &mut second[k]);
            let (value, grad) = p.split_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            k += 1;
        });
    }
}
