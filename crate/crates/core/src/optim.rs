//! Adam with L2 weight decay folded into the gradient and step-wise learning
//! rate decay.

use lpdet_autodiff::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update. `grads` follows the store order; `None` means the
    /// parameter received no gradient this step and is only decayed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        let c = &self.config;
        let lr = c.lr_at(self.steps);
        self.steps += 1;
        let t = self.steps as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (k, value) in params.values_mut().enumerate() {
            let g = grads[k].as_deref();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in value.data_mut().iter_mut().enumerate() {
                let grad = g.map_or(0.0, |g| g[i]) + c.weight_decay * *w as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad * grad;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lpdet_autodiff::Tensor;

    #[test]
    fn schedule() {
        let c = AdamConfig { lr: 1.0, milestones: vec![10, 20], ..Default::default() };
        assert_eq!(c.lr_at(9), 1.0);
        assert!((c.lr_at(10) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() }, &p);
        adam.step(&mut p, &[Some(vec![3.0, -0.5])]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![3], vec![0.3f32, -7.0, 1e-3]).unwrap()).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &p);
        adam.step(&mut p, &[Some(vec![1.0, 2.0, 3.0])]);
        assert_eq!(p, before);
    }
}
