//! Adam with decoupled weight decay.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Forgets the moment estimates of the given parameter positions.
    pub fn reset_slots(&mut self, slots: &[usize]) {
        for &i in slots {
            if i < self.m.len() {
                self.m[i].clear();
                self.v[i].clear();
                self.steps[i] = 0;
            }
        }
    }

    /// Updates every parameter that carries a gradient:
    /// `p ← p − lr·wd·p`, then the bias-corrected Adam step.
    ///
    /// Moment state is kept per position in `params`; it restarts whenever
    /// a parameter's size changes (after a grid extension, for instance).
    /// Returns the number of scalars updated.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> usize {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
            self.steps.resize(params.len(), 0);
        }
        let mut updated = 0;
        for (i, p) in params.into_iter().enumerate() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            if self.m[i].len() != p.len() {
                self.m[i] = vec![0.0; p.len()];
                self.v[i] = vec![0.0; p.len()];
                self.steps[i] = 0;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(&grad).enumerate() {
                *w -= self.lr * self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            updated += p.len();
        }
        updated
    }
}
