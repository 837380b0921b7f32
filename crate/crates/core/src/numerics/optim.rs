use super::{ParamGrads, ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.0 }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = |_| Vec::new();
        let n = store.len();
        Self { config, step: 0, first: (0..n).map(zeros).collect(), second: (0..n).map(zeros).collect() }
    }

    pub fn update<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>) {
        self.step += 1;
        let c = self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if self.first[i].is_empty() {
                self.first[i] = vec![0.0; g.len()];
                self.second[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let p = store.get_mut(id);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64() * scale;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let upd = c.learning_rate * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *w -= S::of(upd);
            }
        }
    }
}
