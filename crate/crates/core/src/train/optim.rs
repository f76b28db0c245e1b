//! Adam without weight decay.

use crate::model::Module;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Update every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, model: &mut dyn Module) {
        let mut params = model.params_mut();
        params.retain(|(_, p)| p.trainable);
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, (_, p)) in params.into_iter().enumerate() {
            let g = p.grad.as_slice().expect("standard layout").to_vec();
            let w = p.value.as_slice_mut().expect("standard layout");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..w.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;

    struct Quad(Param);

    impl Module for Quad {
        fn params(&self) -> Vec<(String, &Param)> {
            vec![("w".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first update exactly lr·sign(g) (up to eps).
        let mut q = Quad(Param::filled(&[2], 1.0));
        q.0.g_mut().copy_from_slice(&[3.0, -0.5]);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut q);
        assert!((q.0.v()[0] - 0.9).abs() < 1e-8);
        assert!((q.0.v()[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut q = Quad(Param::filled(&[1], 5.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let w = q.0.v()[0];
            q.0.g_mut()[0] = 2.0 * (w - 2.0);
            opt.step(&mut q);
        }
        assert!((q.0.v()[0] - 2.0).abs() < 1e-2);
    }
}
