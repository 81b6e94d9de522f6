use super::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    /// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
    SgdMomentum { lr: f32, momentum: f32, weight_decay: f32 },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        OptimizerConfig::SgdMomentum {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f32 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state, one slot per parameter in the order `params` are passed.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update with learning rate `lr` (the schedule's current value).
    pub fn step(&mut self, params: Vec<&mut Param>, lr: f32) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::SgdMomentum {
                momentum,
                weight_decay,
                ..
            } => {
                for (p, v) in params.into_iter().zip(&mut self.first) {
                    for ((w, &g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                        let g = g + weight_decay * *w;
                        *vel = momentum * *vel + g;
                        *w -= lr * *vel;
                    }
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + weight_decay * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Multiply the learning rate by `factor` every `interval` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub factor: f32,
    pub interval: usize,
}

impl StepDecay {
    pub fn lr_at(&self, base: f32, epoch: usize) -> f32 {
        if self.interval == 0 {
            return base;
        }
        base * self.factor.powi((epoch / self.interval) as i32)
    }
}
