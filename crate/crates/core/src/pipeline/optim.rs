use std::collections::BTreeMap;

use super::config::{OptimizerKind, TrainConfig};
use crate::nets::{Gradients, WeightBundle};

/// First and second moment buffers (SGD keeps its velocity in `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(bundle: &WeightBundle) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = bundle
            .entries
            .iter()
            .map(|(k, a)| (k.clone(), vec![0.0; a.len()]))
            .collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update to every entry accepted by `trainable`.
    pub fn apply(
        &mut self,
        bundle: &mut WeightBundle,
        grads: &Gradients,
        config: &TrainConfig,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let lr = config.learning_rate;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, param) in bundle.entries.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let g = &grads.entries[name];
            let m = self.m.get_mut(name).expect("moment buffer");
            match config.optimizer {
                OptimizerKind::Adam => {
                    let v = self.v.get_mut(name).expect("moment buffer");
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        param.data[i] -= lr * mhat / (vhat.sqrt() + config.epsilon);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..g.len() {
                        m[i] = config.momentum * m[i] + g[i];
                        param.data[i] -= lr * m[i];
                    }
                }
            }
        }
    }
}
