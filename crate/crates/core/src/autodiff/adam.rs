use super::AutodiffError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    name: String,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction over a fixed list of named parameter groups.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    groups: Vec<Moments>,
    step_count: u64,
}

impl AdamState {
    /// One zero-initialized moment pair per `(name, len)` group.
    pub fn new<S: Into<String>>(config: AdamConfig, groups: impl IntoIterator<Item = (S, usize)>) -> Self {
        let groups = groups
            .into_iter()
            .map(|(name, len)| Moments {
                name: name.into(),
                first: vec![0.0; len],
                second: vec![0.0; len],
            })
            .collect();
        Self {
            config,
            groups,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Change the step size; moment estimates are kept.
    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.config.learning_rate = learning_rate;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, group: usize) -> &[f64] {
        &self.groups[group].first
    }

    pub fn second_moment(&self, group: usize) -> &[f64] {
        &self.groups[group].second
    }

    /// Apply one update to every group. Nothing is modified if any gradient
    /// is non-finite or any length disagrees.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), AutodiffError> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(AutodiffError::GroupShape {
                group: "<all>".into(),
                expected: self.groups.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((group, p), g) in self.groups.iter().zip(params.iter()).zip(grads) {
            let expected = group.first.len();
            if p.len() != expected || g.len() != expected {
                return Err(AutodiffError::GroupShape {
                    group: group.name.clone(),
                    expected,
                    got: if p.len() != expected { p.len() } else { g.len() },
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    group: group.name.clone(),
                });
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for ((group, p), g) in self.groups.iter_mut().zip(params.iter_mut()).zip(grads) {
            for (((w, g), m), v) in p
                .iter_mut()
                .zip(g.iter())
                .zip(group.first.iter_mut())
                .zip(group.second.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
