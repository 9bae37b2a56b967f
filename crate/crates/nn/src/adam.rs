//! Adam optimizer with checkpointable state.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use hdrvid_core::Real;

use crate::error::NnError;
use crate::params::{ParamId, ParamSet};

/// Hyper-parameters. Defaults are the values used by every training stage:
/// learning rate 1e-4, betas (0.9, 0.999).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
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

struct Moments<T: Real> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Adam state for one parameter set. Moment buffers are allocated lazily the
/// first time a parameter receives a gradient and are keyed by [`ParamId`],
/// so the optimizer survives partial update steps (e.g. a loss that only
/// touches a sub-network).
pub struct Adam<T: Real> {
    config: AdamConfig,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from `(parameter, gradient)` pairs. Non-trainable
    /// parameters must not appear here; that is a caller bug.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(ParamId, ArrayD<T>)]) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        let bias1 = one - b1.powi(t);
        let bias2 = one - b2.powi(t);
        for (id, grad) in grads {
            assert!(
                params.trainable(*id),
                "gradient supplied for frozen parameter `{}`",
                params.name(*id)
            );
            let index = id_index(*id);
            if self.moments.len() <= index {
                self.moments.resize_with(index + 1, || None);
            }
            let slot = &mut self.moments[index];
            let moments = slot.get_or_insert_with(|| Moments {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
            });
            assert_eq!(
                moments.m.shape(),
                grad.shape(),
                "gradient shape changed between steps for `{}`",
                params.name(*id)
            );
            let value = params.get_mut(*id);
            ndarray::Zip::from(value)
                .and(&mut moments.m)
                .and(&mut moments.v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }

    /// Serializes moment buffers as named tensors (`adam.m.<param>` /
    /// `adam.v.<param>`) for embedding in a checkpoint. Only parameters that
    /// have received at least one update appear.
    pub fn export_state(&self, params: &ParamSet<T>) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        for (id, name, _, _) in params.iter() {
            if let Some(Some(moments)) = self.moments.get(id_index(id)) {
                out.push((format!("adam.m.{name}"), moments.m.clone()));
                out.push((format!("adam.v.{name}"), moments.v.clone()));
            }
        }
        out
    }

    /// Restores moment buffers exported by [`Adam::export_state`]. The step
    /// count travels in checkpoint metadata and is restored separately.
    pub fn restore_state(
        &mut self,
        params: &ParamSet<T>,
        step: u64,
        tensors: &[(String, ArrayD<T>)],
    ) -> Result<(), NnError> {
        self.step = step;
        self.moments.clear();
        for (name, tensor) in tensors {
            let (kind, param_name) = match name
                .strip_prefix("adam.m.")
                .map(|rest| ('m', rest))
                .or_else(|| name.strip_prefix("adam.v.").map(|rest| ('v', rest)))
            {
                Some(split) => split,
                None => {
                    return Err(NnError::CorruptCheckpoint(format!(
                        "unexpected optimizer tensor `{name}`"
                    )))
                }
            };
            let id = params.id(param_name)?;
            if params.get(id).shape() != tensor.shape() {
                return Err(NnError::ShapeMismatch {
                    context: "optimizer state restore",
                    expected: params.get(id).shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
            let index = id_index(id);
            if self.moments.len() <= index {
                self.moments.resize_with(index + 1, || None);
            }
            let slot = self.moments[index].get_or_insert_with(|| Moments {
                m: ArrayD::zeros(tensor.raw_dim()),
                v: ArrayD::zeros(tensor.raw_dim()),
            });
            match kind {
                'm' => slot.m = tensor.clone(),
                _ => slot.v = tensor.clone(),
            }
        }
        Ok(())
    }
}

fn id_index(id: ParamId) -> usize {
    id.index()
}
