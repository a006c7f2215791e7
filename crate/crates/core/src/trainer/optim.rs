use std::collections::BTreeMap;

use crate::tensor::checkpoint::{Checkpoint, CheckpointEntry};
use crate::tensor::{ParamStore, Tensor};

/// L2 norm over the gradients of every trainable parameter.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for id in store.trainable_ids() {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                for v in g.data_mut() {
                    *v *= k;
                }
            }
        }
    }
    norm
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else { continue };
            let n = g.numel();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers as checkpoint entries, plus the step count in `meta`.
    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        for (prefix, map) in [(M_PREFIX, &self.m), (V_PREFIX, &self.v)] {
            for (name, buf) in map {
                let tensor = Tensor::new(&[buf.len()], buf.clone()).expect("flat buffer");
                ckpt.entries
                    .insert(format!("{prefix}{name}"), CheckpointEntry { tensor, frozen: false });
            }
        }
        ckpt.meta.insert("optim.t".into(), self.t.to_string());
    }

    /// Restores state written by [`Adam::save_into`] and removes those
    /// entries from `ckpt`.
    pub fn restore_from(&mut self, ckpt: &mut Checkpoint) -> Result<(), String> {
        self.t = ckpt
            .meta
            .get("optim.t")
            .map(|s| s.parse::<u64>().map_err(|e| e.to_string()))
            .transpose()?
            .unwrap_or(0);
        let names: Vec<String> = ckpt
            .entries
            .keys()
            .filter(|k| k.starts_with("optim."))
            .cloned()
            .collect();
        for key in names {
            let entry = ckpt.entries.remove(&key).expect("listed above");
            if let Some(name) = key.strip_prefix(M_PREFIX) {
                self.m.insert(name.to_string(), entry.tensor.into_data());
            } else if let Some(name) = key.strip_prefix(V_PREFIX) {
                self.v.insert(name.to_string(), entry.tensor.into_data());
            } else {
                return Err(format!("unknown optimizer entry `{key}`"));
            }
        }
        Ok(())
    }
}
