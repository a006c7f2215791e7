use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Result, Tensor, TensorError};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    /// Dotted path, e.g. `lm.layers.0.attn.q.weight`.
    pub name: String,
    pub tensor: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen parameters never receive gradients or optimizer updates.
    pub frozen: bool,
}

/// Flat registry of every parameter in a model, addressable by id or path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            grad: None,
            frozen,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in path order rather than registration order.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.by_name.values().map(|&id| (id, &self.params[id.0]))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Adds `grad` into the parameter's gradient buffer. Frozen parameters
    /// are skipped.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                p.grad = Some(
                    Tensor::new(p.tensor.shape(), grad.to_vec())
                        .expect("gradient shape matches parameter"),
                );
            }
        }
    }

    /// SHA-256 over (name, shape, bytes) of every parameter selected by `filter`,
    /// in path order.
    pub fn digest(&self, mut filter: impl FnMut(&Parameter) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for (_, p) in self.iter_sorted() {
            if !filter(p) {
                continue;
            }
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.tensor.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn frozen_digest(&self) -> [u8; 32] {
        self.digest(|p| p.frozen)
    }

    /// Per-parameter hash; lets a trainer report exactly which entries moved.
    pub fn per_param_digest(&self) -> BTreeMap<String, [u8; 32]> {
        self.iter_sorted()
            .map(|(_, p)| {
                let mut h = Sha256::new();
                h.update(p.tensor.to_le_bytes());
                (p.name.clone(), h.finalize().into())
            })
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]), false).unwrap();
        assert_eq!(
            s.add("a", Tensor::zeros(&[1]), false).unwrap_err(),
            TensorError::DuplicateParameter("a".into())
        );
    }

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut s = ParamStore::new();
        let f = s.add("f", Tensor::zeros(&[2]), true).unwrap();
        let t = s.add("t", Tensor::zeros(&[2]), false).unwrap();
        s.accumulate_grad(f, &[1.0, 1.0]);
        s.accumulate_grad(t, &[1.0, 2.0]);
        s.accumulate_grad(t, &[1.0, 2.0]);
        assert!(s.get(f).grad.is_none());
        assert_eq!(s.get(t).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        assert_eq!(s.num_trainable(), 2);
    }

    #[test]
    fn digest_tracks_contents() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]), true).unwrap();
        let before = s.frozen_digest();
        s.get_mut(a).tensor.data_mut()[0] = 1.0;
        assert_ne!(before, s.frozen_digest());
    }
}
