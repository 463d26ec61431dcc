use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint;
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Multiplier on the scheduled learning rate (layer-wise decay).
    pub lr_scale: f32,
    pub trainable: bool,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Tensors of rank ≤ 1 are excluded from weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let decay = value.ndim() > 1;
        self.add_with(name, value, decay)
    }

    pub fn add_with(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            decay,
            lr_scale: 1.0,
            trainable: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of learned scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = (max_norm / norm) as f32;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= scale;
                }
            }
        }
        norm
    }

    /// Appends every parameter of `other`, prefixing names with `prefix`.
    pub fn merge(&mut self, prefix: &str, other: ParamStore) -> Vec<ParamId> {
        other
            .params
            .into_iter()
            .map(|p| {
                let id = self.add_with(format!("{prefix}{}", p.name), p.value, p.decay);
                let dst = self.get_mut(id);
                dst.lr_scale = p.lr_scale;
                dst.trainable = p.trainable;
                id
            })
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.named_tensors())
    }

    /// Overwrites values of all parameters whose names appear in `tensors`.
    /// Returns the number of tensors loaded. Shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<usize> {
        let mut loaded = 0;
        for (name, t) in tensors {
            if let Some(id) = self.id(name) {
                let p = &mut self.params[id.0];
                if p.value.shape() != t.shape() {
                    return Err(NnError::shape("load_tensors", p.value.shape(), t.shape()));
                }
                p.value = t.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// Loads a checkpoint, requiring every parameter in this store to be present.
    pub fn load_strict(&mut self, path: &Path) -> Result<()> {
        let tensors = checkpoint::load(path)?;
        self.load_tensors(&tensors)?;
        let names: std::collections::HashSet<&str> =
            tensors.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(missing) = self.params.iter().find(|p| !names.contains(p.name.as_str())) {
            return Err(NnError::MissingParam(missing.name.clone()));
        }
        Ok(())
    }
}
