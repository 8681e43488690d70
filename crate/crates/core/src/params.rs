//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ownership group of a parameter. Training stages select groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Frozen visual encoder.
    Encoder,
    /// Frozen decoder base: embeddings and projection weights.
    DecoderBase,
    /// Low-rank adapters inside the decoder (modality-routed or plain).
    Lora,
    QLadder,
    VlAdapter,
}

impl ParamGroup {
    pub fn is_frozen(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::DecoderBase)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::DecoderBase => "decoder_base",
            ParamGroup::Lora => "lora",
            ParamGroup::QLadder => "qladder",
            ParamGroup::VlAdapter => "vl_adapter",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

impl Param {
    pub fn frozen(&self) -> bool {
        self.group.is_frozen()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name. Frozen groups never require grad.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let tensor = tensor.with_requires_grad(!group.is_frozen());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            tensor,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces parameter values, keeping the shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.len() != values.len() {
            return Err(Error::Shape(format!(
                "cannot assign {} values to parameter of shape {:?}",
                values.len(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Enables gradients exactly for the non-frozen params in `groups`.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for p in &mut self.params {
            p.tensor.requires_grad = !p.group.is_frozen() && groups.contains(&p.group);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds `scale * grad` from a backward sweep into each bound parameter.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients, scale: f64) {
        for (id, var) in tape.param_bindings() {
            if let Some(g) = grads.get(var) {
                let t = &mut self.params[id.0].tensor;
                if !t.requires_grad {
                    continue;
                }
                if scale == 1.0 {
                    t.accumulate_grad(g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    t.accumulate_grad(&scaled);
                }
            }
        }
    }

    pub fn count(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.tensor.len()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.count(|p| p.group == group)
    }

    /// SHA-256 over names, shapes and value bits of every param in `groups`.
    pub fn content_hash(&self, groups: &[ParamGroup]) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn frozen_hash(&self) -> String {
        self.content_hash(&[ParamGroup::Encoder, ParamGroup::DecoderBase])
    }

    /// Snapshot of all values for exact before/after comparison.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.data().to_vec()).collect()
    }

    pub fn matches_snapshot(&self, id: ParamId, snap: &[Vec<f64>]) -> bool {
        self.params[id.0]
            .tensor
            .data()
            .iter()
            .zip(&snap[id.0])
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_groups_never_require_grad() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", ParamGroup::Encoder, Tensor::zeros(&[2, 2]));
        let b = s.add("ad.w", ParamGroup::VlAdapter, Tensor::zeros(&[2, 2]));
        assert!(!s.tensor(a).requires_grad);
        assert!(s.tensor(b).requires_grad);
        s.set_trainable(&[ParamGroup::Encoder, ParamGroup::VlAdapter]);
        assert!(!s.tensor(a).requires_grad);
        s.set_trainable(&[]);
        assert!(!s.tensor(b).requires_grad);
    }

    #[test]
    fn hash_changes_with_content() {
        let mut s = ParamStore::new();
        let a = s.add("enc.w", ParamGroup::Encoder, Tensor::zeros(&[2]));
        let h0 = s.frozen_hash();
        s.set_values(a, &[0.0, 1e-300]).unwrap();
        assert_ne!(h0, s.frozen_hash());
    }
}
