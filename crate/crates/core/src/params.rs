//! Named parameter collections grouped by sub-network.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// The sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Classifier,
    DecoderDay,
    DecoderNight,
    DiscDay,
    DiscNight,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder,
        ParamGroup::Classifier,
        ParamGroup::DecoderDay,
        ParamGroup::DecoderNight,
        ParamGroup::DiscDay,
        ParamGroup::DiscNight,
    ];

    /// Groups updated by the generator-side optimizer step.
    pub const GENERATOR: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Classifier,
        ParamGroup::DecoderDay,
        ParamGroup::DecoderNight,
    ];

    pub const DISCRIMINATOR: [ParamGroup; 2] = [ParamGroup::DiscDay, ParamGroup::DiscNight];

    pub fn is_discriminator(self) -> bool {
        matches!(self, ParamGroup::DiscDay | ParamGroup::DiscNight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.ids().filter(|&id| groups.contains(&self.group(id))).collect()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self, groups: &[ParamGroup]) -> usize {
        self.entries
            .iter()
            .filter(|e| groups.contains(&e.group))
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over names and the exact bit patterns of the given groups.
    pub fn hash_groups(&self, groups: &[ParamGroup]) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash_all(&self) -> String {
        self.hash_groups(&ParamGroup::ALL)
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` means "no gradient reached it".
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Largest absolute gradient entry over the given parameters (0 when none reached).
    pub fn max_abs(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|t| t.data().iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, ids: &[ParamId], s: f64) {
        for &id in ids {
            if let Some(g) = self.get_mut(id) {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}
