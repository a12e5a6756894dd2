//! Named parameter storage shared by the backbone, adapters, hyper-network
//! and contrastive head.
//!
//! Every tensor lives in exactly one store slot with a name, a trainable
//! flag and a group label. The training loop, the checkpoint format and the
//! gradient checker all address parameters through this table, which keeps
//! the "every trainable scalar belongs to exactly one group" audit trivial.

use crate::tape::{ParamKey, StoreKind, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    HypernetTrunk,
    HypernetHead,
    SharedB,
    SharedA,
    PerRoleAdapter,
    ContrastiveHead,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::HypernetTrunk => "hypernet_trunk",
            ParamGroup::HypernetHead => "hypernet_head",
            ParamGroup::SharedB => "shared_b",
            ParamGroup::SharedA => "shared_a",
            ParamGroup::PerRoleAdapter => "per_role_adapter",
            ParamGroup::ContrastiveHead => "contrastive_head",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    kind: StoreKind,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new(kind: StoreKind) -> Self {
        ParamStore {
            kind,
            entries: Vec::new(),
        }
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
        group: ParamGroup,
    ) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
            group,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.entries[index].trainable = trainable;
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            store: self.kind,
            index,
        }
    }

    /// Record this parameter on a tape: trainable entries become parameter
    /// leaves, frozen ones plain leaves (gradients still flow through them).
    pub fn tape_node(&self, tape: &mut Tape, index: usize) -> crate::tape::NodeId {
        let e = &self.entries[index];
        if e.trainable {
            tape.param(self.key(index), e.value.clone())
        } else {
            tape.leaf(e.value.clone())
        }
    }

    /// Number of trainable scalars, optionally restricted to one group.
    pub fn trainable_scalars(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && group.map_or(true, |g| e.group == g))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// SHA-256 over the little-endian bytes of every tensor in a group.
    pub fn group_checksum(&self, group: ParamGroup) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if e.group == group {
                for v in e.value.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().into()
    }

    /// SHA-256 over every tensor in the store, trainable or not.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for e in &self.entries {
            for v in e.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trainable_scalars_by_group() {
        let mut s = ParamStore::new(StoreKind::Model);
        s.add("a", Tensor::zeros(2, 3), true, ParamGroup::SharedB);
        s.add("b", Tensor::zeros(4, 1), false, ParamGroup::Backbone);
        s.add("c", Tensor::zeros(1, 5), true, ParamGroup::HypernetTrunk);
        assert_eq!(s.trainable_scalars(None), 11);
        assert_eq!(s.trainable_scalars(Some(ParamGroup::SharedB)), 6);
        assert_eq!(s.trainable_scalars(Some(ParamGroup::Backbone)), 0);
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut s = ParamStore::new(StoreKind::Model);
        let i = s.add("a", Tensor::zeros(2, 2), false, ParamGroup::Backbone);
        let c1 = s.group_checksum(ParamGroup::Backbone);
        s.get_mut(i).data_mut()[0] = 1.0;
        let c2 = s.group_checksum(ParamGroup::Backbone);
        assert_ne!(c1, c2);
    }
}
