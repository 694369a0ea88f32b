//! Voter registry: a merkle tree of registered node keys.
//!
//! Each active voter owns one leaf holding the commitment of its public
//! key. Quitting tombstones the leaf in place rather than restructuring
//! the tree, so other voters' membership openings stay valid within a
//! round. The registry root is committed into the global state's system
//! region and pinned on every native chain.

use crate::hash::Digest;
use crate::keys::PublicKey;
use crate::merkle::{LeafValue, LeafWitness, MerkleOpening, MtiPath, StateTree};
use crate::tx::NodeId;
use std::collections::BTreeMap;
use thiserror::Error;

/// Registry tree depth: up to 2^8 voters per run.
pub const REGISTRY_DEPTH: usize = 8;

/// Reserved leaf value marking a quit voter. Distinct from both the empty
/// leaf and any key commitment (commitments are hash outputs).
pub const TOMBSTONE: LeafValue = LeafValue([0xff; 32]);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("node {0:?} is already registered")]
    DuplicateVoter(NodeId),
    #[error("node {0:?} is not an active voter")]
    UnregisteredVoter(NodeId),
    #[error("registry is full")]
    Full,
}

/// Merkle-tracked set of active voters.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VoterRegistry {
    tree: StateTree,
    active: BTreeMap<NodeId, (MtiPath, PublicKey)>,
    next_slot: u64,
}

impl Default for VoterRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl VoterRegistry {
    pub fn new() -> VoterRegistry {
        VoterRegistry {
            tree: StateTree::new(REGISTRY_DEPTH, 2).expect("fixed geometry"),
            active: BTreeMap::new(),
            next_slot: 0,
        }
    }

    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn voter_count(&self) -> u32 {
        self.active.len() as u32
    }

    pub fn is_active(&self, node: NodeId) -> bool {
        self.active.contains_key(&node)
    }

    pub fn public_key(&self, node: NodeId) -> Option<&PublicKey> {
        self.active.get(&node).map(|(_, pk)| pk)
    }

    pub fn slot_path(&self, node: NodeId) -> Option<&MtiPath> {
        self.active.get(&node).map(|(p, _)| p)
    }

    /// Active voters in id order.
    pub fn active_voters(&self) -> impl Iterator<Item = (NodeId, &PublicKey)> {
        self.active.iter().map(|(n, (_, pk))| (*n, pk))
    }

    /// Append the voter at the next free slot. The returned witness is the
    /// registry-tree transition carried by the registration transaction.
    pub fn register_voter(
        &self,
        node: NodeId,
        pubkey: PublicKey,
    ) -> Result<(VoterRegistry, LeafWitness), RegistryError> {
        if self.active.contains_key(&node) {
            return Err(RegistryError::DuplicateVoter(node));
        }
        if self.next_slot >= 1 << REGISTRY_DEPTH {
            return Err(RegistryError::Full);
        }
        let path = MtiPath::from_slot(self.next_slot, REGISTRY_DEPTH);
        let value = LeafValue::from_digest(pubkey.commitment());
        let (tree, witness) = self.tree.update(&path, value).expect("slot path is valid");
        let mut active = self.active.clone();
        active.insert(node, (path, pubkey));
        Ok((
            VoterRegistry {
                tree,
                active,
                next_slot: self.next_slot + 1,
            },
            witness,
        ))
    }

    /// Tombstone the voter's leaf (voter quit). The slot is not reused.
    pub fn deregister_voter(
        &self,
        node: NodeId,
    ) -> Result<(VoterRegistry, LeafWitness), RegistryError> {
        let (path, _) = self
            .active
            .get(&node)
            .ok_or(RegistryError::UnregisteredVoter(node))?;
        let (tree, witness) = self.tree.update(path, TOMBSTONE).expect("slot path is valid");
        let mut active = self.active.clone();
        active.remove(&node);
        Ok((
            VoterRegistry {
                tree,
                active,
                next_slot: self.next_slot,
            },
            witness,
        ))
    }

    /// Opening of the voter's key-commitment leaf against the current root.
    pub fn membership_opening(&self, node: NodeId) -> Result<MerkleOpening, RegistryError> {
        let (path, _) = self
            .active
            .get(&node)
            .ok_or(RegistryError::UnregisteredVoter(node))?;
        Ok(self.tree.opening(path).expect("slot path is valid"))
    }

    /// Replay a registration or quit transition observed in a finalized
    /// block, keeping this replica in sync.
    pub fn apply_change(&self, node: NodeId, witness: &LeafWitness, pubkey: Option<PublicKey>) -> VoterRegistry {
        let mut next = self.clone();
        if witness.new_value == TOMBSTONE {
            next.active.remove(&node);
        } else if let Some(pk) = pubkey {
            next.active.insert(node, (witness.path.clone(), pk));
            let slot_plus = slot_of(&witness.path) + 1;
            next.next_slot = next.next_slot.max(slot_plus);
        }
        let (tree, _) = next
            .tree
            .update(&witness.path, witness.new_value)
            .expect("witness path is valid");
        next.tree = tree;
        next
    }
}

fn slot_of(path: &MtiPath) -> u64 {
    path.0.iter().fold(0u64, |acc, &b| (acc << 1) | b as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::Keypair;
    use crate::merkle::verify_opening;

    fn kp(i: u32) -> Keypair {
        Keypair::from_seed(format!("reg-test-{i}").as_bytes())
    }

    #[test]
    fn register_changes_root() {
        let reg = VoterRegistry::new();
        let empty_root = reg.root();
        let (reg, w) = reg.register_voter(NodeId(0), kp(0).public().clone()).unwrap();
        assert_ne!(reg.root(), empty_root);
        assert_eq!(w.root_after().unwrap(), reg.root());
        assert_eq!(w.root_before().unwrap(), empty_root);
    }

    #[test]
    fn duplicate_rejected() {
        let reg = VoterRegistry::new();
        let (reg, _) = reg.register_voter(NodeId(0), kp(0).public().clone()).unwrap();
        assert_eq!(
            reg.register_voter(NodeId(0), kp(1).public().clone()).unwrap_err(),
            RegistryError::DuplicateVoter(NodeId(0))
        );
    }

    #[test]
    fn quit_tombstones_not_removes() {
        let reg = VoterRegistry::new();
        let original = reg.root();
        let (reg1, _) = reg.register_voter(NodeId(0), kp(0).public().clone()).unwrap();
        let (reg2, _) = reg1.deregister_voter(NodeId(0)).unwrap();
        // Tombstoned root differs from both the registered and the
        // never-registered tree.
        assert_ne!(reg2.root(), original);
        assert_ne!(reg2.root(), reg1.root());
        assert!(!reg2.is_active(NodeId(0)));
        assert_eq!(reg2.voter_count(), 0);
    }

    #[test]
    fn same_order_same_root() {
        let build = || {
            let mut reg = VoterRegistry::new();
            for i in 0..4 {
                let (next, _) = reg.register_voter(NodeId(i), kp(i).public().clone()).unwrap();
                reg = next;
            }
            reg
        };
        assert_eq!(build().root(), build().root());
    }

    #[test]
    fn membership_opens_against_root() {
        let mut reg = VoterRegistry::new();
        for i in 0..3 {
            let (next, _) = reg.register_voter(NodeId(i), kp(i).public().clone()).unwrap();
            reg = next;
        }
        let op = reg.membership_opening(NodeId(1)).unwrap();
        assert!(verify_opening(&reg.root(), &op));
        assert_eq!(op.value, LeafValue::from_digest(kp(1).public().commitment()));

        // Stale opening fails after another registration.
        let (reg2, _) = reg.register_voter(NodeId(9), kp(9).public().clone()).unwrap();
        assert!(!verify_opening(&reg2.root(), &op));
    }

    #[test]
    fn replica_replay_converges() {
        let reg = VoterRegistry::new();
        let (reg1, w1) = reg.register_voter(NodeId(0), kp(0).public().clone()).unwrap();
        let (reg2, w2) = reg1.register_voter(NodeId(1), kp(1).public().clone()).unwrap();
        let (reg3, w3) = reg2.deregister_voter(NodeId(0)).unwrap();

        let replica = VoterRegistry::new()
            .apply_change(NodeId(0), &w1, Some(kp(0).public().clone()))
            .apply_change(NodeId(1), &w2, Some(kp(1).public().clone()))
            .apply_change(NodeId(0), &w3, None);
        assert_eq!(replica, reg3);
    }
}
