//! Global state: the tuple of per-chain partial states in one merkle tree.
//!
//! Each registered chain owns a contiguous MTI subrange identified by a
//! path prefix, plus one reserved system subrange holding protocol
//! commitments (the voter-registry root and round records). Subranges are
//! disjoint by construction, so projecting a chain's partial state depends
//! only on leaves under its prefix. The [`Layout`] is static scenario
//! configuration; verifiers hold it without holding any state.

use crate::hash::Digest;
use crate::merkle::{LeafValue, LeafWitness, MerkleError, MtiPath, StateTree};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Identifier of a native (guest) chain.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChainId(pub u32);

impl fmt::Debug for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain/{}", self.0)
    }
}

impl fmt::Display for ChainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("unknown chain {0:?}")]
    UnknownChainError(ChainId),
    #[error("subrange prefixes overlap: {0:?} and {1:?}")]
    OverlappingRanges(MtiPath, MtiPath),
    #[error("path {0:?} is not inside any registered subrange")]
    OutOfRange(MtiPath),
    #[error(transparent)]
    Merkle(#[from] MerkleError),
}

/// Who owns a leaf path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Chain(ChainId),
    System,
}

/// Static subrange layout of the global tree: geometry plus the prefix
/// assignment for every chain and the system region.
#[derive(Clone, PartialEq, Eq)]
pub struct Layout {
    depth: usize,
    arity: u8,
    chains: BTreeMap<ChainId, MtiPath>,
    system_prefix: MtiPath,
}

impl fmt::Debug for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Layout(depth={}, arity={}, chains={})",
            self.depth,
            self.arity,
            self.chains.len()
        )
    }
}

impl Layout {
    /// Every prefix (chain and system) must be prefix-free w.r.t. the rest.
    pub fn new(
        depth: usize,
        arity: u8,
        chains: BTreeMap<ChainId, MtiPath>,
        system_prefix: MtiPath,
    ) -> Result<Layout, StateError> {
        // Geometry check via a throwaway tree.
        StateTree::new(depth, arity)?;
        let mut all: Vec<&MtiPath> = chains.values().collect();
        all.push(&system_prefix);
        for (i, a) in all.iter().enumerate() {
            if a.len() >= depth {
                return Err(StateError::Merkle(MerkleError::PathError {
                    expected: depth,
                    got: a.len(),
                }));
            }
            for &j in &a.0 {
                if j >= arity {
                    return Err(StateError::Merkle(MerkleError::IndexOutOfRange {
                        index: j,
                        arity,
                    }));
                }
            }
            for b in all.iter().skip(i + 1) {
                if a.starts_with(b) || b.starts_with(a) {
                    return Err(StateError::OverlappingRanges((*a).clone(), (*b).clone()));
                }
            }
        }
        Ok(Layout {
            depth,
            arity,
            chains,
            system_prefix,
        })
    }

    /// Standard layout: system under prefix 0, chain `k` under prefix `k+1`,
    /// using the minimal number of leading binary digits.
    pub fn standard(depth: usize, n_chains: u32) -> Result<Layout, StateError> {
        let regions = n_chains as u64 + 1;
        let mut bits = 1usize;
        while (1u64 << bits) < regions {
            bits += 1;
        }
        let system_prefix = MtiPath::from_slot(0, bits);
        let chains = (0..n_chains)
            .map(|k| (ChainId(k), MtiPath::from_slot(k as u64 + 1, bits)))
            .collect();
        Layout::new(depth, 2, chains, system_prefix)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn arity(&self) -> u8 {
        self.arity
    }

    pub fn chain_ids(&self) -> impl Iterator<Item = ChainId> + '_ {
        self.chains.keys().copied()
    }

    pub fn chain_count(&self) -> usize {
        self.chains.len()
    }

    pub fn chain_prefix(&self, chain: ChainId) -> Result<&MtiPath, StateError> {
        self.chains
            .get(&chain)
            .ok_or(StateError::UnknownChainError(chain))
    }

    pub fn system_prefix(&self) -> &MtiPath {
        &self.system_prefix
    }

    /// Absolute path of slot `slot` inside a chain's subrange.
    pub fn chain_leaf_path(&self, chain: ChainId, slot: u64) -> Result<MtiPath, StateError> {
        let prefix = self.chain_prefix(chain)?;
        Ok(prefix.join(&MtiPath::from_slot(slot, self.depth - prefix.len())))
    }

    /// System leaf holding the voter-registry root commitment.
    pub fn registry_commit_path(&self) -> MtiPath {
        self.system_prefix
            .join(&MtiPath::from_slot(0, self.depth - self.system_prefix.len()))
    }

    /// System leaf holding the latest round record.
    pub fn round_record_path(&self) -> MtiPath {
        self.system_prefix
            .join(&MtiPath::from_slot(1, self.depth - self.system_prefix.len()))
    }

    /// Reserved marker leaf at the top of a chain's subrange (revoke
    /// records live here; account layouts must stay below it).
    pub fn chain_marker_path(&self, chain: ChainId) -> Result<MtiPath, StateError> {
        let prefix = self.chain_prefix(chain)?;
        let width = self.depth - prefix.len();
        let last = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
        Ok(prefix.join(&MtiPath::from_slot(last, width)))
    }

    /// Which registered region a path belongs to, if any.
    pub fn region_of(&self, path: &MtiPath) -> Option<Region> {
        if path.starts_with(&self.system_prefix) {
            return Some(Region::System);
        }
        self.chains
            .iter()
            .find(|(_, p)| path.starts_with(p))
            .map(|(c, _)| Region::Chain(*c))
    }
}

/// Read-only projection of one chain's partial state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalStateView {
    pub chain: ChainId,
    pub prefix: MtiPath,
    /// Absolute paths of the chain's non-empty leaves.
    pub leaves: BTreeMap<MtiPath, LeafValue>,
    /// Subtree root of the chain's subrange.
    pub subtree_root: Digest,
}

/// Merkle-committed global state with per-chain subrange layout.
#[derive(Clone, PartialEq, Eq)]
pub struct GlobalState {
    tree: StateTree,
    layout: Layout,
}

impl fmt::Debug for GlobalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GlobalState(root={}, chains={})",
            self.root().short_hex(),
            self.layout.chain_count()
        )
    }
}

impl GlobalState {
    /// Empty global state over the given layout.
    pub fn new(layout: Layout) -> GlobalState {
        let tree = StateTree::new(layout.depth, layout.arity).expect("layout pre-validated");
        GlobalState { tree, layout }
    }

    pub fn with_standard_layout(depth: usize, n_chains: u32) -> Result<GlobalState, StateError> {
        Ok(GlobalState::new(Layout::standard(depth, n_chains)?))
    }

    pub fn tree(&self) -> &StateTree {
        &self.tree
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn depth(&self) -> usize {
        self.layout.depth
    }

    pub fn chain_ids(&self) -> impl Iterator<Item = ChainId> + '_ {
        self.layout.chain_ids()
    }

    pub fn chain_leaf_path(&self, chain: ChainId, slot: u64) -> Result<MtiPath, StateError> {
        self.layout.chain_leaf_path(chain, slot)
    }

    pub fn registry_commit_path(&self) -> MtiPath {
        self.layout.registry_commit_path()
    }

    pub fn round_record_path(&self) -> MtiPath {
        self.layout.round_record_path()
    }

    pub fn chain_marker_path(&self, chain: ChainId) -> Result<MtiPath, StateError> {
        self.layout.chain_marker_path(chain)
    }

    pub fn root(&self) -> Digest {
        self.tree.root()
    }

    pub fn get(&self, path: &MtiPath) -> Result<LeafValue, StateError> {
        Ok(self.tree.get(path)?)
    }

    /// Current registry-root commitment.
    pub fn registry_commit(&self) -> Digest {
        self.tree
            .get(&self.layout.registry_commit_path())
            .expect("commit path is always valid")
            .as_digest()
    }

    /// Update a leaf, requiring it to fall inside a registered subrange.
    pub fn update_leaf(
        &self,
        path: &MtiPath,
        value: LeafValue,
    ) -> Result<(GlobalState, LeafWitness), StateError> {
        path.validate(self.tree.depth(), self.tree.arity())?;
        if self.layout.region_of(path).is_none() {
            return Err(StateError::OutOfRange(path.clone()));
        }
        let (tree, witness) = self.tree.update(path, value)?;
        Ok((
            GlobalState {
                tree,
                layout: self.layout.clone(),
            },
            witness,
        ))
    }

    /// Apply a verified witness (used by replicas and proxy mirrors).
    pub fn apply_witness(&self, w: &LeafWitness) -> Result<GlobalState, StateError> {
        let (next, _) = self.update_leaf(&w.path, w.new_value)?;
        Ok(next)
    }

    /// Exactly the leaves in the chain's subrange.
    pub fn project(&self, chain: ChainId) -> Result<LocalStateView, StateError> {
        let prefix = self.layout.chain_prefix(chain)?.clone();
        let leaves = self
            .tree
            .leaves()
            .filter(|(p, _)| p.starts_with(&prefix))
            .map(|(p, v)| (p.clone(), *v))
            .collect();
        let subtree_root = self.tree.subtree_root(&prefix)?;
        Ok(LocalStateView {
            chain,
            prefix,
            leaves,
            subtree_root,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_chain_state() -> GlobalState {
        GlobalState::with_standard_layout(8, 2).unwrap()
    }

    #[test]
    fn standard_layout_is_disjoint() {
        let gs = two_chain_state();
        assert_eq!(
            gs.layout().chain_prefix(ChainId(0)).unwrap(),
            &MtiPath::new(vec![0, 1])
        );
        assert_eq!(
            gs.layout().chain_prefix(ChainId(1)).unwrap(),
            &MtiPath::new(vec![1, 0])
        );
        assert_eq!(gs.layout().system_prefix(), &MtiPath::new(vec![0, 0]));
        assert!(gs.layout().chain_prefix(ChainId(7)).is_err());
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let mut chains = BTreeMap::new();
        chains.insert(ChainId(0), MtiPath::new(vec![0]));
        chains.insert(ChainId(1), MtiPath::new(vec![0, 1]));
        let err = Layout::new(8, 2, chains, MtiPath::new(vec![1])).unwrap_err();
        assert!(matches!(err, StateError::OverlappingRanges(..)));
    }

    #[test]
    fn projection_partitions_leaves() {
        let gs = two_chain_state();
        let a = gs.chain_leaf_path(ChainId(0), 3).unwrap();
        let b = gs.chain_leaf_path(ChainId(1), 5).unwrap();
        let (gs, _) = gs.update_leaf(&a, LeafValue::from_balance(10)).unwrap();
        let (gs, _) = gs.update_leaf(&b, LeafValue::from_balance(20)).unwrap();

        let va = gs.project(ChainId(0)).unwrap();
        let vb = gs.project(ChainId(1)).unwrap();
        assert_eq!(va.leaves.len(), 1);
        assert_eq!(vb.leaves.len(), 1);
        assert_eq!(va.leaves[&a].balance(), 10);
        assert_eq!(vb.leaves[&b].balance(), 20);

        // Reassembling both projections recovers the full leaf map.
        let mut all: BTreeMap<MtiPath, LeafValue> = va.leaves.clone();
        all.extend(vb.leaves.clone());
        let direct: BTreeMap<MtiPath, LeafValue> =
            gs.tree().leaves().map(|(p, v)| (p.clone(), *v)).collect();
        assert_eq!(all, direct);
    }

    #[test]
    fn updates_outside_subrange_do_not_change_projection() {
        let gs = two_chain_state();
        let a = gs.chain_leaf_path(ChainId(0), 0).unwrap();
        let before = gs.project(ChainId(1)).unwrap();
        let (gs, _) = gs.update_leaf(&a, LeafValue::from_balance(99)).unwrap();
        let after = gs.project(ChainId(1)).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn unregistered_region_rejected() {
        let gs = two_chain_state();
        // Prefix [1,1] belongs to no chain in a 2-chain standard layout.
        let stray = MtiPath::new(vec![1, 1, 0, 0, 0, 0, 0, 0]);
        let err = gs.update_leaf(&stray, LeafValue::from_balance(1)).unwrap_err();
        assert!(matches!(err, StateError::OutOfRange(_)));
    }

    #[test]
    fn unknown_chain_projection_errors() {
        let gs = two_chain_state();
        assert_eq!(
            gs.project(ChainId(9)).unwrap_err(),
            StateError::UnknownChainError(ChainId(9))
        );
    }

    #[test]
    fn marker_path_is_top_slot() {
        let gs = two_chain_state();
        let marker = gs.chain_marker_path(ChainId(0)).unwrap();
        assert_eq!(marker, MtiPath::new(vec![0, 1, 1, 1, 1, 1, 1, 1]));
    }
}
