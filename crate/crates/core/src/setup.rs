//! Genesis wiring shared by tests and the simulation harness.
//!
//! Builds a consistent starting point for every party: the global state
//! with the initial voter registry committed into its system region, the
//! registry itself, deterministic per-node keypairs, and proxy states
//! whose mirrors and pins match the genesis root.

use crate::chain::ProxyState;
use crate::keys::Keypair;
use crate::merkle::LeafValue;
use crate::node::NodeState;
use crate::registry::VoterRegistry;
use crate::state::{ChainId, GlobalState, Layout};
use crate::tx::{Account, NodeId};
use std::collections::BTreeMap;

/// Deterministic keypair for a node id; every party derives the same one.
pub fn node_keypair(node: NodeId) -> Keypair {
    Keypair::from_seed(format!("aggregator-node-{}", node.0).as_bytes())
}

/// Initial funding of one chain: per-slot global balances plus the native
/// ledger and custody pools backing them.
#[derive(Clone, Debug, Default)]
pub struct ChainGenesis {
    /// (slot, balance) pairs written into the chain's subrange.
    pub global_balances: Vec<(u64, u64)>,
    /// Native user balances.
    pub balances: BTreeMap<Account, u64>,
    /// Native pool deposits held by the proxy.
    pub custody: BTreeMap<Account, u64>,
}

#[derive(Clone, Debug)]
pub struct GenesisConfig {
    pub depth: usize,
    pub n_chains: u32,
    pub delta_h: u64,
    pub delta_vote: u64,
    /// Nodes registered as voters from the start.
    pub initial_voters: Vec<NodeId>,
    /// All nodes present in the run (voters and future joiners).
    pub all_nodes: Vec<NodeId>,
    pub chains: BTreeMap<ChainId, ChainGenesis>,
}

impl Default for GenesisConfig {
    fn default() -> Self {
        GenesisConfig {
            depth: 16,
            n_chains: 2,
            delta_h: 20,
            delta_vote: crate::node::DEFAULT_DELTA_VOTE,
            initial_voters: vec![NodeId(0)],
            all_nodes: vec![NodeId(0)],
            chains: BTreeMap::new(),
        }
    }
}

/// Everything a run starts from.
pub struct Genesis {
    pub state: GlobalState,
    pub registry: VoterRegistry,
    pub nodes: Vec<NodeState>,
    pub proxies: BTreeMap<ChainId, ProxyState>,
}

/// Assemble genesis: register initial voters, commit the registry root
/// into the system region, fund the chains, and hand every node and proxy
/// an identical view.
pub fn build_genesis(cfg: &GenesisConfig) -> Genesis {
    let layout = Layout::standard(cfg.depth, cfg.n_chains).expect("valid geometry");

    let mut registry = VoterRegistry::new();
    for node in &cfg.initial_voters {
        let kp = node_keypair(*node);
        let (next, _) = registry
            .register_voter(*node, kp.public().clone())
            .expect("genesis voters are distinct");
        registry = next;
    }

    let mut state = GlobalState::new(layout);
    let commit_path = state.registry_commit_path();
    let (next, _) = state
        .update_leaf(&commit_path, LeafValue::from_digest(registry.root()))
        .expect("commit path is valid");
    state = next;

    for (chain, genesis) in &cfg.chains {
        for (slot, balance) in &genesis.global_balances {
            let path = state
                .chain_leaf_path(*chain, *slot)
                .expect("configured slot fits the subrange");
            let (next, _) = state
                .update_leaf(&path, LeafValue::from_balance(*balance))
                .expect("valid path");
            state = next;
        }
    }

    let proxies = (0..cfg.n_chains)
        .map(|k| {
            let chain = ChainId(k);
            let genesis = cfg.chains.get(&chain).cloned().unwrap_or_default();
            (
                chain,
                ProxyState::genesis(
                    chain,
                    cfg.delta_h,
                    &state,
                    registry.root(),
                    registry.voter_count(),
                    genesis.balances,
                    genesis.custody,
                ),
            )
        })
        .collect();

    let nodes = cfg
        .all_nodes
        .iter()
        .map(|id| {
            NodeState::new(
                *id,
                node_keypair(*id),
                state.clone(),
                registry.clone(),
                cfg.delta_vote,
            )
        })
        .collect();

    Genesis {
        state,
        registry,
        nodes,
        proxies,
    }
}
