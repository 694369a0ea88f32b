//! Scenario configuration: chains, nodes, workload, faults, scheduling.
//!
//! A scenario plus its seed fully determines the execution trace. The
//! on-disk format is TOML; the suites build configs programmatically.

use mcsync_core::setup::{ChainGenesis, GenesisConfig};
use mcsync_core::state::ChainId;
use mcsync_core::tx::{Account, NodeId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_max_time")]
    pub max_time: u64,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    pub nodes: NodesConfig,
    #[serde(default)]
    pub chains: Vec<ChainConfig>,
    #[serde(default)]
    pub workload: Vec<WorkItem>,
    #[serde(default)]
    pub faults: Vec<Fault>,
}

fn default_seed() -> u64 {
    42
}

fn default_max_time() -> u64 {
    200_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Message delays are drawn uniformly from [1, max_delay].
    pub max_delay: u64,
    /// Native chains produce one block every this many time units.
    pub block_interval: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            max_delay: 3,
            block_interval: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub depth: usize,
    pub delta_h: u64,
    pub delta_vote: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            depth: 16,
            delta_h: 20,
            delta_vote: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodesConfig {
    pub count: u32,
    /// Node ids registered as voters at genesis; defaults to all.
    #[serde(default)]
    pub initial_voters: Option<Vec<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub id: u32,
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
    #[serde(default)]
    pub pools: Vec<PoolConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub name: String,
    pub slot: u64,
    /// Balance in the chain's global-state subrange.
    #[serde(default)]
    pub global: u64,
    /// Native ledger balance.
    #[serde(default)]
    pub native: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub name: String,
    pub slot: u64,
    #[serde(default)]
    pub global: u64,
    /// Deposited with the proxy (funds native payouts).
    #[serde(default)]
    pub custody: u64,
}

/// What the scenario expects to happen to a workload item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    Finalize,
    Revoke,
    None,
}

impl Default for Expectation {
    fn default() -> Self {
        Expectation::Finalize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkItem {
    /// User invokes an escrow transfer on a native chain.
    InvokeTransfer {
        at: u64,
        chain: u32,
        sender: String,
        amount: u64,
        from_slot: u64,
        from_pool_slot: u64,
        from_pool_owner: String,
        to_chain: u32,
        to_slot: u64,
        to_pool_slot: u64,
        payout_to: Option<String>,
        payout_pool: String,
        #[serde(default)]
        expect: Expectation,
    },
    /// Client submits a pure bundled transfer to every node.
    PureTransfer {
        at: u64,
        id: u64,
        amount: u64,
        from_chain: u32,
        from_slot: u64,
        from_pool_slot: u64,
        to_chain: u32,
        to_slot: u64,
        to_pool_slot: u64,
        payout_to: Option<String>,
        payout_pool: Option<String>,
        #[serde(default)]
        expect: Expectation,
    },
    /// User revokes the `invocation_index`-th invocation on a chain.
    Revoke {
        at: u64,
        chain: u32,
        sender: String,
        invocation_index: u64,
    },
    /// A node announces itself and gets registered as a voter.
    Join { at: u64, node: u32 },
    /// A voter quits the registry.
    Quit { at: u64, node: u32 },
}

impl WorkItem {
    pub fn at(&self) -> u64 {
        match self {
            WorkItem::InvokeTransfer { at, .. }
            | WorkItem::PureTransfer { at, .. }
            | WorkItem::Revoke { at, .. }
            | WorkItem::Join { at, .. }
            | WorkItem::Quit { at, .. } => *at,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Node stops processing at the given time.
    Crash { node: u32, at: u64 },
    /// The node's relayer inflates every relayed invoke amount.
    DishonestRelayer { node: u32, corruption: u64 },
    /// In the given round, the producer's block reaches only these chains
    /// before the producer crashes.
    PartialBroadcast { round: u64, chains: Vec<u32> },
    /// The node votes with its genesis registry root forever.
    StaleRootVoter { node: u32 },
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes.count == 0 {
            return Err(ConfigError::Invalid("at least one node".into()));
        }
        if self.chains.is_empty() {
            return Err(ConfigError::Invalid("at least one chain".into()));
        }
        for c in &self.chains {
            if c.id as usize >= self.chains.len() {
                return Err(ConfigError::Invalid(format!(
                    "chain ids must be dense, got {}",
                    c.id
                )));
            }
        }
        if let Some(v) = &self.nodes.initial_voters {
            for id in v {
                if *id >= self.nodes.count {
                    return Err(ConfigError::Invalid(format!("voter {id} out of range")));
                }
            }
        }
        if self.protocol.delta_vote >= self.protocol.delta_h {
            return Err(ConfigError::Invalid(
                "round timeout must stay below the revocation window".into(),
            ));
        }
        Ok(())
    }

    pub fn initial_voters(&self) -> Vec<NodeId> {
        match &self.nodes.initial_voters {
            Some(v) => v.iter().map(|i| NodeId(*i)).collect(),
            None => (0..self.nodes.count).map(NodeId).collect(),
        }
    }

    pub fn all_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.count).map(NodeId).collect()
    }

    /// Count of crash-style faults (bounds the liveness check).
    pub fn crash_fault_count(&self) -> u64 {
        self.faults
            .iter()
            .filter(|f| matches!(f, Fault::Crash { .. } | Fault::PartialBroadcast { .. }))
            .count() as u64
    }

    pub fn genesis_config(&self) -> GenesisConfig {
        let mut chains = BTreeMap::new();
        for c in &self.chains {
            let mut g = ChainGenesis::default();
            for a in &c.accounts {
                g.global_balances.push((a.slot, a.global));
                g.balances.insert(Account::new(&a.name), a.native);
            }
            for p in &c.pools {
                g.global_balances.push((p.slot, p.global));
                g.custody.insert(Account::new(&p.name), p.custody);
            }
            chains.insert(ChainId(c.id), g);
        }
        GenesisConfig {
            depth: self.protocol.depth,
            n_chains: self.chains.len() as u32,
            delta_h: self.protocol.delta_h,
            delta_vote: self.protocol.delta_vote,
            initial_voters: self.initial_voters(),
            all_nodes: self.all_nodes(),
            chains,
        }
    }
}

/// The baseline two-chain transfer scenario.
pub fn baseline_transfer(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "baseline-transfer".into(),
        seed,
        max_time: 20_000,
        net: NetConfig::default(),
        protocol: ProtocolConfig::default(),
        nodes: NodesConfig {
            count: 4,
            initial_voters: None,
        },
        chains: vec![
            ChainConfig {
                id: 0,
                accounts: vec![AccountConfig {
                    name: "alice".into(),
                    slot: 0,
                    global: 10,
                    native: 10,
                }],
                pools: vec![PoolConfig {
                    name: "lp".into(),
                    slot: 1,
                    global: 0,
                    custody: 0,
                }],
            },
            ChainConfig {
                id: 1,
                accounts: vec![AccountConfig {
                    name: "bob".into(),
                    slot: 0,
                    global: 0,
                    native: 0,
                }],
                pools: vec![PoolConfig {
                    name: "lp".into(),
                    slot: 1,
                    global: 10,
                    custody: 10,
                }],
            },
        ],
        workload: vec![WorkItem::InvokeTransfer {
            at: 10,
            chain: 0,
            sender: "alice".into(),
            amount: 3,
            from_slot: 0,
            from_pool_slot: 1,
            from_pool_owner: "lp".into(),
            to_chain: 1,
            to_slot: 0,
            to_pool_slot: 1,
            payout_to: Some("bob".into()),
            payout_pool: "lp".into(),
            expect: Expectation::Finalize,
        }],
        faults: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let cfg = baseline_transfer(7);
        let text = cfg.to_toml();
        let back = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(back.name, cfg.name);
        assert_eq!(back.seed, 7);
        assert_eq!(back.workload.len(), 1);
        assert_eq!(back.chains.len(), 2);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = ScenarioConfig {
            protocol: ProtocolConfig {
                delta_vote: 30,
                ..Default::default()
            },
            ..baseline_transfer(1)
        };
        assert!(cfg.validate().is_err());
    }
}
