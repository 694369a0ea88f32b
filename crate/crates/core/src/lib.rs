//! Multi-chain state synchronization core.
//!
//! The library models an aggregator chain that holds a merkle-committed
//! global state assembled from per-chain partial states, simulates bundled
//! cross-chain transactions against it, proves the resulting transitions
//! with replayable execution transcripts, elects a block producer per round
//! with signed vote tickets, and drives proxy contracts on simulated native
//! chains through verification, state pinning and side effects.

pub mod chain;
pub mod election;
pub mod hash;
pub mod keys;
pub mod merkle;
pub mod node;
pub mod proof;
pub mod registry;
pub mod setup;
pub mod state;
pub mod transcript;
pub mod tx;
pub mod wire;

pub use hash::Digest;
pub use merkle::{LeafValue, LeafWitness, MerkleOpening, MtiPath, StateTree};
pub use state::{ChainId, GlobalState, Layout};
pub use tx::{NodeId, RoundId, TxId};
