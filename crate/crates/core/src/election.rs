//! Per-round leader election, block production and the skip machinery.
//!
//! Every round, honest voters derive one canonical candidate from the
//! round number and the registered keys, sign a ticket for it and send it
//! to the candidate. The candidate assembles a consensus proof at quorum,
//! simulates its mempool in arrival order, aggregates the transcripts and
//! produces the block. Rounds that stall are aborted by a two-thirds skip
//! vote; a skipped round whose block later surfaces on some chain is
//! restored by a revoke-skip vote carrying the on-chain evidence.

use crate::hash::{hash_tagged_parts, Digest, VOTE_TAG};
use crate::keys::Keypair;
use crate::proof::{
    aggregate, prove_consensus, AggregatedProof, Ballot, ConsensusProof, ProofError, VoteTicket,
};
use crate::registry::{RegistryError, VoterRegistry};
use crate::state::GlobalState;
use crate::transcript::{prove_execution, ExecutionTranscript, SimFailure};
use crate::tx::{revoke_tx, BundledTransaction, NodeId, RoundId, TxId, TxSource};
use crate::wire::{Canon, Reader, WireError, Writer};

/// Round lifecycle phases as seen by one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundPhase {
    Voting,
    Producing,
    Broadcasting,
    SkipVoting,
    RevokeSkipVoting,
    Finalized,
    Skipped,
}

impl RoundPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, RoundPhase::Finalized | RoundPhase::Skipped)
    }
}

/// Ticket pools one node tracks for the current round.
#[derive(Clone, Debug, Default)]
pub struct RoundState {
    pub round: RoundId,
    pub phase: Option<RoundPhase>,
    pub elect_tickets: Vec<VoteTicket>,
    pub skip_tickets: Vec<VoteTicket>,
    pub revoke_skip_tickets: Vec<VoteTicket>,
}

impl RoundState {
    pub fn new(round: RoundId) -> RoundState {
        RoundState {
            round,
            phase: Some(RoundPhase::Voting),
            ..Default::default()
        }
    }
}

/// Canonical candidate for a round.
///
/// Active voters are ranked by `hash(streak_base || pubkey)` where
/// `streak_base` is the first round of the current skip streak; position
/// `streak` in that ranking is the candidate. Within a streak the ranking
/// is frozen, so consecutive skipped rounds walk through distinct nodes
/// and at most `f` crashed voters cost `f` skips before a live winner.
pub fn canonical_candidate(
    round: RoundId,
    skip_streak: u64,
    registry: &VoterRegistry,
) -> Option<NodeId> {
    let voters: Vec<NodeId> = registry.active_voters().map(|(n, _)| n).collect();
    if voters.is_empty() {
        return None;
    }
    let base = round.0 - skip_streak;
    let mut ranked: Vec<(Digest, NodeId)> = registry
        .active_voters()
        .map(|(n, pk)| {
            (
                hash_tagged_parts(VOTE_TAG, &[b"cand:", &base.to_le_bytes(), &pk.0]),
                n,
            )
        })
        .collect();
    ranked.sort();
    let idx = (skip_streak as usize) % ranked.len();
    Some(ranked[idx].1)
}

/// Sign any ballot for the round, proving registry membership.
pub fn cast_ballot(
    keypair: &Keypair,
    voter: NodeId,
    round: RoundId,
    registry: &VoterRegistry,
    ballot: Ballot,
) -> Result<VoteTicket, RegistryError> {
    let membership = registry.membership_opening(voter)?;
    Ok(VoteTicket::sign(
        keypair,
        voter,
        round,
        registry.root(),
        ballot,
        membership,
    ))
}

/// Vote for the round's canonical candidate. The voter must have
/// synchronized its registry replica; the ticket carries that root and is
/// ignored by collectors pinned to a different one.
pub fn cast_vote(
    keypair: &Keypair,
    voter: NodeId,
    round: RoundId,
    skip_streak: u64,
    registry: &VoterRegistry,
) -> Result<VoteTicket, RegistryError> {
    let candidate =
        canonical_candidate(round, skip_streak, registry).ok_or(RegistryError::UnregisteredVoter(voter))?;
    cast_ballot(keypair, voter, round, registry, Ballot::Elect { candidate })
}

/// Outcome of a collection attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Collected {
    Elected(ConsensusProof),
    Pending { have: u32, need: u32 },
}

/// Validate and count tickets endorsing `me`; returns the consensus proof
/// once the two-thirds quorum of distinct voters is reached.
pub fn collect_and_elect(
    me: NodeId,
    round: &RoundState,
    registry_root: &Digest,
    n_voters: u32,
) -> Collected {
    match prove_consensus(
        round.round,
        *registry_root,
        Ballot::Elect { candidate: me },
        &round.elect_tickets,
        n_voters,
    ) {
        Ok(p) => Collected::Elected(p),
        Err(ProofError::InsufficientVotes { have, need }) => Collected::Pending { have, need },
        Err(_) => Collected::Pending { have: 0, need: 0 },
    }
}

/// An aggregator block: the producer's ordered batch with its proof.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub round: RoundId,
    pub producer: NodeId,
    pub txs: Vec<BundledTransaction>,
    pub pre_root: Digest,
    pub post_root: Digest,
    pub proof: AggregatedProof,
}

impl Block {
    /// Structural invariants: proof endpoints match the block roots and
    /// the consensus proof names the producer for this round.
    pub fn check_invariants(&self) -> bool {
        self.proof.batch_root_before == self.pre_root
            && self.proof.batch_root_after == self.post_root
            && self.proof.consensus.round == self.round
            && self.proof.consensus.winner() == Some(self.producer)
            && self.proof.transcripts.len() == self.txs.len()
    }

    pub fn digest(&self) -> Digest {
        hash_tagged_parts(VOTE_TAG, &[b"block:", &self.to_canonical_bytes()])
    }
}

impl Canon for Block {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.round.0);
        w.u32(self.producer.0);
        crate::wire::encode_vec(w, &self.txs);
        w.digest(&self.pre_root);
        w.digest(&self.post_root);
        self.proof.encode(w);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Block {
            round: RoundId(r.u64()?),
            producer: NodeId(r.u32()?),
            txs: crate::wire::decode_vec(r)?,
            pre_root: r.digest()?,
            post_root: r.digest()?,
            proof: AggregatedProof::decode(r)?,
        })
    }
}

/// Result of block production: the block, the post state, and the
/// transactions dropped because their simulation failed.
#[derive(Debug)]
pub struct Produced {
    pub block: Block,
    pub state_after: GlobalState,
    pub dropped: Vec<(TxId, SimFailure)>,
}

/// Simulate the mempool in the given order and assemble the block.
///
/// Failing transactions produce no transcript and are dropped. A dropped
/// invoke-headed transaction additionally appends a revoke bundle so the
/// escrow on the invoking chain is returned. Mempool ordering rules
/// (arrival order; at most one invoking chain per block) are the caller's
/// concern; this function takes the order as given.
pub fn produce_block(
    winner: NodeId,
    proof: ConsensusProof,
    mempool: &[BundledTransaction],
    state: &GlobalState,
) -> Produced {
    debug_assert_eq!(proof.winner(), Some(winner));
    let pre_root = state.root();
    let mut running = state.clone();
    let mut included: Vec<BundledTransaction> = Vec::new();
    let mut transcripts: Vec<ExecutionTranscript> = Vec::new();
    let mut dropped = Vec::new();
    let mut revokes: Vec<BundledTransaction> = Vec::new();

    for tx in mempool {
        match prove_execution(&running, tx) {
            Ok((next, transcript)) => {
                running = next;
                included.push(tx.clone());
                transcripts.push(transcript);
            }
            Err(failure) => {
                if let TxSource::InvokeHeaded { chain, invocation } = tx.source {
                    revokes.push(revoke_tx(running.layout(), chain, invocation));
                }
                dropped.push((tx.id, failure));
            }
        }
    }

    for rv in revokes {
        // Revoke bundles write a fresh marker and cannot fail.
        let (next, transcript) = prove_execution(&running, &rv).expect("revoke bundles always simulate");
        running = next;
        included.push(rv);
        transcripts.push(transcript);
    }

    let agg = aggregate(proof, transcripts, pre_root).expect("transcripts chain by construction");
    let block = Block {
        round: agg.consensus.round,
        producer: winner,
        txs: included,
        pre_root,
        post_root: agg.batch_root_after,
        proof: agg,
    };
    Produced {
        block,
        state_after: running,
        dropped,
    }
}

/// Two-thirds agreement to abort the round on every native chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipSignal {
    pub round: RoundId,
    pub proof: ConsensusProof,
}

impl Canon for SkipSignal {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.round.0);
        self.proof.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(SkipSignal {
            round: RoundId(r.u64()?),
            proof: ConsensusProof::decode(r)?,
        })
    }
}

/// Assemble the skip signal once two-thirds of voters demand the abort.
pub fn initiate_skip(
    round: RoundId,
    registry_root: &Digest,
    n_voters: u32,
    tickets: &[VoteTicket],
) -> Result<SkipSignal, ProofError> {
    let proof = prove_consensus(round, *registry_root, Ballot::Skip, tickets, n_voters)?;
    Ok(SkipSignal { round, proof })
}

/// Two-thirds agreement to restore a skipped round, carrying the finalize
/// call recorded on the chain that accepted the block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RevokeSkipSignal {
    pub round: RoundId,
    pub proof: ConsensusProof,
    pub evidence: crate::chain::FinalizeCall,
}

impl Canon for RevokeSkipSignal {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.round.0);
        self.proof.encode(w);
        self.evidence.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(RevokeSkipSignal {
            round: RoundId(r.u64()?),
            proof: ConsensusProof::decode(r)?,
            evidence: crate::chain::FinalizeCall::decode(r)?,
        })
    }
}

/// Assemble the revoke-skip signal. `evidence` must be the block's
/// finalize call as recorded on some chain that finalized the round.
pub fn revoke_skip(
    round: RoundId,
    registry_root: &Digest,
    n_voters: u32,
    evidence: crate::chain::FinalizeCall,
    tickets: &[VoteTicket],
) -> Result<RevokeSkipSignal, ProofError> {
    let proof = prove_consensus(round, *registry_root, Ballot::RevokeSkip, tickets, n_voters)?;
    Ok(RevokeSkipSignal {
        round,
        proof,
        evidence,
    })
}
