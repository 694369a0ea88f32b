//! Consensus proofs and block-level proof aggregation.
//!
//! A vote ticket is a signature over (round, voter-registry root, ballot)
//! plus a merkle opening of the voter's key commitment in the registry
//! tree. A quorum of verifying tickets from distinct registry slots forms
//! a [`ConsensusProof`]; the election, skip and revoke-skip votes all use
//! the same ticket machinery with different ballots. An
//! [`AggregatedProof`] bundles the round's consensus proof with the
//! chained execution transcripts of every transaction in the block.

use crate::hash::{hash_tagged, Digest, VOTE_TAG};
use crate::keys::{verify_signature, Keypair, PublicKey, Signature};
use crate::merkle::{verify_opening, LeafValue, MerkleOpening, MtiPath};
use crate::transcript::ExecutionTranscript;
use crate::tx::{NodeId, RoundId};
use crate::wire::{Canon, Reader, WireError, Writer};
use std::collections::BTreeSet;
use thiserror::Error;

/// Distinct-voter quorum: ceil(2n/3).
pub fn quorum_threshold(n_voters: u32) -> u32 {
    (2 * n_voters).div_ceil(3)
}

/// What a ticket endorses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ballot {
    /// Endorse `candidate` as the round's block producer.
    Elect { candidate: NodeId },
    /// Abort the round: native chains must refuse its block.
    Skip,
    /// Re-enable a skipped round whose block surfaced on some chain.
    RevokeSkip,
}

impl Canon for Ballot {
    fn encode(&self, w: &mut Writer) {
        match self {
            Ballot::Elect { candidate } => {
                w.u8(1).u32(candidate.0);
            }
            Ballot::Skip => {
                w.u8(2);
            }
            Ballot::RevokeSkip => {
                w.u8(3);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            1 => Ballot::Elect {
                candidate: NodeId(r.u32()?),
            },
            2 => Ballot::Skip,
            3 => Ballot::RevokeSkip,
            v => {
                return Err(WireError::InvalidValue {
                    field: "ballot",
                    value: v as u64,
                })
            }
        })
    }
}

/// Signed, membership-proven endorsement for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteTicket {
    pub voter: NodeId,
    pub round: RoundId,
    /// Registry root the voter synchronized before voting. Tickets
    /// carrying any other root than the round-start root are ignored.
    pub voter_root: Digest,
    pub ballot: Ballot,
    pub pubkey: PublicKey,
    pub signature: Signature,
    /// Opening of the voter's key commitment in the registry tree.
    pub membership: MerkleOpening,
}

/// Byte message a ticket signs.
fn ticket_message(voter: NodeId, round: RoundId, voter_root: &Digest, ballot: &Ballot) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(voter.0);
    w.u64(round.0);
    w.digest(voter_root);
    ballot.encode(&mut w);
    w.finish()
}

impl VoteTicket {
    /// Sign a ballot. The membership opening must come from the same
    /// registry state as `voter_root`.
    pub fn sign(
        keypair: &Keypair,
        voter: NodeId,
        round: RoundId,
        voter_root: Digest,
        ballot: Ballot,
        membership: MerkleOpening,
    ) -> VoteTicket {
        let msg = ticket_message(voter, round, &voter_root, &ballot);
        VoteTicket {
            voter,
            round,
            voter_root,
            ballot,
            pubkey: keypair.public().clone(),
            signature: keypair.sign(&msg),
            membership,
        }
    }

    /// Full ticket check against the pinned registry root and round:
    /// signature, membership opening, key binding, root and round match.
    pub fn verify(&self, pinned_root: &Digest, round: RoundId) -> bool {
        if self.round != round || self.voter_root != *pinned_root {
            return false;
        }
        if self.membership.value != LeafValue::from_digest(self.pubkey.commitment()) {
            return false;
        }
        if !verify_opening(pinned_root, &self.membership) {
            return false;
        }
        let msg = ticket_message(self.voter, self.round, &self.voter_root, &self.ballot);
        verify_signature(&self.pubkey, &msg, &self.signature)
    }

    /// Registry slot this ticket votes from; distinct-voter counting keys
    /// on the slot, not on the claimed node id.
    pub fn slot(&self) -> &MtiPath {
        &self.membership.path
    }
}

impl Canon for VoteTicket {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.voter.0);
        w.u64(self.round.0);
        w.digest(&self.voter_root);
        self.ballot.encode(w);
        w.bytes(&self.pubkey.0);
        w.bytes(&self.signature.0);
        self.membership.encode(w);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let voter = NodeId(r.u32()?);
        let round = RoundId(r.u64()?);
        let voter_root = r.digest()?;
        let ballot = Ballot::decode(r)?;
        let pk = r.bytes()?;
        let pubkey = PublicKey::from_bytes(&pk).ok_or(WireError::InvalidValue {
            field: "pubkey",
            value: pk.len() as u64,
        })?;
        let sig = r.bytes()?;
        let signature = Signature::from_bytes(&sig).ok_or(WireError::InvalidValue {
            field: "signature",
            value: sig.len() as u64,
        })?;
        let membership = MerkleOpening::decode(r)?;
        Ok(VoteTicket {
            voter,
            round,
            voter_root,
            ballot,
            pubkey,
            signature,
            membership,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProofError {
    #[error("insufficient votes: have {have}, need {need}")]
    InsufficientVotes { have: u32, need: u32 },
    #[error("transcript {index} does not chain onto its predecessor")]
    ChainBreak { index: usize },
}

/// Evidence that a two-thirds quorum of registered voters endorsed one
/// ballot for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusProof {
    pub round: RoundId,
    pub voter_root: Digest,
    pub ballot: Ballot,
    pub tickets: Vec<VoteTicket>,
    /// Quorum in force when the proof was produced: ceil(2n/3) over the
    /// voters registered at round start.
    pub threshold: u32,
}

impl ConsensusProof {
    pub fn winner(&self) -> Option<NodeId> {
        match self.ballot {
            Ballot::Elect { candidate } => Some(candidate),
            _ => None,
        }
    }

    pub fn digest(&self) -> Digest {
        hash_tagged(VOTE_TAG, &self.to_canonical_bytes())
    }
}

impl Canon for ConsensusProof {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.round.0);
        w.digest(&self.voter_root);
        self.ballot.encode(w);
        crate::wire::encode_vec(w, &self.tickets);
        w.u32(self.threshold);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ConsensusProof {
            round: RoundId(r.u64()?),
            voter_root: r.digest()?,
            ballot: Ballot::decode(r)?,
            tickets: crate::wire::decode_vec(r)?,
            threshold: r.u32()?,
        })
    }
}

/// Count tickets that verify for (root, round, ballot), from distinct
/// registry slots.
fn distinct_valid(
    tickets: &[VoteTicket],
    voter_root: &Digest,
    round: RoundId,
    ballot: &Ballot,
) -> u32 {
    let mut slots: BTreeSet<MtiPath> = BTreeSet::new();
    for t in tickets {
        if t.ballot == *ballot && t.verify(voter_root, round) {
            slots.insert(t.slot().clone());
        }
    }
    slots.len() as u32
}

/// Assemble a consensus proof once the two-thirds quorum is reached.
/// Only tickets that verify are kept; duplicates from one voter count once.
pub fn prove_consensus(
    round: RoundId,
    voter_root: Digest,
    ballot: Ballot,
    tickets: &[VoteTicket],
    n_voters: u32,
) -> Result<ConsensusProof, ProofError> {
    let threshold = quorum_threshold(n_voters);
    let mut kept = Vec::new();
    let mut slots: BTreeSet<MtiPath> = BTreeSet::new();
    for t in tickets {
        if t.ballot == ballot && t.verify(&voter_root, round) && slots.insert(t.slot().clone()) {
            kept.push(t.clone());
        }
    }
    let have = slots.len() as u32;
    if have < threshold {
        return Err(ProofError::InsufficientVotes {
            have,
            need: threshold,
        });
    }
    Ok(ConsensusProof {
        round,
        voter_root,
        ballot,
        tickets: kept,
        threshold,
    })
}

/// Check a consensus proof against the pinned registry root, the pinned
/// voter count and the expected round.
pub fn verify_consensus(
    proof: &ConsensusProof,
    pinned_voter_root: &Digest,
    pinned_voter_count: u32,
    round: RoundId,
) -> bool {
    if proof.round != round || proof.voter_root != *pinned_voter_root {
        return false;
    }
    let expected = quorum_threshold(pinned_voter_count);
    if proof.threshold != expected {
        return false;
    }
    distinct_valid(&proof.tickets, pinned_voter_root, round, &proof.ballot) >= expected
}

/// The single per-block proof: consensus evidence plus the chained
/// execution transcripts of every transaction, with batch endpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatedProof {
    pub consensus: ConsensusProof,
    pub transcripts: Vec<ExecutionTranscript>,
    pub batch_root_before: Digest,
    pub batch_root_after: Digest,
}

impl AggregatedProof {
    pub fn digest(&self) -> Digest {
        hash_tagged(VOTE_TAG, &self.to_canonical_bytes())
    }
}

impl Canon for AggregatedProof {
    fn encode(&self, w: &mut Writer) {
        self.consensus.encode(w);
        crate::wire::encode_vec(w, &self.transcripts);
        w.digest(&self.batch_root_before);
        w.digest(&self.batch_root_after);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(AggregatedProof {
            consensus: ConsensusProof::decode(r)?,
            transcripts: crate::wire::decode_vec(r)?,
            batch_root_before: r.digest()?,
            batch_root_after: r.digest()?,
        })
    }
}

/// Batch the consensus proof with an ordered transcript chain. The
/// transcripts must link pairwise; `base_root` anchors the batch (and is
/// the endpoint pair for an empty block).
pub fn aggregate(
    consensus: ConsensusProof,
    transcripts: Vec<ExecutionTranscript>,
    base_root: Digest,
) -> Result<AggregatedProof, ProofError> {
    let mut running = base_root;
    for (i, t) in transcripts.iter().enumerate() {
        if t.root_before != running {
            return Err(ProofError::ChainBreak { index: i });
        }
        running = t.root_after;
    }
    Ok(AggregatedProof {
        consensus,
        transcripts,
        batch_root_before: base_root,
        batch_root_after: running,
    })
}

/// Aggregated verification is the composition of its parts: the batch
/// endpoints must chain through every transcript, each transcript must
/// verify against its declared transaction, and the consensus proof must
/// carry the expected quorum. `tx_decls` pair one-to-one with transcripts.
pub fn verify_aggregated(
    layout: &crate::state::Layout,
    proof: &AggregatedProof,
    tx_decls: &[crate::tx::BundledTransaction],
    pinned_voter_root: &Digest,
    pinned_voter_count: u32,
    round: RoundId,
) -> bool {
    if !verify_consensus(&proof.consensus, pinned_voter_root, pinned_voter_count, round) {
        return false;
    }
    if proof.consensus.winner().is_none() {
        return false;
    }
    if proof.transcripts.len() != tx_decls.len() {
        return false;
    }
    let mut running = proof.batch_root_before;
    for (t, decl) in proof.transcripts.iter().zip(tx_decls) {
        if !crate::transcript::verify_execution(layout, &running, &t.root_after, t, decl) {
            return false;
        }
        running = t.root_after;
    }
    running == proof.batch_root_after
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::VoterRegistry;

    fn setup_voters(n: u32) -> (VoterRegistry, Vec<Keypair>) {
        let mut reg = VoterRegistry::new();
        let mut keys = Vec::new();
        for i in 0..n {
            let kp = Keypair::from_seed(format!("voter-{i}").as_bytes());
            let (next, _) = reg.register_voter(NodeId(i), kp.public().clone()).unwrap();
            reg = next;
            keys.push(kp);
        }
        (reg, keys)
    }

    fn ticket(reg: &VoterRegistry, keys: &[Keypair], i: u32, round: RoundId, ballot: Ballot) -> VoteTicket {
        VoteTicket::sign(
            &keys[i as usize],
            NodeId(i),
            round,
            reg.root(),
            ballot,
            reg.membership_opening(NodeId(i)).unwrap(),
        )
    }

    #[test]
    fn quorum_formula() {
        // Independent oracle: smallest k with 3k >= 2n.
        let brute = |n: u32| (0..=n).find(|k| 3 * k >= 2 * n).unwrap();
        for n in 0..100 {
            assert_eq!(quorum_threshold(n), brute(n), "n={n}");
        }
        assert_eq!(quorum_threshold(4), 3);
        assert_eq!(quorum_threshold(7), 5);
    }

    #[test]
    fn three_of_four_elects() {
        let (reg, keys) = setup_voters(4);
        let round = RoundId(1);
        let ballot = Ballot::Elect { candidate: NodeId(2) };
        let tickets: Vec<_> = (0..3).map(|i| ticket(&reg, &keys, i, round, ballot)).collect();
        let proof = prove_consensus(round, reg.root(), ballot, &tickets, 4).unwrap();
        assert_eq!(proof.tickets.len(), 3);
        assert!(verify_consensus(&proof, &reg.root(), 4, round));
        assert_eq!(proof.winner(), Some(NodeId(2)));
    }

    #[test]
    fn two_of_four_insufficient() {
        let (reg, keys) = setup_voters(4);
        let round = RoundId(1);
        let ballot = Ballot::Elect { candidate: NodeId(2) };
        let tickets: Vec<_> = (0..2).map(|i| ticket(&reg, &keys, i, round, ballot)).collect();
        assert_eq!(
            prove_consensus(round, reg.root(), ballot, &tickets, 4).unwrap_err(),
            ProofError::InsufficientVotes { have: 2, need: 3 }
        );
    }

    #[test]
    fn duplicate_voter_counts_once() {
        let (reg, keys) = setup_voters(4);
        let round = RoundId(1);
        let ballot = Ballot::Elect { candidate: NodeId(0) };
        let t = ticket(&reg, &keys, 1, round, ballot);
        let tickets = vec![t.clone(), t.clone(), t];
        assert_eq!(
            prove_consensus(round, reg.root(), ballot, &tickets, 4).unwrap_err(),
            ProofError::InsufficientVotes { have: 1, need: 3 }
        );
    }

    #[test]
    fn stale_root_ticket_ignored() {
        let (reg, keys) = setup_voters(4);
        let round = RoundId(1);
        let ballot = Ballot::Elect { candidate: NodeId(0) };
        let stale = ticket(&reg, &keys, 0, round, ballot);

        // Another registration moves the root; the old ticket no longer
        // counts toward a proof at the new root.
        let kp = Keypair::from_seed(b"late-joiner");
        let (reg2, _) = reg.register_voter(NodeId(9), kp.public().clone()).unwrap();
        assert!(!stale.verify(&reg2.root(), round));

        let fresh: Vec<_> = (1..4).map(|i| {
            VoteTicket::sign(
                &keys[i as usize],
                NodeId(i),
                round,
                reg2.root(),
                ballot,
                reg2.membership_opening(NodeId(i)).unwrap(),
            )
        }).collect();
        let mut all = fresh.clone();
        all.push(stale);
        // 5 voters now, threshold 4; the stale ticket does not help.
        assert_eq!(
            prove_consensus(round, reg2.root(), ballot, &all, 5).unwrap_err(),
            ProofError::InsufficientVotes { have: 3, need: 4 }
        );
    }

    #[test]
    fn replayed_round_ticket_rejected() {
        let (reg, keys) = setup_voters(4);
        let ballot = Ballot::Elect { candidate: NodeId(0) };
        let old = ticket(&reg, &keys, 0, RoundId(1), ballot);
        assert!(old.verify(&reg.root(), RoundId(1)));
        assert!(!old.verify(&reg.root(), RoundId(2)));
    }

    #[test]
    fn forged_ticket_breaks_quorum() {
        let (reg, keys) = setup_voters(4);
        let round = RoundId(3);
        let ballot = Ballot::Elect { candidate: NodeId(1) };
        let mut tickets: Vec<_> = (0..3).map(|i| ticket(&reg, &keys, i, round, ballot)).collect();
        // Exactly at threshold; now corrupt one signature byte.
        tickets[2].signature.0[10] ^= 0x01;
        let proof = ConsensusProof {
            round,
            voter_root: reg.root(),
            ballot,
            tickets,
            threshold: 3,
        };
        assert!(!verify_consensus(&proof, &reg.root(), 4, round));
    }

    #[test]
    fn unregistered_voter_fails_membership() {
        let (reg, keys) = setup_voters(2);
        // Forge a membership opening for a key that is not in the tree.
        let outsider = Keypair::from_seed(b"outsider");
        let mut opening = reg.membership_opening(NodeId(0)).unwrap();
        opening.value = LeafValue::from_digest(outsider.public().commitment());
        let t = VoteTicket::sign(
            &outsider,
            NodeId(7),
            RoundId(1),
            reg.root(),
            Ballot::Skip,
            opening,
        );
        assert!(!t.verify(&reg.root(), RoundId(1)));
        let _ = keys;
    }

    #[test]
    fn threshold_flips_exactly_at_two_thirds() {
        // Exhaustive over n in 1..=12: k-1 distinct tickets fail, k pass.
        for n in 1u32..=12 {
            let (reg, keys) = setup_voters(n);
            let round = RoundId(5);
            let ballot = Ballot::Elect { candidate: NodeId(0) };
            let k = quorum_threshold(n);
            let make = |m: u32| -> Vec<VoteTicket> {
                (0..m).map(|i| ticket(&reg, &keys, i, round, ballot)).collect()
            };
            if k > 0 {
                let under = prove_consensus(round, reg.root(), ballot, &make(k - 1), n);
                assert!(under.is_err(), "n={n} k-1 accepted");
            }
            let at = prove_consensus(round, reg.root(), ballot, &make(k), n).unwrap();
            assert!(verify_consensus(&at, &reg.root(), n, round), "n={n} k rejected");
        }
    }

    #[test]
    fn ticket_roundtrips_canonically() {
        let (reg, keys) = setup_voters(2);
        let t = ticket(&reg, &keys, 0, RoundId(4), Ballot::Skip);
        let bytes = t.to_canonical_bytes();
        assert_eq!(VoteTicket::from_canonical_bytes(&bytes).unwrap(), t);
    }
}
