//! One aggregator-chain node: relayer, mempool, round lifecycle driver
//! and finalizer.
//!
//! The node is a single logical actor: the harness feeds it one input at
//! a time (peer vote tickets, raw chain observations, client submissions)
//! and collects its outgoing messages. Each node's relayer signs the
//! events it forwards to the node's own transaction handler, so one
//! node's relayer cannot feed another node's handler.
//!
//! Round flow: at round start every active voter signs a ticket for the
//! canonical candidate and sends it there. The winner simulates its
//! mempool in arrival order, aggregates the proofs and broadcasts the
//! block chain-by-chain, invoking chains first, each send gated on the
//! previous receipt. Rounds with no observed progress are skip-voted
//! after a height timeout; a finalized block observed on any chain is
//! relayed onward (continue-broadcast) and, against applied skips,
//! restored via revoke-skip with the recorded call as evidence.

use crate::chain::{ChainEvent, FinalizeCall, InvokeIntent};
use crate::election::{
    canonical_candidate, cast_ballot, initiate_skip, produce_block, revoke_skip, Block,
    RevokeSkipSignal, RoundPhase, SkipSignal,
};
use crate::hash::{hash_tagged, Digest, EVENT_TAG};
use crate::keys::{verify_signature, Keypair, PublicKey, Signature};
use crate::proof::{prove_consensus, Ballot, VoteTicket};
use crate::registry::VoterRegistry;
use crate::state::{ChainId, GlobalState};
use crate::tx::{
    registration_tx, transfer_tx, BundledTransaction, InvocationId, NodeId, RoundId, SchemaId,
    SchemaMeta, TransferSpec, TxError, TxId, TxSource,
};
use crate::wire::Canon;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

/// Default round timeout in native block heights.
pub const DEFAULT_DELTA_VOTE: u64 = 10;

/// An event observed on a native chain, signed by the forwarding relayer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelayedEvent {
    pub origin: ChainId,
    pub event: ChainEvent,
    pub observed_height: u64,
    pub relayer: NodeId,
    pub signature: Signature,
}

fn relayed_message(origin: ChainId, event: &ChainEvent, height: u64, relayer: NodeId) -> Digest {
    let mut w = crate::wire::Writer::new();
    origin.encode(&mut w);
    event.encode(&mut w);
    w.u64(height);
    w.u32(relayer.0);
    hash_tagged(EVENT_TAG, &w.finish())
}

impl RelayedEvent {
    pub fn sign(keypair: &Keypair, relayer: NodeId, origin: ChainId, event: ChainEvent, height: u64) -> RelayedEvent {
        let msg = relayed_message(origin, &event, height, relayer);
        RelayedEvent {
            origin,
            event,
            observed_height: height,
            relayer,
            signature: keypair.sign(msg.as_bytes()),
        }
    }

    pub fn verify(&self, pubkey: &PublicKey) -> bool {
        let msg = relayed_message(self.origin, &self.event, self.observed_height, self.relayer);
        verify_signature(pubkey, msg.as_bytes(), &self.signature)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("relayed event signature invalid or foreign")]
    BadRelayerSignature,
    #[error("unknown schema")]
    UnknownSchema,
    #[error(transparent)]
    Malformed(#[from] TxError),
}

/// Chain-facing submissions a node emits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainCall {
    Finalize(FinalizeCall),
    Skip(SkipSignal),
    RevokeSkip(RevokeSkipSignal),
}

/// Inputs the harness can feed a node.
#[derive(Clone, Debug)]
pub enum NodeInput {
    /// A vote ticket from a peer (or from the node itself).
    Ticket(VoteTicket),
    /// A raw chain observation; the node's own relayer wraps and signs it.
    Observation(ChainEvent),
    /// Client-submitted pure bundle.
    PureTx(BundledTransaction),
    /// A joining node announcing itself; receivers enqueue the
    /// registration system transaction.
    JoinRequest { node: NodeId, pubkey: PublicKey },
    /// A voter announcing departure; receivers enqueue the quit
    /// transaction that tombstones its registry leaf.
    QuitRequest { node: NodeId },
}

/// Outgoing effects collected by the harness.
#[derive(Clone, Debug)]
pub enum NodeOutput {
    Ticket { to: NodeId, ticket: VoteTicket },
    Chain { chain: ChainId, call: ChainCall },
    /// Structured trace note (round phases, drops, aborts).
    Note { kind: &'static str, detail: String },
}

/// How one round ended from this node's perspective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundOutcome {
    ProducedAndFinalized,
    ObservedFinalized,
    Skipped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Terminal {
    Finalized,
    Skipped,
}

/// Full state of one aggregator node.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    keypair: Keypair,
    /// Local replica of the global state; root equals the last applied
    /// block's post-root.
    pub replica: GlobalState,
    /// Local replica of the voter registry.
    pub registry: VoterRegistry,
    pub mempool: VecDeque<BundledTransaction>,
    seen_tx: BTreeSet<TxId>,
    /// Invocations already consumed or refunded; their bundles are dead.
    closed_invocations: BTreeSet<(ChainId, InvocationId)>,
    pub round: RoundId,
    pub phase: RoundPhase,
    elect_tickets: Vec<VoteTicket>,
    skip_tickets: Vec<VoteTicket>,
    revoke_tickets: Vec<VoteTicket>,
    produced: Option<Block>,
    broadcast_queue: VecDeque<ChainId>,
    /// Whether this node cast its election ticket this round. Voting is
    /// lazy: idle nodes (empty mempool, no election traffic) stay quiet so
    /// the system quiesces between workloads.
    voted: bool,
    /// Tickets for rounds this node has not reached yet.
    future_tickets: Vec<VoteTicket>,
    skip_voted: bool,
    skip_signal_sent: bool,
    revoke_voted: bool,
    revoke_signal_sent: bool,
    continued: BTreeSet<(RoundId, ChainId)>,
    /// Observed terminal statuses per round per chain.
    terminal: BTreeMap<RoundId, BTreeMap<ChainId, Terminal>>,
    /// Recorded finalize calls observed per round (broadcast evidence).
    evidence: BTreeMap<RoundId, FinalizeCall>,
    /// Finalize calls whose replica application awaits root chaining.
    stashed_calls: Vec<FinalizeCall>,
    applied_rounds: BTreeSet<RoundId>,
    pub ledger: Vec<Block>,
    pub outcomes: Vec<(RoundId, RoundOutcome)>,
    heights: BTreeMap<ChainId, u64>,
    round_start_heights: BTreeMap<ChainId, u64>,
    skip_streak: u64,
    round_started: bool,
    pub delta_vote: u64,
    pub crashed: bool,
    /// Fault hook: the relayer adds this to every relayed invoke amount.
    pub relayer_corruption: Option<u64>,
    /// Fault hook: vote with the genesis registry root forever.
    pub stale_root_voter: bool,
    stale_root: Digest,
    /// Announced keys from join requests, by registry commitment.
    announced: BTreeMap<NodeId, PublicKey>,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        keypair: Keypair,
        genesis: GlobalState,
        registry: VoterRegistry,
        delta_vote: u64,
    ) -> NodeState {
        let stale_root = registry.root();
        NodeState {
            id,
            keypair,
            replica: genesis,
            registry,
            mempool: VecDeque::new(),
            seen_tx: BTreeSet::new(),
            closed_invocations: BTreeSet::new(),
            round: RoundId(0),
            phase: RoundPhase::Voting,
            elect_tickets: Vec::new(),
            skip_tickets: Vec::new(),
            revoke_tickets: Vec::new(),
            produced: None,
            broadcast_queue: VecDeque::new(),
            voted: false,
            future_tickets: Vec::new(),
            skip_voted: false,
            skip_signal_sent: false,
            revoke_voted: false,
            revoke_signal_sent: false,
            continued: BTreeSet::new(),
            terminal: BTreeMap::new(),
            evidence: BTreeMap::new(),
            stashed_calls: Vec::new(),
            applied_rounds: BTreeSet::new(),
            ledger: Vec::new(),
            outcomes: Vec::new(),
            heights: BTreeMap::new(),
            round_start_heights: BTreeMap::new(),
            skip_streak: 0,
            round_started: false,
            delta_vote,
            crashed: false,
            relayer_corruption: None,
            stale_root_voter: false,
            stale_root,
            announced: BTreeMap::new(),
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public()
    }

    pub fn is_voter(&self) -> bool {
        self.registry.is_active(self.id)
    }

    pub fn crash(&mut self) {
        self.crashed = true;
    }

    /// True when the node has bundles waiting for a block.
    pub fn has_work(&self) -> bool {
        !self.mempool.is_empty()
    }

    /// True when nothing is queued or mid-broadcast on this node.
    pub fn is_idle(&self) -> bool {
        self.mempool.is_empty() && self.broadcast_queue.is_empty()
    }

    /// Begin the node's current round. Tickets that arrived before the
    /// local start already sit in this round's pools (pools are cleared
    /// only at round transitions). The election ticket itself is cast
    /// lazily: immediately when the mempool has work, otherwise on the
    /// first sign of election traffic or new work.
    pub fn start_round(&mut self) -> Vec<NodeOutput> {
        if self.crashed || self.round_started {
            return vec![];
        }
        self.round_started = true;
        self.phase = RoundPhase::Voting;
        self.round_start_heights = self.heights.clone();

        let mut out = vec![Note::phase(self.round, "voting")];
        // Drain buffered tickets that were early for this round.
        let (now, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.future_tickets)
            .into_iter()
            .partition(|t| t.round == self.round);
        self.future_tickets = later;
        for t in now {
            out.extend(self.on_ticket(t));
        }
        out.extend(self.cast_round_vote());
        out
    }

    /// Cast this round's election ticket if eligible and not yet cast.
    fn cast_round_vote(&mut self) -> Vec<NodeOutput> {
        if self.voted || !self.round_started || !self.is_voter() || !self.has_work() {
            return vec![];
        }
        let Some(candidate) = canonical_candidate(self.round, self.skip_streak, &self.registry)
        else {
            return vec![];
        };
        self.voted = true;
        let root = if self.stale_root_voter {
            self.stale_root
        } else {
            self.registry.root()
        };
        // Stale-root voters sign against their outdated replica root; an
        // honest voter synchronizes first and signs the current root.
        let membership = self
            .registry
            .membership_opening(self.id)
            .expect("active voter has a slot");
        let ticket = VoteTicket::sign(
            &self.keypair,
            self.id,
            self.round,
            root,
            Ballot::Elect { candidate },
            membership,
        );
        vec![NodeOutput::Ticket {
            to: candidate,
            ticket,
        }]
    }

    /// Main entry: feed one input, collect outgoing effects.
    pub fn handle(&mut self, input: NodeInput) -> Vec<NodeOutput> {
        if self.crashed {
            return vec![];
        }
        match input {
            NodeInput::Ticket(t) => self.on_ticket(t),
            NodeInput::Observation(ev) => {
                let height = self.heights.get(&ev.chain()).copied().unwrap_or(0);
                let wrapped = self.relayer_wrap(ev, height);
                match self.on_native_event(wrapped) {
                    Ok(out) => out,
                    Err(e) => vec![NodeOutput::Note {
                        kind: "relayer-reject",
                        detail: e.to_string(),
                    }],
                }
            }
            NodeInput::PureTx(tx) => match self.submit_pure_tx_inner(tx) {
                Ok(out) => out,
                Err(e) => vec![NodeOutput::Note {
                    kind: "tx-reject",
                    detail: e.to_string(),
                }],
            },
            NodeInput::JoinRequest { node, pubkey } => self.on_join_request(node, pubkey),
            NodeInput::QuitRequest { node } => self.on_quit_request(node),
        }
    }

    /// The node's own relayer: observes a chain event, optionally corrupts
    /// it (fault hook), signs it with the node's consensus key and hands
    /// it to the transaction handler.
    fn relayer_wrap(&self, event: ChainEvent, height: u64) -> RelayedEvent {
        let mut event = event;
        if let Some(extra) = self.relayer_corruption {
            if let ChainEvent::InvokeCommitted { intent, .. } = &mut event {
                let InvokeIntent::Transfer { amount, .. } = intent;
                *amount += extra;
            }
        }
        let origin = event.chain();
        RelayedEvent::sign(&self.keypair, self.id, origin, event, height)
    }

    /// Accept a client-submitted bundle into the mempool.
    pub fn submit_pure_tx(&mut self, tx: BundledTransaction) -> Result<(), NodeError> {
        self.submit_pure_tx_inner(tx).map(|_| ())
    }

    fn submit_pure_tx_inner(&mut self, tx: BundledTransaction) -> Result<Vec<NodeOutput>, NodeError> {
        match tx.source {
            TxSource::Pure | TxSource::System => {}
            TxSource::InvokeHeaded { .. } => {
                return Err(NodeError::Malformed(TxError::MalformedTx(
                    "invoke-headed bundles enter via relayed events".into(),
                )))
            }
        }
        tx.validate_shape(self.replica.layout())?;
        Ok(self.enqueue(tx))
    }

    fn enqueue(&mut self, tx: BundledTransaction) -> Vec<NodeOutput> {
        if self.seen_tx.insert(tx.id) {
            self.mempool.push_back(tx);
            return self.cast_round_vote();
        }
        vec![]
    }

    fn on_join_request(&mut self, node: NodeId, pubkey: PublicKey) -> Vec<NodeOutput> {
        self.announced.insert(node, pubkey.clone());
        if self.registry.is_active(node) {
            return vec![];
        }
        // The registry witness is recomputed by the producer at block
        // build; the mempool carries a placeholder against the current
        // replica so the bundle is well formed.
        if let Ok((_, witness)) = self.registry.register_voter(node, pubkey.clone()) {
            let tx = registration_tx(TxId::for_registration(node), node, pubkey, witness);
            return self.enqueue(tx);
        }
        vec![]
    }

    fn on_quit_request(&mut self, node: NodeId) -> Vec<NodeOutput> {
        let Some(pubkey) = self.registry.public_key(node).cloned() else {
            return vec![];
        };
        if let Ok((_, witness)) = self.registry.deregister_voter(node) {
            let tx = registration_tx(TxId::for_quit(node), node, pubkey, witness);
            return self.enqueue(tx);
        }
        vec![]
    }

    /// Handle an event forwarded by a relayer. Events signed by another
    /// node's relayer are rejected.
    pub fn on_native_event(&mut self, ev: RelayedEvent) -> Result<Vec<NodeOutput>, NodeError> {
        if ev.relayer != self.id || !ev.verify(self.keypair.public()) {
            return Err(NodeError::BadRelayerSignature);
        }
        let mut out = Vec::new();
        match ev.event {
            ChainEvent::HeightTick { chain, height } => {
                self.heights.insert(chain, height);
                out.extend(self.check_timeout());
            }
            ChainEvent::InvokeCommitted {
                chain,
                invocation,
                intent,
                ..
            } => {
                if !self.closed_invocations.contains(&(chain, invocation)) {
                    match self.continuation_tx(chain, invocation, &intent) {
                        Ok(tx) => out.extend(self.enqueue(tx)),
                        Err(e) => out.push(NodeOutput::Note {
                            kind: "continuation-drop",
                            detail: e.to_string(),
                        }),
                    }
                }
            }
            ChainEvent::RevokeExecuted { chain, invocation } => {
                self.closed_invocations.insert((chain, invocation));
                let dead_cont = TxId::for_invocation(chain, invocation);
                let dead_revoke = TxId::for_revoke(chain, invocation);
                self.mempool.retain(|t| t.id != dead_cont && t.id != dead_revoke);
            }
            ChainEvent::BlockFinalized {
                chain,
                round,
                call,
                ..
            } => {
                self.terminal.entry(round).or_default().insert(chain, Terminal::Finalized);
                self.evidence.entry(round).or_insert_with(|| (*call).clone());
                self.stash_and_apply(*call);
                out.extend(self.on_terminal_change());
            }
            ChainEvent::SkipApplied { chain, round } => {
                self.terminal.entry(round).or_default().insert(chain, Terminal::Skipped);
                out.extend(self.on_terminal_change());
            }
            ChainEvent::SkipRevoked { chain, round } => {
                self.terminal.entry(round).or_default().remove(&chain);
                self.continued.remove(&(round, chain));
                out.extend(self.on_terminal_change());
            }
            ChainEvent::FinalizeRejected { chain, round, reason } => {
                if self.produced.as_ref().map(|b| b.round) == Some(round) {
                    self.broadcast_queue.clear();
                    out.push(NodeOutput::Note {
                        kind: "broadcast-abort",
                        detail: format!("chain {chain} rejected round {round}: {reason}"),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Build the continuation bundle for a relayed invoke event.
    fn continuation_tx(
        &self,
        chain: ChainId,
        invocation: InvocationId,
        intent: &InvokeIntent,
    ) -> Result<BundledTransaction, TxError> {
        let layout = self.replica.layout();
        let InvokeIntent::Transfer {
            amount,
            from_slot,
            from_pool_slot,
            to_chain,
            to_slot,
            to_pool_slot,
            payout_to,
            payout_pool,
            ..
        } = intent;
        let spec = TransferSpec {
            amount: *amount,
            from_chain: chain,
            from: layout
                .chain_leaf_path(chain, *from_slot)
                .map_err(|e| TxError::MalformedTx(e.to_string()))?,
            from_pool: layout
                .chain_leaf_path(chain, *from_pool_slot)
                .map_err(|e| TxError::MalformedTx(e.to_string()))?,
            to_chain: *to_chain,
            to: layout
                .chain_leaf_path(*to_chain, *to_slot)
                .map_err(|e| TxError::MalformedTx(e.to_string()))?,
            to_pool: layout
                .chain_leaf_path(*to_chain, *to_pool_slot)
                .map_err(|e| TxError::MalformedTx(e.to_string()))?,
            payout_to: payout_to.clone(),
            payout_pool: payout_pool.clone(),
        };
        Ok(transfer_tx(
            TxId::for_invocation(chain, invocation),
            TxSource::InvokeHeaded { chain, invocation },
            &spec,
        ))
    }

    fn on_ticket(&mut self, t: VoteTicket) -> Vec<NodeOutput> {
        if t.round > self.round {
            // Early ticket from a node that finished the round before us.
            self.future_tickets.push(t);
            return vec![];
        }
        if t.round < self.round {
            return vec![];
        }
        let mut out = Vec::new();
        match t.ballot {
            Ballot::Elect { candidate } if candidate == self.id => {
                self.elect_tickets.push(t);
                // Election traffic proves someone has work; join in even
                // with an empty mempool so the quorum can form.
                if !self.voted && self.is_voter() {
                    self.voted = true;
                    if let Ok(own) = cast_ballot(
                        &self.keypair,
                        self.id,
                        self.round,
                        &self.registry,
                        Ballot::Elect { candidate: self.id },
                    ) {
                        out.extend(self.on_ticket(own));
                    }
                }
                if self.produced.is_none() {
                    out.extend(self.try_produce());
                }
            }
            Ballot::Elect { .. } => {}
            Ballot::Skip => {
                self.skip_tickets.push(t);
                out.extend(self.try_skip_signal());
            }
            Ballot::RevokeSkip => {
                self.revoke_tickets.push(t);
                out.extend(self.try_revoke_signal());
            }
        }
        out
    }

    /// Attempt election with the tickets gathered so far; on quorum,
    /// simulate, prove, and start the gated broadcast.
    fn try_produce(&mut self) -> Vec<NodeOutput> {
        let n = self.registry.voter_count();
        let proof = match prove_consensus(
            self.round,
            self.registry.root(),
            Ballot::Elect { candidate: self.id },
            &self.elect_tickets,
            n,
        ) {
            Ok(p) => p,
            Err(_) => return vec![],
        };
        self.phase = RoundPhase::Producing;
        let mut out = vec![Note::phase(self.round, "producing")];

        let prepared = self.prepare_mempool();
        let result = produce_block(self.id, proof, &prepared, &self.replica);
        for (id, failure) in &result.dropped {
            out.push(NodeOutput::Note {
                kind: "tx-dropped",
                detail: format!("{id:?}: {failure}"),
            });
        }
        let block = result.block;

        // Broadcast plan: invoking chains first, gated on receipts.
        let mut plan: Vec<ChainId> = Vec::new();
        for tx in &block.txs {
            if let TxSource::InvokeHeaded { chain, .. } = tx.source {
                if !plan.contains(&chain) {
                    plan.push(chain);
                }
            }
        }
        for chain in self.replica.layout().chain_ids() {
            if !plan.contains(&chain) {
                plan.push(chain);
            }
        }
        self.produced = Some(block);
        self.broadcast_queue = plan.into();
        self.phase = RoundPhase::Broadcasting;
        out.push(Note::phase(self.round, "broadcasting"));
        out.extend(self.next_broadcast());
        out
    }

    /// Mempool snapshot for production: FIFO, minus dead bundles, with
    /// registration witnesses refreshed, restricted to one invoking chain
    /// per block, and revokes preferred over their continuations.
    fn prepare_mempool(&self) -> Vec<BundledTransaction> {
        let mut scratch_registry = self.registry.clone();
        let mut out: Vec<BundledTransaction> = Vec::new();
        let mut invoking_chain: Option<ChainId> = None;
        let revokes_present: BTreeSet<TxId> = self
            .mempool
            .iter()
            .filter(|t| t.schema == SchemaId::Callback)
            .map(|t| t.id)
            .collect();

        for tx in &self.mempool {
            match tx.source {
                TxSource::InvokeHeaded { chain, invocation } => {
                    if self.closed_invocations.contains(&(chain, invocation)) {
                        continue;
                    }
                    if revokes_present.contains(&TxId::for_revoke(chain, invocation)) {
                        // A queued revoke supersedes the continuation.
                        continue;
                    }
                    match invoking_chain {
                        None => invoking_chain = Some(chain),
                        Some(c) if c == chain => {}
                        Some(_) => continue, // deferred to a later block
                    }
                    out.push(tx.clone());
                }
                _ => {
                    if tx.schema == SchemaId::Registration {
                        let SchemaMeta::Registration { node, pubkey } = &tx.meta else {
                            continue;
                        };
                        // Refresh the witness against the running registry.
                        let refreshed = if tx
                            .steps
                            .first()
                            .map(|s| matches!(&s.op, crate::tx::StepOp::CommitRegistry { witness } if witness.new_value == crate::registry::TOMBSTONE))
                            .unwrap_or(false)
                        {
                            scratch_registry.deregister_voter(*node)
                        } else {
                            scratch_registry.register_voter(*node, pubkey.clone())
                        };
                        match refreshed {
                            Ok((next, witness)) => {
                                scratch_registry = next;
                                out.push(registration_tx(tx.id, *node, pubkey.clone(), witness));
                            }
                            Err(_) => continue, // already applied or impossible
                        }
                    } else {
                        out.push(tx.clone());
                    }
                }
            }
        }
        out
    }

    fn finalize_call_for(&self, block: &Block) -> FinalizeCall {
        FinalizeCall {
            l2account: self.id.0 as u64,
            tx_data: block.txs.clone(),
            verify_data: block.proof.clone(),
            vid: self.id,
            nonce: block.round.0 + 1,
            rid: block.round,
        }
    }

    /// Send the produced block to the next chain in the gated plan.
    fn next_broadcast(&mut self) -> Vec<NodeOutput> {
        let Some(block) = &self.produced else {
            return vec![];
        };
        let Some(chain) = self.broadcast_queue.pop_front() else {
            return vec![];
        };
        let call = self.finalize_call_for(block);
        vec![NodeOutput::Chain {
            chain,
            call: ChainCall::Finalize(call),
        }]
    }

    /// Height-based round timeout: if this node is engaged in the round
    /// (it voted), no chain reported any terminal, and the clock ran out,
    /// vote to skip.
    fn check_timeout(&mut self) -> Vec<NodeOutput> {
        if self.skip_voted || !self.voted || !self.is_voter() {
            return vec![];
        }
        if self.terminal.get(&self.round).map(|m| !m.is_empty()).unwrap_or(false) {
            return vec![];
        }
        let expired = self.heights.iter().any(|(chain, h)| {
            let start = self.round_start_heights.get(chain).copied().unwrap_or(0);
            h.saturating_sub(start) >= self.delta_vote
        });
        if !expired {
            return vec![];
        }
        self.skip_voted = true;
        self.phase = RoundPhase::SkipVoting;
        let ticket = match cast_ballot(&self.keypair, self.id, self.round, &self.registry, Ballot::Skip) {
            Ok(t) => t,
            Err(_) => return vec![],
        };
        let mut out = vec![Note::phase(self.round, "skip-voting")];
        // Skip tickets go to every voter (any node may assemble the
        // signal), including ourselves.
        for (peer, _) in self.registry.active_voters() {
            out.push(NodeOutput::Ticket {
                to: peer,
                ticket: ticket.clone(),
            });
        }
        out
    }

    fn try_skip_signal(&mut self) -> Vec<NodeOutput> {
        if self.skip_signal_sent {
            return vec![];
        }
        let n = self.registry.voter_count();
        match initiate_skip(self.round, &self.registry.root(), n, &self.skip_tickets) {
            Ok(signal) => {
                self.skip_signal_sent = true;
                let mut out = vec![NodeOutput::Note {
                    kind: "skip-signal",
                    detail: format!("round {}", self.round),
                }];
                for chain in self.replica.layout().chain_ids() {
                    out.push(NodeOutput::Chain {
                        chain,
                        call: ChainCall::Skip(signal.clone()),
                    });
                }
                out
            }
            Err(_) => vec![],
        }
    }

    fn try_revoke_signal(&mut self) -> Vec<NodeOutput> {
        if self.revoke_signal_sent {
            return vec![];
        }
        let Some(evidence) = self.evidence.get(&self.round) else {
            return vec![];
        };
        let n = self.registry.voter_count();
        match revoke_skip(
            self.round,
            &self.registry.root(),
            n,
            evidence.clone(),
            &self.revoke_tickets,
        ) {
            Ok(signal) => {
                self.revoke_signal_sent = true;
                let mut out = vec![NodeOutput::Note {
                    kind: "revoke-skip-signal",
                    detail: format!("round {}", self.round),
                }];
                for chain in self.replica.layout().chain_ids() {
                    out.push(NodeOutput::Chain {
                        chain,
                        call: ChainCall::RevokeSkip(signal.clone()),
                    });
                }
                out
            }
            Err(_) => vec![],
        }
    }

    /// Ordered replica application: a stashed call applies once its batch
    /// pre-root matches the replica root, which serializes blocks across
    /// rounds regardless of event arrival order.
    fn stash_and_apply(&mut self, call: FinalizeCall) {
        if !self.applied_rounds.contains(&call.rid) {
            self.stashed_calls.push(call);
        }
        loop {
            let root = self.replica.root();
            let Some(pos) = self
                .stashed_calls
                .iter()
                .position(|c| c.verify_data.batch_root_before == root && !self.applied_rounds.contains(&c.rid))
            else {
                break;
            };
            let call = self.stashed_calls.remove(pos);
            self.apply_finalized(&call);
        }
        self.stashed_calls
            .retain(|c| !self.applied_rounds.contains(&c.rid));
    }

    fn apply_finalized(&mut self, call: &FinalizeCall) {
        for (tx, transcript) in call.tx_data.iter().zip(&call.verify_data.transcripts) {
            for w in &transcript.steps {
                if let Ok(next) = self.replica.apply_witness(w) {
                    self.replica = next;
                }
            }
            // Registration bundles also advance the registry replica.
            if tx.schema == SchemaId::Registration {
                if let (SchemaMeta::Registration { node, pubkey }, Some(step)) =
                    (&tx.meta, tx.steps.first())
                {
                    if let crate::tx::StepOp::CommitRegistry { witness } = &step.op {
                        let joining = witness.new_value != crate::registry::TOMBSTONE;
                        self.registry = self.registry.apply_change(
                            *node,
                            witness,
                            joining.then(|| pubkey.clone()),
                        );
                    }
                }
            }
            // Drop finalized bundles and mark their invocations closed.
            self.seen_tx.insert(tx.id);
            self.mempool.retain(|t| t.id != tx.id);
            if let TxSource::InvokeHeaded { chain, invocation } = tx.source {
                self.closed_invocations.insert((chain, invocation));
            }
            for (_, se) in tx.side_effects() {
                if let crate::tx::EffectAction::RemovePendingInvocation { invocation, .. } =
                    se.action
                {
                    if let crate::tx::EffectTarget::Chain(chain) = se.target {
                        self.closed_invocations.insert((chain, invocation));
                        let dead = TxId::for_invocation(chain, invocation);
                        let dead_rv = TxId::for_revoke(chain, invocation);
                        self.mempool.retain(|t| t.id != dead && t.id != dead_rv);
                    }
                }
            }
        }
        self.applied_rounds.insert(call.rid);
        self.ledger.push(Block {
            round: call.rid,
            producer: call.vid,
            txs: call.tx_data.clone(),
            pre_root: call.verify_data.batch_root_before,
            post_root: call.verify_data.batch_root_after,
            proof: call.verify_data.clone(),
        });
        debug_assert_eq!(self.replica.root(), call.verify_data.batch_root_after);
        debug_assert_eq!(self.replica.registry_commit(), self.registry.root());
    }

    /// React to terminal-status knowledge: continue broadcasts, detect
    /// mixed rounds (revoke-skip), and complete the round when every chain
    /// reports the same terminal.
    fn on_terminal_change(&mut self) -> Vec<NodeOutput> {
        let mut out = Vec::new();
        let chains: Vec<ChainId> = self.replica.layout().chain_ids().collect();
        let statuses = self.terminal.get(&self.round).cloned().unwrap_or_default();

        let finalized: Vec<ChainId> = statuses
            .iter()
            .filter(|(_, t)| **t == Terminal::Finalized)
            .map(|(c, _)| *c)
            .collect();
        let skipped: Vec<ChainId> = statuses
            .iter()
            .filter(|(_, t)| **t == Terminal::Skipped)
            .map(|(c, _)| *c)
            .collect();

        // Partial broadcast recovery: a recorded proof exists, some chain
        // has no terminal yet; any node re-submits the identical call.
        if !finalized.is_empty() {
            if let Some(evidence) = self.evidence.get(&self.round).cloned() {
                for chain in &chains {
                    if !statuses.contains_key(chain) && self.continued.insert((self.round, *chain))
                    {
                        // Producers keep their own gated queue; observers
                        // relay the recorded call.
                        out.push(NodeOutput::Chain {
                            chain: *chain,
                            call: ChainCall::Finalize(evidence.clone()),
                        });
                    }
                }
            }
        }

        // Mixed terminals: the block surfaced somewhere while other chains
        // applied the skip. Vote to revoke the skip, carrying evidence.
        if !finalized.is_empty() && !skipped.is_empty() && !self.revoke_voted && self.is_voter() {
            self.revoke_voted = true;
            self.phase = RoundPhase::RevokeSkipVoting;
            if let Ok(ticket) = cast_ballot(
                &self.keypair,
                self.id,
                self.round,
                &self.registry,
                Ballot::RevokeSkip,
            ) {
                out.push(Note::phase(self.round, "revoke-skip-voting"));
                for (peer, _) in self.registry.active_voters() {
                    out.push(NodeOutput::Ticket {
                        to: peer,
                        ticket: ticket.clone(),
                    });
                }
            }
        }

        // Producer's gated broadcast: advance the queue when the chain we
        // just sent to reports back.
        if self.produced.is_some() && !self.broadcast_queue.is_empty() {
            let sent_watermark = chains.len() - self.broadcast_queue.len();
            let acked = finalized.len();
            if acked >= sent_watermark {
                out.extend(self.next_broadcast());
            }
        }

        // Round completion: all chains report the same terminal status.
        if statuses.len() == chains.len() {
            if finalized.len() == chains.len() {
                let outcome = if self.produced.is_some() {
                    RoundOutcome::ProducedAndFinalized
                } else {
                    RoundOutcome::ObservedFinalized
                };
                out.extend(self.complete_round(outcome));
            } else if skipped.len() == chains.len() {
                out.extend(self.complete_round(RoundOutcome::Skipped));
            }
            // Mixed: handled above; wait for the revoke-skip to heal it.
        }
        out
    }

    fn complete_round(&mut self, outcome: RoundOutcome) -> Vec<NodeOutput> {
        self.outcomes.push((self.round, outcome));
        self.phase = match outcome {
            RoundOutcome::Skipped => RoundPhase::Skipped,
            _ => RoundPhase::Finalized,
        };
        match outcome {
            RoundOutcome::Skipped => self.skip_streak += 1,
            _ => self.skip_streak = 0,
        }
        let mut out = vec![NodeOutput::Note {
            kind: "round-complete",
            detail: format!("round {} {:?}", self.round, outcome),
        }];
        self.round = self.round.next();
        self.elect_tickets.clear();
        self.skip_tickets.clear();
        self.revoke_tickets.clear();
        self.voted = false;
        self.produced = None;
        self.broadcast_queue.clear();
        self.skip_voted = false;
        self.skip_signal_sent = false;
        self.revoke_voted = false;
        self.revoke_signal_sent = false;
        self.round_started = false;
        out.extend(self.start_round());
        out
    }

    /// Share a finalize call recorded on some chain with every chain that
    /// has not reported a terminal for that round. Chains that already
    /// processed it reject the replay harmlessly.
    pub fn continue_broadcast(&mut self, evidence: FinalizeCall) -> Vec<NodeOutput> {
        if self.crashed {
            return vec![];
        }
        let rid = evidence.rid;
        self.evidence.entry(rid).or_insert_with(|| evidence.clone());
        let statuses = self.terminal.get(&rid).cloned().unwrap_or_default();
        let mut out = Vec::new();
        for chain in self.replica.layout().chain_ids() {
            if !statuses.contains_key(&chain) && self.continued.insert((rid, chain)) {
                out.push(NodeOutput::Chain {
                    chain,
                    call: ChainCall::Finalize(evidence.clone()),
                });
            }
        }
        out
    }
}

struct Note;

impl Note {
    fn phase(round: RoundId, name: &'static str) -> NodeOutput {
        NodeOutput::Note {
            kind: "phase",
            detail: format!("round {round} {name}"),
        }
    }
}

/// Abstract transport run_round drives: the callee owns peers and chains.
pub trait NetworkHandle {
    fn send_ticket(&mut self, from: NodeId, to: NodeId, ticket: VoteTicket);
    fn submit_chain_call(&mut self, from: NodeId, chain: ChainId, call: ChainCall);
    /// Next pending input for `me`, if any.
    fn poll(&mut self, me: NodeId) -> Option<NodeInput>;
    /// Called when the node is idle: advance the external clock one block.
    fn idle_tick(&mut self);
}

/// Drive one full round to its terminal outcome against a network handle.
/// Used for direct library-level runs; the discrete-event harness steps
/// nodes through [`NodeState::handle`] instead.
pub fn run_round(node: &mut NodeState, net: &mut dyn NetworkHandle) -> RoundOutcome {
    // Ingest whatever is already queued (relayed invokes, submissions)
    // before opening the round, so an immediate self-election still sees
    // the current mempool.
    let mut pending: VecDeque<NodeOutput> = VecDeque::new();
    while let Some(input) = net.poll(node.id) {
        pending.extend(node.handle(input));
    }
    let entry_round = node.round;
    pending.extend(node.start_round());
    loop {
        while let Some(out) = pending.pop_front() {
            route_output(node, net, out, &mut pending);
        }
        if let Some((_, outcome)) = node
            .outcomes
            .iter()
            .find(|(r, _)| *r == entry_round)
            .copied()
        {
            return outcome;
        }
        match net.poll(node.id) {
            Some(input) => {
                let outs = node.handle(input);
                pending.extend(outs);
            }
            None => {
                net.idle_tick();
            }
        }
    }
}

fn route_output(
    node: &mut NodeState,
    net: &mut dyn NetworkHandle,
    out: NodeOutput,
    pending: &mut VecDeque<NodeOutput>,
) {
    match out {
        NodeOutput::Ticket { to, ticket } => {
            if to == node.id {
                pending.extend(node.handle(NodeInput::Ticket(ticket)));
            } else {
                net.send_ticket(node.id, to, ticket);
            }
        }
        NodeOutput::Chain { chain, call } => net.submit_chain_call(node.id, chain, call),
        NodeOutput::Note { .. } => {}
    }
}
