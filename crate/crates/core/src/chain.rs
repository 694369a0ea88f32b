//! Simulated native chain hosting the guest proxy contract.
//!
//! The proxy keeps a block-height clock, the user-facing invoke/revoke
//! interface with its pending queue and escrow, and the verification
//! interface called by aggregator nodes. It pins the global state root,
//! the voter-registry root and the voter count, and maintains a full
//! mirror of the global state assembled exclusively from verified
//! witnesses, which is what makes the local computation of the
//! post-invoke root well defined.
//!
//! Every call executes sequentially and atomically: all checks run before
//! any mutation, so a rejected call leaves the state bit-identical.

use crate::hash::Digest;
use crate::merkle::MtiPath;
use crate::proof::{verify_aggregated, verify_consensus, AggregatedProof, Ballot};
use crate::state::{ChainId, GlobalState};
use crate::tx::{
    Account, BundledTransaction, EffectAction, EffectTarget, InvocationId, NodeId, RoundId,
    SideEffectSpec, TxId, TxSource, CALLBACK_SET_VOTER_ROOT,
};
use crate::wire::{Canon, Reader, WireError, Writer};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// What a user asks the proxy to start. The intent is escrowed, emitted
/// with the invoke event, and turned into the continuation bundle by the
/// relayers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InvokeIntent {
    Transfer {
        amount: u64,
        /// Sender's balance slot in this chain's subrange.
        from_slot: u64,
        /// Source pool slot in this chain's subrange.
        from_pool_slot: u64,
        /// Native account credited with the escrow when the transfer
        /// finalizes (the source pool's owner).
        from_pool_owner: Account,
        to_chain: ChainId,
        to_slot: u64,
        to_pool_slot: u64,
        /// Native payout target on the destination chain.
        payout_to: Option<Account>,
        /// Custody account funding the payout on the destination chain.
        payout_pool: Account,
    },
}

impl InvokeIntent {
    pub fn amount(&self) -> u64 {
        match self {
            InvokeIntent::Transfer { amount, .. } => *amount,
        }
    }
}

impl Canon for InvokeIntent {
    fn encode(&self, w: &mut Writer) {
        match self {
            InvokeIntent::Transfer {
                amount,
                from_slot,
                from_pool_slot,
                from_pool_owner,
                to_chain,
                to_slot,
                to_pool_slot,
                payout_to,
                payout_pool,
            } => {
                w.u8(1);
                w.u64(*amount);
                w.u64(*from_slot);
                w.u64(*from_pool_slot);
                from_pool_owner.encode(w);
                to_chain.encode(w);
                w.u64(*to_slot);
                w.u64(*to_pool_slot);
                match payout_to {
                    None => {
                        w.u8(0);
                    }
                    Some(a) => {
                        w.u8(1);
                        a.encode(w);
                    }
                }
                payout_pool.encode(w);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            1 => Ok(InvokeIntent::Transfer {
                amount: r.u64()?,
                from_slot: r.u64()?,
                from_pool_slot: r.u64()?,
                from_pool_owner: Account::decode(r)?,
                to_chain: ChainId::decode(r)?,
                to_slot: r.u64()?,
                to_pool_slot: r.u64()?,
                payout_to: match r.u8()? {
                    0 => None,
                    _ => Some(Account::decode(r)?),
                },
                payout_pool: Account::decode(r)?,
            }),
            v => Err(WireError::InvalidValue {
                field: "intent",
                value: v as u64,
            }),
        }
    }
}

/// Entry in the proxy's table of unfinalized invoke transactions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PendingInvocation {
    pub id: InvocationId,
    pub sender: Account,
    pub amount: u64,
    pub recorded_height: u64,
    /// Local computation of the global root right after the invoke's
    /// state-tree delta, pinned at invoke time.
    pub post_invoke_root: Digest,
    /// Global path of the sender's balance leaf (the invoke's delta).
    pub from_path: MtiPath,
    /// Custody account credited when the escrow is consumed.
    pub pool_owner: Account,
    pub intent: InvokeIntent,
}

/// Verification-interface call layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FinalizeCall {
    pub l2account: u64,
    pub tx_data: Vec<BundledTransaction>,
    pub verify_data: AggregatedProof,
    pub vid: NodeId,
    pub nonce: u64,
    pub rid: RoundId,
}

impl FinalizeCall {
    pub fn digest(&self) -> Digest {
        crate::hash::hash_tagged(crate::hash::RECORD_TAG, &self.to_canonical_bytes())
    }
}

impl Canon for FinalizeCall {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.l2account);
        crate::wire::encode_vec(w, &self.tx_data);
        self.verify_data.encode(w);
        w.u32(self.vid.0);
        w.u64(self.nonce);
        w.u64(self.rid.0);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(FinalizeCall {
            l2account: r.u64()?,
            tx_data: crate::wire::decode_vec(r)?,
            verify_data: AggregatedProof::decode(r)?,
            vid: NodeId(r.u32()?),
            nonce: r.u64()?,
            rid: RoundId(r.u64()?),
        })
    }
}

/// Per-round terminal bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundStatus {
    Open,
    Skipped,
    Finalized,
}

/// Record of one executed side effect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideEffectReceipt {
    pub tx: TxId,
    pub step: usize,
    pub effect: SideEffectSpec,
    pub detail: String,
    /// Echo of the opaque caller account field.
    pub l2account: u64,
}

/// Observable chain happenings consumed by relayers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainEvent {
    HeightTick {
        chain: ChainId,
        height: u64,
    },
    InvokeCommitted {
        chain: ChainId,
        invocation: InvocationId,
        sender: Account,
        intent: InvokeIntent,
        height: u64,
    },
    /// Escrow returned (user revoke or a finalized refund side effect).
    RevokeExecuted {
        chain: ChainId,
        invocation: InvocationId,
    },
    BlockFinalized {
        chain: ChainId,
        round: RoundId,
        post_root: Digest,
        /// The recorded proof data; any node can continue broadcasting it.
        call: Box<FinalizeCall>,
    },
    SkipApplied {
        chain: ChainId,
        round: RoundId,
    },
    SkipRevoked {
        chain: ChainId,
        round: RoundId,
    },
    FinalizeRejected {
        chain: ChainId,
        round: RoundId,
        reason: String,
    },
}

impl ChainEvent {
    pub fn chain(&self) -> ChainId {
        match self {
            ChainEvent::HeightTick { chain, .. }
            | ChainEvent::InvokeCommitted { chain, .. }
            | ChainEvent::RevokeExecuted { chain, .. }
            | ChainEvent::BlockFinalized { chain, .. }
            | ChainEvent::SkipApplied { chain, .. }
            | ChainEvent::SkipRevoked { chain, .. }
            | ChainEvent::FinalizeRejected { chain, .. } => *chain,
        }
    }
}

impl Canon for ChainEvent {
    fn encode(&self, w: &mut Writer) {
        match self {
            ChainEvent::HeightTick { chain, height } => {
                w.u8(1);
                chain.encode(w);
                w.u64(*height);
            }
            ChainEvent::InvokeCommitted {
                chain,
                invocation,
                sender,
                intent,
                height,
            } => {
                w.u8(2);
                chain.encode(w);
                w.u64(invocation.0);
                sender.encode(w);
                intent.encode(w);
                w.u64(*height);
            }
            ChainEvent::RevokeExecuted { chain, invocation } => {
                w.u8(3);
                chain.encode(w);
                w.u64(invocation.0);
            }
            ChainEvent::BlockFinalized {
                chain,
                round,
                post_root,
                call,
            } => {
                w.u8(4);
                chain.encode(w);
                w.u64(round.0);
                w.digest(post_root);
                call.encode(w);
            }
            ChainEvent::SkipApplied { chain, round } => {
                w.u8(5);
                chain.encode(w);
                w.u64(round.0);
            }
            ChainEvent::SkipRevoked { chain, round } => {
                w.u8(6);
                chain.encode(w);
                w.u64(round.0);
            }
            ChainEvent::FinalizeRejected {
                chain,
                round,
                reason,
            } => {
                w.u8(7);
                chain.encode(w);
                w.u64(round.0);
                w.bytes(reason.as_bytes());
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            1 => ChainEvent::HeightTick {
                chain: ChainId::decode(r)?,
                height: r.u64()?,
            },
            2 => ChainEvent::InvokeCommitted {
                chain: ChainId::decode(r)?,
                invocation: InvocationId(r.u64()?),
                sender: Account::decode(r)?,
                intent: InvokeIntent::decode(r)?,
                height: r.u64()?,
            },
            3 => ChainEvent::RevokeExecuted {
                chain: ChainId::decode(r)?,
                invocation: InvocationId(r.u64()?),
            },
            4 => ChainEvent::BlockFinalized {
                chain: ChainId::decode(r)?,
                round: RoundId(r.u64()?),
                post_root: r.digest()?,
                call: Box::new(FinalizeCall::decode(r)?),
            },
            5 => ChainEvent::SkipApplied {
                chain: ChainId::decode(r)?,
                round: RoundId(r.u64()?),
            },
            6 => ChainEvent::SkipRevoked {
                chain: ChainId::decode(r)?,
                round: RoundId(r.u64()?),
            },
            7 => ChainEvent::FinalizeRejected {
                chain: ChainId::decode(r)?,
                round: RoundId(r.u64()?),
                reason: String::from_utf8(r.bytes()?).map_err(|_| WireError::InvalidValue {
                    field: "reason-utf8",
                    value: 0,
                })?,
            },
            v => {
                return Err(WireError::InvalidValue {
                    field: "chain-event",
                    value: v as u64,
                })
            }
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InvokeError {
    #[error("insufficient funds: have {have}, need {need}")]
    InsufficientFunds { have: u64, need: u64 },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RevokeError {
    #[error("revocation window has not elapsed")]
    TooEarly,
    #[error("invocation is not pending")]
    NotPending,
    #[error("caller does not own the invocation")]
    NotOwner,
}

/// Finalize rejection; any rejection leaves the proxy bit-identical.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum Reject {
    #[error("root mismatch: {0}")]
    RootMismatch(String),
    #[error("bad consensus proof: {0}")]
    BadConsensusProof(String),
    #[error("bad execution proof: {0}")]
    BadExecutionProof(String),
    #[error("round closed: {0}")]
    RoundClosed(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SkipError {
    #[error("bad skip proof: {0}")]
    BadSkipProof(String),
    #[error("round closed: {0}")]
    RoundClosed(String),
}

/// Local state of the guest proxy contract plus the simulated chain it
/// lives on (ledger, height clock).
#[derive(Clone, Debug)]
pub struct ProxyState {
    pub chain_id: ChainId,
    pub height: u64,
    pub delta_h: u64,
    pub pinned_global_root: Digest,
    pub pinned_voter_root: Digest,
    pub pinned_voter_count: u32,
    mirror: GlobalState,
    pub pending: BTreeMap<InvocationId, PendingInvocation>,
    next_invocation: u64,
    /// User funds on this chain.
    pub balances: BTreeMap<Account, u64>,
    /// Funds deposited with the proxy (pool liquidity).
    pub custody: BTreeMap<Account, u64>,
    /// Escrow held per pending invocation.
    pub escrow: BTreeMap<InvocationId, u64>,
    round_status: BTreeMap<RoundId, RoundStatus>,
    pub current_round: RoundId,
    /// Rounds whose skip was revoked with block evidence: final, no
    /// second skip.
    revoked_rounds: BTreeSet<RoundId>,
    last_nonce: BTreeMap<NodeId, u64>,
    /// Proof data recorded on-chain at finalize, by round.
    pub recorded_calls: BTreeMap<RoundId, FinalizeCall>,
    /// Pinned-root history in finalize order (genesis first).
    pub root_history: Vec<Digest>,
    /// Test hook: disables the block-evidence-overrides-skip rule to
    /// demonstrate divergence without it.
    pub arbitration_enabled: bool,
}

impl ProxyState {
    pub fn genesis(
        chain_id: ChainId,
        delta_h: u64,
        genesis_state: &GlobalState,
        voter_root: Digest,
        voter_count: u32,
        balances: BTreeMap<Account, u64>,
        custody: BTreeMap<Account, u64>,
    ) -> ProxyState {
        ProxyState {
            chain_id,
            height: 0,
            delta_h,
            pinned_global_root: genesis_state.root(),
            pinned_voter_root: voter_root,
            pinned_voter_count: voter_count,
            mirror: genesis_state.clone(),
            pending: BTreeMap::new(),
            next_invocation: 0,
            balances,
            custody,
            escrow: BTreeMap::new(),
            round_status: BTreeMap::new(),
            current_round: RoundId(0),
            revoked_rounds: BTreeSet::new(),
            last_nonce: BTreeMap::new(),
            recorded_calls: BTreeMap::new(),
            root_history: vec![genesis_state.root()],
            arbitration_enabled: true,
        }
    }

    pub fn round_status(&self, round: RoundId) -> RoundStatus {
        self.round_status.get(&round).copied().unwrap_or(RoundStatus::Open)
    }

    /// Sum of user balances, custody and escrow; constant across
    /// invoke/revoke/finalize on this chain.
    pub fn conservation_total(&self) -> u64 {
        self.balances.values().sum::<u64>()
            + self.custody.values().sum::<u64>()
            + self.escrow.values().sum::<u64>()
    }

    pub fn balance(&self, account: &Account) -> u64 {
        self.balances.get(account).copied().unwrap_or(0)
    }

    pub fn custody_of(&self, account: &Account) -> u64 {
        self.custody.get(account).copied().unwrap_or(0)
    }

    /// Advance the block-height clock; no other change.
    pub fn advance_height(&mut self, n_blocks: u64) -> Vec<ChainEvent> {
        if n_blocks == 0 {
            return vec![];
        }
        self.height += n_blocks;
        vec![ChainEvent::HeightTick {
            chain: self.chain_id,
            height: self.height,
        }]
    }

    /// Guest-chain interface: escrow the payload and queue the invocation.
    pub fn invoke(
        &mut self,
        sender: &Account,
        intent: InvokeIntent,
    ) -> Result<(InvocationId, Vec<ChainEvent>), InvokeError> {
        let InvokeIntent::Transfer {
            amount,
            from_slot,
            from_pool_owner,
            to_chain,
            ..
        } = &intent;

        if self.mirror.layout().chain_prefix(*to_chain).is_err() {
            return Err(InvokeError::MalformedPayload(format!(
                "unknown destination chain {to_chain}"
            )));
        }
        let from_path = self
            .mirror
            .layout()
            .chain_leaf_path(self.chain_id, *from_slot)
            .map_err(|e| InvokeError::MalformedPayload(e.to_string()))?;

        let have = self.balance(sender);
        if have < *amount {
            return Err(InvokeError::InsufficientFunds {
                have,
                need: *amount,
            });
        }

        // Local computation of the post-invoke global root: apply the
        // invoke's delta to the verified mirror.
        let old = self
            .mirror
            .get(&from_path)
            .map_err(|e| InvokeError::MalformedPayload(e.to_string()))?;
        let new_balance = old.balance().checked_sub(*amount).ok_or_else(|| {
            InvokeError::MalformedPayload("global balance below escrow amount".into())
        })?;
        let (pinned, _) = self
            .mirror
            .update_leaf(&from_path, crate::merkle::LeafValue::from_balance(new_balance))
            .map_err(|e| InvokeError::MalformedPayload(e.to_string()))?;

        let id = InvocationId(self.next_invocation);
        self.next_invocation += 1;
        *self.balances.entry(sender.clone()).or_insert(0) -= amount;
        self.escrow.insert(id, *amount);
        self.pending.insert(
            id,
            PendingInvocation {
                id,
                sender: sender.clone(),
                amount: *amount,
                recorded_height: self.height,
                post_invoke_root: pinned.root(),
                from_path,
                pool_owner: from_pool_owner.clone(),
                intent: intent.clone(),
            },
        );
        let ev = ChainEvent::InvokeCommitted {
            chain: self.chain_id,
            invocation: id,
            sender: sender.clone(),
            intent,
            height: self.height,
        };
        Ok((id, vec![ev]))
    }

    /// Guest-chain interface: return the escrow once the window elapsed.
    pub fn revoke(
        &mut self,
        sender: &Account,
        invocation: InvocationId,
    ) -> Result<Vec<ChainEvent>, RevokeError> {
        let entry = self.pending.get(&invocation).ok_or(RevokeError::NotPending)?;
        if entry.sender != *sender {
            return Err(RevokeError::NotOwner);
        }
        if self.height.saturating_sub(entry.recorded_height) <= self.delta_h {
            return Err(RevokeError::TooEarly);
        }
        let amount = self.escrow.remove(&invocation).unwrap_or(0);
        *self.balances.entry(sender.clone()).or_insert(0) += amount;
        self.pending.remove(&invocation);
        Ok(vec![ChainEvent::RevokeExecuted {
            chain: self.chain_id,
            invocation,
        }])
    }

    /// Verification interface. Executes, in order: the pinned-root and
    /// per-invocation delta checks, the consensus-proof check, the
    /// aggregated execution-proof check, then (only if everything passed)
    /// the state update and all side effects.
    pub fn verify_and_finalize(
        &mut self,
        call: &FinalizeCall,
    ) -> Result<(Vec<SideEffectReceipt>, Vec<ChainEvent>), Reject> {
        // -- Check 1: batch anchoring and invocation deltas ---------------
        if call.verify_data.batch_root_before != self.pinned_global_root {
            return Err(Reject::RootMismatch(format!(
                "batch starts at {} but pinned root is {}",
                call.verify_data.batch_root_before.short_hex(),
                self.pinned_global_root.short_hex()
            )));
        }
        if call.tx_data.len() != call.verify_data.transcripts.len() {
            return Err(Reject::BadExecutionProof(
                "transaction list and transcript list differ in length".into(),
            ));
        }

        // Walk the batch with a running mirror, checking every invocation
        // of this chain against its recorded delta. The walk applies
        // unverified witnesses to a scratch copy only.
        let mut running = self.mirror.clone();
        let mut ids = BTreeSet::new();
        let mut consumed: BTreeSet<InvocationId> = BTreeSet::new();
        let mut refunded: BTreeSet<InvocationId> = BTreeSet::new();
        for (tx, transcript) in call.tx_data.iter().zip(&call.verify_data.transcripts) {
            if !ids.insert(tx.id) {
                return Err(Reject::BadExecutionProof(format!(
                    "duplicate transaction {:?} in batch",
                    tx.id
                )));
            }
            if let TxSource::InvokeHeaded { chain, invocation } = tx.source {
                if chain == self.chain_id {
                    let entry = self.pending.get(&invocation).ok_or_else(|| {
                        Reject::RootMismatch(format!(
                            "continuation for unknown or closed invocation {invocation:?}"
                        ))
                    })?;
                    if !consumed.insert(invocation) || refunded.contains(&invocation) {
                        return Err(Reject::RootMismatch(format!(
                            "invocation {invocation:?} used twice in one batch"
                        )));
                    }
                    // Recorded delta: sender leaf loses exactly the
                    // escrowed amount.
                    let old = running.get(&entry.from_path).map_err(|e| {
                        Reject::RootMismatch(format!("invocation leaf unreadable: {e}"))
                    })?;
                    let new = old.balance().checked_sub(entry.amount).ok_or_else(|| {
                        Reject::RootMismatch(
                            "recorded escrow exceeds current global balance".into(),
                        )
                    })?;
                    let (expected, _) = running
                        .update_leaf(
                            &entry.from_path,
                            crate::merkle::LeafValue::from_balance(new),
                        )
                        .map_err(|e| Reject::RootMismatch(e.to_string()))?;
                    let claimed = transcript
                        .steps
                        .first()
                        .and_then(|w| w.root_after())
                        .ok_or_else(|| {
                            Reject::RootMismatch("continuation has no invoke step".into())
                        })?;
                    if claimed != expected.root() {
                        return Err(Reject::RootMismatch(format!(
                            "post-invoke root {} does not match local computation {}",
                            claimed.short_hex(),
                            expected.root().short_hex()
                        )));
                    }
                }
            }
            for (_, se) in tx.side_effects() {
                if let EffectAction::RemovePendingInvocation {
                    invocation,
                    refund: true,
                } = se.action
                {
                    if se.target == EffectTarget::Chain(self.chain_id)
                        && (consumed.contains(&invocation) || !refunded.insert(invocation))
                    {
                        return Err(Reject::RootMismatch(format!(
                            "invocation {invocation:?} consumed and refunded in one batch"
                        )));
                    }
                }
            }
            // Advance the scratch mirror by the claimed witnesses.
            for w in &transcript.steps {
                running = running
                    .apply_witness(w)
                    .map_err(|e| Reject::BadExecutionProof(e.to_string()))?;
            }
        }

        // -- Check 2: consensus proof -------------------------------------
        if !verify_consensus(
            &call.verify_data.consensus,
            &self.pinned_voter_root,
            self.pinned_voter_count,
            call.rid,
        ) {
            return Err(Reject::BadConsensusProof(
                "quorum does not verify against the pinned voter root".into(),
            ));
        }
        if call.verify_data.consensus.winner() != Some(call.vid) {
            return Err(Reject::BadConsensusProof(format!(
                "caller {} is not the elected producer",
                call.vid
            )));
        }

        // -- Check 3: aggregated execution proof --------------------------
        if !verify_aggregated(
            self.mirror.layout(),
            &call.verify_data,
            &call.tx_data,
            &self.pinned_voter_root,
            self.pinned_voter_count,
            call.rid,
        ) {
            return Err(Reject::BadExecutionProof(
                "transcript chain does not verify".into(),
            ));
        }
        if running.root() != call.verify_data.batch_root_after {
            return Err(Reject::BadExecutionProof(
                "witness replay does not reach the claimed post root".into(),
            ));
        }

        // -- Round bookkeeping --------------------------------------------
        if call.rid != self.current_round {
            return Err(Reject::RoundClosed(format!(
                "round {} is not the chain's current round {}",
                call.rid, self.current_round
            )));
        }
        if self.round_status(call.rid) != RoundStatus::Open {
            return Err(Reject::RoundClosed(format!(
                "round {} already terminal",
                call.rid
            )));
        }
        let last = self.last_nonce.get(&call.vid).copied();
        if let Some(n) = last {
            if call.nonce <= n {
                return Err(Reject::RoundClosed(format!(
                    "nonce {} not above {} for producer {}",
                    call.nonce, n, call.vid
                )));
            }
        }

        // -- Check 4 precondition: side effects must be executable --------
        let mut receipts = Vec::new();
        {
            let mut balances = self.balances.clone();
            let mut custody = self.custody.clone();
            let mut escrow = self.escrow.clone();
            let mut pending: BTreeSet<InvocationId> = self.pending.keys().copied().collect();
            for tx in &call.tx_data {
                for (_, se) in tx.side_effects() {
                    let applies = match se.target {
                        EffectTarget::AllChains => true,
                        EffectTarget::Chain(c) => c == self.chain_id,
                    };
                    if !applies {
                        continue;
                    }
                    match &se.action {
                        EffectAction::RemovePendingInvocation { invocation, refund } => {
                            if !pending.remove(invocation) {
                                if !refund {
                                    return Err(Reject::RootMismatch(format!(
                                        "consume of unknown invocation {invocation:?}"
                                    )));
                                }
                                continue; // refund of an already-closed entry no-ops
                            }
                            let amount = escrow.remove(invocation).unwrap_or(0);
                            if *refund {
                                let e = self.pending.get(invocation).expect("checked");
                                *balances.entry(e.sender.clone()).or_insert(0) += amount;
                            } else {
                                let e = self.pending.get(invocation).expect("checked");
                                *custody.entry(e.pool_owner.clone()).or_insert(0) += amount;
                            }
                        }
                        EffectAction::Withdraw { to, amount, pool } => {
                            let have = custody.get(pool).copied().unwrap_or(0);
                            if have < *amount {
                                return Err(Reject::BadExecutionProof(format!(
                                    "custody of {pool} is {have}, cannot pay {amount}"
                                )));
                            }
                            *custody.entry(pool.clone()).or_insert(0) -= amount;
                            *balances.entry(to.clone()).or_insert(0) += amount;
                        }
                        EffectAction::Callback { name, data } => {
                            if name == CALLBACK_SET_VOTER_ROOT {
                                if data.len() != 33 {
                                    return Err(Reject::BadExecutionProof(
                                        "voter-root callback payload malformed".into(),
                                    ));
                                }
                            } else {
                                return Err(Reject::BadExecutionProof(format!(
                                    "unknown callback entry point {name}"
                                )));
                            }
                        }
                        EffectAction::Event { .. } => {}
                    }
                }
            }
        }

        // -- All checks passed: commit ------------------------------------
        let mut events = Vec::new();
        self.mirror = running;
        self.pinned_global_root = call.verify_data.batch_root_after;
        self.root_history.push(self.pinned_global_root);

        for tx in &call.tx_data {
            for (step, se) in tx.side_effects() {
                let applies = match se.target {
                    EffectTarget::AllChains => true,
                    EffectTarget::Chain(c) => c == self.chain_id,
                };
                if !applies {
                    continue;
                }
                let detail = match &se.action {
                    EffectAction::RemovePendingInvocation { invocation, refund } => {
                        match self.pending.remove(invocation) {
                            None => "invocation already closed".to_string(),
                            Some(entry) => {
                                let amount = self.escrow.remove(invocation).unwrap_or(0);
                                if *refund {
                                    *self.balances.entry(entry.sender.clone()).or_insert(0) +=
                                        amount;
                                    events.push(ChainEvent::RevokeExecuted {
                                        chain: self.chain_id,
                                        invocation: *invocation,
                                    });
                                    format!("refunded {amount} to {}", entry.sender)
                                } else {
                                    *self.custody.entry(entry.pool_owner.clone()).or_insert(0) +=
                                        amount;
                                    format!("consumed escrow {amount} into {}", entry.pool_owner)
                                }
                            }
                        }
                    }
                    EffectAction::Withdraw { to, amount, pool } => {
                        *self.custody.entry(pool.clone()).or_insert(0) -= amount;
                        *self.balances.entry(to.clone()).or_insert(0) += amount;
                        format!("paid {amount} from {pool} custody to {to}")
                    }
                    EffectAction::Callback { name, data } => {
                        // Only the voter-root pin exists today.
                        debug_assert_eq!(name, CALLBACK_SET_VOTER_ROOT);
                        let mut root = [0u8; 32];
                        root.copy_from_slice(&data[..32]);
                        self.pinned_voter_root = Digest(root);
                        if data[32] == 0 {
                            self.pinned_voter_count += 1;
                        } else {
                            self.pinned_voter_count = self.pinned_voter_count.saturating_sub(1);
                        }
                        format!("voter root pinned, count {}", self.pinned_voter_count)
                    }
                    EffectAction::Event { note } => note.clone(),
                };
                receipts.push(SideEffectReceipt {
                    tx: tx.id,
                    step,
                    effect: se.clone(),
                    detail,
                    l2account: call.l2account,
                });
            }
        }

        self.round_status.insert(call.rid, RoundStatus::Finalized);
        self.last_nonce.insert(call.vid, call.nonce);
        self.recorded_calls.insert(call.rid, call.clone());
        self.advance_current_round();
        events.push(ChainEvent::BlockFinalized {
            chain: self.chain_id,
            round: call.rid,
            post_root: self.pinned_global_root,
            call: Box::new(call.clone()),
        });
        Ok((receipts, events))
    }

    /// Apply a two-thirds skip signal: the chain refuses any block with
    /// this round number from now on (unless revoked with evidence).
    pub fn apply_skip(
        &mut self,
        signal: &crate::election::SkipSignal,
    ) -> Result<Vec<ChainEvent>, SkipError> {
        let rid = signal.round;
        if self.revoked_rounds.contains(&rid) {
            return Err(SkipError::RoundClosed(format!(
                "round {rid} was restored by revoke-skip"
            )));
        }
        if rid != self.current_round || self.round_status(rid) != RoundStatus::Open {
            return Err(SkipError::RoundClosed(format!(
                "round {rid} is not open (current {})",
                self.current_round
            )));
        }
        if signal.proof.ballot != Ballot::Skip
            || !verify_consensus(
                &signal.proof,
                &self.pinned_voter_root,
                self.pinned_voter_count,
                rid,
            )
        {
            return Err(SkipError::BadSkipProof(
                "skip quorum does not verify".into(),
            ));
        }
        self.round_status.insert(rid, RoundStatus::Skipped);
        self.advance_current_round();
        Ok(vec![ChainEvent::SkipApplied {
            chain: self.chain_id,
            round: rid,
        }])
    }

    /// Apply a revoke-skip carrying on-chain block evidence. Reopens the
    /// skipped round and immediately processes the evidence call.
    pub fn apply_revoke_skip(
        &mut self,
        signal: &crate::election::RevokeSkipSignal,
    ) -> Result<Vec<ChainEvent>, SkipError> {
        if !self.arbitration_enabled {
            // Ablation hook: without the override rule the chain ignores
            // block evidence for skipped rounds.
            return Ok(vec![]);
        }
        let rid = signal.round;
        if signal.evidence.rid != rid {
            return Err(SkipError::BadSkipProof(
                "evidence round does not match".into(),
            ));
        }
        match self.round_status(rid) {
            RoundStatus::Finalized => Ok(vec![]),
            RoundStatus::Open => {
                // Nothing to revoke; remember that this round must not be
                // skipped anymore.
                if signal.proof.ballot == Ballot::RevokeSkip
                    && verify_consensus(
                        &signal.proof,
                        &self.pinned_voter_root,
                        self.pinned_voter_count,
                        rid,
                    )
                {
                    self.revoked_rounds.insert(rid);
                }
                Ok(vec![])
            }
            RoundStatus::Skipped => {
                if signal.proof.ballot != Ballot::RevokeSkip
                    || !verify_consensus(
                        &signal.proof,
                        &self.pinned_voter_root,
                        self.pinned_voter_count,
                        rid,
                    )
                {
                    return Err(SkipError::BadSkipProof(
                        "revoke-skip quorum does not verify".into(),
                    ));
                }
                self.round_status.insert(rid, RoundStatus::Open);
                self.revoked_rounds.insert(rid);
                self.current_round = rid;
                let mut events = vec![ChainEvent::SkipRevoked {
                    chain: self.chain_id,
                    round: rid,
                }];
                match self.verify_and_finalize(&signal.evidence) {
                    Ok((_, mut ev)) => events.append(&mut ev),
                    Err(e) => events.push(ChainEvent::FinalizeRejected {
                        chain: self.chain_id,
                        round: rid,
                        reason: e.to_string(),
                    }),
                }
                Ok(events)
            }
        }
    }

    fn advance_current_round(&mut self) {
        while self.round_status(self.current_round) != RoundStatus::Open {
            self.current_round = self.current_round.next();
        }
    }
}
