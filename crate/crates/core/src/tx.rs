//! Bundled cross-chain transactions and the closed schema registry.
//!
//! A bundled transaction is an ordered list of sub-transactions, each
//! targeting one chain (or the system region), together with the sanity
//! predicates and native side effects declared for the steps. Only the
//! registered schemas can appear in a transcript: verification re-derives
//! every step's new leaf value from the schema's semantics and the
//! witnessed old value, so a transcript for anything outside the registry
//! cannot validate.

use crate::hash::{hash_tagged, Digest, RECORD_TAG};
use crate::merkle::{LeafValue, LeafWitness, MtiPath};
use crate::state::{ChainId, Layout, Region};
use crate::wire::{Canon, Reader, WireError, Writer};
use std::fmt;
use thiserror::Error;

/// Aggregator node identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node/{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Monotone block-generation round counter.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RoundId(pub u64);

impl RoundId {
    pub fn next(self) -> RoundId {
        RoundId(self.0 + 1)
    }
}

impl fmt::Debug for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round/{}", self.0)
    }
}

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-chain invocation sequence number.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InvocationId(pub u64);

impl fmt::Debug for InvocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inv/{}", self.0)
    }
}

/// Bundled-transaction identifier, unique within a run.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TxId(pub u64);

impl TxId {
    /// Ids for invoke continuations are derived from their origin so every
    /// node's relayer assigns the same id to the same on-chain invocation.
    pub fn for_invocation(chain: ChainId, invocation: InvocationId) -> TxId {
        TxId(0x8000_0000_0000_0000 | ((chain.0 as u64) << 40) | invocation.0)
    }

    /// Id of the revoke transaction paired with an invocation.
    pub fn for_revoke(chain: ChainId, invocation: InvocationId) -> TxId {
        TxId(0xc000_0000_0000_0000 | ((chain.0 as u64) << 40) | invocation.0)
    }

    /// Id of the registration transaction for a joining node.
    pub fn for_registration(node: NodeId) -> TxId {
        TxId(0xe000_0000_0000_0000 | node.0 as u64)
    }

    /// Id of the voter-quit transaction for a leaving node.
    pub fn for_quit(node: NodeId) -> TxId {
        TxId(0xf000_0000_0000_0000 | node.0 as u64)
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx/{:x}", self.0)
    }
}

/// Named account on a native chain.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Account(pub String);

impl Account {
    pub fn new(s: &str) -> Account {
        Account(s.to_string())
    }
}

impl fmt::Debug for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Account {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How a bundled transaction entered the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TxSource {
    /// Submitted directly to aggregator nodes; fully simulatable.
    Pure,
    /// Head sub-transaction already executed on a native chain; the rest
    /// continues from the relayed event.
    InvokeHeaded {
        chain: ChainId,
        invocation: InvocationId,
    },
    /// Submitted by aggregator nodes themselves (registration, quits,
    /// round records, revokes).
    System,
}

/// The closed registry of provable function schemas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemaId {
    LeafUpdate,
    GuardedTransfer,
    Registration,
    VoteRecord,
    Callback,
}

impl SchemaId {
    pub fn code(self) -> u8 {
        match self {
            SchemaId::LeafUpdate => 1,
            SchemaId::GuardedTransfer => 2,
            SchemaId::Registration => 3,
            SchemaId::VoteRecord => 4,
            SchemaId::Callback => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<SchemaId> {
        Some(match c {
            1 => SchemaId::LeafUpdate,
            2 => SchemaId::GuardedTransfer,
            3 => SchemaId::Registration,
            4 => SchemaId::VoteRecord,
            5 => SchemaId::Callback,
            _ => return None,
        })
    }
}

/// Identifier of a sanity predicate recorded in transcripts.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PredicateId(pub u16);

pub const PRED_POOL_BUFFER: PredicateId = PredicateId(1);
pub const PRED_REGISTRATION_OK: PredicateId = PredicateId(2);
pub const PRED_REVOKE_AUTHORIZED: PredicateId = PredicateId(3);
pub const PRED_CALLBACK_OK: PredicateId = PredicateId(4);

/// Guard evaluated on the post-step state and recorded in the transcript.
/// A predicate always targets its own step's leaf so verifiers can
/// re-evaluate it from the witness alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PredicateSpec {
    /// Post-step balance at the step's path strictly exceeds `amount`.
    PoolRetainsMoreThan { amount: u64 },
    /// Structural check that holds whenever the step itself applied.
    Always { id: PredicateId },
}

impl PredicateSpec {
    pub fn id(&self) -> PredicateId {
        match self {
            PredicateSpec::PoolRetainsMoreThan { .. } => PRED_POOL_BUFFER,
            PredicateSpec::Always { id } => *id,
        }
    }

    /// Evaluate against the step's post-state leaf value.
    pub fn holds(&self, post_value: &LeafValue) -> bool {
        match self {
            PredicateSpec::PoolRetainsMoreThan { amount } => post_value.balance() > *amount,
            PredicateSpec::Always { .. } => true,
        }
    }
}

/// Where a side effect executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffectTarget {
    Chain(ChainId),
    AllChains,
}

/// Declared native-chain action performed by the proxy during finalize.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EffectAction {
    /// Drop a pending invocation; `refund` returns the escrow to its
    /// sender (revoke path) instead of consuming it (finalize path).
    RemovePendingInvocation {
        invocation: InvocationId,
        refund: bool,
    },
    /// Pay out from proxy custody to a user account.
    Withdraw {
        to: Account,
        amount: u64,
        pool: Account,
    },
    /// Invoke a named proxy-contract entry point.
    Callback { name: String, data: Vec<u8> },
    /// Emit an observable event record.
    Event { note: String },
}

pub const CALLBACK_SET_VOTER_ROOT: &str = "set_voter_root";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SideEffectSpec {
    pub target: EffectTarget,
    pub action: EffectAction,
}

impl SideEffectSpec {
    /// Unsafe effects require a passing sanity predicate recorded in the
    /// transcript before the proxy will run them.
    pub fn is_unsafe(&self) -> bool {
        matches!(
            self.action,
            EffectAction::Withdraw { .. }
                | EffectAction::Callback { .. }
                | EffectAction::RemovePendingInvocation { refund: true, .. }
        )
    }
}

/// Micro-operation of one sub-transaction on the global state tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepOp {
    /// Subtract from a balance leaf; fails on insufficient funds.
    Debit { path: MtiPath, amount: u64 },
    /// Add to a balance leaf; fails on overflow.
    Credit { path: MtiPath, amount: u64 },
    /// Replace a leaf value.
    Write { path: MtiPath, value: LeafValue },
    /// Advance the registry-root commitment leaf. The embedded witness is
    /// a registry-tree transition from the current commitment to the new
    /// one, re-checkable by any verifier holding the commitment.
    CommitRegistry { witness: LeafWitness },
}

impl StepOp {
    /// Global-state leaf this step writes. The registry commitment leaf is
    /// resolved against the layout.
    pub fn path(&self, layout: &Layout) -> MtiPath {
        match self {
            StepOp::Debit { path, .. } | StepOp::Credit { path, .. } | StepOp::Write { path, .. } => {
                path.clone()
            }
            StepOp::CommitRegistry { .. } => layout.registry_commit_path(),
        }
    }

    /// New leaf value implied by this op given the old value; `None` when
    /// the semantics reject (underflow, overflow, stale registry root).
    pub fn derive_new_value(&self, old: &LeafValue) -> Result<LeafValue, StepRejection> {
        match self {
            StepOp::Debit { amount, .. } => old
                .balance()
                .checked_sub(*amount)
                .map(LeafValue::from_balance)
                .ok_or(StepRejection::InsufficientBalance {
                    have: old.balance(),
                    need: *amount,
                }),
            StepOp::Credit { amount, .. } => old
                .balance()
                .checked_add(*amount)
                .map(LeafValue::from_balance)
                .ok_or(StepRejection::Overflow),
            StepOp::Write { value, .. } => Ok(*value),
            StepOp::CommitRegistry { witness } => {
                let before = witness.root_before().ok_or(StepRejection::BadRegistryWitness)?;
                let after = witness.root_after().ok_or(StepRejection::BadRegistryWitness)?;
                if before != old.as_digest() {
                    return Err(StepRejection::StaleRegistryRoot {
                        expected: old.as_digest(),
                        got: before,
                    });
                }
                Ok(LeafValue::from_digest(after))
            }
        }
    }
}

/// Why a step's semantics refused to apply.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum StepRejection {
    #[error("insufficient balance: have {have}, need {need}")]
    InsufficientBalance { have: u64, need: u64 },
    #[error("balance overflow")]
    Overflow,
    #[error("registry witness does not recompute")]
    BadRegistryWitness,
    #[error("registry witness starts from {got} but commitment is {expected}")]
    StaleRegistryRoot { expected: Digest, got: Digest },
}

/// One sub-transaction: a step on a target chain with optional guard and
/// side effect.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubTx {
    pub target: Region,
    pub op: StepOp,
    pub predicate: Option<PredicateSpec>,
    pub side_effect: Option<SideEffectSpec>,
}

/// Bundle-level arguments for schemas whose derived values need them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchemaMeta {
    None,
    VoteRecord {
        round: RoundId,
        winner: NodeId,
    },
    /// Who the registration (or quit) concerns; lets every replica update
    /// its registry from block data alone.
    Registration {
        node: NodeId,
        pubkey: crate::keys::PublicKey,
    },
}

/// An ordered bundle of sub-transactions that must apply atomically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundledTransaction {
    pub id: TxId,
    pub source: TxSource,
    pub schema: SchemaId,
    pub meta: SchemaMeta,
    pub steps: Vec<SubTx>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxError {
    #[error("malformed transaction: {0}")]
    MalformedTx(String),
    #[error("unknown schema code {0}")]
    UnknownSchema(u8),
}

/// Commitment to the round record stored in the system region.
pub fn round_record_value(round: RoundId, winner: NodeId) -> LeafValue {
    let mut buf = Vec::with_capacity(12);
    buf.extend_from_slice(&round.0.to_le_bytes());
    buf.extend_from_slice(&winner.0.to_le_bytes());
    LeafValue::from_digest(hash_tagged(RECORD_TAG, &buf))
}

impl BundledTransaction {
    /// Structural validation against the schema registry and the state
    /// layout. Shape violations make a transaction unprovable and
    /// unverifiable, independent of state.
    pub fn validate_shape(&self, layout: &Layout) -> Result<(), TxError> {
        let bad = |m: &str| Err(TxError::MalformedTx(m.to_string()));

        // Targets must match the regions their paths live in, and unsafe
        // side effects must ride a step that records a sanity predicate.
        for (i, s) in self.steps.iter().enumerate() {
            let path = s.op.path(layout);
            if path.validate(layout.depth(), layout.arity()).is_err() {
                return bad(&format!("step {i} path does not fit the tree geometry"));
            }
            match layout.region_of(&path) {
                None => return bad(&format!("step {i} touches an unregistered subrange")),
                Some(r) if r != s.target => {
                    return bad(&format!("step {i} target does not match its path region"))
                }
                _ => {}
            }
            if let Some(se) = &s.side_effect {
                if let (EffectTarget::Chain(c), Region::Chain(tc)) = (&se.target, &s.target) {
                    if c != tc {
                        return bad(&format!("step {i} side effect targets a foreign chain"));
                    }
                }
                if se.is_unsafe() && s.predicate.is_none() {
                    return bad(&format!("step {i}: unsafe side effect without a sanity check"));
                }
            }
        }

        match self.schema {
            SchemaId::LeafUpdate => {
                if self.steps.len() != 1 {
                    return bad("leaf-update requires exactly one step");
                }
                let s = &self.steps[0];
                if !matches!(s.op, StepOp::Write { .. }) {
                    return bad("leaf-update step must be a write");
                }
                if s.predicate.is_some() {
                    return bad("leaf-update carries no predicate");
                }
                if let Some(se) = &s.side_effect {
                    if !matches!(se.action, EffectAction::Event { .. }) {
                        return bad("leaf-update permits only event side effects");
                    }
                }
            }
            SchemaId::GuardedTransfer => self.validate_guarded_transfer()?,
            SchemaId::Registration => {
                if self.steps.len() != 1 {
                    return bad("registration requires exactly one step");
                }
                let SchemaMeta::Registration { pubkey, .. } = &self.meta else {
                    return bad("registration requires node metadata");
                };
                let s = &self.steps[0];
                if s.target != Region::System {
                    return bad("registration step must target the system region");
                }
                let StepOp::CommitRegistry { witness } = &s.op else {
                    return bad("registration step must commit the registry");
                };
                let quitting = witness.new_value == crate::registry::TOMBSTONE;
                if quitting {
                    if witness.old_value != LeafValue::from_digest(pubkey.commitment()) {
                        return bad("quit must tombstone the declared voter's leaf");
                    }
                } else if witness.new_value != LeafValue::from_digest(pubkey.commitment()) {
                    return bad("registration leaf must commit the declared key");
                }
                match &s.predicate {
                    Some(p) if p.id() == PRED_REGISTRATION_OK => {}
                    _ => return bad("registration must record its sanity predicate"),
                }
                let Some(se) = &s.side_effect else {
                    return bad("registration must update the pinned voter root everywhere");
                };
                if se.target != EffectTarget::AllChains {
                    return bad("registration side effect must reach all chains");
                }
                let EffectAction::Callback { name, data } = &se.action else {
                    return bad("registration side effect must be a callback");
                };
                let Some(after) = witness.root_after() else {
                    return bad("registration witness does not recompute");
                };
                let mut expect = after.as_bytes().to_vec();
                expect.push(quitting as u8);
                if name != CALLBACK_SET_VOTER_ROOT || data != &expect {
                    return bad("registration callback must pin the new voter root and kind");
                }
                if self.source != TxSource::System {
                    return bad("registration must be a system transaction");
                }
            }
            SchemaId::VoteRecord => {
                let SchemaMeta::VoteRecord { round, winner } = &self.meta else {
                    return bad("vote-record requires round metadata");
                };
                if self.steps.len() != 1 {
                    return bad("vote-record requires exactly one step");
                }
                let s = &self.steps[0];
                let StepOp::Write { path, value } = &s.op else {
                    return bad("vote-record step must be a write");
                };
                if *path != layout.round_record_path() {
                    return bad("vote-record must write the round-record leaf");
                }
                if *value != round_record_value(*round, *winner) {
                    return bad("vote-record value must commit to (round, winner)");
                }
                if self.source != TxSource::System {
                    return bad("vote-record must be a system transaction");
                }
            }
            SchemaId::Callback => {
                // Zero steps is the identity bundle; side effects always
                // ride a step so they stay bound to a recorded predicate.
                if self.steps.len() > 1 {
                    return bad("callback permits at most one step");
                }
                for s in &self.steps {
                    if !matches!(s.op, StepOp::Write { .. }) {
                        return bad("callback steps must be writes");
                    }
                }
            }
        }

        // Invoke-headed bundles: the invoke is step 0 and only step 0.
        if let TxSource::InvokeHeaded { chain, invocation } = self.source {
            let Some(first) = self.steps.first() else {
                return bad("invoke-headed bundle has no steps");
            };
            if first.target != Region::Chain(chain) {
                return bad("invoke step must target the invoking chain");
            }
            if !matches!(first.op, StepOp::Debit { .. }) {
                return bad("invoke step must escrow by debit");
            }
            match &first.side_effect {
                Some(SideEffectSpec {
                    target: EffectTarget::Chain(c),
                    action:
                        EffectAction::RemovePendingInvocation {
                            invocation: inv,
                            refund: false,
                        },
                }) if *c == chain && *inv == invocation => {}
                _ => return bad("invoke step must consume its pending invocation"),
            }
            for (i, s) in self.steps.iter().enumerate().skip(1) {
                if let Some(SideEffectSpec {
                    action: EffectAction::RemovePendingInvocation { .. },
                    ..
                }) = s.side_effect
                {
                    return bad(&format!("step {i}: only step 0 may be the invoke"));
                }
            }
        }

        Ok(())
    }

    fn validate_guarded_transfer(&self) -> Result<(), TxError> {
        let bad = |m: &str| Err(TxError::MalformedTx(m.to_string()));
        if self.steps.len() != 4 {
            return bad("guarded-transfer requires exactly four steps");
        }
        let amounts: Vec<u64> = self
            .steps
            .iter()
            .map(|s| match s.op {
                StepOp::Debit { amount, .. } | StepOp::Credit { amount, .. } => amount,
                _ => u64::MAX,
            })
            .collect();
        if amounts.iter().any(|&a| a == u64::MAX) || amounts.iter().any(|&a| a != amounts[0]) {
            return bad("guarded-transfer steps must move one common amount");
        }
        let kinds_ok = matches!(self.steps[0].op, StepOp::Debit { .. })
            && matches!(self.steps[1].op, StepOp::Credit { .. })
            && matches!(self.steps[2].op, StepOp::Credit { .. })
            && matches!(self.steps[3].op, StepOp::Debit { .. });
        if !kinds_ok {
            return bad("guarded-transfer shape is debit, credit, credit, debit");
        }
        if self.steps[0].target != self.steps[1].target
            || self.steps[2].target != self.steps[3].target
        {
            return bad("guarded-transfer legs must pair up per chain");
        }
        match &self.steps[3].predicate {
            Some(PredicateSpec::PoolRetainsMoreThan { amount }) if *amount == amounts[0] => {}
            _ => return bad("guarded-transfer must guard the payout pool"),
        }
        match &self.steps[3].side_effect {
            Some(SideEffectSpec {
                action: EffectAction::Withdraw { amount, .. },
                ..
            }) if *amount == amounts[0] => {}
            // A pure rebalance with no native payout is also admissible.
            None => {}
            _ => return bad("guarded-transfer payout must match the amount"),
        }
        Ok(())
    }

    /// Side effects declared across all steps, in step order.
    pub fn side_effects(&self) -> impl Iterator<Item = (usize, &SideEffectSpec)> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.side_effect.as_ref().map(|se| (i, se)))
    }

    pub fn digest(&self) -> Digest {
        hash_tagged(RECORD_TAG, &self.to_canonical_bytes())
    }
}

// ---------------------------------------------------------------------------
// Canonical encoding
// ---------------------------------------------------------------------------

impl Canon for ChainId {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ChainId(r.u32()?))
    }
}

impl Canon for Region {
    fn encode(&self, w: &mut Writer) {
        match self {
            Region::System => {
                w.u8(0);
            }
            Region::Chain(c) => {
                w.u8(1);
                c.encode(w);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            0 => Ok(Region::System),
            1 => Ok(Region::Chain(ChainId::decode(r)?)),
            v => Err(WireError::InvalidValue {
                field: "region",
                value: v as u64,
            }),
        }
    }
}

impl Canon for Account {
    fn encode(&self, w: &mut Writer) {
        w.bytes(self.0.as_bytes());
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let b = r.bytes()?;
        String::from_utf8(b)
            .map(Account)
            .map_err(|_| WireError::InvalidValue {
                field: "account-utf8",
                value: 0,
            })
    }
}

impl Canon for PredicateSpec {
    fn encode(&self, w: &mut Writer) {
        match self {
            PredicateSpec::PoolRetainsMoreThan { amount } => {
                w.u8(1).u64(*amount);
            }
            PredicateSpec::Always { id } => {
                w.u8(2).u16(id.0);
            }
        }
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        match r.u8()? {
            1 => Ok(PredicateSpec::PoolRetainsMoreThan { amount: r.u64()? }),
            2 => Ok(PredicateSpec::Always {
                id: PredicateId(r.u16()?),
            }),
            v => Err(WireError::InvalidValue {
                field: "predicate",
                value: v as u64,
            }),
        }
    }
}

impl Canon for SideEffectSpec {
    fn encode(&self, w: &mut Writer) {
        match self.target {
            EffectTarget::AllChains => {
                w.u8(0);
            }
            EffectTarget::Chain(c) => {
                w.u8(1);
                c.encode(w);
            }
        }
        match &self.action {
            EffectAction::RemovePendingInvocation { invocation, refund } => {
                w.u8(1).u64(invocation.0).u8(*refund as u8);
            }
            EffectAction::Withdraw { to, amount, pool } => {
                w.u8(2);
                to.encode(w);
                w.u64(*amount);
                pool.encode(w);
            }
            EffectAction::Callback { name, data } => {
                w.u8(3);
                w.bytes(name.as_bytes());
                w.bytes(data);
            }
            EffectAction::Event { note } => {
                w.u8(4);
                w.bytes(note.as_bytes());
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let target = match r.u8()? {
            0 => EffectTarget::AllChains,
            1 => EffectTarget::Chain(ChainId::decode(r)?),
            v => {
                return Err(WireError::InvalidValue {
                    field: "effect-target",
                    value: v as u64,
                })
            }
        };
        let action = match r.u8()? {
            1 => EffectAction::RemovePendingInvocation {
                invocation: InvocationId(r.u64()?),
                refund: r.u8()? != 0,
            },
            2 => EffectAction::Withdraw {
                to: Account::decode(r)?,
                amount: r.u64()?,
                pool: Account::decode(r)?,
            },
            3 => EffectAction::Callback {
                name: String::from_utf8(r.bytes()?).map_err(|_| WireError::InvalidValue {
                    field: "callback-utf8",
                    value: 0,
                })?,
                data: r.bytes()?,
            },
            4 => EffectAction::Event {
                note: String::from_utf8(r.bytes()?).map_err(|_| WireError::InvalidValue {
                    field: "event-utf8",
                    value: 0,
                })?,
            },
            v => {
                return Err(WireError::InvalidValue {
                    field: "effect-action",
                    value: v as u64,
                })
            }
        };
        Ok(SideEffectSpec { target, action })
    }
}

impl Canon for StepOp {
    fn encode(&self, w: &mut Writer) {
        match self {
            StepOp::Debit { path, amount } => {
                w.u8(1);
                path.encode(w);
                w.u64(*amount);
            }
            StepOp::Credit { path, amount } => {
                w.u8(2);
                path.encode(w);
                w.u64(*amount);
            }
            StepOp::Write { path, value } => {
                w.u8(3);
                path.encode(w);
                value.encode(w);
            }
            StepOp::CommitRegistry { witness } => {
                w.u8(4);
                witness.encode(w);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(match r.u8()? {
            1 => StepOp::Debit {
                path: MtiPath::decode(r)?,
                amount: r.u64()?,
            },
            2 => StepOp::Credit {
                path: MtiPath::decode(r)?,
                amount: r.u64()?,
            },
            3 => StepOp::Write {
                path: MtiPath::decode(r)?,
                value: LeafValue::decode(r)?,
            },
            4 => StepOp::CommitRegistry {
                witness: LeafWitness::decode(r)?,
            },
            v => {
                return Err(WireError::InvalidValue {
                    field: "step-op",
                    value: v as u64,
                })
            }
        })
    }
}

impl Canon for SubTx {
    fn encode(&self, w: &mut Writer) {
        self.target.encode(w);
        self.op.encode(w);
        match &self.predicate {
            None => {
                w.u8(0);
            }
            Some(p) => {
                w.u8(1);
                p.encode(w);
            }
        }
        match &self.side_effect {
            None => {
                w.u8(0);
            }
            Some(se) => {
                w.u8(1);
                se.encode(w);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let target = Region::decode(r)?;
        let op = StepOp::decode(r)?;
        let predicate = match r.u8()? {
            0 => None,
            _ => Some(PredicateSpec::decode(r)?),
        };
        let side_effect = match r.u8()? {
            0 => None,
            _ => Some(SideEffectSpec::decode(r)?),
        };
        Ok(SubTx {
            target,
            op,
            predicate,
            side_effect,
        })
    }
}

impl Canon for BundledTransaction {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.id.0);
        match self.source {
            TxSource::Pure => {
                w.u8(0);
            }
            TxSource::InvokeHeaded { chain, invocation } => {
                w.u8(1);
                chain.encode(w);
                w.u64(invocation.0);
            }
            TxSource::System => {
                w.u8(2);
            }
        }
        w.u8(self.schema.code());
        match &self.meta {
            SchemaMeta::None => {
                w.u8(0);
            }
            SchemaMeta::VoteRecord { round, winner } => {
                w.u8(1).u64(round.0).u32(winner.0);
            }
            SchemaMeta::Registration { node, pubkey } => {
                w.u8(2).u32(node.0);
                w.bytes(&pubkey.0);
            }
        }
        crate::wire::encode_vec(w, &self.steps);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let id = TxId(r.u64()?);
        let source = match r.u8()? {
            0 => TxSource::Pure,
            1 => TxSource::InvokeHeaded {
                chain: ChainId::decode(r)?,
                invocation: InvocationId(r.u64()?),
            },
            2 => TxSource::System,
            v => {
                return Err(WireError::InvalidValue {
                    field: "tx-source",
                    value: v as u64,
                })
            }
        };
        let code = r.u8()?;
        let schema = SchemaId::from_code(code).ok_or(WireError::InvalidValue {
            field: "schema",
            value: code as u64,
        })?;
        let meta = match r.u8()? {
            0 => SchemaMeta::None,
            1 => SchemaMeta::VoteRecord {
                round: RoundId(r.u64()?),
                winner: NodeId(r.u32()?),
            },
            2 => {
                let node = NodeId(r.u32()?);
                let pk = r.bytes()?;
                let pubkey =
                    crate::keys::PublicKey::from_bytes(&pk).ok_or(WireError::InvalidValue {
                        field: "registration-pubkey",
                        value: pk.len() as u64,
                    })?;
                SchemaMeta::Registration { node, pubkey }
            }
            v => {
                return Err(WireError::InvalidValue {
                    field: "schema-meta",
                    value: v as u64,
                })
            }
        };
        let steps = crate::wire::decode_vec(r)?;
        Ok(BundledTransaction {
            id,
            source,
            schema,
            meta,
            steps,
        })
    }
}

// ---------------------------------------------------------------------------
// Builders for the standard bundles
// ---------------------------------------------------------------------------

/// Arguments shared by the pure and invoke-headed transfer builders.
#[derive(Clone, Debug)]
pub struct TransferSpec {
    pub amount: u64,
    pub from_chain: ChainId,
    pub from: MtiPath,
    pub from_pool: MtiPath,
    pub to_chain: ChainId,
    pub to: MtiPath,
    pub to_pool: MtiPath,
    /// Native payout executed on the destination chain, if any.
    pub payout_to: Option<Account>,
    pub payout_pool: Account,
}

/// The four-step transfer: debit sender, credit source pool, credit
/// recipient, debit destination pool; the destination pool retains a
/// buffer above the amount or the whole bundle fails in simulation.
pub fn transfer_tx(id: TxId, source: TxSource, spec: &TransferSpec) -> BundledTransaction {
    let invoke_effect = match source {
        TxSource::InvokeHeaded { chain, invocation } => Some(SideEffectSpec {
            target: EffectTarget::Chain(chain),
            action: EffectAction::RemovePendingInvocation {
                invocation,
                refund: false,
            },
        }),
        _ => None,
    };
    let payout = spec.payout_to.as_ref().map(|to| SideEffectSpec {
        target: EffectTarget::Chain(spec.to_chain),
        action: EffectAction::Withdraw {
            to: to.clone(),
            amount: spec.amount,
            pool: spec.payout_pool.clone(),
        },
    });
    BundledTransaction {
        id,
        source,
        schema: SchemaId::GuardedTransfer,
        meta: SchemaMeta::None,
        steps: vec![
            SubTx {
                target: Region::Chain(spec.from_chain),
                op: StepOp::Debit {
                    path: spec.from.clone(),
                    amount: spec.amount,
                },
                predicate: None,
                side_effect: invoke_effect,
            },
            SubTx {
                target: Region::Chain(spec.from_chain),
                op: StepOp::Credit {
                    path: spec.from_pool.clone(),
                    amount: spec.amount,
                },
                predicate: None,
                side_effect: None,
            },
            SubTx {
                target: Region::Chain(spec.to_chain),
                op: StepOp::Credit {
                    path: spec.to.clone(),
                    amount: spec.amount,
                },
                predicate: None,
                side_effect: None,
            },
            SubTx {
                target: Region::Chain(spec.to_chain),
                op: StepOp::Debit {
                    path: spec.to_pool.clone(),
                    amount: spec.amount,
                },
                predicate: Some(PredicateSpec::PoolRetainsMoreThan {
                    amount: spec.amount,
                }),
                side_effect: payout,
            },
        ],
    }
}

/// Registration (or quit) system transaction: commits the new registry
/// root and pins it on every chain.
pub fn registration_tx(
    id: TxId,
    node: NodeId,
    pubkey: crate::keys::PublicKey,
    registry_witness: LeafWitness,
) -> BundledTransaction {
    let after = registry_witness
        .root_after()
        .expect("registry witness must recompute");
    let quitting = registry_witness.new_value == crate::registry::TOMBSTONE;
    let mut data = after.as_bytes().to_vec();
    data.push(quitting as u8);
    BundledTransaction {
        id,
        source: TxSource::System,
        schema: SchemaId::Registration,
        meta: SchemaMeta::Registration { node, pubkey },
        steps: vec![SubTx {
            target: Region::System,
            op: StepOp::CommitRegistry {
                witness: registry_witness,
            },
            predicate: Some(PredicateSpec::Always {
                id: PRED_REGISTRATION_OK,
            }),
            side_effect: Some(SideEffectSpec {
                target: EffectTarget::AllChains,
                action: EffectAction::Callback {
                    name: CALLBACK_SET_VOTER_ROOT.to_string(),
                    data,
                },
            }),
        }],
    }
}

/// Marker value memorializing a revoked invocation in the chain's subrange.
pub fn revoke_marker_value(chain: ChainId, invocation: InvocationId) -> LeafValue {
    let mut buf = Vec::with_capacity(19);
    buf.extend_from_slice(b"revoke:");
    buf.extend_from_slice(&chain.0.to_le_bytes());
    buf.extend_from_slice(&invocation.0.to_le_bytes());
    LeafValue::from_digest(hash_tagged(RECORD_TAG, &buf))
}

/// Revoke transaction: writes the chain's revoke-marker leaf and carries
/// the refund side effect for the invoking chain.
pub fn revoke_tx(layout: &Layout, chain: ChainId, invocation: InvocationId) -> BundledTransaction {
    let marker = layout
        .chain_marker_path(chain)
        .expect("revoke target chain must be registered");
    BundledTransaction {
        id: TxId::for_revoke(chain, invocation),
        source: TxSource::System,
        schema: SchemaId::Callback,
        meta: SchemaMeta::None,
        steps: vec![SubTx {
            target: Region::Chain(chain),
            op: StepOp::Write {
                path: marker,
                value: revoke_marker_value(chain, invocation),
            },
            predicate: Some(PredicateSpec::Always {
                id: PRED_REVOKE_AUTHORIZED,
            }),
            side_effect: Some(SideEffectSpec {
                target: EffectTarget::Chain(chain),
                action: EffectAction::RemovePendingInvocation {
                    invocation,
                    refund: true,
                },
            }),
        }],
    }
}

/// Round record system transaction.
pub fn vote_record_tx(id: TxId, layout: &Layout, round: RoundId, winner: NodeId) -> BundledTransaction {
    BundledTransaction {
        id,
        source: TxSource::System,
        schema: SchemaId::VoteRecord,
        meta: SchemaMeta::VoteRecord { round, winner },
        steps: vec![SubTx {
            target: Region::System,
            op: StepOp::Write {
                path: layout.round_record_path(),
                value: round_record_value(round, winner),
            },
            predicate: None,
            side_effect: None,
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> Layout {
        Layout::standard(8, 2).unwrap()
    }

    fn demo_transfer(l: &Layout) -> TransferSpec {
        TransferSpec {
            amount: 3,
            from_chain: ChainId(0),
            from: l.chain_leaf_path(ChainId(0), 0).unwrap(),
            from_pool: l.chain_leaf_path(ChainId(0), 1).unwrap(),
            to_chain: ChainId(1),
            to: l.chain_leaf_path(ChainId(1), 0).unwrap(),
            to_pool: l.chain_leaf_path(ChainId(1), 1).unwrap(),
            payout_to: Some(Account::new("bob")),
            payout_pool: Account::new("lp"),
        }
    }

    #[test]
    fn transfer_shape_validates() {
        let l = layout();
        let tx = transfer_tx(TxId(1), TxSource::Pure, &demo_transfer(&l));
        tx.validate_shape(&l).unwrap();
    }

    #[test]
    fn mismatched_amounts_rejected() {
        let l = layout();
        let mut tx = transfer_tx(TxId(1), TxSource::Pure, &demo_transfer(&l));
        if let StepOp::Credit { amount, .. } = &mut tx.steps[1].op {
            *amount = 4;
        }
        assert!(tx.validate_shape(&l).is_err());
    }

    #[test]
    fn invoke_headed_requires_invoke_step() {
        let l = layout();
        let src = TxSource::InvokeHeaded {
            chain: ChainId(0),
            invocation: InvocationId(0),
        };
        let tx = transfer_tx(TxId(2), src, &demo_transfer(&l));
        tx.validate_shape(&l).unwrap();

        // Dropping the invoke consumption breaks the shape.
        let mut bad = tx.clone();
        bad.steps[0].side_effect = None;
        assert!(bad.validate_shape(&l).is_err());
    }

    #[test]
    fn debit_semantics() {
        let op = StepOp::Debit {
            path: MtiPath::new(vec![0; 8]),
            amount: 5,
        };
        assert_eq!(
            op.derive_new_value(&LeafValue::from_balance(12)).unwrap(),
            LeafValue::from_balance(7)
        );
        assert_eq!(
            op.derive_new_value(&LeafValue::from_balance(4)).unwrap_err(),
            StepRejection::InsufficientBalance { have: 4, need: 5 }
        );
    }

    #[test]
    fn canonical_roundtrip() {
        let l = layout();
        let tx = transfer_tx(
            TxId(7),
            TxSource::InvokeHeaded {
                chain: ChainId(0),
                invocation: InvocationId(3),
            },
            &demo_transfer(&l),
        );
        let bytes = tx.to_canonical_bytes();
        let back = BundledTransaction::from_canonical_bytes(&bytes).unwrap();
        assert_eq!(tx, back);
    }

    #[test]
    fn pool_predicate_is_strict() {
        let p = PredicateSpec::PoolRetainsMoreThan { amount: 3 };
        assert!(p.holds(&LeafValue::from_balance(4)));
        assert!(!p.holds(&LeafValue::from_balance(3)));
    }
}
