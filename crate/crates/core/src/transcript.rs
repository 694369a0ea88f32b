//! Execution transcripts: replayable proofs of state transitions.
//!
//! A transcript records, step by step, the leaf-update witnesses produced
//! by simulating one bundled transaction, together with the observed
//! sanity-check outcomes. Verification replays the merkle openings against
//! the claimed endpoint roots and re-derives every step's new value from
//! the declared schema, so a transcript exists exactly for correct
//! simulations of registered functions. No transcript can be produced for
//! a bundle whose simulation fails at any step.

use crate::hash::{hash_tagged, Digest, RECORD_TAG};
use crate::merkle::LeafWitness;
use crate::state::{GlobalState, Layout};
use crate::tx::{BundledTransaction, PredicateId, StepRejection, TxError};
use crate::wire::{Canon, Reader, WireError, Writer};
use thiserror::Error;

/// Why a simulation produced no transcript.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimFailure {
    #[error("malformed transaction: {0}")]
    MalformedTx(#[from] TxError),
    #[error("step {step} rejected: {reason}")]
    Step { step: usize, reason: StepRejection },
    #[error("step {step} sanity check {id:?} failed")]
    PredicateFailed { step: usize, id: PredicateId },
}

/// Replayable record of one bundled transaction's simulation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionTranscript {
    pub tx_id: crate::tx::TxId,
    pub root_before: Digest,
    pub root_after: Digest,
    /// One witness per sub-transaction, in execution order. Step i's
    /// post-root equals step i+1's pre-root.
    pub steps: Vec<LeafWitness>,
    /// Observed sanity-check outcomes, in step order for every step that
    /// declares a predicate.
    pub sanity_checks: Vec<(PredicateId, bool)>,
}

impl ExecutionTranscript {
    pub fn digest(&self) -> Digest {
        hash_tagged(RECORD_TAG, &self.to_canonical_bytes())
    }

    /// Running roots after each step (without consulting any tree).
    pub fn intermediate_roots(&self) -> Option<Vec<Digest>> {
        let mut out = Vec::with_capacity(self.steps.len());
        for w in &self.steps {
            out.push(w.root_after()?);
        }
        Some(out)
    }
}

impl Canon for ExecutionTranscript {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.tx_id.0);
        w.digest(&self.root_before);
        w.digest(&self.root_after);
        crate::wire::encode_vec(w, &self.steps);
        w.u32(self.sanity_checks.len() as u32);
        for (id, pass) in &self.sanity_checks {
            w.u16(id.0).u8(*pass as u8);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let tx_id = crate::tx::TxId(r.u64()?);
        let root_before = r.digest()?;
        let root_after = r.digest()?;
        let steps = crate::wire::decode_vec(r)?;
        let n = r.u32()? as usize;
        let mut sanity_checks = Vec::with_capacity(n);
        for _ in 0..n {
            sanity_checks.push((PredicateId(r.u16()?), r.u8()? != 0));
        }
        Ok(ExecutionTranscript {
            tx_id,
            root_before,
            root_after,
            steps,
            sanity_checks,
        })
    }
}

/// Simulate one bundled transaction against the state, producing the next
/// state and its transcript. Any step rejection or failed sanity predicate
/// aborts with no state change.
pub fn prove_execution(
    state_before: &GlobalState,
    tx: &BundledTransaction,
) -> Result<(GlobalState, ExecutionTranscript), SimFailure> {
    tx.validate_shape(state_before.layout())?;

    let root_before = state_before.root();
    let mut state = state_before.clone();
    let mut steps = Vec::with_capacity(tx.steps.len());
    let mut sanity_checks = Vec::new();

    for (i, sub) in tx.steps.iter().enumerate() {
        let path = sub.op.path(state.layout());
        let old = state.get(&path).expect("validated path");
        let new = sub
            .op
            .derive_new_value(&old)
            .map_err(|reason| SimFailure::Step { step: i, reason })?;
        if let Some(pred) = &sub.predicate {
            if !pred.holds(&new) {
                return Err(SimFailure::PredicateFailed {
                    step: i,
                    id: pred.id(),
                });
            }
            sanity_checks.push((pred.id(), true));
        }
        let (next, witness) = state
            .update_leaf(&path, new)
            .expect("validated region and geometry");
        steps.push(witness);
        state = next;
    }

    let transcript = ExecutionTranscript {
        tx_id: tx.id,
        root_before,
        root_after: state.root(),
        steps,
        sanity_checks,
    };
    Ok((state, transcript))
}

/// Replay a transcript against the declared bundle. True iff
/// (a) every witness chains: step i recomputes the running root with its
///     old value and hands its new root to step i+1,
/// (b) the chain starts at `root_before` and ends at `root_after`,
/// (c) each step's new value equals the declared schema semantics applied
///     to the witnessed old value, and
/// (d) every declared sanity predicate is recorded as passing and
///     re-evaluates to true on the witnessed post-value.
pub fn verify_execution(
    layout: &Layout,
    root_before: &Digest,
    root_after: &Digest,
    transcript: &ExecutionTranscript,
    tx_decl: &BundledTransaction,
) -> bool {
    if tx_decl.validate_shape(layout).is_err() {
        return false;
    }
    if transcript.tx_id != tx_decl.id {
        return false;
    }
    if transcript.root_before != *root_before || transcript.root_after != *root_after {
        return false;
    }
    if transcript.steps.len() != tx_decl.steps.len() {
        return false;
    }

    let mut running = *root_before;
    let mut expected_checks = Vec::new();
    for (sub, witness) in tx_decl.steps.iter().zip(&transcript.steps) {
        if witness.path != sub.op.path(layout) {
            return false;
        }
        if witness.path.validate(layout.depth(), layout.arity()).is_err() {
            return false;
        }
        // Chaining: the witness must recompute the running root from its
        // old value.
        match witness.root_before() {
            Some(r) if r == running => {}
            _ => return false,
        }
        // Schema semantics: the new value is a function of the old one.
        match sub.op.derive_new_value(&witness.old_value) {
            Ok(v) if v == witness.new_value => {}
            _ => return false,
        }
        if let Some(pred) = &sub.predicate {
            if !pred.holds(&witness.new_value) {
                return false;
            }
            expected_checks.push((pred.id(), true));
        }
        running = match witness.root_after() {
            Some(r) => r,
            None => return false,
        };
    }

    if running != *root_after {
        return false;
    }
    if transcript.sanity_checks != expected_checks {
        return false;
    }
    transcript.sanity_checks.iter().all(|(_, pass)| *pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merkle::LeafValue;
    use crate::state::ChainId;
    use crate::tx::{transfer_tx, Account, SchemaId, SchemaMeta, TransferSpec, TxId, TxSource};
    use std::collections::BTreeMap;

    // Independent balance-arithmetic oracle for the four-step transfer,
    // hand-executing the guarded pseudocode: debit sender, credit the
    // source pool, credit recipient, debit the destination pool, then
    // require the pool to retain more than the amount.
    fn transfer_oracle(
        balances: &BTreeMap<&'static str, u64>,
        amount: u64,
    ) -> Option<BTreeMap<&'static str, u64>> {
        let mut b = balances.clone();
        *b.get_mut("alice")? = b["alice"].checked_sub(amount)?;
        *b.get_mut("lp_a")? = b["lp_a"].checked_add(amount)?;
        *b.get_mut("bob")? = b["bob"].checked_add(amount)?;
        *b.get_mut("lp_b")? = b["lp_b"].checked_sub(amount)?;
        if b["lp_b"] > amount {
            Some(b)
        } else {
            None
        }
    }

    struct Fixture {
        gs: GlobalState,
        spec: TransferSpec,
    }

    fn setup(alice: u64, lp_a: u64, bob: u64, lp_b: u64) -> Fixture {
        let gs = GlobalState::with_standard_layout(8, 2).unwrap();
        let spec = TransferSpec {
            amount: 3,
            from_chain: ChainId(0),
            from: gs.chain_leaf_path(ChainId(0), 0).unwrap(),
            from_pool: gs.chain_leaf_path(ChainId(0), 1).unwrap(),
            to_chain: ChainId(1),
            to: gs.chain_leaf_path(ChainId(1), 0).unwrap(),
            to_pool: gs.chain_leaf_path(ChainId(1), 1).unwrap(),
            payout_to: Some(Account::new("bob")),
            payout_pool: Account::new("lp"),
        };
        let (gs, _) = gs.update_leaf(&spec.from, LeafValue::from_balance(alice)).unwrap();
        let (gs, _) = gs.update_leaf(&spec.from_pool, LeafValue::from_balance(lp_a)).unwrap();
        let (gs, _) = gs.update_leaf(&spec.to, LeafValue::from_balance(bob)).unwrap();
        let (gs, _) = gs.update_leaf(&spec.to_pool, LeafValue::from_balance(lp_b)).unwrap();
        Fixture { gs, spec }
    }

    #[test]
    fn transfer_matches_hand_execution() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (after, transcript) = prove_execution(&f.gs, &tx).unwrap();

        // Oracle: {alice:10, lp_a:0, bob:0, lp_b:10} --3--> {7,3,3,7}.
        let init = BTreeMap::from([("alice", 10), ("lp_a", 0), ("bob", 0), ("lp_b", 10)]);
        let expect = transfer_oracle(&init, 3).unwrap();
        assert_eq!(after.get(&f.spec.from).unwrap().balance(), expect["alice"]);
        assert_eq!(after.get(&f.spec.from_pool).unwrap().balance(), expect["lp_a"]);
        assert_eq!(after.get(&f.spec.to).unwrap().balance(), expect["bob"]);
        assert_eq!(after.get(&f.spec.to_pool).unwrap().balance(), expect["lp_b"]);
        assert_eq!(expect["alice"], 7);
        assert_eq!(expect["lp_b"], 7);

        assert!(verify_execution(
            f.gs.layout(),
            &f.gs.root(),
            &after.root(),
            &transcript,
            &tx
        ));
    }

    #[test]
    fn pool_guard_aborts_simulation() {
        // lp_b = 5, amount = 3: post-debit pool is 2, not > 3.
        let f = setup(10, 0, 0, 5);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let err = prove_execution(&f.gs, &tx).unwrap_err();
        assert_eq!(
            err,
            SimFailure::PredicateFailed {
                step: 3,
                id: crate::tx::PRED_POOL_BUFFER
            }
        );
        // Oracle agrees the guard fails.
        let init = BTreeMap::from([("alice", 10), ("lp_a", 0), ("bob", 0), ("lp_b", 5)]);
        assert!(transfer_oracle(&init, 3).is_none());
    }

    #[test]
    fn insufficient_sender_balance_aborts() {
        let f = setup(2, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let err = prove_execution(&f.gs, &tx).unwrap_err();
        assert!(matches!(err, SimFailure::Step { step: 0, .. }));
    }

    #[test]
    fn empty_bundle_is_identity() {
        let f = setup(1, 1, 1, 10);
        let tx = BundledTransaction {
            id: TxId(9),
            source: TxSource::System,
            schema: SchemaId::Callback,
            meta: SchemaMeta::None,
            steps: vec![],
        };
        let (after, t) = prove_execution(&f.gs, &tx).unwrap();
        assert_eq!(after.root(), f.gs.root());
        assert_eq!(t.root_before, t.root_after);
        assert!(t.steps.is_empty());
        assert!(verify_execution(f.gs.layout(), &t.root_before, &t.root_after, &t, &tx));
    }

    #[test]
    fn tampered_step_value_rejected() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (after, t) = prove_execution(&f.gs, &tx).unwrap();
        let mut bad = t.clone();
        bad.steps[2].new_value = LeafValue::from_balance(1_000);
        assert!(!verify_execution(f.gs.layout(), &f.gs.root(), &after.root(), &bad, &tx));
    }

    #[test]
    fn mismatched_declaration_rejected() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (after, t) = prove_execution(&f.gs, &tx).unwrap();

        // Same transcript, different declared amount.
        let mut other_spec = f.spec.clone();
        other_spec.amount = 4;
        let decl = transfer_tx(TxId(1), TxSource::Pure, &other_spec);
        assert!(!verify_execution(f.gs.layout(), &f.gs.root(), &after.root(), &t, &decl));

        // Same transcript, different schema entirely.
        let decl2 = BundledTransaction {
            id: TxId(1),
            source: TxSource::System,
            schema: SchemaId::Callback,
            meta: SchemaMeta::None,
            steps: vec![],
        };
        assert!(!verify_execution(f.gs.layout(), &f.gs.root(), &after.root(), &t, &decl2));
    }

    #[test]
    fn replay_against_wrong_root_rejected() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (after, t) = prove_execution(&f.gs, &tx).unwrap();
        let wrong = after.root();
        assert!(!verify_execution(f.gs.layout(), &wrong, &after.root(), &t, &tx));
    }

    #[test]
    fn recorded_failing_check_rejected() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (after, t) = prove_execution(&f.gs, &tx).unwrap();
        let mut bad = t.clone();
        bad.sanity_checks[0].1 = false;
        assert!(!verify_execution(f.gs.layout(), &f.gs.root(), &after.root(), &bad, &tx));
    }

    #[test]
    fn transcript_roundtrips_canonically() {
        let f = setup(10, 0, 0, 10);
        let tx = transfer_tx(TxId(1), TxSource::Pure, &f.spec);
        let (_, t) = prove_execution(&f.gs, &tx).unwrap();
        let bytes = t.to_canonical_bytes();
        assert_eq!(ExecutionTranscript::from_canonical_bytes(&bytes).unwrap(), t);
    }
}
