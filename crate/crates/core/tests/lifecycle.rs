//! End-to-end lifecycle runs over an in-process loopback network:
//! invoke on a native chain, relayed continuation, election, block
//! production, gated broadcast, finalization with side effects, and the
//! skip path when the winner is dead.

use mcsync_core::chain::{ChainEvent, InvokeIntent, ProxyState};
use mcsync_core::node::{ChainCall, NetworkHandle, NodeInput, NodeOutput, NodeState, RoundOutcome};
use mcsync_core::setup::{build_genesis, ChainGenesis, Genesis, GenesisConfig};
use mcsync_core::state::ChainId;
use mcsync_core::tx::{transfer_tx, Account, NodeId, TransferSpec, TxId, TxSource};
use mcsync_core::proof::VoteTicket;
use std::collections::{BTreeMap, VecDeque};

/// Instant-delivery network: one driven node, passive peers, real chains.
struct LoopbackNet {
    chains: BTreeMap<ChainId, ProxyState>,
    peers: Vec<NodeState>,
    inbox: VecDeque<NodeInput>,
    driven: NodeId,
}

impl LoopbackNet {
    fn new(driven: NodeId, genesis: Genesis) -> (NodeState, LoopbackNet) {
        let mut me = None;
        let mut peers = Vec::new();
        for node in genesis.nodes {
            if node.id == driven {
                me = Some(node);
            } else {
                peers.push(node);
            }
        }
        (
            me.expect("driven node in genesis"),
            LoopbackNet {
                chains: genesis.proxies,
                peers,
                inbox: VecDeque::new(),
                driven,
            },
        )
    }

    fn fan_out_event(&mut self, ev: ChainEvent) {
        self.inbox.push_back(NodeInput::Observation(ev.clone()));
        let mut work: Vec<(usize, NodeInput)> = (0..self.peers.len())
            .map(|i| (i, NodeInput::Observation(ev.clone())))
            .collect();
        while let Some((i, input)) = work.pop() {
            let outs = self.peers[i].handle(input);
            self.route_peer_outputs(outs, &mut work);
        }
    }

    fn route_peer_outputs(&mut self, outs: Vec<NodeOutput>, work: &mut Vec<(usize, NodeInput)>) {
        for out in outs {
            match out {
                NodeOutput::Ticket { to, ticket } => self.deliver_ticket(to, ticket, work),
                NodeOutput::Chain { chain, call } => {
                    let events = self.process_chain_call(chain, call);
                    for ev in events {
                        self.inbox.push_back(NodeInput::Observation(ev.clone()));
                        for i in 0..self.peers.len() {
                            work.push((i, NodeInput::Observation(ev.clone())));
                        }
                    }
                }
                NodeOutput::Note { .. } => {}
            }
        }
    }

    fn deliver_ticket(
        &mut self,
        to: NodeId,
        ticket: VoteTicket,
        work: &mut Vec<(usize, NodeInput)>,
    ) {
        if to == self.driven {
            self.inbox.push_back(NodeInput::Ticket(ticket));
        } else if let Some(i) = self.peers.iter().position(|p| p.id == to) {
            work.push((i, NodeInput::Ticket(ticket)));
        }
    }

    fn process_chain_call(&mut self, chain: ChainId, call: ChainCall) -> Vec<ChainEvent> {
        let proxy = self.chains.get_mut(&chain).expect("known chain");
        match call {
            ChainCall::Finalize(fc) => match proxy.verify_and_finalize(&fc) {
                Ok((_receipts, events)) => events,
                Err(e) => vec![ChainEvent::FinalizeRejected {
                    chain,
                    round: fc.rid,
                    reason: e.to_string(),
                }],
            },
            ChainCall::Skip(sig) => proxy.apply_skip(&sig).unwrap_or_default(),
            ChainCall::RevokeSkip(sig) => proxy.apply_revoke_skip(&sig).unwrap_or_default(),
        }
    }

    /// Drive a user invoke directly on a chain.
    fn user_invoke(&mut self, chain: ChainId, sender: &str, intent: InvokeIntent) {
        let (_, events) = self
            .chains
            .get_mut(&chain)
            .unwrap()
            .invoke(&Account::new(sender), intent)
            .expect("invoke accepted");
        for ev in events {
            self.fan_out_event(ev);
        }
    }

    /// Submit a pure bundle to the driven node and all peers.
    fn submit_everywhere(&mut self, tx: mcsync_core::tx::BundledTransaction) {
        self.inbox.push_back(NodeInput::PureTx(tx.clone()));
        let mut work: Vec<(usize, NodeInput)> = (0..self.peers.len())
            .map(|i| (i, NodeInput::PureTx(tx.clone())))
            .collect();
        while let Some((i, input)) = work.pop() {
            let outs = self.peers[i].handle(input);
            self.route_peer_outputs(outs, &mut work);
        }
    }

    fn crash_peer(&mut self, id: NodeId) {
        if let Some(p) = self.peers.iter_mut().find(|p| p.id == id) {
            p.crash();
        }
    }

    /// Open every peer's first round (their tickets start flowing).
    fn boot_peers(&mut self) {
        let mut work: Vec<(usize, NodeInput)> = Vec::new();
        for i in 0..self.peers.len() {
            let outs = self.peers[i].start_round();
            self.route_peer_outputs(outs, &mut work);
            while let Some((j, input)) = work.pop() {
                let outs = self.peers[j].handle(input);
                self.route_peer_outputs(outs, &mut work);
            }
        }
    }
}

impl NetworkHandle for LoopbackNet {
    fn send_ticket(&mut self, _from: NodeId, to: NodeId, ticket: VoteTicket) {
        let mut work = Vec::new();
        self.deliver_ticket(to, ticket, &mut work);
        while let Some((i, input)) = work.pop() {
            let outs = self.peers[i].handle(input);
            self.route_peer_outputs(outs, &mut work);
        }
    }

    fn submit_chain_call(&mut self, _from: NodeId, chain: ChainId, call: ChainCall) {
        let events = self.process_chain_call(chain, call);
        for ev in events {
            self.fan_out_event(ev);
        }
    }

    fn poll(&mut self, _me: NodeId) -> Option<NodeInput> {
        self.inbox.pop_front()
    }

    fn idle_tick(&mut self) {
        let chains: Vec<ChainId> = self.chains.keys().copied().collect();
        for c in chains {
            let events = self.chains.get_mut(&c).unwrap().advance_height(1);
            for ev in events {
                self.fan_out_event(ev);
            }
        }
    }
}

fn transfer_genesis(voters: &[u32]) -> GenesisConfig {
    let ids: Vec<NodeId> = voters.iter().map(|i| NodeId(*i)).collect();
    let mut cfg = GenesisConfig {
        initial_voters: ids.clone(),
        all_nodes: ids,
        ..Default::default()
    };
    // Chain 0: alice holds 10 natively and in the global state.
    cfg.chains.insert(
        ChainId(0),
        ChainGenesis {
            global_balances: vec![(0, 10), (1, 0)],
            balances: BTreeMap::from([(Account::new("alice"), 10)]),
            custody: BTreeMap::new(),
        },
    );
    // Chain 1: bob empty, the pool holds 10 in custody and globally.
    cfg.chains.insert(
        ChainId(1),
        ChainGenesis {
            global_balances: vec![(0, 0), (1, 10)],
            balances: BTreeMap::from([(Account::new("bob"), 0)]),
            custody: BTreeMap::from([(Account::new("lp"), 10)]),
        },
    );
    cfg
}

fn transfer_intent(amount: u64) -> InvokeIntent {
    InvokeIntent::Transfer {
        amount,
        from_slot: 0,
        from_pool_slot: 1,
        from_pool_owner: Account::new("lp"),
        to_chain: ChainId(1),
        to_slot: 0,
        to_pool_slot: 1,
        payout_to: Some(Account::new("bob")),
        payout_pool: Account::new("lp"),
    }
}

#[test]
fn single_node_invoke_transfer_end_to_end() {
    let cfg = transfer_genesis(&[0]);
    let genesis = build_genesis(&cfg);
    let (mut node, mut net) = LoopbackNet::new(NodeId(0), genesis);

    let conservation_a = net.chains[&ChainId(0)].conservation_total();
    let conservation_b = net.chains[&ChainId(1)].conservation_total();

    net.user_invoke(ChainId(0), "alice", transfer_intent(3));
    assert_eq!(net.chains[&ChainId(0)].balance(&Account::new("alice")), 7);
    let pinned_post_invoke = net.chains[&ChainId(0)]
        .pending
        .values()
        .next()
        .unwrap()
        .post_invoke_root;

    let outcome = mcsync_core::node::run_round(&mut node, &mut net);
    assert_eq!(outcome, RoundOutcome::ProducedAndFinalized);

    // Native outcomes: bob paid from pool custody, escrow consumed.
    let a = &net.chains[&ChainId(0)];
    let b = &net.chains[&ChainId(1)];
    assert_eq!(b.balance(&Account::new("bob")), 3);
    assert_eq!(b.custody_of(&Account::new("lp")), 7);
    assert_eq!(a.custody_of(&Account::new("lp")), 3);
    assert!(a.pending.is_empty());
    assert_eq!(a.conservation_total(), conservation_a);
    assert_eq!(b.conservation_total(), conservation_b);

    // Global outcome matches the hand-executed transfer.
    let gs = &node.replica;
    let read = |chain: u32, slot: u64| {
        gs.get(&gs.chain_leaf_path(ChainId(chain), slot).unwrap())
            .unwrap()
            .balance()
    };
    assert_eq!(read(0, 0), 7); // alice
    assert_eq!(read(0, 1), 3); // pool on chain 0
    assert_eq!(read(1, 0), 3); // bob
    assert_eq!(read(1, 1), 7); // pool on chain 1

    // All pins advanced to the same root.
    assert_eq!(a.pinned_global_root, gs.root());
    assert_eq!(b.pinned_global_root, gs.root());

    // The invoke-time pin equals the transcript's post-invoke-step root
    // when the continuation leads the block.
    let block = &node.ledger[0];
    let first = &block.proof.transcripts[0];
    assert_eq!(first.steps[0].root_after().unwrap(), pinned_post_invoke);
}

#[test]
fn four_nodes_pure_transfer_converges() {
    let cfg = transfer_genesis(&[0, 1, 2, 3]);
    let genesis = build_genesis(&cfg);
    let layout = genesis.state.layout().clone();
    let (mut node, mut net) = LoopbackNet::new(NodeId(0), genesis);

    let spec = TransferSpec {
        amount: 3,
        from_chain: ChainId(0),
        from: layout.chain_leaf_path(ChainId(0), 0).unwrap(),
        from_pool: layout.chain_leaf_path(ChainId(0), 1).unwrap(),
        to_chain: ChainId(1),
        to: layout.chain_leaf_path(ChainId(1), 0).unwrap(),
        to_pool: layout.chain_leaf_path(ChainId(1), 1).unwrap(),
        payout_to: Some(Account::new("bob")),
        payout_pool: Account::new("lp"),
    };
    net.submit_everywhere(transfer_tx(TxId(100), TxSource::Pure, &spec));
    net.boot_peers();

    let outcome = mcsync_core::node::run_round(&mut node, &mut net);
    assert!(matches!(
        outcome,
        RoundOutcome::ProducedAndFinalized | RoundOutcome::ObservedFinalized
    ));

    // Replicas converge: every live peer ends at the same root.
    for peer in &net.peers {
        assert_eq!(peer.replica.root(), node.replica.root());
        assert_eq!(peer.registry.root(), node.registry.root());
    }
    for proxy in net.chains.values() {
        assert_eq!(proxy.pinned_global_root, node.replica.root());
    }
    assert_eq!(net.chains[&ChainId(1)].balance(&Account::new("bob")), 3);
}

#[test]
fn crashed_winner_leads_to_skip() {
    let cfg = transfer_genesis(&[0, 1, 2, 3]);
    let genesis = build_genesis(&cfg);
    let registry = genesis.registry.clone();
    let (mut node, mut net) = LoopbackNet::new(NodeId(0), genesis);

    // Crash the canonical candidate for round 0 (if it is the driven
    // node, the test cannot proceed; the fixed key derivation makes this
    // deterministic and it is not node 0 here).
    let candidate =
        mcsync_core::election::canonical_candidate(mcsync_core::tx::RoundId(0), 0, &registry)
            .unwrap();
    assert_ne!(candidate, NodeId(0), "fixture assumes a peer wins round 0");
    net.crash_peer(candidate);
    net.boot_peers();

    let outcome = mcsync_core::node::run_round(&mut node, &mut net);
    assert_eq!(outcome, RoundOutcome::Skipped);

    // All chains refuse round 0 now; the round terminates as skipped on
    // every chain, consistently.
    for proxy in net.chains.values() {
        assert_eq!(proxy.current_round, mcsync_core::tx::RoundId(1));
    }

    // The next round elects a different, live winner and can finalize.
    let spec_gs = node.replica.clone();
    let spec = TransferSpec {
        amount: 2,
        from_chain: ChainId(0),
        from: spec_gs.chain_leaf_path(ChainId(0), 0).unwrap(),
        from_pool: spec_gs.chain_leaf_path(ChainId(0), 1).unwrap(),
        to_chain: ChainId(1),
        to: spec_gs.chain_leaf_path(ChainId(1), 0).unwrap(),
        to_pool: spec_gs.chain_leaf_path(ChainId(1), 1).unwrap(),
        payout_to: Some(Account::new("bob")),
        payout_pool: Account::new("lp"),
    };
    net.submit_everywhere(transfer_tx(TxId(101), TxSource::Pure, &spec));
    // Rounds already in flight may finalize empty; the bundle lands in a
    // following round.
    for _ in 0..4 {
        let outcome2 = mcsync_core::node::run_round(&mut node, &mut net);
        assert_ne!(outcome2, RoundOutcome::Skipped);
        if net.chains[&ChainId(1)].balance(&Account::new("bob")) == 2 {
            break;
        }
    }
    assert_eq!(net.chains[&ChainId(1)].balance(&Account::new("bob")), 2);
}

#[test]
fn dishonest_relayer_block_rejected_and_invoke_revocable() {
    let cfg = transfer_genesis(&[0]);
    let genesis = build_genesis(&cfg);
    let (mut node, mut net) = LoopbackNet::new(NodeId(0), genesis);
    node.relayer_corruption = Some(1); // reports amount+1

    net.user_invoke(ChainId(0), "alice", transfer_intent(3));
    let outcome = mcsync_core::node::run_round(&mut node, &mut net);

    // The only producer carries a corrupted continuation; chain 0 rejects
    // it with a root mismatch, the round times out and skips everywhere.
    assert_eq!(outcome, RoundOutcome::Skipped);
    let a = &net.chains[&ChainId(0)];
    let b = &net.chains[&ChainId(1)];
    assert_eq!(b.balance(&Account::new("bob")), 0);
    assert_eq!(a.balance(&Account::new("alice")), 7); // escrow still held
    assert!(a.pending.len() == 1);

    // No partial update: pins never moved.
    assert_eq!(a.pinned_global_root, b.pinned_global_root);
    assert_eq!(a.root_history.len(), 1);

    // After the revocation window the user reclaims the escrow.
    let mut chain_a = net.chains.remove(&ChainId(0)).unwrap();
    chain_a.advance_height(21);
    let inv = *chain_a.pending.keys().next().unwrap();
    chain_a.revoke(&Account::new("alice"), inv).unwrap();
    assert_eq!(chain_a.balance(&Account::new("alice")), 10);
}
