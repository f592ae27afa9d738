//! The discrete-event loop that drives all three protocol phases.
//!
//! Round `k` starts at `k · round_period`. Heads that need a session run
//! the handshake in the first `4 · per_hop` ms; readings are generated at
//! the end of that slot and collected bottom-up, and each head uploads its
//! aggregate to the base station under the session key. A metric snapshot
//! closes the round one millisecond before the next one starts; events of a
//! closed round are discarded.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::metrics::{summarize, MetricsRecord};
use super::{aggregation_energy, rx_energy, tx_energy, Energy, EventQueue, SimTime};
use crate::adversary::{AttackOutcome, Adversary, AttackSpec, Interception};
use crate::aggregation::{fresh, open_incoming, send_hop, CollectMode, DataPacket, PacketError, PacketEvent, RoundCollector, TraceEntry, TxId};
use crate::auth::{handshake_finalize, handshake_msg1, AuthLogEntry, AuthMessage, BaseStation, Initiator, MessageKind, Registration};
use crate::config::{ConfigError, ScenarioConfig};
use crate::crypto::CurveParams;
use crate::keys::{establish_link_keys, KeyStore, LinkId, LinkKeyState};
use crate::network::{apply_topology, build_aggregation_tree, deploy, elect_cluster_heads, ClusterId, ClusterTopology, NetworkError, NodeId, NodeState};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// How a data packet came to be on the air.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    /// Intra-cluster edge, sent by the cluster's collector.
    Tree { cluster: usize, tx: TxId },
    /// Head to base station.
    Upload { cluster: usize },
    /// Originated by the adversary spec at this index.
    Injected { spec: usize },
}

impl Hop {
    fn honest(&self) -> bool {
        !matches!(self, Hop::Injected { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    RoundStart(u64),
    TopologyRebuild(u64),
    HandshakeMsg {
        round: u64,
        session: u64,
        head: NodeId,
        msg: AuthMessage,
        tampered_by: Option<usize>,
    },
    /// A handshake message that never arrived.
    HandshakeLost { round: u64, session: u64, head: NodeId, kind: MessageKind },
    /// Readings are generated and collection starts.
    DataPhase(u64),
    Flush { round: u64, cluster: usize, node: NodeId },
    PacketDelivery {
        round: u64,
        hop: Hop,
        packet: DataPacket,
        receiver: NodeId,
        tampered_by: Option<usize>,
    },
    PacketLoss { round: u64, hop: Hop },
    NodeDeath(NodeId),
    MetricSnapshot(u64),
}

/// Initial, final and charged energy; `initial − final = charged` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyLedger {
    pub initial: Energy,
    pub remaining: Energy,
    pub charged: Energy,
}

impl EnergyLedger {
    pub fn reconciles(&self) -> bool {
        self.initial.femtojoules() == self.remaining.femtojoules() + self.charged.femtojoules()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub summary: MetricsRecord,
    pub trace: Vec<TraceEntry>,
    pub auth_log: Vec<AuthLogEntry>,
    /// Dump of the phase-1 topology.
    pub topology: String,
    pub ledger: EnergyLedger,
    pub attack_outcomes: Vec<AttackOutcome>,
    /// Per spec: the stolen link and the time it was stolen.
    pub compromised: Vec<Option<(LinkId, SimTime)>>,
    /// Rounds at whose start the topology was rebuilt.
    pub rebuild_rounds: Vec<u64>,
    /// Every dispatched event had a timestamp ≥ its predecessor's.
    pub monotonic: bool,
    pub nodes: Vec<NodeState>,
}

impl RunOutput {
    pub fn metrics_csv(&self) -> String {
        super::metrics::metrics_csv(&self.metrics, &self.summary)
    }

    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn auth_log_text(&self) -> String {
        self.auth_log.iter().map(|t| format!("{t}\n")).collect()
    }
}

#[derive(Debug, Clone, Default)]
struct RoundStats {
    sent: u64,
    delivered: u64,
    delay_sum_ms: u64,
    readings_delivered: u64,
}

fn identity(node: NodeId) -> Vec<u8> {
    format!("node-{}", node.0).into_bytes()
}

pub struct Simulation {
    cfg: ScenarioConfig,
    curve: CurveParams,
    mode: CollectMode,
    rng: ChaCha8Rng,
    queue: EventQueue<EventKind>,
    nodes: Vec<NodeState>,
    bs_id: NodeId,
    topo: ClusterTopology,
    rings: KeyStore,
    bs: BaseStation,
    registrations: BTreeMap<NodeId, Registration>,
    initiators: BTreeMap<u64, Initiator>,
    needs_auth: BTreeSet<NodeId>,
    last_auth: BTreeMap<NodeId, u64>,
    next_session: u64,
    round: u64,
    round_open: bool,
    rebuild_pending: bool,
    collectors: Vec<RoundCollector>,
    completed: BTreeSet<usize>,
    adversary: Option<Adversary>,
    stats: RoundStats,
    bytes_tx: u64,
    charged: Energy,
    initial: Energy,
    trace: Vec<TraceEntry>,
    auth_log: Vec<AuthLogEntry>,
    metrics: Vec<MetricsRecord>,
    rebuild_rounds: Vec<u64>,
    topology_dump: Option<String>,
    last_time: SimTime,
    monotonic: bool,
}

impl Simulation {
    /// Deploys a fresh field from `seed`. Attack specs come from the config.
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self, SimError> {
        let attacks = cfg.attacks.clone();
        Self::with_attacks(cfg, seed, (!attacks.is_empty()).then_some(attacks))
    }

    /// `attacks = None` runs without any adversary attached.
    pub fn with_attacks(cfg: &ScenarioConfig, seed: u64, attacks: Option<Vec<AttackSpec>>) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = deploy(&cfg.deploy_config(), &mut rng)?;
        Self::build(cfg, seed, rng, nodes, attacks)
    }

    /// Hand-placed nodes; the last entry must be the base station.
    pub fn with_nodes(cfg: &ScenarioConfig, seed: u64, nodes: Vec<NodeState>, attacks: Option<Vec<AttackSpec>>) -> Result<Self, SimError> {
        cfg.validate()?;
        Self::build(cfg, seed, ChaCha8Rng::seed_from_u64(seed), nodes, attacks)
    }

    fn build(cfg: &ScenarioConfig, seed: u64, mut rng: ChaCha8Rng, nodes: Vec<NodeState>, attacks: Option<Vec<AttackSpec>>) -> Result<Self, SimError> {
        let bs_id = nodes
            .iter()
            .find(|n| n.is_base_station())
            .map(|n| n.id)
            .ok_or_else(|| NetworkError::ConfigInvalid("no base station".into()))?;
        let curve = cfg.protocol.curve.params();
        let bs = BaseStation::new(curve.clone(), rng.gen(), cfg.protocol.freshness_ms);
        let adversary = attacks.map(|specs| {
            let mut arng = ChaCha8Rng::seed_from_u64(seed);
            arng.set_stream(1);
            Adversary::new(specs, arng)
        });
        let initial = nodes.iter().filter(|n| !n.is_base_station()).map(|n| n.energy).sum();
        let mut queue = EventQueue::new();
        queue.schedule(0, EventKind::RoundStart(0));
        Ok(Self {
            cfg: cfg.clone(),
            curve,
            mode: if cfg.run.baseline {
                CollectMode::StoreAndForward
            } else {
                CollectMode::Aggregate
            },
            rng,
            queue,
            nodes,
            bs_id,
            topo: ClusterTopology {
                clusters: Vec::new(),
                base_station: bs_id,
                isolated: BTreeSet::new(),
            },
            rings: KeyStore::new(),
            bs,
            registrations: BTreeMap::new(),
            initiators: BTreeMap::new(),
            needs_auth: BTreeSet::new(),
            last_auth: BTreeMap::new(),
            next_session: 0,
            round: 0,
            round_open: false,
            rebuild_pending: true,
            collectors: Vec::new(),
            completed: BTreeSet::new(),
            adversary,
            stats: RoundStats::default(),
            bytes_tx: 0,
            charged: Energy::ZERO,
            initial,
            trace: Vec::new(),
            auth_log: Vec::new(),
            metrics: Vec::new(),
            rebuild_rounds: Vec::new(),
            topology_dump: None,
            last_time: 0,
            monotonic: true,
        })
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topo
    }

    pub fn rings(&self) -> &KeyStore {
        &self.rings
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, time: SimTime, event: EventKind) {
        self.queue.schedule(time, event);
    }

    fn per_hop(&self) -> u64 {
        self.cfg.protocol.transmission_ms + self.cfg.protocol.processing_ms
    }

    fn round_base(&self, k: u64) -> SimTime {
        k * self.cfg.protocol.round_period_ms
    }

    fn node(&self, id: NodeId) -> &NodeState {
        &self.nodes[id.0 as usize]
    }

    fn alive(&self, id: NodeId) -> bool {
        self.nodes.get(id.0 as usize).is_some_and(|n| n.alive)
    }

    fn alive_sensors(&self) -> usize {
        self.nodes.iter().filter(|n| n.alive && !n.is_base_station()).count()
    }

    fn distance(&self, a: NodeId, b: NodeId) -> f64 {
        self.node(a).position.distance(&self.node(b).position)
    }

    /// Deducts up to `joules` from `id`; the base station is never charged.
    fn charge(&mut self, id: NodeId, joules: f64) {
        let threshold = Energy::from_joules(self.cfg.energy.death_threshold);
        let now = self.queue.now();
        let n = &mut self.nodes[id.0 as usize];
        if n.is_base_station() || !n.alive {
            return;
        }
        let cost = Energy::from_joules(joules);
        let before = n.energy;
        n.energy = before.saturating_sub(cost);
        self.charged += before - n.energy;
        if n.energy <= threshold {
            n.alive = false;
            self.queue.schedule(now, EventKind::NodeDeath(id));
        }
    }

    fn charge_tx(&mut self, from: NodeId, to: NodeId, bits: u64) {
        let d = self.distance(from, to);
        let j = tx_energy(&self.cfg.energy, bits, d);
        self.bytes_tx += bits.div_ceil(8);
        self.charge(from, j);
    }

    fn charge_rx(&mut self, at: NodeId, bits: u64) {
        let j = rx_energy(&self.cfg.energy, bits);
        self.charge(at, j);
    }

    /// Pops and dispatches one event; `None` once the run is over.
    pub fn step(&mut self) -> Option<SimTime> {
        let ev = self.queue.pop()?;
        if ev.time < self.last_time {
            self.monotonic = false;
        }
        self.last_time = ev.time;
        match ev.item {
            EventKind::RoundStart(k) => self.on_round_start(k),
            EventKind::TopologyRebuild(k) => self.on_rebuild(k),
            EventKind::HandshakeMsg {
                round,
                session,
                head,
                msg,
                tampered_by,
            } => {
                if round == self.round && self.round_open {
                    self.on_handshake(session, head, msg, tampered_by);
                }
            }
            EventKind::HandshakeLost { round, session, head, kind } => {
                if round == self.round && self.round_open {
                    self.fail_handshake(session, head, kind, "message_lost");
                }
            }
            EventKind::DataPhase(k) => self.on_data_phase(k),
            EventKind::Flush { round, cluster, node } => {
                if round == self.round && self.round_open {
                    self.on_flush(cluster, node);
                }
            }
            EventKind::PacketDelivery {
                round,
                hop,
                packet,
                receiver,
                tampered_by,
            } => {
                if round == self.round && self.round_open {
                    self.on_delivery(hop, packet, receiver, tampered_by);
                }
            }
            EventKind::PacketLoss { round, hop } => {
                if round == self.round && self.round_open {
                    if let Hop::Tree { cluster, tx } = hop {
                        let ready = self.collectors[cluster].on_loss(tx);
                        self.schedule_flushes(cluster, ready);
                        self.check_complete(cluster);
                    }
                }
            }
            EventKind::NodeDeath(id) => self.on_death(id),
            EventKind::MetricSnapshot(k) => self.on_snapshot(k),
        }
        Some(ev.time)
    }

    /// The in-progress row for the current round.
    pub fn metrics_snapshot(&self) -> MetricsRecord {
        let (attempts, accepted) = self.adversary.as_ref().map_or((0, 0), Adversary::round_tally);
        MetricsRecord {
            round: self.round as i64,
            alive: self.nodes.iter().filter(|n| n.alive).count() as u64,
            total_energy: self.nodes.iter().filter(|n| !n.is_base_station()).map(|n| n.energy).sum(),
            sent: self.stats.sent,
            delivered: self.stats.delivered,
            delay_sum_ms: self.stats.delay_sum_ms,
            readings_delivered: self.stats.readings_delivered,
            bytes_tx: self.bytes_tx,
            attack_attempts: attempts,
            attack_accepted: accepted,
            isolated: self.topo.isolated.iter().filter(|&&n| self.alive(n)).count() as u64,
        }
    }

    fn on_round_start(&mut self, k: u64) {
        if k >= self.cfg.run.rounds || self.alive_sensors() == 0 {
            return;
        }
        self.round = k;
        self.round_open = true;
        self.stats = RoundStats::default();
        self.collectors.clear();
        self.completed.clear();
        let flagged = self.rings.values().any(|r| r.any_flagged());
        let due = self.rebuild_pending || flagged || k.is_multiple_of(self.cfg.network.recluster_rounds);
        if due {
            self.queue.schedule(self.round_base(k), EventKind::TopologyRebuild(k));
        } else {
            self.begin_round(k);
        }
    }

    fn on_rebuild(&mut self, k: u64) {
        let alive = self.alive_sensors();
        let heads = elect_cluster_heads(
            &self.nodes,
            self.cfg.head_count(alive),
            self.cfg.weights(),
            Energy::from_joules(self.cfg.energy.initial_energy),
        )
        .and_then(|h| build_aggregation_tree(&h, &self.nodes, self.cfg.network.range));
        let topo = match heads {
            Ok(t) => t,
            Err(_) => {
                // nothing left to cluster; let the round close empty
                self.round_open = true;
                self.begin_round(k);
                return;
            }
        };
        apply_topology(&mut self.nodes, &topo);
        self.rings = establish_link_keys(&topo, self.cfg.protocol.window, &mut self.rng);
        self.needs_auth.clear();
        for h in topo.heads() {
            if !self.registrations.contains_key(&h) {
                let reg = self.bs.register(&identity(h)).expect("each node registers once");
                self.registrations.insert(h, reg);
            }
            self.needs_auth.insert(h);
        }
        if self.topology_dump.is_none() {
            self.topology_dump = Some(topo.dump(&self.nodes));
        }
        self.topo = topo;
        self.rebuild_rounds.push(k);
        self.rebuild_pending = false;
        self.begin_round(k);
    }

    fn begin_round(&mut self, k: u64) {
        let t = self.round_base(k);
        if let Some(adv) = self.adversary.as_mut() {
            adv.begin_round(k, t, &self.topo, &self.rings);
            let ids: Vec<Vec<u8>> = self.topo.heads().map(identity).collect();
            adv.attack_base_station(&mut self.bs, &ids, t);
        }
        let heads: Vec<NodeId> = self.topo.heads().collect();
        for h in heads {
            let stale = self
                .last_auth
                .get(&h)
                .is_none_or(|&r| k.saturating_sub(r) >= self.cfg.protocol.reauth_rounds);
            if self.alive(h) && (self.needs_auth.contains(&h) || stale) {
                self.start_handshake(h, t);
            }
        }
        let setup = 4 * self.per_hop();
        self.queue.schedule(t + setup, EventKind::DataPhase(k));
        let period = self.cfg.protocol.round_period_ms;
        self.queue.schedule(t + period - 1, EventKind::MetricSnapshot(k));
        self.queue.schedule(t + period, EventKind::RoundStart(k + 1));
    }

    fn start_handshake(&mut self, head: NodeId, t: SimTime) {
        let reg = self.registrations[&head].clone();
        let session = self.next_session;
        self.next_session += 1;
        let Ok((init, m1)) = handshake_msg1(&reg, &self.curve, &mut self.rng, t, self.cfg.protocol.freshness_ms) else {
            self.needs_auth.insert(head);
            return;
        };
        self.initiators.insert(session, init);
        let bs = self.bs_id;
        self.charge_tx(head, bs, self.cfg.protocol.control_bits);
        self.send_auth(session, head, AuthMessage::M1(m1), t);
    }

    fn send_auth(&mut self, session: u64, head: NodeId, msg: AuthMessage, t: SimTime) {
        let arrive = t + self.cfg.protocol.transmission_ms;
        let kind = msg.kind();
        let (msg, tampered_by) = match self.adversary.as_mut() {
            Some(adv) => adv.intercept_auth(msg, &self.curve, self.cfg.protocol.freshness_ms),
            None => (Some(msg), None),
        };
        let round = self.round;
        let ev = match msg {
            Some(msg) => EventKind::HandshakeMsg {
                round,
                session,
                head,
                msg,
                tampered_by,
            },
            None => EventKind::HandshakeLost { round, session, head, kind },
        };
        self.queue.schedule(arrive, ev);
    }

    fn log_auth(&mut self, session: u64, msg: MessageKind, verdict: &'static str, reason: &'static str) {
        self.auth_log.push(AuthLogEntry {
            time: self.queue.now(),
            session,
            msg,
            verdict,
            reason,
        });
    }

    fn fail_handshake(&mut self, session: u64, head: NodeId, msg: MessageKind, reason: &'static str) {
        self.log_auth(session, msg, "rejected", reason);
        self.initiators.remove(&session);
        self.needs_auth.insert(head);
    }

    fn report_attack(&mut self, spec: Option<usize>, verdict: Result<(), &'static str>, link: Option<LinkId>) {
        if let (Some(i), Some(adv)) = (spec, self.adversary.as_mut()) {
            adv.report(i, verdict, link);
        }
    }

    fn on_handshake(&mut self, session: u64, head: NodeId, msg: AuthMessage, tampered_by: Option<usize>) {
        let now = self.queue.now();
        let proc_ms = self.cfg.protocol.processing_ms;
        let kind = msg.kind();
        let result: Result<(), crate::auth::AuthError> = match msg {
            AuthMessage::M1(m1) => self.bs.handle_m1(&m1, &mut self.rng, now).map(|m2| {
                self.log_auth(session, kind, "pending", "");
                self.send_auth(session, head, AuthMessage::M2(m2), now + proc_ms);
            }),
            AuthMessage::M2(m2) => {
                if !self.alive(head) {
                    self.fail_handshake(session, head, kind, "message_lost");
                    return;
                }
                let bits = self.cfg.protocol.control_bits;
                self.charge_rx(head, bits);
                let Some(init) = self.initiators.remove(&session) else {
                    return;
                };
                handshake_finalize(&init, &self.curve, &m2, now).map(|(m3, key)| {
                    self.log_auth(session, kind, "pending", "");
                    let link = LinkId::new(self.bs_id, head);
                    let state = LinkKeyState::new(link, key, self.cfg.protocol.window);
                    self.rings.entry(head).or_default().insert(state);
                    let bs = self.bs_id;
                    self.charge_tx(head, bs, bits);
                    self.send_auth(session, head, AuthMessage::M3(m3), now + proc_ms);
                })
            }
            AuthMessage::M3(m3) => self.bs.handle_m3(&m3, now).map(|(_, key)| {
                self.log_auth(session, kind, "accepted", "");
                let link = LinkId::new(self.bs_id, head);
                let state = LinkKeyState::new(link, key, self.cfg.protocol.window);
                self.rings.entry(self.bs_id).or_default().insert(state);
                self.needs_auth.remove(&head);
                self.last_auth.insert(head, self.round);
            }),
        };
        self.report_attack(tampered_by, result.as_ref().map(|_| ()).map_err(|e| e.reason()), None);
        if let Err(e) = result {
            self.fail_handshake(session, head, kind, e.reason());
        }
    }

    fn on_data_phase(&mut self, k: u64) {
        if k != self.round || !self.round_open {
            return;
        }
        let now = self.queue.now();
        let mut readings = BTreeMap::new();
        for c in &self.topo.clusters {
            for n in std::iter::once(c.head).chain(c.members.iter().copied()) {
                if self.nodes[n.0 as usize].alive {
                    readings.insert(n, self.rng.gen_range(0..1000i64));
                }
            }
        }
        let nodes = &self.nodes;
        self.collectors = self
            .topo
            .clusters
            .iter()
            .map(|c| {
                RoundCollector::new(c, &readings, now, self.cfg.protocol.aggregation, self.mode, |n| {
                    nodes[n.0 as usize].alive
                })
            })
            .collect();
        if let Some(adv) = self.adversary.as_mut() {
            for inj in adv.replays() {
                let receiver = inj.packet.dst;
                self.queue.schedule(
                    now,
                    EventKind::PacketDelivery {
                        round: k,
                        hop: Hop::Injected { spec: inj.spec },
                        packet: inj.packet,
                        receiver,
                        tampered_by: None,
                    },
                );
            }
        }
        for i in 0..self.collectors.len() {
            let ready = self.collectors[i].start();
            self.schedule_flushes(i, ready);
            self.check_complete(i);
        }
    }

    fn schedule_flushes(&mut self, cluster: usize, ready: Vec<NodeId>) {
        let at = self.queue.now() + self.cfg.protocol.processing_ms;
        for node in ready {
            self.queue.schedule(
                at,
                EventKind::Flush {
                    round: self.round,
                    cluster,
                    node,
                },
            );
        }
    }

    fn check_complete(&mut self, cluster: usize) {
        let col = &self.collectors[cluster];
        if !col.is_complete() || self.completed.contains(&cluster) {
            return;
        }
        self.completed.insert(cluster);
        if col.head_payload().is_some() {
            let head = col.head();
            self.schedule_flushes(cluster, vec![head]);
        }
    }

    fn on_flush(&mut self, cluster: usize, node: NodeId) {
        if !self.alive(node) {
            return;
        }
        let now = self.queue.now();
        let head = self.collectors[cluster].head();
        if node == head {
            self.upload(cluster, head);
            return;
        }
        let f = self.collectors[cluster].flush(node, &mut self.rings);
        if let Some(tx) = f.tx {
            let receiver = tx.link.parent;
            self.transmit(now, Hop::Tree { cluster, tx: tx.id }, tx.packet, node, receiver);
        }
        self.schedule_flushes(cluster, f.ready);
        self.check_complete(cluster);
    }

    fn upload(&mut self, cluster: usize, head: NodeId) {
        let now = self.queue.now();
        let Some(payload) = self.collectors[cluster].head_payload() else {
            return;
        };
        let link = LinkId::new(self.bs_id, head);
        let cid = ClusterId(cluster as u32);
        let sealed = self.rings.get_mut(&head).map(|ring| send_hop(ring, link, cid, &payload));
        match sealed {
            Some(Ok(pkt)) => {
                let bs = self.bs_id;
                self.transmit(now, Hop::Upload { cluster }, pkt, head, bs);
            }
            // no session yet: hold the data and authenticate next round
            _ => {
                self.needs_auth.insert(head);
            }
        }
    }

    fn transmit(&mut self, now: SimTime, hop: Hop, pkt: DataPacket, from: NodeId, to: NodeId) {
        self.stats.sent += 1;
        self.trace.push(TraceEntry::new(now, &pkt, PacketEvent::Sent));
        self.charge_tx(from, to, self.cfg.protocol.data_bits);
        let arrive = now + self.cfg.protocol.transmission_ms;
        let round = self.round;
        let fate = match self.adversary.as_mut() {
            Some(adv) => adv.intercept_data(&pkt),
            None => Interception::Deliver(pkt),
        };
        let ev = match fate {
            Interception::Deliver(packet) => EventKind::PacketDelivery {
                round,
                hop,
                packet,
                receiver: to,
                tampered_by: None,
            },
            Interception::Tampered(packet, i) => EventKind::PacketDelivery {
                round,
                hop,
                packet,
                receiver: to,
                tampered_by: Some(i),
            },
            Interception::Garbled(_) | Interception::Dropped => EventKind::PacketLoss { round, hop },
        };
        self.queue.schedule(arrive, ev);
    }

    fn on_delivery(&mut self, hop: Hop, pkt: DataPacket, receiver: NodeId, tampered_by: Option<usize>) {
        let now = self.queue.now();
        let round_start = self.round_base(self.round);
        if !self.alive(receiver) {
            if let Hop::Tree { cluster, tx } = hop {
                let ready = self.collectors[cluster].on_loss(tx);
                self.schedule_flushes(cluster, ready);
                self.check_complete(cluster);
            }
            return;
        }
        let bits = self.cfg.protocol.data_bits;
        self.charge_rx(receiver, bits);
        let spec = match hop {
            Hop::Injected { spec } => Some(spec),
            _ => tampered_by,
        };
        let cluster = match hop {
            Hop::Tree { cluster, .. } => Some(cluster),
            Hop::Injected { .. } => self.collectors.iter().position(|c| c.participants().contains(&receiver)),
            Hop::Upload { .. } => None,
        };
        let outcome: Result<crate::aggregation::AggregatePayload, PacketError> = match (receiver == self.bs_id, cluster) {
            (false, Some(ci)) => {
                let tx = match hop {
                    Hop::Tree { tx, .. } => Some(tx),
                    _ => None,
                };
                let d = self.collectors[ci].on_delivery(tx, &pkt, &mut self.rings);
                if d.outcome.is_ok() && (self.mode == CollectMode::Aggregate || receiver == self.collectors[ci].head()) {
                    let j = aggregation_energy(&self.cfg.energy, bits);
                    self.charge(receiver, j);
                }
                self.schedule_flushes(ci, d.ready);
                self.check_complete(ci);
                d.outcome
            }
            _ => match self.rings.get_mut(&receiver) {
                Some(ring) if pkt.dst == receiver => open_incoming(ring, &pkt).and_then(|p| fresh(p, round_start)),
                _ => Err(PacketError::NoSuchLink(pkt.link())),
            },
        };
        let event = match &outcome {
            Ok(payload) => {
                if hop.honest() {
                    self.stats.delivered += 1;
                }
                if matches!(hop, Hop::Upload { .. }) {
                    self.stats.readings_delivered += u64::from(payload.count);
                    self.stats.delay_sum_ms += u64::from(payload.count) * now.saturating_sub(payload.origin_ms);
                }
                PacketEvent::Delivered
            }
            Err(e) => {
                if let (Hop::Upload { .. }, PacketError::NoSuchLink(_)) = (hop, e) {
                    self.needs_auth.insert(pkt.src);
                }
                e.trace_event()
            }
        };
        self.trace.push(TraceEntry::new(now, &pkt, event));
        self.report_attack(spec, outcome.map(|_| ()).map_err(|e| e.reason()), Some(pkt.link()));
    }

    fn on_death(&mut self, id: NodeId) {
        if self.topo.cluster_of(id).is_some() {
            self.rebuild_pending = true;
        }
        if !self.round_open {
            return;
        }
        for ci in 0..self.collectors.len() {
            let ready = self.collectors[ci].on_node_death(id);
            self.schedule_flushes(ci, ready);
            self.check_complete(ci);
        }
    }

    fn on_snapshot(&mut self, k: u64) {
        if k != self.round || !self.round_open {
            return;
        }
        let row = self.metrics_snapshot();
        self.metrics.push(row);
        self.round_open = false;
    }

    /// Runs every remaining event.
    pub fn run_to_end(mut self) -> RunOutput {
        while self.step().is_some() {}
        self.finish()
    }

    fn finish(self) -> RunOutput {
        let remaining: Energy = self.nodes.iter().filter(|n| !n.is_base_station()).map(|n| n.energy).sum();
        let alive = self.nodes.iter().filter(|n| n.alive).count() as u64;
        let summary = summarize(&self.metrics, alive, remaining, self.bytes_tx);
        let (attack_outcomes, compromised) = match &self.adversary {
            Some(a) => (a.outcomes(), (0..a.specs().len()).map(|i| a.compromised(i)).collect()),
            None => (Vec::new(), Vec::new()),
        };
        RunOutput {
            metrics: self.metrics,
            summary,
            trace: self.trace,
            auth_log: self.auth_log,
            topology: self.topology_dump.unwrap_or_default(),
            ledger: EnergyLedger {
                initial: self.initial,
                remaining,
                charged: self.charged,
            },
            attack_outcomes,
            compromised,
            rebuild_rounds: self.rebuild_rounds,
            monotonic: self.monotonic,
            nodes: self.nodes,
        }
    }
}

/// Deploys, runs every round and collects the outputs.
pub fn run(cfg: &ScenarioConfig, seed: u64) -> Result<RunOutput, SimError> {
    Ok(Simulation::new(cfg, seed)?.run_to_end())
}
