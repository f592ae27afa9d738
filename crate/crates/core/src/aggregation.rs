//! Hop-by-hop encrypted aggregation inside a cluster tree.
//!
//! Every hop seals the running aggregate under that edge's link key:
//! the 20-byte payload is XORed with a keystream indexed by the packet
//! counter, then rail-fence transposed with key-derived rails and offset.
//! The tag covers the 32-byte header and the body.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::{
    keystream, mac_tag, rail_fence_decode, rail_fence_encode, tags_equal, RailFenceParams, SymmetricKey, TAG_LEN,
};
use crate::keys::{KeyError, KeyRing, KeyStore, LinkId, LinkKeyState};
use crate::network::{Cluster, ClusterId, ClusterTopology, NodeId};
use crate::sim::{EventQueue, SimTime};

pub const PAYLOAD_LEN: usize = 20;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Sum,
    /// Carries the running sum; divide by `count` to read it.
    Mean,
    Max,
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(format!("unknown aggregation {other:?} (expected sum|mean|max)")),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregatePayload {
    pub value: i64,
    pub count: u32,
    /// Earliest generation time among the folded readings.
    pub origin_ms: u64,
}

impl AggregatePayload {
    pub fn reading(value: i64, at: SimTime) -> Self {
        Self {
            value,
            count: 1,
            origin_ms: at,
        }
    }

    /// `value ∥ count ∥ origin`, big-endian.
    pub fn encode(&self) -> [u8; PAYLOAD_LEN] {
        let mut out = [0u8; PAYLOAD_LEN];
        out[..8].copy_from_slice(&self.value.to_be_bytes());
        out[8..12].copy_from_slice(&self.count.to_be_bytes());
        out[12..].copy_from_slice(&self.origin_ms.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PacketError> {
        if bytes.len() != PAYLOAD_LEN {
            return Err(PacketError::Malformed("payload length"));
        }
        let p = Self {
            value: i64::from_be_bytes(bytes[..8].try_into().unwrap()),
            count: u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
            origin_ms: u64::from_be_bytes(bytes[12..].try_into().unwrap()),
        };
        if p.count == 0 {
            return Err(PacketError::Malformed("empty aggregate"));
        }
        Ok(p)
    }

    pub fn fold(&mut self, other: &AggregatePayload, agg: Aggregation) {
        self.value = match agg {
            Aggregation::Sum | Aggregation::Mean => self.value.saturating_add(other.value),
            Aggregation::Max => self.value.max(other.value),
        };
        self.count += other.count;
        self.origin_ms = self.origin_ms.min(other.origin_ms);
    }

    pub fn result(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::Sum | Aggregation::Max => self.value as f64,
            Aggregation::Mean => self.value as f64 / self.count as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("authentication tag does not verify")]
    TagInvalid,
    #[error(transparent)]
    EpochOutOfWindow(#[from] KeyError),
    #[error("no key for link {0}")]
    NoSuchLink(LinkId),
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    /// Authentic, but the reading was taken before the current round.
    #[error("reading from {origin_ms} ms predates round start {round_start} ms")]
    Stale { origin_ms: SimTime, round_start: SimTime },
}

impl PacketError {
    pub fn trace_event(&self) -> PacketEvent {
        match self {
            PacketError::EpochOutOfWindow(_) | PacketError::Stale { .. } => PacketEvent::EpochOutOfWindow,
            _ => PacketEvent::TagInvalid,
        }
    }

    pub fn reason(&self) -> &'static str {
        match self {
            PacketError::TagInvalid => "tag_invalid",
            PacketError::EpochOutOfWindow(_) => "epoch_oow",
            PacketError::NoSuchLink(_) => "no_such_link",
            PacketError::Malformed(_) => "malformed",
            PacketError::Stale { .. } => "stale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPacket {
    pub src: NodeId,
    pub dst: NodeId,
    pub cluster: ClusterId,
    pub epoch: u64,
    pub ctr: u64,
    pub body: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl DataPacket {
    /// The tree edge the packet claims to travel on.
    pub fn link(&self) -> LinkId {
        LinkId::new(self.dst, self.src)
    }

    pub fn header_bytes(&self) -> [u8; HEADER_LEN] {
        header(self.src, self.dst, self.cluster, self.epoch, self.ctr, self.body.len())
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.header_bytes().to_vec();
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, PacketError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(PacketError::Malformed("short packet"));
        }
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let len = u32_at(28) as usize;
        if bytes.len() != HEADER_LEN + len + TAG_LEN {
            return Err(PacketError::Malformed("length field mismatch"));
        }
        Ok(Self {
            src: NodeId(u32_at(0)),
            dst: NodeId(u32_at(4)),
            cluster: ClusterId(u32_at(8)),
            epoch: u64_at(12),
            ctr: u64_at(20),
            body: bytes[HEADER_LEN..HEADER_LEN + len].to_vec(),
            tag: bytes[HEADER_LEN + len..].try_into().unwrap(),
        })
    }
}

fn header(src: NodeId, dst: NodeId, cluster: ClusterId, epoch: u64, ctr: u64, len: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&src.0.to_be_bytes());
    h[4..8].copy_from_slice(&dst.0.to_be_bytes());
    h[8..12].copy_from_slice(&cluster.0.to_be_bytes());
    h[12..20].copy_from_slice(&epoch.to_be_bytes());
    h[20..28].copy_from_slice(&ctr.to_be_bytes());
    h[28..].copy_from_slice(&(len as u32).to_be_bytes());
    h
}

/// Rails `2 + k[0] mod 6`, offset `k[1] mod 2·(rails − 1)`.
pub fn hop_cipher_params(key: &SymmetricKey) -> RailFenceParams {
    let rails = 2 + (key.bytes[0] as usize % 6);
    let offset = key.bytes[1] as usize % (2 * (rails - 1));
    RailFenceParams::new(rails, offset).expect("derived parameters are always in range")
}

/// Seals `payload` under the state's current key. Does not advance the state.
pub fn encrypt_hop(payload: &AggregatePayload, key: &LinkKeyState, cluster: ClusterId, ctr: u64) -> DataPacket {
    let plain = payload.encode();
    let stream = keystream(&key.current, ctr, plain.len());
    let mixed: Vec<u8> = plain.iter().zip(&stream).map(|(p, s)| p ^ s).collect();
    let body = rail_fence_encode(&mixed, &hop_cipher_params(&key.current));
    let (src, dst) = (key.link.child, key.link.parent);
    let mut msg = header(src, dst, cluster, key.send_epoch, ctr, body.len()).to_vec();
    msg.extend_from_slice(&body);
    DataPacket {
        src,
        dst,
        cluster,
        epoch: key.send_epoch,
        ctr,
        tag: mac_tag(&key.current, &msg),
        body,
    }
}

/// Verifies and decrypts under `key` without touching any state.
pub fn decrypt_hop(pkt: &DataPacket, key: &SymmetricKey) -> Result<AggregatePayload, PacketError> {
    let mut msg = pkt.header_bytes().to_vec();
    msg.extend_from_slice(&pkt.body);
    if !tags_equal(&mac_tag(key, &msg), &pkt.tag) {
        return Err(PacketError::TagInvalid);
    }
    let mixed = rail_fence_decode(&pkt.body, &hop_cipher_params(key));
    let stream = keystream(key, pkt.ctr, mixed.len());
    let plain: Vec<u8> = mixed.iter().zip(&stream).map(|(c, s)| c ^ s).collect();
    AggregatePayload::decode(&plain)
}

/// Sender side: seal with the current key, then ratchet and bump the counter.
pub fn send_hop(ring: &mut KeyRing, link: LinkId, cluster: ClusterId, payload: &AggregatePayload) -> Result<DataPacket, PacketError> {
    let state = ring.get_mut(&link).ok_or(PacketError::NoSuchLink(link))?;
    let ctr = state.next_ctr;
    let pkt = encrypt_hop(payload, state, cluster, ctr);
    *state = state.clone().ratchet();
    state.next_ctr = ctr + 1;
    Ok(pkt)
}

/// Receiver side: resync on the packet epoch, verify, decrypt, ratchet past it.
///
/// State only changes on success, except that a packet from beyond the
/// acceptance window flags the link for re-establishment.
pub fn open_incoming(ring: &mut KeyRing, pkt: &DataPacket) -> Result<AggregatePayload, PacketError> {
    let link = pkt.link();
    let state = ring.get_mut(&link).ok_or(PacketError::NoSuchLink(link))?;
    let candidate = match state.resync(pkt.epoch) {
        Ok(c) => c,
        Err(e) => {
            if pkt.epoch > state.recv_window_base + state.window {
                state.flagged = true;
            }
            return Err(e.into());
        }
    };
    let payload = decrypt_hop(pkt, &candidate.current)?;
    *state = candidate.after_delivery();
    Ok(payload)
}

/// Opens `pkt` and folds it into `acc`; returns the decrypted payload.
pub fn process_incoming(
    ring: &mut KeyRing,
    acc: &mut AggregatePayload,
    pkt: &DataPacket,
    agg: Aggregation,
) -> Result<AggregatePayload, PacketError> {
    let payload = open_incoming(ring, pkt)?;
    acc.fold(&payload, agg);
    Ok(payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketEvent {
    Sent,
    Delivered,
    TagInvalid,
    EpochOutOfWindow,
}

impl PacketEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            PacketEvent::Sent => "sent",
            PacketEvent::Delivered => "delivered",
            PacketEvent::TagInvalid => "tag_invalid",
            PacketEvent::EpochOutOfWindow => "epoch_oow",
        }
    }
}

/// Rejects payloads whose oldest reading predates `round_start`.
pub fn fresh(payload: AggregatePayload, round_start: SimTime) -> Result<AggregatePayload, PacketError> {
    if payload.origin_ms < round_start {
        return Err(PacketError::Stale {
            origin_ms: payload.origin_ms,
            round_start,
        });
    }
    Ok(payload)
}

/// One line of the traffic trace: `time_ms,src,dst,epoch,ctr,event`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub time: SimTime,
    pub src: NodeId,
    pub dst: NodeId,
    pub epoch: u64,
    pub ctr: u64,
    pub event: PacketEvent,
}

impl TraceEntry {
    pub fn new(time: SimTime, pkt: &DataPacket, event: PacketEvent) -> Self {
        Self {
            time,
            src: pkt.src,
            dst: pkt.dst,
            epoch: pkt.epoch,
            ctr: pkt.ctr,
            event,
        }
    }
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.time,
            self.src,
            self.dst,
            self.epoch,
            self.ctr,
            self.event.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollectMode {
    /// Relays fold children into one packet and flush once per round.
    #[default]
    Aggregate,
    /// Baseline: every reading travels to the head in its own packet.
    StoreAndForward,
}

pub type TxId = u64;

/// A sealed packet handed to the medium.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub id: TxId,
    pub link: LinkId,
    pub packet: DataPacket,
}

#[derive(Debug, Default)]
pub struct Flush {
    pub tx: Option<Transmission>,
    /// Nodes that became ready to flush as a consequence.
    pub ready: Vec<NodeId>,
}

#[derive(Debug)]
pub struct Delivery {
    pub outcome: Result<AggregatePayload, PacketError>,
    pub ready: Vec<NodeId>,
}

/// Per-cluster, per-round state machine of the post-order flush schedule.
///
/// The driver owns time: it calls [`start`](Self::start), then `flush` for
/// each ready node, and reports every transmission back through
/// `on_delivery` or `on_loss`. Injected packets (no `TxId`) are processed by
/// the victim but never resolve any pending child.
#[derive(Debug, Clone)]
pub struct RoundCollector {
    cluster: ClusterId,
    head: NodeId,
    agg: Aggregation,
    mode: CollectMode,
    parent: BTreeMap<NodeId, NodeId>,
    participants: BTreeSet<NodeId>,
    /// Aggregate: outstanding children per node. Store-and-forward: only the head's entry is used, counting readings.
    pending: BTreeMap<NodeId, usize>,
    acc: BTreeMap<NodeId, AggregatePayload>,
    own_unsent: BTreeSet<NodeId>,
    forward: BTreeMap<NodeId, VecDeque<AggregatePayload>>,
    done: BTreeSet<NodeId>,
    in_flight: BTreeMap<TxId, NodeId>,
    next_tx: TxId,
    complete: bool,
    head_dead: bool,
    t0: SimTime,
}

impl RoundCollector {
    /// `alive` filters participants: a node takes part only if it and every ancestor is alive.
    pub fn new(
        cluster: &Cluster,
        readings: &BTreeMap<NodeId, i64>,
        t0: SimTime,
        agg: Aggregation,
        mode: CollectMode,
        alive: impl Fn(NodeId) -> bool,
    ) -> Self {
        let participants: BTreeSet<NodeId> = cluster
            .depth
            .keys()
            .copied()
            .filter(|&n| cluster.path_to_head(n).into_iter().all(&alive))
            .collect();
        let acc: BTreeMap<NodeId, AggregatePayload> = participants
            .iter()
            .filter_map(|n| readings.get(n).map(|&v| (*n, AggregatePayload::reading(v, t0))))
            .collect();
        let mut pending = BTreeMap::new();
        let mut own_unsent = BTreeSet::new();
        match mode {
            CollectMode::Aggregate => {
                for n in &participants {
                    pending.insert(*n, 0usize);
                }
                for n in &participants {
                    if let Some(p) = cluster.parent.get(n) {
                        *pending.get_mut(p).expect("participant's parent participates") += 1;
                    }
                }
            }
            CollectMode::StoreAndForward => {
                own_unsent = acc.keys().copied().filter(|&n| n != cluster.head).collect();
                pending.insert(cluster.head, own_unsent.len());
            }
        }
        Self {
            cluster: cluster.id,
            head: cluster.head,
            agg,
            mode,
            parent: cluster.parent.clone(),
            head_dead: !participants.contains(&cluster.head),
            t0,
            participants,
            pending,
            acc,
            own_unsent,
            forward: BTreeMap::new(),
            done: BTreeSet::new(),
            in_flight: BTreeMap::new(),
            next_tx: 0,
            complete: false,
        }
    }

    pub fn cluster(&self) -> ClusterId {
        self.cluster
    }

    pub fn head(&self) -> NodeId {
        self.head
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// The head's aggregate once complete; `None` if the head died.
    pub fn head_payload(&self) -> Option<AggregatePayload> {
        if !self.complete || self.head_dead {
            return None;
        }
        self.acc.get(&self.head).copied()
    }

    pub fn participants(&self) -> &BTreeSet<NodeId> {
        &self.participants
    }

    /// Nodes that may flush at round start.
    pub fn start(&mut self) -> Vec<NodeId> {
        if self.head_dead {
            self.complete = true;
            return Vec::new();
        }
        let ready = match self.mode {
            CollectMode::Aggregate => self
                .participants
                .iter()
                .copied()
                .filter(|&n| n != self.head && self.pending[&n] == 0)
                .collect(),
            CollectMode::StoreAndForward => self.own_unsent.iter().copied().collect(),
        };
        self.check_head();
        ready
    }

    fn check_head(&mut self) {
        if self.pending.get(&self.head).copied().unwrap_or(0) == 0 {
            self.complete = true;
        }
    }

    /// One child of `node` is settled (delivered, lost, or gone).
    fn resolve(&mut self, node: NodeId) -> Vec<NodeId> {
        let Some(p) = self.pending.get_mut(&node) else {
            return Vec::new();
        };
        *p = p.saturating_sub(1);
        if *p > 0 || self.done.contains(&node) {
            return Vec::new();
        }
        if node == self.head {
            self.complete = true;
            Vec::new()
        } else {
            vec![node]
        }
    }

    fn resolve_head_readings(&mut self, n: usize) {
        if let Some(p) = self.pending.get_mut(&self.head) {
            *p = p.saturating_sub(n);
        }
        self.check_head();
    }

    fn emit(&mut self, rings: &mut KeyStore, node: NodeId, receiver: NodeId, payload: AggregatePayload) -> Option<Transmission> {
        let link = LinkId::new(receiver, node);
        let pkt = send_hop(rings.get_mut(&node)?, link, self.cluster, &payload).ok()?;
        let id = self.next_tx;
        self.next_tx += 1;
        self.in_flight.insert(id, receiver);
        Some(Transmission { id, link, packet: pkt })
    }

    pub fn flush(&mut self, node: NodeId, rings: &mut KeyStore) -> Flush {
        if node == self.head || self.done.contains(&node) || !self.participants.contains(&node) {
            return Flush::default();
        }
        let parent = self.parent[&node];
        match self.mode {
            CollectMode::Aggregate => {
                self.done.insert(node);
                let tx = match self.acc.get(&node).copied() {
                    Some(payload) => self.emit(rings, node, parent, payload),
                    None => None,
                };
                let ready = if tx.is_none() { self.resolve(parent) } else { Vec::new() };
                Flush { tx, ready }
            }
            CollectMode::StoreAndForward => {
                let payload = if self.own_unsent.remove(&node) {
                    self.acc.get(&node).copied()
                } else {
                    self.forward.get_mut(&node).and_then(VecDeque::pop_front)
                };
                let Some(payload) = payload else {
                    return Flush::default();
                };
                let tx = self.emit(rings, node, parent, payload);
                if tx.is_none() {
                    self.resolve_head_readings(1);
                }
                Flush { tx, ready: Vec::new() }
            }
        }
    }

    /// Delivers a packet to `pkt.dst`. `tx` is the honest transmission it came from, if any.
    pub fn on_delivery(&mut self, tx: Option<TxId>, pkt: &DataPacket, rings: &mut KeyStore) -> Delivery {
        let honest = tx.and_then(|id| self.in_flight.remove(&id));
        // the radio receiver is fixed by the transmission, not by the header
        let dst = honest.unwrap_or(pkt.dst);
        let outcome = match rings.get_mut(&dst) {
            Some(ring) if pkt.dst == dst => open_incoming(ring, pkt).and_then(|p| fresh(p, self.t0)),
            _ => Err(PacketError::NoSuchLink(pkt.link())),
        };
        let mut ready = Vec::new();
        let receiver_active = self.participants.contains(&dst) && !self.done.contains(&dst);
        match self.mode {
            CollectMode::Aggregate => {
                if let (Ok(payload), true) = (&outcome, receiver_active) {
                    self.acc
                        .entry(dst)
                        .and_modify(|a| a.fold(payload, self.agg))
                        .or_insert(*payload);
                }
                if let Some(receiver) = honest {
                    ready = self.resolve(receiver);
                }
            }
            CollectMode::StoreAndForward => match (&outcome, receiver_active) {
                (Ok(payload), true) if dst == self.head => {
                    let agg = self.agg;
                    self.acc.entry(dst).and_modify(|a| a.fold(payload, agg)).or_insert(*payload);
                    if honest.is_some() {
                        self.resolve_head_readings(payload.count as usize);
                    }
                }
                (Ok(payload), true) => {
                    self.forward.entry(dst).or_default().push_back(*payload);
                    ready.push(dst);
                }
                _ => {
                    if honest.is_some() {
                        self.resolve_head_readings(1);
                    }
                }
            },
        }
        Delivery { outcome, ready }
    }

    /// The honest transmission `tx` never arrived.
    pub fn on_loss(&mut self, tx: TxId) -> Vec<NodeId> {
        let Some(receiver) = self.in_flight.remove(&tx) else {
            return Vec::new();
        };
        match self.mode {
            CollectMode::Aggregate => self.resolve(receiver),
            CollectMode::StoreAndForward => {
                self.resolve_head_readings(1);
                Vec::new()
            }
        }
    }

    /// `node` ran out of energy; whatever it still held is lost.
    pub fn on_node_death(&mut self, node: NodeId) -> Vec<NodeId> {
        if !self.participants.contains(&node) || self.done.contains(&node) {
            return Vec::new();
        }
        self.done.insert(node);
        if node == self.head {
            self.head_dead = true;
            self.complete = true;
            return Vec::new();
        }
        match self.mode {
            CollectMode::Aggregate => self.resolve(self.parent[&node]),
            CollectMode::StoreAndForward => {
                let held = usize::from(self.own_unsent.remove(&node))
                    + self.forward.remove(&node).map_or(0, |q| q.len());
                self.resolve_head_readings(held);
                Vec::new()
            }
        }
    }
}

/// Per-hop timing: a node transmits `processing_ms` after it becomes ready,
/// and the packet lands `transmission_ms` later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HopTiming {
    pub transmission_ms: u64,
    pub processing_ms: u64,
}

impl Default for HopTiming {
    fn default() -> Self {
        Self {
            transmission_ms: 10,
            processing_ms: 2,
        }
    }
}

impl HopTiming {
    pub fn per_hop(&self) -> u64 {
        self.transmission_ms + self.processing_ms
    }
}

/// The wire between a sender and receiver.
pub trait Medium {
    /// Returns the packet as it arrives, or `None` if it is lost.
    fn transmit(&mut self, now: SimTime, tx: &Transmission) -> Option<DataPacket>;
}

/// Loss-free, tamper-free channel.
#[derive(Debug, Default, Clone, Copy)]
pub struct PerfectMedium;

impl Medium for PerfectMedium {
    fn transmit(&mut self, _now: SimTime, tx: &Transmission) -> Option<DataPacket> {
        Some(tx.packet.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadResult {
    pub head: NodeId,
    pub payload: Option<AggregatePayload>,
    pub completed_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundReport {
    pub heads: BTreeMap<ClusterId, HeadResult>,
    pub trace: Vec<TraceEntry>,
    pub sent: u64,
    pub delivered: u64,
}

#[derive(Debug, PartialEq, Eq)]
enum Step {
    Flush(usize, NodeId),
    Arrive(usize, TxId, DataPacket),
    Lost(usize, TxId),
}

/// Runs one round of phase-2 collection over every cluster of `topo`.
#[allow(clippy::too_many_arguments)]
pub fn collect_round(
    topo: &ClusterTopology,
    readings: &BTreeMap<NodeId, i64>,
    rings: &mut KeyStore,
    agg: Aggregation,
    mode: CollectMode,
    timing: HopTiming,
    medium: &mut dyn Medium,
    t0: SimTime,
) -> RoundReport {
    let mut report = RoundReport::default();
    let mut queue: EventQueue<Step> = EventQueue::new();
    let mut collectors: Vec<RoundCollector> = topo
        .clusters
        .iter()
        .map(|c| RoundCollector::new(c, readings, t0, agg, mode, |_| true))
        .collect();
    for (i, col) in collectors.iter_mut().enumerate() {
        for n in col.start() {
            queue.schedule(t0 + timing.processing_ms, Step::Flush(i, n));
        }
        if col.is_complete() {
            report.heads.insert(
                col.cluster(),
                HeadResult {
                    head: col.head(),
                    payload: col.head_payload(),
                    completed_at: t0,
                },
            );
        }
    }
    while let Some(ev) = queue.pop() {
        let now = ev.time;
        let (i, ready) = match ev.item {
            Step::Flush(i, node) => {
                let f = collectors[i].flush(node, rings);
                if let Some(tx) = f.tx {
                    report.sent += 1;
                    report.trace.push(TraceEntry::new(now, &tx.packet, PacketEvent::Sent));
                    let at = now + timing.transmission_ms;
                    match medium.transmit(now, &tx) {
                        Some(pkt) => queue.schedule(at, Step::Arrive(i, tx.id, pkt)),
                        None => queue.schedule(at, Step::Lost(i, tx.id)),
                    };
                }
                (i, f.ready)
            }
            Step::Arrive(i, id, pkt) => {
                let d = collectors[i].on_delivery(Some(id), &pkt, rings);
                let event = match &d.outcome {
                    Ok(_) => {
                        report.delivered += 1;
                        PacketEvent::Delivered
                    }
                    Err(e) => e.trace_event(),
                };
                report.trace.push(TraceEntry::new(now, &pkt, event));
                (i, d.ready)
            }
            Step::Lost(i, id) => (i, collectors[i].on_loss(id)),
        };
        for n in ready {
            queue.schedule(now + timing.processing_ms, Step::Flush(i, n));
        }
        let col = &collectors[i];
        if col.is_complete() && !report.heads.contains_key(&col.cluster()) {
            report.heads.insert(
                col.cluster(),
                HeadResult {
                    head: col.head(),
                    payload: col.head_payload(),
                    completed_at: now,
                },
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{establish_link_keys, LinkKeyState};
    use crate::network::{build_aggregation_tree, NodeState, Position, Role};
    use crate::sim::Energy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(p: u32, c: u32, fill: u8) -> LinkKeyState {
        LinkKeyState::new(LinkId::new(NodeId(p), NodeId(c)), [fill; 16], 8)
    }

    fn node(id: u32, x: f64, y: f64) -> NodeState {
        NodeState {
            id: NodeId(id),
            position: Position::new(x, y),
            energy: Energy::from_joules(0.5),
            role: if id == 999 { Role::BaseStation } else { Role::Member },
            parent: None,
            children: Default::default(),
            alive: true,
        }
    }

    #[test]
    fn payload_encoding_is_canonical() {
        let p = AggregatePayload {
            value: -2,
            count: 3,
            origin_ms: 0x0102,
        };
        let e = p.encode();
        assert_eq!(&e[..8], &[0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xfe]);
        assert_eq!(&e[8..12], &[0, 0, 0, 3]);
        assert_eq!(&e[12..], &[0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(AggregatePayload::decode(&e).unwrap(), p);
    }

    #[test]
    fn hop_round_trip() {
        let st = state(1, 2, 7);
        let payload = AggregatePayload::reading(42, 5);
        let pkt = encrypt_hop(&payload, &st, ClusterId(0), 3);
        assert_eq!(pkt.body.len(), PAYLOAD_LEN);
        assert_eq!(decrypt_hop(&pkt, &st.current).unwrap(), payload);
        assert_ne!(pkt.body, payload.encode().to_vec());
        assert_eq!(DataPacket::from_wire(&pkt.to_wire()).unwrap(), pkt);
    }

    #[test]
    fn distinct_keys_and_counters_give_distinct_ciphertexts() {
        let payload = AggregatePayload::reading(42, 5);
        let a = encrypt_hop(&payload, &state(1, 2, 0), ClusterId(0), 0);
        let b = encrypt_hop(&payload, &state(1, 2, 0xff), ClusterId(0), 0);
        assert_ne!(a.body, b.body);
        assert_ne!(a.tag, b.tag);
        let c = encrypt_hop(&payload, &state(1, 2, 0), ClusterId(0), 1);
        assert_ne!(a.body, c.body);
    }

    #[test]
    fn bit_flip_is_rejected() {
        let st = state(1, 2, 7);
        let mut ring = KeyRing::default();
        ring.insert(st.clone());
        let mut pkt = encrypt_hop(&AggregatePayload::reading(1, 0), &st, ClusterId(0), 0);
        pkt.body[4] ^= 0x10;
        assert_eq!(open_incoming(&mut ring, &pkt), Err(PacketError::TagInvalid));
        assert_eq!(ring.get(&st.link).unwrap(), &st);
    }

    #[test]
    fn three_node_chain_sums() {
        // leaf 2 (reading 4) -> relay 1 (reading 6) -> head 0 (reading 5)
        let mut store = KeyStore::new();
        for (p, c, fill) in [(0, 1, 1u8), (1, 2, 2u8)] {
            let st = state(p, c, fill);
            store.entry(NodeId(p)).or_default().insert(st.clone());
            store.entry(NodeId(c)).or_default().insert(st);
        }
        let leaf = send_hop(
            store.get_mut(&NodeId(2)).unwrap(),
            LinkId::new(NodeId(1), NodeId(2)),
            ClusterId(0),
            &AggregatePayload::reading(4, 0),
        )
        .unwrap();
        let mut relay_acc = AggregatePayload::reading(6, 0);
        process_incoming(store.get_mut(&NodeId(1)).unwrap(), &mut relay_acc, &leaf, Aggregation::Sum).unwrap();
        let up = send_hop(
            store.get_mut(&NodeId(1)).unwrap(),
            LinkId::new(NodeId(0), NodeId(1)),
            ClusterId(0),
            &relay_acc,
        )
        .unwrap();
        let mut head_acc = AggregatePayload::reading(5, 0);
        process_incoming(store.get_mut(&NodeId(0)).unwrap(), &mut head_acc, &up, Aggregation::Sum).unwrap();
        assert_eq!((head_acc.value, head_acc.count), (15, 3));

        // the same packet again, after the link ratcheted
        let before = head_acc;
        let err = process_incoming(store.get_mut(&NodeId(0)).unwrap(), &mut head_acc, &up, Aggregation::Sum).unwrap_err();
        assert!(matches!(err, PacketError::EpochOutOfWindow(_) | PacketError::TagInvalid));
        assert_eq!(head_acc, before);
        assert!(!store[&NodeId(0)].get(&LinkId::new(NodeId(0), NodeId(1))).unwrap().flagged);
    }

    #[test]
    fn forward_overflow_flags_link() {
        let sender_start = state(0, 1, 9);
        let mut ring = KeyRing::default();
        ring.insert(sender_start.clone());
        let far = (0..9).fold(sender_start, |s, _| s.ratchet());
        let pkt = encrypt_hop(&AggregatePayload::reading(1, 0), &far, ClusterId(0), 9);
        assert!(matches!(open_incoming(&mut ring, &pkt), Err(PacketError::EpochOutOfWindow(_))));
        assert!(ring.links.values().next().unwrap().flagged);
    }

    #[test]
    fn ratcheted_state_cannot_read_earlier_epochs() {
        let st = state(0, 1, 3);
        let old = encrypt_hop(&AggregatePayload::reading(77, 0), &st, ClusterId(0), 0);
        let later = st.clone().ratchet();
        assert_eq!(decrypt_hop(&old, &later.current), Err(PacketError::TagInvalid));
    }

    fn star(n: u32) -> (ClusterTopology, Vec<NodeState>) {
        let mut nodes = vec![node(0, 0.0, 0.0)];
        for i in 1..=n {
            nodes.push(node(i, i as f64, 1.0));
        }
        nodes.push(node(999, 50.0, 50.0));
        (build_aggregation_tree(&[NodeId(0)], &nodes, 20.0).unwrap(), nodes)
    }

    #[test]
    fn star_round_sums_with_one_packet_per_member() {
        let (topo, _) = star(4);
        let mut rings = establish_link_keys(&topo, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let readings: BTreeMap<NodeId, i64> = (0..=4).map(|i| (NodeId(i), i as i64)).collect();
        let r = collect_round(
            &topo,
            &readings,
            &mut rings,
            Aggregation::Sum,
            CollectMode::Aggregate,
            HopTiming::default(),
            &mut PerfectMedium,
            0,
        );
        let head = r.heads[&ClusterId(0)].payload.unwrap();
        assert_eq!((head.value, head.count), (10, 5));
        assert_eq!(r.sent, 4);
        assert_eq!(r.delivered, 4);
        assert_eq!(r.trace.len(), 8);
    }

    #[test]
    fn lone_head_needs_no_packets() {
        let (topo, _) = star(0);
        let mut rings = establish_link_keys(&topo, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let readings = BTreeMap::from([(NodeId(0), 17)]);
        let r = collect_round(
            &topo,
            &readings,
            &mut rings,
            Aggregation::Sum,
            CollectMode::Aggregate,
            HopTiming::default(),
            &mut PerfectMedium,
            0,
        );
        assert_eq!(r.heads[&ClusterId(0)].payload, Some(AggregatePayload::reading(17, 0)));
        assert_eq!(r.sent, 0);
    }

    struct DropLink(LinkId);
    impl Medium for DropLink {
        fn transmit(&mut self, _now: SimTime, tx: &Transmission) -> Option<DataPacket> {
            (tx.link != self.0).then(|| tx.packet.clone())
        }
    }

    #[test]
    fn lost_hop_drops_its_subtree() {
        // chain 0 <- 1 <- 2, plus 3 hanging off 0
        let nodes = vec![
            node(0, 0.0, 0.0),
            node(1, 10.0, 0.0),
            node(2, 20.0, 0.0),
            node(3, -10.0, 0.0),
            node(999, 0.0, 90.0),
        ];
        let topo = build_aggregation_tree(&[NodeId(0)], &nodes, 10.0).unwrap();
        let mut rings = establish_link_keys(&topo, 8, &mut ChaCha8Rng::seed_from_u64(2));
        let readings: BTreeMap<NodeId, i64> = (0..4).map(|i| (NodeId(i), 10i64.pow(i))).collect();
        let r = collect_round(
            &topo,
            &readings,
            &mut rings,
            Aggregation::Sum,
            CollectMode::Aggregate,
            HopTiming::default(),
            &mut DropLink(LinkId::new(NodeId(0), NodeId(1))),
            0,
        );
        let head = r.heads[&ClusterId(0)].payload.unwrap();
        assert_eq!((head.value, head.count), (1 + 1000, 2));
        assert_eq!((r.sent, r.delivered), (3, 2));
    }

    #[test]
    fn store_and_forward_sends_one_packet_per_hop_per_reading() {
        let nodes: Vec<NodeState> = (0..4)
            .map(|i| node(i, 10.0 * i as f64, 0.0))
            .chain([node(999, 0.0, 90.0)])
            .collect();
        let topo = build_aggregation_tree(&[NodeId(0)], &nodes, 10.0).unwrap();
        let readings: BTreeMap<NodeId, i64> = (0..4).map(|i| (NodeId(i), 1 + i as i64)).collect();
        let mut results = Vec::new();
        for mode in [CollectMode::Aggregate, CollectMode::StoreAndForward] {
            let mut rings = establish_link_keys(&topo, 8, &mut ChaCha8Rng::seed_from_u64(2));
            let r = collect_round(
                &topo,
                &readings,
                &mut rings,
                Aggregation::Sum,
                mode,
                HopTiming::default(),
                &mut PerfectMedium,
                0,
            );
            results.push((r.sent, r.heads[&ClusterId(0)].payload.unwrap()));
        }
        assert_eq!(results[0].0, 3);
        assert_eq!(results[1].0, 1 + 2 + 3);
        assert_eq!(results[0].1.value, 10);
        assert_eq!(results[1].1.value, 10);
        assert_eq!(results[1].1.count, 4);
    }

    #[test]
    fn deep_chain_timing() {
        let nodes: Vec<NodeState> = (0..3)
            .map(|i| node(i, 10.0 * i as f64, 0.0))
            .chain([node(999, 0.0, 90.0)])
            .collect();
        let topo = build_aggregation_tree(&[NodeId(0)], &nodes, 10.0).unwrap();
        let mut rings = establish_link_keys(&topo, 8, &mut ChaCha8Rng::seed_from_u64(2));
        let readings: BTreeMap<NodeId, i64> = (0..3).map(|i| (NodeId(i), 1)).collect();
        let timing = HopTiming {
            transmission_ms: 10,
            processing_ms: 0,
        };
        let r = collect_round(&topo, &readings, &mut rings, Aggregation::Sum, CollectMode::Aggregate, timing, &mut PerfectMedium, 100);
        assert_eq!(r.heads[&ClusterId(0)].completed_at, 120);
    }

    #[test]
    fn random_trees_hop_keys_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut nodes: Vec<NodeState> = (0..25)
            .map(|i| node(i, rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)))
            .collect();
        nodes.push(node(999, 0.0, 0.0));
        let topo = build_aggregation_tree(&[NodeId(0)], &nodes, 20.0).unwrap();
        let rings = establish_link_keys(&topo, 8, &mut rng);
        let c = &topo.clusters[0];
        for &m in &c.members {
            let path = c.path_to_head(m);
            for w in path.windows(3) {
                let l1 = LinkId::new(w[1], w[0]);
                let l2 = LinkId::new(w[2], w[1]);
                assert_ne!(l1, l2);
                let k1 = &rings[&w[1]].get(&l1).unwrap().current.bytes;
                let k2 = &rings[&w[1]].get(&l2).unwrap().current.bytes;
                assert_ne!(k1, k2);
            }
        }
    }
}
