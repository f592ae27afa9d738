//! In-path attacker: replay, impersonation, link compromise, drop and tamper.
//!
//! The standalone functions replay an attack against recorded traffic and
//! victim state. [`Adversary`] is the same attacker wired into the simulator
//! through delivery hooks; it draws from its own RNG stream so that an empty
//! spec list leaves every honest byte unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregation::{decrypt_hop, open_incoming, DataPacket, PacketError};
use crate::auth::{
    handshake_finalize, handshake_msg1, pseudonym, run_handshake, AuthChannel, AuthMessage, BaseStation, Initiator,
    MessageKind, Msg1, Registration, Verdict,
};
use crate::crypto::{ec_point_add, ec_scalar_mul, CurveParams, CurvePoint};
use crate::keys::{KeyStore, LinkId, LinkKeyState};
use crate::network::{ClusterTopology, NodeId};
use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackParseError {
    #[error("unknown attack kind {0:?}")]
    Kind(String),
    #[error("bad target {0:?} (expected any|handshake|random|node:N|link:C->P)")]
    Target(String),
    #[error("bad schedule {0:?} (expected N or A..B)")]
    Schedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackKind {
    Replay,
    Impersonate,
    CompromiseLink,
    Drop,
    Tamper,
}

impl FromStr for AttackKind {
    type Err = AttackParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "replay" => AttackKind::Replay,
            "impersonate" => AttackKind::Impersonate,
            "compromise_link" => AttackKind::CompromiseLink,
            "drop" => AttackKind::Drop,
            "tamper" => AttackKind::Tamper,
            other => return Err(AttackParseError::Kind(other.to_string())),
        })
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Replay => "replay",
            AttackKind::Impersonate => "impersonate",
            AttackKind::CompromiseLink => "compromise_link",
            AttackKind::Drop => "drop",
            AttackKind::Tamper => "tamper",
        })
    }
}

/// What an attack aims at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Every data packet.
    Any,
    /// Handshake messages rather than data packets.
    Handshake,
    /// One tree edge drawn from the adversary's RNG when the attack first fires.
    Random,
    /// Data packets sent or received by this node.
    Node(NodeId),
    Link(LinkId),
}

impl Target {
    fn matches(&self, pkt: &DataPacket, resolved: Option<LinkId>) -> bool {
        match self {
            Target::Any => true,
            Target::Handshake => false,
            Target::Random => resolved == Some(pkt.link()),
            Target::Node(n) => pkt.src == *n || pkt.dst == *n,
            Target::Link(l) => pkt.link() == *l,
        }
    }
}

impl FromStr for Target {
    type Err = AttackParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AttackParseError::Target(s.to_string());
        Ok(match s {
            "any" => Target::Any,
            "handshake" => Target::Handshake,
            "random" => Target::Random,
            _ => {
                if let Some(n) = s.strip_prefix("node:") {
                    Target::Node(NodeId(n.parse().map_err(|_| bad())?))
                } else if let Some(l) = s.strip_prefix("link:") {
                    let (c, p) = l.split_once("->").ok_or_else(bad)?;
                    let c = c.parse().map_err(|_| bad())?;
                    let p = p.parse().map_err(|_| bad())?;
                    Target::Link(LinkId::new(NodeId(p), NodeId(c)))
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Any => f.write_str("any"),
            Target::Handshake => f.write_str("handshake"),
            Target::Random => f.write_str("random"),
            Target::Node(n) => write!(f, "node:{n}"),
            Target::Link(l) => write!(f, "link:{l}"),
        }
    }
}

/// Inclusive range of rounds (in the simulator) or trace positions (standalone).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub start: u64,
    pub end: u64,
}

impl Schedule {
    pub const ALWAYS: Schedule = Schedule { start: 0, end: u64::MAX };

    pub fn contains(&self, x: u64) -> bool {
        (self.start..=self.end).contains(&x)
    }
}

impl FromStr for Schedule {
    type Err = AttackParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AttackParseError::Schedule(s.to_string());
        let num = |t: &str| -> Result<u64, AttackParseError> { t.trim().parse().map_err(|_| bad()) };
        let sched = match s.split_once("..") {
            Some((a, "")) => Schedule { start: num(a)?, end: u64::MAX },
            Some((a, b)) => Schedule { start: num(a)?, end: num(b)? },
            None => {
                let n = num(s)?;
                Schedule { start: n, end: n }
            }
        };
        if sched.start > sched.end {
            return Err(bad());
        }
        Ok(sched)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.end == u64::MAX {
            write!(f, "{}..", self.start)
        } else {
            write!(f, "{}..{}", self.start, self.end)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intensity {
    /// This many actions (per scheduled round in the simulator).
    Count(u64),
    /// Each eligible packet or message independently.
    Probability(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub target: Target,
    pub schedule: Schedule,
    pub intensity: Intensity,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, target: Target, schedule: Schedule, intensity: Intensity) -> Self {
        Self {
            kind,
            target,
            schedule,
            intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AttackOutcome {
    pub attempts: u64,
    pub accepted_by_victim: u64,
    pub plaintexts_recovered: u64,
    pub recovered_per_link: BTreeMap<LinkId, u64>,
    pub links_affected: BTreeSet<LinkId>,
    /// Why victims turned attempts away.
    pub rejections: BTreeMap<&'static str, u64>,
    /// Selectors that resolved to nothing.
    pub noops: u64,
    /// Honest packets that could not be opened after the attack.
    pub desync_events: u64,
}

impl AttackOutcome {
    fn reject(&mut self, reason: &'static str) {
        *self.rejections.entry(reason).or_default() += 1;
    }

    fn recover(&mut self, link: LinkId) {
        self.plaintexts_recovered += 1;
        *self.recovered_per_link.entry(link).or_default() += 1;
        self.links_affected.insert(link);
    }

    pub fn merge(&mut self, other: &AttackOutcome) {
        self.attempts += other.attempts;
        self.accepted_by_victim += other.accepted_by_victim;
        self.plaintexts_recovered += other.plaintexts_recovered;
        for (l, n) in &other.recovered_per_link {
            *self.recovered_per_link.entry(*l).or_default() += n;
        }
        self.links_affected.extend(other.links_affected.iter().copied());
        for (r, n) in &other.rejections {
            *self.rejections.entry(r).or_default() += n;
        }
        self.noops += other.noops;
        self.desync_events += other.desync_events;
    }
}

/// Something the attacker saw on the medium.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observed {
    Data(DataPacket),
    Auth(AuthMessage),
}

/// Victim endpoints for replayed messages.
pub struct Victims<'a> {
    pub rings: &'a mut KeyStore,
    pub bs: Option<&'a mut BaseStation>,
    /// A head waiting for m2, with its curve.
    pub initiator: Option<(&'a Initiator, &'a CurveParams)>,
    pub clock: SimTime,
}

fn pick<T: Clone, R: Rng + ?Sized>(eligible: Vec<T>, intensity: Intensity, rng: &mut R) -> Vec<T> {
    match intensity {
        Intensity::Count(n) => {
            if eligible.is_empty() {
                return Vec::new();
            }
            eligible.iter().cycle().take(n as usize).cloned().collect()
        }
        Intensity::Probability(p) => eligible.into_iter().filter(|_| rng.gen_bool(p.clamp(0.0, 1.0))).collect(),
    }
}

fn scheduled<'t, T>(items: &'t [T], schedule: &'t Schedule) -> impl Iterator<Item = (usize, &'t T)> + 't {
    items.iter().enumerate().filter(|(i, _)| schedule.contains(*i as u64))
}

/// Re-injects recorded traffic verbatim and tallies what victims accept.
pub fn replay_attack<R: Rng + ?Sized>(trace: &[Observed], spec: &AttackSpec, victims: &mut Victims<'_>, rng: &mut R) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    let eligible: Vec<&Observed> = scheduled(trace, &spec.schedule)
        .map(|(_, o)| o)
        .filter(|o| match o {
            Observed::Data(p) => spec.target.matches(p, None),
            Observed::Auth(_) => spec.target == Target::Handshake || spec.target == Target::Any,
        })
        .collect();
    for item in pick(eligible, spec.intensity, rng) {
        let verdict: Option<Result<(), &'static str>> = match item {
            Observed::Data(pkt) => victims.rings.get_mut(&pkt.dst).map(|ring| {
                open_incoming(ring, pkt).map(|_| ()).map_err(|e| e.reason())
            }),
            Observed::Auth(AuthMessage::M1(m)) => victims
                .bs
                .as_deref_mut()
                .map(|bs| bs.handle_m1(m, rng, victims.clock).map(|_| ()).map_err(|e| e.reason())),
            Observed::Auth(AuthMessage::M2(m)) => victims
                .initiator
                .map(|(init, curve)| handshake_finalize(init, curve, m, victims.clock).map(|_| ()).map_err(|e| e.reason())),
            Observed::Auth(AuthMessage::M3(m)) => victims
                .bs
                .as_deref_mut()
                .map(|bs| bs.handle_m3(m, victims.clock).map(|_| ()).map_err(|e| e.reason())),
        };
        match verdict {
            None => out.noops += 1,
            Some(v) => {
                out.attempts += 1;
                match v {
                    Ok(()) => {
                        out.accepted_by_victim += 1;
                        if let Observed::Data(p) = item {
                            out.links_affected.insert(p.link());
                        }
                    }
                    Err(reason) => out.reject(reason),
                }
            }
        }
    }
    out
}

/// What an outsider can bring to a forgery.
#[derive(Debug, Clone, Default)]
pub struct AttackerKnowledge {
    /// Public identities of registered heads.
    pub identities: Vec<Vec<u8>>,
    /// Registrations the base station has since revoked.
    pub revoked: Vec<Registration>,
    /// Genuine m1 messages captured earlier.
    pub stale: Vec<Msg1>,
}

/// Forges m1 toward the base station without a valid token.
///
/// Attempts cycle through four strategies: random tag under a correct
/// pseudonym, a tag under a guessed token, a revoked registration, and a
/// captured stale m1. Strategies without material fall back to a fresh forgery.
pub fn impersonation_attack<R: Rng + ?Sized>(
    spec: &AttackSpec,
    knowledge: &AttackerKnowledge,
    bs: &mut BaseStation,
    clock: SimTime,
    rng: &mut R,
) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    let n = match spec.intensity {
        Intensity::Count(n) => n,
        Intensity::Probability(p) => u64::from(rng.gen_bool(p.clamp(0.0, 1.0))),
    };
    let curve = bs.curve().clone();
    for i in 0..n {
        let m1 = forge_m1(i, knowledge, &curve, clock, rng);
        out.attempts += 1;
        match bs.handle_m1(&m1, rng, clock) {
            Ok(_) => out.accepted_by_victim += 1,
            Err(e) => out.reject(e.reason()),
        }
    }
    out
}

fn forge_m1<R: Rng + ?Sized>(i: u64, k: &AttackerKnowledge, curve: &CurveParams, clock: SimTime, rng: &mut R) -> Msg1 {
    let random_point = |rng: &mut R| {
        let s = curve.random_scalar(rng);
        ec_scalar_mul(curve, &s, curve.generator()).expect("generator is on curve")
    };
    let identity = |rng: &mut R| -> Vec<u8> {
        k.identities
            .choose(rng)
            .cloned()
            .unwrap_or_else(|| rng.gen::<[u8; 8]>().to_vec())
    };
    match i % 4 {
        2 if !k.revoked.is_empty() => {
            let mut reg = k.revoked[(i as usize / 4) % k.revoked.len()].clone();
            reg.status = crate::auth::RegistrationStatus::Active;
            handshake_msg1(&reg, curve, rng, clock, 0).expect("active").1
        }
        3 if !k.stale.is_empty() => k.stale[(i as usize / 4) % k.stale.len()].clone(),
        1 | 3 => {
            let id = identity(rng);
            let guess = Registration {
                id,
                token: rng.gen(),
                status: crate::auth::RegistrationStatus::Active,
            };
            handshake_msg1(&guess, curve, rng, clock, 0).expect("active").1
        }
        _ => {
            let id = identity(rng);
            Msg1 {
                aid: pseudonym(&id, clock),
                r1: random_point(rng),
                t1: clock,
                tag1: rng.gen(),
            }
        }
    }
}

/// Tries to read `traffic` (in transmission order) with a stolen link state.
///
/// The attacker follows the victim link's epochs exactly as its receiver
/// would, and also tries the stolen key against every other link.
pub fn compromise_link(traffic: &[DataPacket], stolen: &LinkKeyState, spec: &AttackSpec) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    let mut tracker = Some(stolen.clone());
    for (_, pkt) in scheduled(traffic, &spec.schedule) {
        try_read(&mut out, &mut tracker, pkt);
    }
    out
}

fn try_read(out: &mut AttackOutcome, tracker: &mut Option<LinkKeyState>, pkt: &DataPacket) {
    let Some(state) = tracker.as_mut() else {
        return;
    };
    out.attempts += 1;
    let candidate = state.resync(pkt.epoch).unwrap_or_else(|_| state.clone());
    match decrypt_hop(pkt, &candidate.current) {
        Ok(_) => {
            if pkt.link() == state.link {
                *state = candidate.after_delivery();
            }
            out.recover(pkt.link());
        }
        Err(e) => out.reject(e.reason()),
    }
}

fn deliver(rings: &mut KeyStore, pkt: &DataPacket) -> Result<(), PacketError> {
    match rings.get_mut(&pkt.dst) {
        Some(ring) => open_incoming(ring, pkt).map(|_| ()),
        None => Err(PacketError::NoSuchLink(pkt.link())),
    }
}

/// Discards selected packets of an honest send sequence and delivers the rest.
///
/// `Count(n)` drops `n` consecutive matching packets starting at
/// `schedule.start`; any later packet the receiver cannot open is a desync event.
pub fn drop_attack<R: Rng + ?Sized>(sent: &[DataPacket], spec: &AttackSpec, rings: &mut KeyStore, rng: &mut R) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    let mut budget = match spec.intensity {
        Intensity::Count(n) => n,
        Intensity::Probability(_) => u64::MAX,
    };
    let mut dropped_on: BTreeSet<LinkId> = BTreeSet::new();
    for (i, pkt) in sent.iter().enumerate() {
        let eligible = spec.schedule.contains(i as u64) && spec.target.matches(pkt, None) && budget > 0;
        let fire = eligible
            && match spec.intensity {
                Intensity::Count(_) => true,
                Intensity::Probability(p) => rng.gen_bool(p.clamp(0.0, 1.0)),
            };
        if fire {
            budget -= 1;
            out.attempts += 1;
            dropped_on.insert(pkt.link());
            continue;
        }
        if let Err(e) = deliver(rings, pkt) {
            if dropped_on.contains(&pkt.link()) {
                out.desync_events += 1;
                out.links_affected.insert(pkt.link());
            }
            out.reject(e.reason());
        }
    }
    out
}

/// Flips one uniformly chosen bit of the packet's wire form.
pub fn flip_random_bit<R: Rng + ?Sized>(pkt: &DataPacket, rng: &mut R) -> Result<DataPacket, PacketError> {
    let mut wire = pkt.to_wire();
    let bit = rng.gen_range(0..wire.len() * 8);
    wire[bit / 8] ^= 1 << (bit % 8);
    DataPacket::from_wire(&wire)
}

/// Delivers an honest send sequence, flipping one bit in each selected packet.
pub fn tamper_attack<R: Rng + ?Sized>(sent: &[DataPacket], spec: &AttackSpec, rings: &mut KeyStore, rng: &mut R) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    for (i, pkt) in sent.iter().enumerate() {
        let fire = spec.schedule.contains(i as u64)
            && spec.target.matches(pkt, None)
            && match spec.intensity {
                Intensity::Count(n) => out.attempts < n,
                Intensity::Probability(p) => rng.gen_bool(p.clamp(0.0, 1.0)),
            };
        if !fire {
            if deliver(rings, pkt).is_err() {
                out.desync_events += 1;
                out.links_affected.insert(pkt.link());
            }
            continue;
        }
        out.attempts += 1;
        // the receiver is fixed by the radio, whatever the header now claims
        let result = flip_random_bit(pkt, rng).and_then(|t| {
            if t.dst != pkt.dst {
                return Err(PacketError::NoSuchLink(t.link()));
            }
            deliver(rings, &t)
        });
        match result {
            Ok(()) => {
                out.accepted_by_victim += 1;
                out.links_affected.insert(pkt.link());
            }
            Err(e) => out.reject(e.reason()),
        }
    }
    out
}

/// A handshake field the in-path attacker can rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TamperField {
    M1Aid,
    M1R1,
    M1T1,
    M1Tag,
    M2R2,
    M2T2,
    M2Tag,
    M3Aid,
    M3Tag,
}

impl TamperField {
    pub const ALL: [TamperField; 9] = [
        TamperField::M1Aid,
        TamperField::M1R1,
        TamperField::M1T1,
        TamperField::M1Tag,
        TamperField::M2R2,
        TamperField::M2T2,
        TamperField::M2Tag,
        TamperField::M3Aid,
        TamperField::M3Tag,
    ];

    pub fn message(&self) -> MessageKind {
        match self {
            TamperField::M1Aid | TamperField::M1R1 | TamperField::M1T1 | TamperField::M1Tag => MessageKind::M1,
            TamperField::M2R2 | TamperField::M2T2 | TamperField::M2Tag => MessageKind::M2,
            TamperField::M3Aid | TamperField::M3Tag => MessageKind::M3,
        }
    }

    /// Number of distinct rewrites [`tamper_field`] knows for this field.
    pub fn variants(&self) -> usize {
        match self {
            TamperField::M1R1 | TamperField::M2R2 => 4,
            _ => 3,
        }
    }
}

fn flip_bytes(b: &mut [u8; 16], variant: usize) {
    let bit = [0usize, 63, 127][variant % 3];
    b[bit / 8] ^= 1 << (bit % 8);
}

fn tamper_point(curve: &CurveParams, pt: &CurvePoint, variant: usize) -> CurvePoint {
    match variant % 4 {
        0 => ec_point_add(curve, pt, curve.generator()).expect("on curve"),
        1 => curve.negate(pt),
        2 => CurvePoint::Infinity,
        _ => match pt {
            CurvePoint::Affine { x, y } => {
                let p = curve.p();
                let mut y2 = (y + 1u32) % p;
                loop {
                    let cand = CurvePoint::Affine { x: x.clone(), y: y2.clone() };
                    if !curve.is_on_curve(&cand) {
                        return cand;
                    }
                    y2 = (y2 + BigUint::from(1u32)) % p;
                }
            }
            CurvePoint::Infinity => curve.generator().clone(),
        },
    }
}

fn tamper_time(t: u64, variant: usize, window: u64) -> u64 {
    match variant % 3 {
        0 => t.wrapping_add(1),
        1 => t.wrapping_sub(1),
        _ => t.wrapping_add(window + 1),
    }
}

/// Rewrites `field` inside `msg` if the message carries it.
pub fn tamper_field(msg: AuthMessage, field: TamperField, variant: usize, curve: &CurveParams, window: u64) -> AuthMessage {
    match (msg, field) {
        (AuthMessage::M1(mut m), TamperField::M1Aid) => {
            flip_bytes(&mut m.aid, variant);
            AuthMessage::M1(m)
        }
        (AuthMessage::M1(mut m), TamperField::M1R1) => {
            m.r1 = tamper_point(curve, &m.r1, variant);
            AuthMessage::M1(m)
        }
        (AuthMessage::M1(mut m), TamperField::M1T1) => {
            m.t1 = tamper_time(m.t1, variant, window);
            AuthMessage::M1(m)
        }
        (AuthMessage::M1(mut m), TamperField::M1Tag) => {
            flip_bytes(&mut m.tag1, variant);
            AuthMessage::M1(m)
        }
        (AuthMessage::M2(mut m), TamperField::M2R2) => {
            m.r2 = tamper_point(curve, &m.r2, variant);
            AuthMessage::M2(m)
        }
        (AuthMessage::M2(mut m), TamperField::M2T2) => {
            m.t2 = tamper_time(m.t2, variant, window);
            AuthMessage::M2(m)
        }
        (AuthMessage::M2(mut m), TamperField::M2Tag) => {
            flip_bytes(&mut m.tag2, variant);
            AuthMessage::M2(m)
        }
        (AuthMessage::M3(mut m), TamperField::M3Aid) => {
            flip_bytes(&mut m.aid, variant);
            AuthMessage::M3(m)
        }
        (AuthMessage::M3(mut m), TamperField::M3Tag) => {
            flip_bytes(&mut m.tag3, variant);
            AuthMessage::M3(m)
        }
        (other, _) => other,
    }
}

/// Channel that rewrites one field of one message.
pub struct FieldTamper {
    pub field: TamperField,
    pub variant: usize,
    pub curve: CurveParams,
    pub window: u64,
}

impl AuthChannel for FieldTamper {
    fn relay(&mut self, _now: SimTime, msg: AuthMessage) -> Option<AuthMessage> {
        Some(tamper_field(msg, self.field, self.variant, &self.curve, self.window))
    }
}

/// Channel that loses every message of one kind.
pub struct DropMessage(pub MessageKind);

impl AuthChannel for DropMessage {
    fn relay(&mut self, _now: SimTime, msg: AuthMessage) -> Option<AuthMessage> {
        (msg.kind() != self.0).then_some(msg)
    }
}

/// Every single-field rewrite of one handshake, each against a fresh copy of `bs`.
///
/// `make_rng` must return the same stream the honest run used, so each
/// tampered run differs from the honest transcript in exactly one field.
/// A run counts as accepted only if the verdict is accepted; any run that
/// leaves a key on either side without acceptance is also counted as accepted.
pub fn tamper_sweep<R: Rng>(
    bs: &BaseStation,
    reg: &Registration,
    make_rng: impl Fn() -> R,
    clock: SimTime,
    hop_ms: u64,
) -> AttackOutcome {
    let mut out = AttackOutcome::default();
    let curve = bs.curve().clone();
    for field in TamperField::ALL {
        for variant in 0..field.variants() {
            let mut victim = bs.clone();
            let mut chan = FieldTamper {
                field,
                variant,
                curve: curve.clone(),
                window: victim.freshness.window_ms,
            };
            let t = run_handshake(&mut victim, reg, &mut make_rng(), clock, hop_ms, 0, &mut chan);
            out.attempts += 1;
            match &t.verdict {
                Verdict::Accepted => out.accepted_by_victim += 1,
                Verdict::Rejected(e) if t.head_key.is_none() && t.bs_key.is_none() => out.reject(e.reason()),
                _ => out.accepted_by_victim += 1,
            }
        }
    }
    out
}

/// What the simulator should put on the air in place of an honest packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interception {
    Deliver(DataPacket),
    /// Rewritten by the spec at this index; report the victim's verdict back.
    Tampered(DataPacket, usize),
    /// The rewrite no longer parses; the receiver discards it.
    Garbled(usize),
    Dropped,
}

/// A message the attacker originates, for the simulator to deliver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub spec: usize,
    pub packet: DataPacket,
}

#[derive(Debug, Clone, Default)]
struct SpecState {
    outcome: AttackOutcome,
    resolved: Option<LinkId>,
    tracker: Option<LinkKeyState>,
    compromised_at: Option<SimTime>,
    budget: u64,
}

const OBSERVED_CAP: usize = 4096;

/// Attacker attached to a running simulation.
#[derive(Debug, Clone)]
pub struct Adversary {
    specs: Vec<AttackSpec>,
    state: Vec<SpecState>,
    rng: ChaCha8Rng,
    round: u64,
    observed: Vec<DataPacket>,
    observed_m1: Vec<Msg1>,
    round_attempts: u64,
    round_accepted: u64,
}

impl Adversary {
    pub fn new(specs: Vec<AttackSpec>, rng: ChaCha8Rng) -> Self {
        let state = vec![SpecState::default(); specs.len()];
        Self {
            specs,
            state,
            rng,
            round: 0,
            observed: Vec::new(),
            observed_m1: Vec::new(),
            round_attempts: 0,
            round_accepted: 0,
        }
    }

    pub fn specs(&self) -> &[AttackSpec] {
        &self.specs
    }

    pub fn outcomes(&self) -> Vec<AttackOutcome> {
        self.state.iter().map(|s| s.outcome.clone()).collect()
    }

    /// The link a compromise spec stole, and when.
    pub fn compromised(&self, spec: usize) -> Option<(LinkId, SimTime)> {
        let s = self.state.get(spec)?;
        Some((s.resolved?, s.compromised_at?))
    }

    /// `(attempts, accepted)` since the last [`begin_round`](Self::begin_round).
    pub fn round_tally(&self) -> (u64, u64) {
        (self.round_attempts, self.round_accepted)
    }

    fn active(&self, i: usize) -> bool {
        self.specs[i].schedule.contains(self.round)
    }

    fn attempt(&mut self, i: usize) {
        self.state[i].outcome.attempts += 1;
        self.round_attempts += 1;
    }

    /// Called at each round start, before any traffic of the round.
    pub fn begin_round(&mut self, round: u64, now: SimTime, topo: &ClusterTopology, rings: &KeyStore) {
        self.round = round;
        self.round_attempts = 0;
        self.round_accepted = 0;
        for i in 0..self.specs.len() {
            let spec = self.specs[i].clone();
            self.state[i].budget = match spec.intensity {
                Intensity::Count(n) => n,
                Intensity::Probability(_) => u64::MAX,
            };
            if !self.active(i) {
                continue;
            }
            if spec.target == Target::Random && self.state[i].resolved.is_none() {
                let edges: Vec<LinkId> = topo
                    .clusters
                    .iter()
                    .flat_map(|c| c.edges().map(|(p, ch)| LinkId::new(p, ch)))
                    .collect();
                self.state[i].resolved = edges.choose(&mut self.rng).copied();
            }
            if let Target::Link(l) = spec.target {
                self.state[i].resolved = Some(l);
            }
            if spec.kind == AttackKind::CompromiseLink && self.state[i].compromised_at.is_none() {
                let stolen = self.state[i]
                    .resolved
                    .and_then(|l| rings.get(&l.parent).and_then(|r| r.get(&l)).cloned());
                match stolen {
                    Some(s) => {
                        self.state[i].tracker = Some(s);
                        self.state[i].compromised_at = Some(now);
                    }
                    None => self.state[i].outcome.noops += 1,
                }
            }
        }
    }

    fn fires(&mut self, i: usize) -> bool {
        if self.state[i].budget == 0 {
            return false;
        }
        let fire = match self.specs[i].intensity {
            Intensity::Count(_) => true,
            Intensity::Probability(p) => self.rng.gen_bool(p.clamp(0.0, 1.0)),
        };
        if fire {
            self.state[i].budget -= 1;
        }
        fire
    }

    /// Sees an honest data packet in flight and decides its fate.
    pub fn intercept_data(&mut self, pkt: &DataPacket) -> Interception {
        if self.observed.len() < OBSERVED_CAP {
            self.observed.push(pkt.clone());
        }
        for i in 0..self.specs.len() {
            if self.specs[i].kind == AttackKind::CompromiseLink {
                let before = self.state[i].outcome.attempts;
                let st = &mut self.state[i];
                try_read(&mut st.outcome, &mut st.tracker, pkt);
                self.round_attempts += self.state[i].outcome.attempts - before;
            }
        }
        for i in 0..self.specs.len() {
            let spec = &self.specs[i];
            if !matches!(spec.kind, AttackKind::Drop | AttackKind::Tamper)
                || !self.active(i)
                || !spec.target.matches(pkt, self.state[i].resolved)
                || !self.fires(i)
            {
                continue;
            }
            self.attempt(i);
            if self.specs[i].kind == AttackKind::Drop {
                self.state[i].outcome.links_affected.insert(pkt.link());
                return Interception::Dropped;
            }
            return match flip_random_bit(pkt, &mut self.rng) {
                Ok(t) => Interception::Tampered(t, i),
                Err(e) => {
                    self.state[i].outcome.reject(e.reason());
                    Interception::Garbled(i)
                }
            };
        }
        Interception::Deliver(pkt.clone())
    }

    /// Sees a handshake message in flight; `None` drops it.
    pub fn intercept_auth(&mut self, msg: AuthMessage, curve: &CurveParams, window: u64) -> (Option<AuthMessage>, Option<usize>) {
        if let AuthMessage::M1(m) = &msg {
            if self.observed_m1.len() < OBSERVED_CAP {
                self.observed_m1.push(m.clone());
            }
        }
        for i in 0..self.specs.len() {
            if !matches!(self.specs[i].kind, AttackKind::Drop | AttackKind::Tamper)
                || self.specs[i].target != Target::Handshake
                || !self.active(i)
                || !self.fires(i)
            {
                continue;
            }
            self.attempt(i);
            if self.specs[i].kind == AttackKind::Drop {
                return (None, None);
            }
            let field = **TamperField::ALL
                .iter()
                .filter(|f| f.message() == msg.kind())
                .collect::<Vec<_>>()
                .choose(&mut self.rng)
                .expect("every message has fields");
            let variant = self.rng.gen_range(0..field.variants());
            return (Some(tamper_field(msg, field, variant, curve, window)), Some(i));
        }
        (Some(msg), None)
    }

    /// Victim's verdict on a tampered or injected message.
    pub fn report(&mut self, spec: usize, accepted: Result<(), &'static str>, link: Option<LinkId>) {
        let out = &mut self.state[spec].outcome;
        match accepted {
            Ok(()) => {
                out.accepted_by_victim += 1;
                if let Some(l) = link {
                    out.links_affected.insert(l);
                }
                self.round_accepted += 1;
            }
            Err(reason) => out.reject(reason),
        }
    }

    /// Recorded data packets to re-inject this round.
    pub fn replays(&mut self) -> Vec<Injection> {
        let mut out = Vec::new();
        for i in 0..self.specs.len() {
            let spec = self.specs[i].clone();
            if spec.kind != AttackKind::Replay || spec.target == Target::Handshake || !self.active(i) {
                continue;
            }
            let resolved = self.state[i].resolved;
            let eligible: Vec<DataPacket> = self
                .observed
                .iter()
                .filter(|p| spec.target.matches(p, resolved))
                .cloned()
                .collect();
            let chosen = match spec.intensity {
                Intensity::Count(n) if !eligible.is_empty() => {
                    (0..n).map(|_| eligible.choose(&mut self.rng).expect("non-empty").clone()).collect()
                }
                Intensity::Count(_) => Vec::new(),
                Intensity::Probability(p) => pick(eligible, Intensity::Probability(p), &mut self.rng),
            };
            if chosen.is_empty() {
                self.state[i].outcome.noops += 1;
            }
            for packet in chosen {
                self.attempt(i);
                out.push(Injection { spec: i, packet });
            }
        }
        out
    }

    /// Runs this round's handshake-level attacks directly against the base station.
    pub fn attack_base_station(&mut self, bs: &mut BaseStation, identities: &[Vec<u8>], clock: SimTime) {
        for i in 0..self.specs.len() {
            let spec = self.specs[i].clone();
            if !self.active(i) {
                continue;
            }
            let outcome = match spec.kind {
                AttackKind::Impersonate => {
                    let knowledge = AttackerKnowledge {
                        identities: identities.to_vec(),
                        revoked: Vec::new(),
                        stale: self.observed_m1.clone(),
                    };
                    impersonation_attack(&spec, &knowledge, bs, clock, &mut self.rng)
                }
                AttackKind::Replay if spec.target == Target::Handshake => {
                    let trace: Vec<Observed> = self.observed_m1.iter().cloned().map(|m| Observed::Auth(AuthMessage::M1(m))).collect();
                    let mut rings = KeyStore::new();
                    let mut victims = Victims {
                        rings: &mut rings,
                        bs: Some(bs),
                        initiator: None,
                        clock,
                    };
                    let s = AttackSpec { schedule: Schedule::ALWAYS, ..spec };
                    replay_attack(&trace, &s, &mut victims, &mut self.rng)
                }
                _ => continue,
            };
            self.round_attempts += outcome.attempts;
            self.round_accepted += outcome.accepted_by_victim;
            self.state[i].outcome.merge(&outcome);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{send_hop, AggregatePayload};
    use crate::auth::{DirectChannel, DEFAULT_FRESHNESS_MS};
    use crate::keys::establish_edge_keys;
    use crate::network::ClusterId;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn link() -> LinkId {
        LinkId::new(NodeId(0), NodeId(1))
    }

    /// Rings for two links and `n` honest packets on the first, sent in order.
    fn traffic(n: usize) -> (KeyStore, KeyStore, Vec<DataPacket>) {
        let other = LinkId::new(NodeId(0), NodeId(2));
        let rings = establish_edge_keys(&[link(), other], 8, &mut rng(3));
        let mut sender = rings.clone();
        let pkts = (0..n)
            .map(|i| {
                let l = if i % 5 == 4 { other } else { link() };
                let ring = sender.get_mut(&l.child).unwrap();
                send_hop(ring, l, ClusterId(0), &AggregatePayload::reading(i as i64, 0)).unwrap()
            })
            .collect();
        (rings, sender, pkts)
    }

    #[test]
    fn parse_spec_parts() {
        assert_eq!("link:3->7".parse::<Target>().unwrap(), Target::Link(LinkId::new(NodeId(7), NodeId(3))));
        assert_eq!("link:3->7".parse::<Target>().unwrap().to_string(), "link:3->7");
        assert_eq!("node:4".parse::<Target>().unwrap(), Target::Node(NodeId(4)));
        assert!("link:3".parse::<Target>().is_err());
        assert_eq!("2..5".parse::<Schedule>().unwrap(), Schedule { start: 2, end: 5 });
        assert_eq!("9".parse::<Schedule>().unwrap(), Schedule { start: 9, end: 9 });
        assert_eq!("3..".parse::<Schedule>().unwrap().to_string(), "3..");
        assert!("5..2".parse::<Schedule>().is_err());
        assert_eq!("compromise_link".parse::<AttackKind>().unwrap().to_string(), "compromise_link");
    }

    #[test]
    fn replayed_data_is_rejected() {
        let (mut rings, _, pkts) = traffic(20);
        for p in &pkts {
            deliver(&mut rings, p).unwrap();
        }
        let trace: Vec<Observed> = pkts.iter().cloned().map(Observed::Data).collect();
        let spec = AttackSpec::new(AttackKind::Replay, Target::Any, Schedule::ALWAYS, Intensity::Count(100));
        let mut v = Victims {
            rings: &mut rings,
            bs: None,
            initiator: None,
            clock: 0,
        };
        let out = replay_attack(&trace, &spec, &mut v, &mut rng(1));
        assert_eq!((out.attempts, out.accepted_by_victim), (100, 0));
        assert_eq!(out.rejections.values().sum::<u64>(), 100);
        // recount: every replay is of an already-consumed epoch
        assert_eq!(out.rejections.get("epoch_oow"), Some(&100));
    }

    #[test]
    fn replayed_m1_is_rejected() {
        let mut bs = BaseStation::new(CurveParams::toy(), [1; 16], DEFAULT_FRESHNESS_MS);
        let reg = bs.register(b"CH1").unwrap();
        let t = run_handshake(&mut bs, &reg, &mut rng(5), 100, 12, 0, &mut DirectChannel);
        assert!(t.verdict.is_accepted());
        let trace = vec![Observed::Auth(AuthMessage::M1(t.m1.unwrap())), Observed::Auth(AuthMessage::M3(t.m3.unwrap()))];
        let spec = AttackSpec::new(AttackKind::Replay, Target::Handshake, Schedule::ALWAYS, Intensity::Count(2));
        let mut rings = KeyStore::new();
        let mut v = Victims {
            rings: &mut rings,
            bs: Some(&mut bs),
            initiator: None,
            clock: 140,
        };
        let out = replay_attack(&trace, &spec, &mut v, &mut rng(1));
        assert_eq!((out.attempts, out.accepted_by_victim), (2, 0));
        assert_eq!(out.rejections.get("replay_detected"), Some(&1));
        assert_eq!(out.rejections.get("unknown_session"), Some(&1));
    }

    #[test]
    fn impersonation_strategies_all_fail() {
        let mut bs = BaseStation::new(CurveParams::toy(), [1; 16], DEFAULT_FRESHNESS_MS);
        let reg = bs.register(b"CH1").unwrap();
        let gone = bs.register(b"CH2").unwrap();
        bs.revoke(b"CH2");
        let (_, stale) = handshake_msg1(&reg, bs.curve(), &mut rng(2), 0, 500).unwrap();
        let knowledge = AttackerKnowledge {
            identities: vec![b"CH1".to_vec()],
            revoked: vec![gone],
            stale: vec![stale],
        };
        let spec = AttackSpec::new(AttackKind::Impersonate, Target::Handshake, Schedule::ALWAYS, Intensity::Count(400));
        let out = impersonation_attack(&spec, &knowledge, &mut bs, 10_000, &mut rng(3));
        assert_eq!((out.attempts, out.accepted_by_victim), (400, 0));
        assert_eq!(out.rejections.get("tag_invalid"), Some(&200));
        assert_eq!(out.rejections.get("unknown_identity"), Some(&100));
        assert_eq!(out.rejections.get("stale_timestamp"), Some(&100));
    }

    #[test]
    fn compromise_reads_only_its_link() {
        let (rings, _, pkts) = traffic(40);
        let stolen = rings[&NodeId(0)].get(&link()).unwrap().clone();
        let spec = AttackSpec::new(AttackKind::CompromiseLink, Target::Link(link()), Schedule::ALWAYS, Intensity::Count(1));
        let out = compromise_link(&pkts, &stolen, &spec);
        let on_link = pkts.iter().filter(|p| p.link() == link()).count() as u64;
        assert_eq!(out.recovered_per_link.get(&link()), Some(&on_link));
        assert_eq!(out.plaintexts_recovered, on_link);
        assert_eq!(out.links_affected, BTreeSet::from([link()]));
        // idle link: nothing to read
        assert_eq!(compromise_link(&[], &stolen, &spec).plaintexts_recovered, 0);
    }

    #[test]
    fn drops_within_window_recover() {
        for burst in 0..=8u64 {
            let (mut rings, _, pkts) = traffic(30);
            let spec = AttackSpec::new(AttackKind::Drop, Target::Link(link()), Schedule { start: 3, end: u64::MAX }, Intensity::Count(burst));
            let out = drop_attack(&pkts, &spec, &mut rings, &mut rng(0));
            assert_eq!(out.attempts, burst);
            assert_eq!(out.desync_events, 0, "burst {burst}");
        }
        let (mut rings, _, pkts) = traffic(30);
        let spec = AttackSpec::new(AttackKind::Drop, Target::Link(link()), Schedule { start: 3, end: u64::MAX }, Intensity::Count(9));
        let out = drop_attack(&pkts, &spec, &mut rings, &mut rng(0));
        assert!(out.desync_events > 0);
        assert!(rings[&NodeId(0)].get(&link()).unwrap().flagged);
    }

    #[test]
    fn bit_flips_never_accepted() {
        let (mut rings, _, pkts) = traffic(200);
        let spec = AttackSpec::new(AttackKind::Tamper, Target::Any, Schedule::ALWAYS, Intensity::Probability(1.0));
        let out = tamper_attack(&pkts, &spec, &mut rings, &mut rng(8));
        assert_eq!((out.attempts, out.accepted_by_victim), (200, 0));
    }

    #[test]
    fn zero_probability_tamper_is_clean() {
        let (mut rings, _, pkts) = traffic(30);
        let mut clean = rings.clone();
        let spec = AttackSpec::new(AttackKind::Tamper, Target::Any, Schedule::ALWAYS, Intensity::Probability(0.0));
        let out = tamper_attack(&pkts, &spec, &mut rings, &mut rng(8));
        for p in &pkts {
            deliver(&mut clean, p).unwrap();
        }
        assert_eq!(out, AttackOutcome::default());
        assert_eq!(rings, clean);
    }

    #[test]
    fn handshake_tamper_sweep() {
        let mut bs = BaseStation::new(CurveParams::toy(), [4; 16], DEFAULT_FRESHNESS_MS);
        let reg = bs.register(b"CH7").unwrap();
        let out = tamper_sweep(&bs, &reg, || rng(11), 5_000, 12);
        let expected: usize = TamperField::ALL.iter().map(|f| f.variants()).sum();
        assert_eq!(out.attempts, expected as u64);
        assert_eq!(out.accepted_by_victim, 0);
        // both directions of mutual authentication are exercised
        assert!(out.rejections.contains_key("tag_invalid"));
        assert!(out.rejections.contains_key("unknown_session"));
    }
}
