//! Cluster-head ↔ base-station mutual authentication.
//!
//! Three messages over an ephemeral ECDH exchange, authenticated with a
//! per-head registration token:
//!
//! ```text
//! head → BS   m1 = (AID, R1 = r1·G, t1, tag1 = MAC_X(AID ∥ R1 ∥ t1))
//! BS   → head m2 = (R2 = r2·G, t2, tag2 = MAC_X(R2 ∥ R1 ∥ t2))
//! head → BS   m3 = (AID, tag3 = MAC_SK("confirm" ∥ t1 ∥ t2))
//! ```
//!
//! `AID = H(id ∥ t1)[..16]` changes every session, and
//! `SK = H(x(r1·r2·G) ∥ AID ∥ t1 ∥ t2)[..16]`.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use thiserror::Error;

use crate::crypto::{ec_scalar_mul, kdf, mac_tag, sha256, tags_equal, CurveParams, CurvePoint, SymmetricKey, KEY_LEN, TAG_LEN};
use crate::sim::SimTime;

pub const DEFAULT_FRESHNESS_MS: u64 = 500;

pub type Token = [u8; KEY_LEN];
pub type Aid = [u8; 16];
pub type SessionKey = [u8; KEY_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("identity already registered")]
    DuplicateIdentity,
    #[error("registration revoked")]
    Revoked,
    #[error("timestamp outside the freshness window")]
    StaleTimestamp,
    #[error("message already seen")]
    ReplayDetected,
    #[error("pseudonym matches no active registration")]
    UnknownIdentity,
    #[error("authentication tag does not verify")]
    TagInvalid,
    #[error("ephemeral point is invalid")]
    InvalidPoint,
    #[error("no pending session for this pseudonym")]
    UnknownSession,
    #[error("unexpected message type")]
    UnexpectedMessage,
    #[error("{0} was lost in transit")]
    MessageLost(MessageKind),
}

impl AuthError {
    /// Stable snake_case label for logs.
    pub fn reason(&self) -> &'static str {
        match self {
            AuthError::DuplicateIdentity => "duplicate_identity",
            AuthError::Revoked => "revoked",
            AuthError::StaleTimestamp => "stale_timestamp",
            AuthError::ReplayDetected => "replay_detected",
            AuthError::UnknownIdentity => "unknown_identity",
            AuthError::TagInvalid => "tag_invalid",
            AuthError::InvalidPoint => "invalid_point",
            AuthError::UnknownSession => "unknown_session",
            AuthError::UnexpectedMessage => "unexpected_message",
            AuthError::MessageLost(_) => "message_lost",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    M1,
    M2,
    M3,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::M1 => "m1",
            MessageKind::M2 => "m2",
            MessageKind::M3 => "m3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationStatus {
    Active,
    Revoked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub id: Vec<u8>,
    pub token: Token,
    pub status: RegistrationStatus,
}

/// `kdf(master, "reg", be64(H(id)[..8]))`.
pub fn derive_token(master: &[u8; KEY_LEN], id: &[u8]) -> Token {
    let h = sha256(&[id]);
    let prefix = u64::from_be_bytes(h[..8].try_into().expect("8 bytes"));
    kdf(&SymmetricKey::new(*master), b"reg", prefix)
}

pub fn register(master: &[u8; KEY_LEN], id: &[u8]) -> Registration {
    Registration {
        id: id.to_vec(),
        token: derive_token(master, id),
        status: RegistrationStatus::Active,
    }
}

pub fn pseudonym(id: &[u8], t1: u64) -> Aid {
    let h = sha256(&[id, &t1.to_be_bytes()]);
    h[..16].try_into().expect("16 bytes")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msg1 {
    pub aid: Aid,
    pub r1: CurvePoint,
    pub t1: u64,
    pub tag1: [u8; TAG_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msg2 {
    pub r2: CurvePoint,
    pub t2: u64,
    pub tag2: [u8; TAG_LEN],
}

/// `aid` only routes the confirmation to the pending session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Msg3 {
    pub aid: Aid,
    pub tag3: [u8; TAG_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthMessage {
    M1(Msg1),
    M2(Msg2),
    M3(Msg3),
}

impl AuthMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            AuthMessage::M1(_) => MessageKind::M1,
            AuthMessage::M2(_) => MessageKind::M2,
            AuthMessage::M3(_) => MessageKind::M3,
        }
    }

    /// Canonical byte encoding (fields concatenated, integers big-endian).
    pub fn to_bytes(&self, curve: &CurveParams) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            AuthMessage::M1(m) => {
                out.extend_from_slice(&m.aid);
                out.extend(curve.encode_point(&m.r1));
                out.extend_from_slice(&m.t1.to_be_bytes());
                out.extend_from_slice(&m.tag1);
            }
            AuthMessage::M2(m) => {
                out.extend(curve.encode_point(&m.r2));
                out.extend_from_slice(&m.t2.to_be_bytes());
                out.extend_from_slice(&m.tag2);
            }
            AuthMessage::M3(m) => {
                out.extend_from_slice(&m.aid);
                out.extend_from_slice(&m.tag3);
            }
        }
        out
    }
}

fn tag1_input(curve: &CurveParams, aid: &Aid, r1: &CurvePoint, t1: u64) -> Vec<u8> {
    let mut m = aid.to_vec();
    m.extend(curve.encode_point(r1));
    m.extend_from_slice(&t1.to_be_bytes());
    m
}

fn tag2_input(curve: &CurveParams, r2: &CurvePoint, r1: &CurvePoint, t2: u64) -> Vec<u8> {
    let mut m = curve.encode_point(r2);
    m.extend(curve.encode_point(r1));
    m.extend_from_slice(&t2.to_be_bytes());
    m
}

fn tag3_input(t1: u64, t2: u64) -> Vec<u8> {
    let mut m = b"confirm".to_vec();
    m.extend_from_slice(&t1.to_be_bytes());
    m.extend_from_slice(&t2.to_be_bytes());
    m
}

fn session_key(curve: &CurveParams, shared: &CurvePoint, aid: &Aid, t1: u64, t2: u64) -> Option<SessionKey> {
    let x = shared.x()?;
    let h = sha256(&[&curve.encode_field(x), aid, &t1.to_be_bytes(), &t2.to_be_bytes()]);
    Some(h[..KEY_LEN].try_into().expect("16 bytes"))
}

fn valid_ephemeral(curve: &CurveParams, pt: &CurvePoint) -> bool {
    !pt.is_infinity() && curve.is_on_curve(pt)
}

fn fresh(clock: SimTime, t: u64, window: u64) -> bool {
    clock.abs_diff(t) <= window
}

fn mac(token: &Token, msg: &[u8]) -> [u8; TAG_LEN] {
    mac_tag(&SymmetricKey::new(*token), msg)
}

/// Head-side state between sending m1 and receiving m2.
#[derive(Debug, Clone)]
pub struct Initiator {
    id: Vec<u8>,
    token: Token,
    r1: BigUint,
    m1: Msg1,
    freshness_ms: u64,
}

impl Initiator {
    pub fn m1(&self) -> &Msg1 {
        &self.m1
    }

    pub fn id(&self) -> &[u8] {
        &self.id
    }
}

pub fn handshake_msg1<R: Rng + ?Sized>(
    reg: &Registration,
    curve: &CurveParams,
    rng: &mut R,
    clock: SimTime,
    freshness_ms: u64,
) -> Result<(Initiator, Msg1), AuthError> {
    if reg.status != RegistrationStatus::Active {
        return Err(AuthError::Revoked);
    }
    let r1 = curve.random_scalar(rng);
    let big_r1 = ec_scalar_mul(curve, &r1, curve.generator()).expect("generator is on curve");
    let aid = pseudonym(&reg.id, clock);
    let tag1 = mac(&reg.token, &tag1_input(curve, &aid, &big_r1, clock));
    let m1 = Msg1 {
        aid,
        r1: big_r1,
        t1: clock,
        tag1,
    };
    let init = Initiator {
        id: reg.id.clone(),
        token: reg.token,
        r1,
        m1: m1.clone(),
        freshness_ms,
    };
    Ok((init, m1))
}

pub fn handshake_finalize(init: &Initiator, curve: &CurveParams, m2: &Msg2, clock: SimTime) -> Result<(Msg3, SessionKey), AuthError> {
    if !fresh(clock, m2.t2, init.freshness_ms) {
        return Err(AuthError::StaleTimestamp);
    }
    let expected = mac(&init.token, &tag2_input(curve, &m2.r2, &init.m1.r1, m2.t2));
    if !tags_equal(&expected, &m2.tag2) {
        return Err(AuthError::TagInvalid);
    }
    if !valid_ephemeral(curve, &m2.r2) {
        return Err(AuthError::InvalidPoint);
    }
    let shared = ec_scalar_mul(curve, &init.r1, &m2.r2).map_err(|_| AuthError::InvalidPoint)?;
    let key = session_key(curve, &shared, &init.m1.aid, init.m1.t1, m2.t2).ok_or(AuthError::InvalidPoint)?;
    let tag3 = mac_tag(&SymmetricKey::new(key), &tag3_input(init.m1.t1, m2.t2));
    Ok((Msg3 { aid: init.m1.aid, tag3 }, key))
}

/// Time-windowed replay cache of `(AID, t1)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreshnessState {
    pub window_ms: u64,
    cache: BTreeMap<(Aid, u64), SimTime>,
}

impl FreshnessState {
    pub fn new(window_ms: u64) -> Self {
        Self {
            window_ms,
            cache: BTreeMap::new(),
        }
    }

    pub fn evict(&mut self, clock: SimTime) {
        let w = self.window_ms;
        self.cache.retain(|&(_, t1), _| clock.saturating_sub(t1) <= w);
    }

    pub fn seen(&self, aid: &Aid, t1: u64) -> bool {
        self.cache.contains_key(&(*aid, t1))
    }

    pub fn record(&mut self, aid: Aid, t1: u64, clock: SimTime) {
        self.cache.insert((aid, t1), clock);
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PendingSession {
    id: Vec<u8>,
    t1: u64,
    t2: u64,
    key: SessionKey,
}

/// Base-station side: registry, replay cache and half-open sessions.
#[derive(Debug, Clone)]
pub struct BaseStation {
    curve: CurveParams,
    master: [u8; KEY_LEN],
    registry: BTreeMap<Vec<u8>, Registration>,
    pub freshness: FreshnessState,
    pending: BTreeMap<Aid, PendingSession>,
    established: BTreeMap<Vec<u8>, SessionKey>,
}

impl BaseStation {
    pub fn new(curve: CurveParams, master: [u8; KEY_LEN], freshness_ms: u64) -> Self {
        Self {
            curve,
            master,
            registry: BTreeMap::new(),
            freshness: FreshnessState::new(freshness_ms),
            pending: BTreeMap::new(),
            established: BTreeMap::new(),
        }
    }

    pub fn curve(&self) -> &CurveParams {
        &self.curve
    }

    pub fn register(&mut self, id: &[u8]) -> Result<Registration, AuthError> {
        if self.registry.contains_key(id) {
            return Err(AuthError::DuplicateIdentity);
        }
        let reg = register(&self.master, id);
        self.registry.insert(id.to_vec(), reg.clone());
        Ok(reg)
    }

    pub fn revoke(&mut self, id: &[u8]) -> bool {
        self.established.remove(id);
        match self.registry.get_mut(id) {
            Some(r) => {
                r.status = RegistrationStatus::Revoked;
                true
            }
            None => false,
        }
    }

    pub fn registration(&self, id: &[u8]) -> Option<&Registration> {
        self.registry.get(id)
    }

    /// Session key confirmed for `id` by a completed handshake.
    pub fn session(&self, id: &[u8]) -> Option<&SessionKey> {
        self.established.get(id)
    }

    pub fn drop_session(&mut self, id: &[u8]) {
        self.established.remove(id);
    }

    fn identify(&self, aid: &Aid, t1: u64) -> Option<&Registration> {
        self.registry
            .values()
            .filter(|r| r.status == RegistrationStatus::Active)
            .find(|r| &pseudonym(&r.id, t1) == aid)
    }

    /// Checks m1 and answers with m2; the session stays half-open until m3.
    pub fn handle_m1<R: Rng + ?Sized>(&mut self, m1: &Msg1, rng: &mut R, clock: SimTime) -> Result<Msg2, AuthError> {
        self.freshness.evict(clock);
        let window = self.freshness.window_ms;
        self.pending.retain(|_, s| clock.saturating_sub(s.t2) <= window);
        if !fresh(clock, m1.t1, window) {
            return Err(AuthError::StaleTimestamp);
        }
        if self.freshness.seen(&m1.aid, m1.t1) {
            return Err(AuthError::ReplayDetected);
        }
        let reg = self.identify(&m1.aid, m1.t1).ok_or(AuthError::UnknownIdentity)?;
        let expected = mac(&reg.token, &tag1_input(&self.curve, &m1.aid, &m1.r1, m1.t1));
        if !tags_equal(&expected, &m1.tag1) {
            return Err(AuthError::TagInvalid);
        }
        if !valid_ephemeral(&self.curve, &m1.r1) {
            return Err(AuthError::InvalidPoint);
        }
        let (id, token) = (reg.id.clone(), reg.token);
        self.freshness.record(m1.aid, m1.t1, clock);

        let r2 = self.curve.random_scalar(rng);
        let big_r2 = ec_scalar_mul(&self.curve, &r2, self.curve.generator()).expect("generator is on curve");
        let shared = ec_scalar_mul(&self.curve, &r2, &m1.r1).map_err(|_| AuthError::InvalidPoint)?;
        let key = session_key(&self.curve, &shared, &m1.aid, m1.t1, clock).ok_or(AuthError::InvalidPoint)?;
        let tag2 = mac(&token, &tag2_input(&self.curve, &big_r2, &m1.r1, clock));
        self.pending.insert(
            m1.aid,
            PendingSession {
                id,
                t1: m1.t1,
                t2: clock,
                key,
            },
        );
        Ok(Msg2 {
            r2: big_r2,
            t2: clock,
            tag2,
        })
    }

    /// Completes the session named by `m3.aid`; the half-open entry is consumed either way.
    pub fn handle_m3(&mut self, m3: &Msg3, clock: SimTime) -> Result<(Vec<u8>, SessionKey), AuthError> {
        let session = self.pending.remove(&m3.aid).ok_or(AuthError::UnknownSession)?;
        if !fresh(clock, session.t2, self.freshness.window_ms) {
            return Err(AuthError::StaleTimestamp);
        }
        let expected = mac_tag(&SymmetricKey::new(session.key), &tag3_input(session.t1, session.t2));
        if !tags_equal(&expected, &m3.tag3) {
            return Err(AuthError::TagInvalid);
        }
        self.established.insert(session.id.clone(), session.key);
        Ok((session.id, session.key))
    }

    pub fn pending_sessions(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pending,
    Accepted,
    Rejected(AuthError),
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Pending => "pending",
            Verdict::Accepted => "accepted",
            Verdict::Rejected(_) => "rejected",
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

/// The messages of one handshake and what each side ended up with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthTranscript {
    pub m1: Option<Msg1>,
    pub m2: Option<Msg2>,
    pub m3: Option<Msg3>,
    pub head_key: Option<SessionKey>,
    pub bs_key: Option<SessionKey>,
    pub verdict: Verdict,
    pub log: Vec<AuthLogEntry>,
}

impl AuthTranscript {
    /// The agreed key, present only when accepted.
    pub fn session_key(&self) -> Option<SessionKey> {
        match (&self.verdict, self.head_key, self.bs_key) {
            (Verdict::Accepted, Some(h), Some(b)) if h == b => Some(h),
            _ => None,
        }
    }
}

/// One line of the auth log: `time_ms,session_id,msg,verdict_so_far,reject_reason`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthLogEntry {
    pub time: SimTime,
    pub session: u64,
    pub msg: MessageKind,
    pub verdict: &'static str,
    pub reason: &'static str,
}

impl fmt::Display for AuthLogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.time, self.session, self.msg, self.verdict, self.reason)
    }
}

fn push_log(t: &mut AuthTranscript, time: SimTime, session: u64, msg: MessageKind) {
    let reason = match &t.verdict {
        Verdict::Rejected(e) => e.reason(),
        _ => "",
    };
    t.log.push(AuthLogEntry {
        time,
        session,
        msg,
        verdict: t.verdict.label(),
        reason,
    });
}

/// In-path hook between the two parties; `None` drops the message.
pub trait AuthChannel {
    fn relay(&mut self, now: SimTime, msg: AuthMessage) -> Option<AuthMessage>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct DirectChannel;

impl AuthChannel for DirectChannel {
    fn relay(&mut self, _now: SimTime, msg: AuthMessage) -> Option<AuthMessage> {
        Some(msg)
    }
}

impl<F: FnMut(SimTime, AuthMessage) -> Option<AuthMessage>> AuthChannel for F {
    fn relay(&mut self, now: SimTime, msg: AuthMessage) -> Option<AuthMessage> {
        self(now, msg)
    }
}

/// Runs a full handshake with one `hop_ms` of latency per message.
///
/// Both parties may draw from `rng`; the head draws first.
pub fn run_handshake<R: Rng + ?Sized>(
    bs: &mut BaseStation,
    reg: &Registration,
    rng: &mut R,
    clock: SimTime,
    hop_ms: u64,
    session: u64,
    channel: &mut dyn AuthChannel,
) -> AuthTranscript {
    let curve = bs.curve().clone();
    let window = bs.freshness.window_ms;
    let mut t = AuthTranscript {
        m1: None,
        m2: None,
        m3: None,
        head_key: None,
        bs_key: None,
        verdict: Verdict::Pending,
        log: Vec::new(),
    };
    let reject = |t: &mut AuthTranscript, e: AuthError| {
        t.head_key = None;
        t.bs_key = None;
        t.verdict = Verdict::Rejected(e);
    };

    let (init, m1) = match handshake_msg1(reg, &curve, rng, clock, window) {
        Ok(v) => v,
        Err(e) => {
            reject(&mut t, e);
            push_log(&mut t, clock, session, MessageKind::M1);
            return t;
        }
    };
    t.m1 = Some(m1.clone());

    let at_bs = clock + hop_ms;
    let m1_in = match channel.relay(clock, AuthMessage::M1(m1)) {
        Some(AuthMessage::M1(m)) => Ok(m),
        Some(_) => Err(AuthError::UnexpectedMessage),
        None => Err(AuthError::MessageLost(MessageKind::M1)),
    };
    let m2 = match m1_in.and_then(|m| bs.handle_m1(&m, rng, at_bs)) {
        Ok(m2) => m2,
        Err(e) => {
            reject(&mut t, e);
            push_log(&mut t, at_bs, session, MessageKind::M1);
            return t;
        }
    };
    push_log(&mut t, at_bs, session, MessageKind::M1);
    t.m2 = Some(m2.clone());

    let at_head = at_bs + hop_ms;
    let m2_in = match channel.relay(at_bs, AuthMessage::M2(m2)) {
        Some(AuthMessage::M2(m)) => Ok(m),
        Some(_) => Err(AuthError::UnexpectedMessage),
        None => Err(AuthError::MessageLost(MessageKind::M2)),
    };
    let (m3, head_key) = match m2_in.and_then(|m| handshake_finalize(&init, &curve, &m, at_head)) {
        Ok(v) => v,
        Err(e) => {
            reject(&mut t, e);
            push_log(&mut t, at_head, session, MessageKind::M2);
            return t;
        }
    };
    push_log(&mut t, at_head, session, MessageKind::M2);
    t.m3 = Some(m3.clone());

    let at_bs2 = at_head + hop_ms;
    let m3_in = match channel.relay(at_head, AuthMessage::M3(m3)) {
        Some(AuthMessage::M3(m)) => Ok(m),
        Some(_) => Err(AuthError::UnexpectedMessage),
        None => Err(AuthError::MessageLost(MessageKind::M3)),
    };
    match m3_in.and_then(|m| bs.handle_m3(&m, at_bs2)) {
        Ok((_, bs_key)) => {
            t.head_key = Some(head_key);
            t.bs_key = Some(bs_key);
            t.verdict = Verdict::Accepted;
        }
        Err(e) => reject(&mut t, e),
    }
    push_log(&mut t, at_bs2, session, MessageKind::M3);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (BaseStation, Registration, ChaCha8Rng) {
        let mut bs = BaseStation::new(CurveParams::toy(), [7; 16], DEFAULT_FRESHNESS_MS);
        let reg = bs.register(b"CH1").unwrap();
        (bs, reg, ChaCha8Rng::seed_from_u64(42))
    }

    #[test]
    fn registration_tokens() {
        // frozen from Python hashlib
        let zero = [0u8; 16];
        assert_eq!(hex::encode(register(&zero, b"CH1").token), "dbcddad221ec6ac162f0eeae86d53527");
        assert_eq!(hex::encode(register(&zero, b"CH2").token), "31860e87b2f15e6167b944042a9ebd76");
        assert_eq!(register(&zero, b"CH1"), register(&zero, b"CH1"));
        let mut bs = BaseStation::new(CurveParams::toy(), zero, 500);
        bs.register(b"CH1").unwrap();
        assert_eq!(bs.register(b"CH1"), Err(AuthError::DuplicateIdentity));
    }

    #[test]
    fn msg1_properties() {
        let (_, reg, _) = setup();
        let curve = CurveParams::toy();
        let (_, a) = handshake_msg1(&reg, &curve, &mut ChaCha8Rng::seed_from_u64(1), 100, 500).unwrap();
        let (_, b) = handshake_msg1(&reg, &curve, &mut ChaCha8Rng::seed_from_u64(1), 100, 500).unwrap();
        assert_eq!(a, b);
        let (_, c) = handshake_msg1(&reg, &curve, &mut ChaCha8Rng::seed_from_u64(1), 101, 500).unwrap();
        assert_ne!(a.aid, c.aid);
        assert!(curve.is_on_curve(&a.r1) && !a.r1.is_infinity());
    }

    #[test]
    fn honest_handshake_agrees() {
        let (mut bs, reg, mut rng) = setup();
        let t = run_handshake(&mut bs, &reg, &mut rng, 1000, 12, 0, &mut DirectChannel);
        assert_eq!(t.verdict, Verdict::Accepted);
        assert_eq!(t.head_key, t.bs_key);
        assert_eq!(bs.session(b"CH1"), t.head_key.as_ref());
        assert_eq!(t.log.len(), 3);
        assert_eq!(t.log[2].to_string(), "1036,0,m3,accepted,");
    }

    #[test]
    fn replayed_m1_rejected() {
        let (mut bs, reg, mut rng) = setup();
        let (_, m1) = handshake_msg1(&reg, bs.curve(), &mut rng, 1000, 500).unwrap();
        assert!(bs.handle_m1(&m1, &mut rng, 1005).is_ok());
        assert_eq!(bs.handle_m1(&m1, &mut rng, 1006), Err(AuthError::ReplayDetected));
        // after the window the same message is simply stale
        assert_eq!(bs.handle_m1(&m1, &mut rng, 1501), Err(AuthError::StaleTimestamp));
    }

    #[test]
    fn stale_m1_rejected() {
        let (mut bs, reg, mut rng) = setup();
        let (_, m1) = handshake_msg1(&reg, bs.curve(), &mut rng, 1000, 500).unwrap();
        assert_eq!(bs.handle_m1(&m1, &mut rng, 1501), Err(AuthError::StaleTimestamp));
        assert!(bs.freshness.is_empty());
    }

    #[test]
    fn tampered_r2_rejected_by_head() {
        let (mut bs, reg, mut rng) = setup();
        let curve = bs.curve().clone();
        let mut chan = |_: SimTime, msg: AuthMessage| match msg {
            AuthMessage::M2(mut m) => {
                m.r2 = crate::crypto::ec_point_add(&curve, &m.r2, curve.generator()).unwrap();
                Some(AuthMessage::M2(m))
            }
            other => Some(other),
        };
        let t = run_handshake(&mut bs, &reg, &mut rng, 1000, 12, 0, &mut chan);
        assert!(matches!(t.verdict, Verdict::Rejected(AuthError::TagInvalid | AuthError::InvalidPoint)));
        assert_eq!((t.head_key, t.bs_key), (None, None));
        assert!(bs.session(b"CH1").is_none());
    }

    #[test]
    fn revoked_registration_cannot_start() {
        let (mut bs, reg, mut rng) = setup();
        // the head still holds its token but the BS no longer accepts it
        let (_, m1) = handshake_msg1(&reg, bs.curve(), &mut rng, 10, 500).unwrap();
        bs.revoke(b"CH1");
        assert_eq!(bs.handle_m1(&m1, &mut rng, 10), Err(AuthError::UnknownIdentity));
        let revoked = bs.registration(b"CH1").unwrap().clone();
        assert!(matches!(handshake_msg1(&revoked, bs.curve(), &mut rng, 10, 500), Err(AuthError::Revoked)));
    }

    #[test]
    fn m3_replay_has_no_session() {
        let (mut bs, reg, mut rng) = setup();
        let t = run_handshake(&mut bs, &reg, &mut rng, 1000, 12, 0, &mut DirectChannel);
        assert_eq!(bs.handle_m3(t.m3.as_ref().unwrap(), 1040), Err(AuthError::UnknownSession));
    }

    #[test]
    fn lost_messages_abort_then_retry_succeeds() {
        for lost in [MessageKind::M1, MessageKind::M2, MessageKind::M3] {
            let (mut bs, reg, mut rng) = setup();
            let mut chan = |_: SimTime, m: AuthMessage| (m.kind() != lost).then_some(m);
            let t = run_handshake(&mut bs, &reg, &mut rng, 1000, 12, 0, &mut chan);
            assert_eq!(t.verdict, Verdict::Rejected(AuthError::MessageLost(lost)));
            assert!(t.log.last().unwrap().to_string().ends_with("rejected,message_lost"));
            let retry = run_handshake(&mut bs, &reg, &mut rng, 1000 + 3 * 12 + 1, 12, 1, &mut DirectChannel);
            assert_eq!(retry.verdict, Verdict::Accepted, "retry after losing {lost}");
        }
    }
}
