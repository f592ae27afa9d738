//! Per-edge link keys and their one-way ratchet.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use thiserror::Error;

use crate::crypto::{kdf, SymmetricKey, KEY_LEN};
use crate::network::{ClusterTopology, NodeId};

pub const DEFAULT_WINDOW: u64 = 8;

/// A directed tree edge, named by its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId {
    pub parent: NodeId,
    pub child: NodeId,
}

impl LinkId {
    pub fn new(parent: NodeId, child: NodeId) -> Self {
        Self { parent, child }
    }

    pub fn involves(&self, node: NodeId) -> bool {
        self.parent == node || self.child == node
    }
}

impl std::fmt::Display for LinkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.child, self.parent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("epoch {observed} outside acceptance window [{base}, {base}+{window}] on link {link}")]
    EpochOutOfWindow {
        link: LinkId,
        observed: u64,
        base: u64,
        window: u64,
    },
}

/// One endpoint's view of a link key.
///
/// `current.epoch` always equals `send_epoch`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkKeyState {
    pub link: LinkId,
    pub current: SymmetricKey,
    pub send_epoch: u64,
    pub recv_window_base: u64,
    pub window: u64,
    /// Set when a resync failed; the link needs fresh epoch-0 material.
    pub flagged: bool,
    /// Next per-link packet counter used by the sending side.
    pub next_ctr: u64,
}

impl LinkKeyState {
    pub fn new(link: LinkId, key: [u8; KEY_LEN], window: u64) -> Self {
        Self {
            link,
            current: SymmetricKey::new(key),
            send_epoch: 0,
            recv_window_base: 0,
            window,
            flagged: false,
            next_ctr: 0,
        }
    }

    /// Replaces the key with `kdf(key, "ratchet", epoch + 1)`; the old bytes are gone.
    pub fn ratchet(mut self) -> Self {
        let next = self.send_epoch + 1;
        self.current = SymmetricKey::with_epoch(kdf(&self.current, b"ratchet", next), next);
        self.send_epoch = next;
        self
    }

    /// Fast-forwards to `observed` when it lies in `[base, base + W]`.
    ///
    /// Returns the advanced state; `self` is left untouched either way.
    pub fn resync(&self, observed: u64) -> Result<LinkKeyState, KeyError> {
        let base = self.recv_window_base;
        if observed < base || observed < self.send_epoch || observed - base > self.window {
            return Err(KeyError::EpochOutOfWindow {
                link: self.link,
                observed,
                base,
                window: self.window,
            });
        }
        let mut next = self.clone();
        while next.send_epoch < observed {
            next = next.ratchet();
        }
        next.recv_window_base = observed;
        Ok(next)
    }

    /// Receiver-side step after a verified packet: move past its epoch.
    pub fn after_delivery(self) -> Self {
        let mut next = self.ratchet();
        next.recv_window_base = next.send_epoch;
        next
    }
}

/// Link keys held by one node, one entry per incident tree edge.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeyRing {
    pub links: BTreeMap<LinkId, LinkKeyState>,
}

impl KeyRing {
    pub fn get(&self, link: &LinkId) -> Option<&LinkKeyState> {
        self.links.get(link)
    }

    pub fn get_mut(&mut self, link: &LinkId) -> Option<&mut LinkKeyState> {
        self.links.get_mut(link)
    }

    pub fn insert(&mut self, state: LinkKeyState) {
        self.links.insert(state.link, state);
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkKeyState> {
        self.links.values()
    }

    pub fn any_flagged(&self) -> bool {
        self.links.values().any(|s| s.flagged)
    }

    /// One line per link; key bytes only when `reveal` is set.
    pub fn dump(&self, reveal: bool) -> String {
        let mut out = String::new();
        for st in self.links.values() {
            let key = if reveal {
                st.current.bytes.iter().map(|b| format!("{b:02x}")).collect()
            } else {
                "<redacted>".to_string()
            };
            let _ = writeln!(
                out,
                "link={} epoch={} window_base={} window={} ctr={} flagged={} key={}",
                st.link, st.send_epoch, st.recv_window_base, st.window, st.next_ctr, st.flagged, key
            );
        }
        out
    }
}

pub type KeyStore = BTreeMap<NodeId, KeyRing>;

/// Draws a fresh random epoch-0 key for each edge and hands a copy to both endpoints.
pub fn establish_edge_keys<R: Rng + ?Sized>(edges: &[LinkId], window: u64, rng: &mut R) -> KeyStore {
    let mut store = KeyStore::new();
    let mut used: BTreeSet<[u8; KEY_LEN]> = BTreeSet::new();
    for &link in edges {
        let key = loop {
            let mut k = [0u8; KEY_LEN];
            rng.fill(&mut k);
            if used.insert(k) {
                break k;
            }
        };
        let state = LinkKeyState::new(link, key, window);
        store.entry(link.parent).or_default().insert(state.clone());
        store.entry(link.child).or_default().insert(state);
    }
    store
}

/// Keys for every tree edge of `topo`; every clustered node gets a ring, possibly empty.
pub fn establish_link_keys<R: Rng + ?Sized>(topo: &ClusterTopology, window: u64, rng: &mut R) -> KeyStore {
    let edges: Vec<LinkId> = topo
        .clusters
        .iter()
        .flat_map(|c| c.edges().map(|(p, ch)| LinkId::new(p, ch)))
        .collect();
    let mut store = establish_edge_keys(&edges, window, rng);
    for c in &topo.clusters {
        for n in std::iter::once(c.head).chain(c.members.iter().copied()) {
            store.entry(n).or_default();
        }
    }
    store
}
