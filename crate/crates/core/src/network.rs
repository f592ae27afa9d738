//! Node deployment, cluster-head election and the per-cluster aggregation tree.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::Rng;
use thiserror::Error;

use crate::sim::Energy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Member,
    ClusterHead,
    BaseStation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub position: Position,
    pub energy: Energy,
    pub role: Role,
    pub parent: Option<NodeId>,
    pub children: BTreeSet<NodeId>,
    pub alive: bool,
}

impl NodeState {
    pub fn is_base_station(&self) -> bool {
        self.role == Role::BaseStation
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("need {wanted} cluster heads but only {alive} candidate nodes are alive")]
    InsufficientNodes { wanted: usize, alive: usize },
    #[error("node {0} has no path to a cluster head within radio range")]
    UnreachableNode(NodeId),
    #[error("topology invariant violated: {0}")]
    InvalidTree(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployConfig {
    pub node_count: usize,
    pub width: f64,
    pub height: f64,
    /// `None` places the base station at the centre of the area.
    pub bs_position: Option<Position>,
    pub initial_energy: f64,
}

/// Places `node_count` sensors uniformly at random; the base station gets id `node_count`.
///
/// The base station is mains powered: it is always alive and never charged.
pub fn deploy<R: Rng + ?Sized>(config: &DeployConfig, rng: &mut R) -> Result<Vec<NodeState>, NetworkError> {
    if config.node_count == 0 {
        return Err(NetworkError::ConfigInvalid("network.nodes must be >= 1".into()));
    }
    if !(config.width > 0.0 && config.height > 0.0) || !config.width.is_finite() || !config.height.is_finite() {
        return Err(NetworkError::ConfigInvalid("network.width and network.height must be > 0".into()));
    }
    let energy = Energy::from_joules(config.initial_energy);
    let mut nodes: Vec<NodeState> = (0..config.node_count)
        .map(|i| NodeState {
            id: NodeId(i as u32),
            position: Position::new(rng.gen_range(0.0..config.width), rng.gen_range(0.0..config.height)),
            energy,
            role: Role::Member,
            parent: None,
            children: BTreeSet::new(),
            alive: true,
        })
        .collect();
    nodes.push(NodeState {
        id: NodeId(config.node_count as u32),
        position: config
            .bs_position
            .unwrap_or(Position::new(config.width / 2.0, config.height / 2.0)),
        energy: Energy::ZERO,
        role: Role::BaseStation,
        parent: None,
        children: BTreeSet::new(),
        alive: true,
    });
    Ok(nodes)
}

/// Weights of the head-election score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectionWeights {
    pub energy: f64,
    pub distance: f64,
}

impl Default for ElectionWeights {
    fn default() -> Self {
        Self {
            energy: 0.7,
            distance: 0.3,
        }
    }
}

pub fn base_station(nodes: &[NodeState]) -> Option<&NodeState> {
    nodes.iter().find(|n| n.is_base_station())
}

/// `w_e · energy/initial + w_d · (1 − dist_to_bs / d_max)` for every alive sensor,
/// where `d_max` is the largest candidate distance to the base station.
pub fn election_scores(nodes: &[NodeState], weights: ElectionWeights, initial_energy: Energy) -> Vec<(NodeId, f64)> {
    let Some(bs) = base_station(nodes) else {
        return Vec::new();
    };
    let candidates: Vec<&NodeState> = nodes.iter().filter(|n| n.alive && !n.is_base_station()).collect();
    let d_max = candidates
        .iter()
        .map(|n| n.position.distance(&bs.position))
        .fold(0.0f64, f64::max);
    let e0 = initial_energy.femtojoules().max(1) as f64;
    candidates
        .iter()
        .map(|n| {
            let dist_term = if d_max > 0.0 {
                1.0 - n.position.distance(&bs.position) / d_max
            } else {
                1.0
            };
            let score = weights.energy * (n.energy.femtojoules() as f64 / e0) + weights.distance * dist_term;
            (n.id, score)
        })
        .collect()
}

/// The `k` best-scoring alive sensors (ties to the lower id), returned in id order.
pub fn elect_cluster_heads(
    nodes: &[NodeState],
    k: usize,
    weights: ElectionWeights,
    initial_energy: Energy,
) -> Result<Vec<NodeId>, NetworkError> {
    let mut scored = election_scores(nodes, weights, initial_energy);
    if k == 0 || scored.len() < k {
        return Err(NetworkError::InsufficientNodes {
            wanted: k,
            alive: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut heads: Vec<NodeId> = scored.into_iter().take(k).map(|(id, _)| id).collect();
    heads.sort();
    Ok(heads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: ClusterId,
    pub head: NodeId,
    /// Members reached by the tree, head excluded.
    pub members: BTreeSet<NodeId>,
    pub parent: BTreeMap<NodeId, NodeId>,
    /// Hop count to the head; the head itself is at depth 0.
    pub depth: BTreeMap<NodeId, u32>,
}

impl Cluster {
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.parent.iter().map(|(&child, &parent)| (parent, child))
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.parent
            .iter()
            .filter(|&(_, &p)| p == node)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn children_map(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut map: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for (&child, &parent) in &self.parent {
            map.entry(parent).or_default().push(child);
        }
        map
    }

    pub fn max_depth(&self) -> u32 {
        self.depth.values().copied().max().unwrap_or(0)
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node == self.head || self.members.contains(&node)
    }

    /// Every node of the cluster, deepest first (ties by id); the head comes last.
    pub fn post_order(&self) -> Vec<NodeId> {
        let mut order: Vec<NodeId> = self.depth.keys().copied().collect();
        order.sort_by(|a, b| self.depth[b].cmp(&self.depth[a]).then(a.cmp(b)));
        order
    }

    /// Path from `node` up to the head, inclusive at both ends.
    pub fn path_to_head(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(&p) = self.parent.get(&cur) {
            path.push(p);
            cur = p;
        }
        path
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTopology {
    pub clusters: Vec<Cluster>,
    pub base_station: NodeId,
    /// Members with no in-range path to their cluster head.
    pub isolated: BTreeSet<NodeId>,
}

impl ClusterTopology {
    pub fn cluster_of(&self, node: NodeId) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.contains(node))
    }

    pub fn heads(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.clusters.iter().map(|c| c.head)
    }

    pub fn edge_count(&self) -> usize {
        self.clusters.iter().map(|c| c.parent.len()).sum()
    }

    pub fn max_depth(&self) -> u32 {
        self.clusters.iter().map(Cluster::max_depth).max().unwrap_or(0)
    }

    /// Fails with the lowest-id isolated node, if any.
    pub fn require_connected(&self) -> Result<(), NetworkError> {
        match self.isolated.first() {
            Some(&id) => Err(NetworkError::UnreachableNode(id)),
            None => Ok(()),
        }
    }

    /// Checks tree shape and edge lengths against `nodes`.
    pub fn validate(&self, nodes: &[NodeState], range: f64) -> Result<(), NetworkError> {
        let pos = |id: NodeId| {
            nodes
                .iter()
                .find(|n| n.id == id)
                .map(|n| n.position)
                .ok_or_else(|| NetworkError::InvalidTree(format!("unknown node {id}")))
        };
        let mut seen = BTreeSet::new();
        for c in &self.clusters {
            if c.parent.len() != c.members.len() {
                return Err(NetworkError::InvalidTree(format!("cluster {} edge count", c.id)));
            }
            for &m in c.members.iter().chain(std::iter::once(&c.head)) {
                if !seen.insert(m) {
                    return Err(NetworkError::InvalidTree(format!("node {m} in two clusters")));
                }
            }
            for (parent, child) in c.edges() {
                if pos(parent)?.distance(&pos(child)?) > range {
                    return Err(NetworkError::InvalidTree(format!("edge {parent}->{child} exceeds range")));
                }
            }
            for &m in &c.members {
                let path = c.path_to_head(m);
                if path.len() > c.members.len() + 1 || *path.last().unwrap() != c.head {
                    return Err(NetworkError::InvalidTree(format!("node {m} does not reach its head")));
                }
            }
        }
        Ok(())
    }

    /// Edge list plus head and isolated-node listings.
    pub fn dump(&self, nodes: &[NodeState]) -> String {
        let pos: BTreeMap<NodeId, Position> = nodes.iter().map(|n| (n.id, n.position)).collect();
        let mut out = String::from("# cluster_id,parent_id,child_id,length_m\n");
        for c in &self.clusters {
            for (p, ch) in c.edges() {
                let len = pos[&p].distance(&pos[&ch]);
                let _ = writeln!(out, "{},{},{},{:.6}", c.id, p, ch, len);
            }
        }
        for c in &self.clusters {
            let _ = writeln!(out, "head,{},{}", c.id, c.head);
        }
        for id in &self.isolated {
            let _ = writeln!(out, "isolated,{id}");
        }
        out
    }
}

fn nearest_head(heads: &[(NodeId, Position)], at: &Position) -> usize {
    let mut best = 0;
    for (i, (id, p)) in heads.iter().enumerate().skip(1) {
        let (bid, bp) = &heads[best];
        match p.distance(at).total_cmp(&bp.distance(at)) {
            Ordering::Less => best = i,
            Ordering::Equal if id < bid => best = i,
            _ => {}
        }
    }
    best
}

/// Assigns members to their nearest head, then grows a BFS tree inside each cluster.
///
/// A member's parent is the in-range neighbour one hop closer to the head,
/// preferring the one geometrically nearest the head, then the lower id.
/// Members the BFS cannot reach are listed in [`ClusterTopology::isolated`].
pub fn build_aggregation_tree(heads: &[NodeId], nodes: &[NodeState], range: f64) -> Result<ClusterTopology, NetworkError> {
    if heads.is_empty() {
        return Err(NetworkError::ConfigInvalid("at least one cluster head is required".into()));
    }
    let bs = base_station(nodes).ok_or_else(|| NetworkError::ConfigInvalid("no base station".into()))?;
    let by_id: BTreeMap<NodeId, &NodeState> = nodes.iter().map(|n| (n.id, n)).collect();
    let mut sorted_heads = heads.to_vec();
    sorted_heads.sort();
    sorted_heads.dedup();
    let head_pos: Vec<(NodeId, Position)> = sorted_heads
        .iter()
        .map(|h| {
            by_id
                .get(h)
                .filter(|n| n.alive && !n.is_base_station())
                .map(|n| (*h, n.position))
                .ok_or_else(|| NetworkError::ConfigInvalid(format!("head {h} is not an alive sensor")))
        })
        .collect::<Result<_, _>>()?;

    let mut assigned: Vec<Vec<NodeId>> = vec![Vec::new(); head_pos.len()];
    for n in nodes {
        if !n.alive || n.is_base_station() || sorted_heads.binary_search(&n.id).is_ok() {
            continue;
        }
        assigned[nearest_head(&head_pos, &n.position)].push(n.id);
    }

    let mut clusters = Vec::with_capacity(head_pos.len());
    let mut isolated = BTreeSet::new();
    for (idx, ((head, hpos), members)) in head_pos.iter().zip(assigned).enumerate() {
        let mut depth: BTreeMap<NodeId, u32> = BTreeMap::from([(*head, 0)]);
        let mut parent = BTreeMap::new();
        // BFS level by level so every node's parent is chosen among the full previous level.
        let mut level = vec![*head];
        let mut hop = 0u32;
        while !level.is_empty() {
            hop += 1;
            let mut next = Vec::new();
            for &m in &members {
                if depth.contains_key(&m) {
                    continue;
                }
                let mp = by_id[&m].position;
                let best = level
                    .iter()
                    .filter(|&&u| by_id[&u].position.distance(&mp) <= range)
                    .min_by(|&&a, &&b| {
                        let da = by_id[&a].position.distance(hpos);
                        let db = by_id[&b].position.distance(hpos);
                        da.total_cmp(&db).then(a.cmp(&b))
                    });
                if let Some(&p) = best {
                    parent.insert(m, p);
                    next.push(m);
                }
            }
            for &m in &next {
                depth.insert(m, hop);
            }
            level = next;
        }
        let reached: BTreeSet<NodeId> = parent.keys().copied().collect();
        isolated.extend(members.iter().filter(|m| !reached.contains(m)));
        clusters.push(Cluster {
            id: ClusterId(idx as u32),
            head: *head,
            members: reached,
            parent,
            depth,
        });
    }
    Ok(ClusterTopology {
        clusters,
        base_station: bs.id,
        isolated,
    })
}

/// Writes roles and tree links from `topo` into the node records.
pub fn apply_topology(nodes: &mut [NodeState], topo: &ClusterTopology) {
    for n in nodes.iter_mut() {
        if n.is_base_station() {
            continue;
        }
        n.role = Role::Member;
        n.parent = None;
        n.children.clear();
    }
    for c in &topo.clusters {
        for n in nodes.iter_mut() {
            if n.id == c.head {
                n.role = Role::ClusterHead;
            }
            if let Some(&p) = c.parent.get(&n.id) {
                n.parent = Some(p);
            }
            if c.contains(n.id) {
                n.children.extend(c.children(n.id));
            }
        }
    }
}
