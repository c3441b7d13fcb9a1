//! Level-organised block DAG: candidate edges, peer sets, pruning and DOT
//! export.
//!
//! An edge `(j, i)` is legal only when `L(j) < L(i)`, so every graph is
//! acyclic by construction. The peers of an edge are all blocks strictly
//! below the destination's level, independent of the source.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec};
use crate::error::{Error, Result};

/// How the attention on one edge is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    None,
    Static,
    #[serde(rename = "self")]
    SelfAttention,
    Peer(usize),
    OneShot,
}

impl AttentionMode {
    pub fn label(self) -> String {
        match self {
            AttentionMode::None => "none".into(),
            AttentionMode::Static => "static".into(),
            AttentionMode::SelfAttention => "self".into(),
            AttentionMode::Peer(k) => format!("peer({k})"),
            AttentionMode::OneShot => "oneshot".into(),
        }
    }

    pub fn has_head(self) -> bool {
        matches!(self, AttentionMode::SelfAttention | AttentionMode::Peer(_) | AttentionMode::OneShot)
    }
}

/// Structural view of an edge's attention: its mode and, for one-shot
/// search, the peer ordering and current mixing logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBinding {
    pub mode: AttentionMode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub h: Vec<f64>,
}

impl AttentionBinding {
    pub fn none() -> Self {
        AttentionBinding { mode: AttentionMode::None, h: Vec::new() }
    }

    pub fn with_mode(mode: AttentionMode) -> Self {
        AttentionBinding { mode, h: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionEdge {
    pub src: usize,
    pub dst: usize,
    /// Raw connection logit; the edge gate is `sigmoid(weight)`.
    pub weight: f64,
    pub attention: AttentionBinding,
}

impl ConnectionEdge {
    pub fn new(src: usize, dst: usize) -> Self {
        ConnectionEdge { src, dst, weight: 0.0, attention: AttentionBinding::none() }
    }

    pub fn gate(&self) -> f64 {
        sigmoid(self.weight)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sorted indices of the legal attention sources for an edge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeerSet(pub Vec<usize>);

impl PeerSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn position(&self, k: usize) -> Option<usize> {
        self.0.binary_search(&k).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityGraph {
    pub blocks: Vec<BlockSpec>,
    pub edges: Vec<ConnectionEdge>,
}

fn level_map(blocks: &[BlockSpec]) -> BTreeMap<usize, usize> {
    blocks.iter().map(|b| (b.index, b.level)).collect()
}

/// All `(j, i)` with `L(j) < L(i)`, ordered by destination then source.
pub fn valid_edges(blocks: &[BlockSpec]) -> Vec<(usize, usize)> {
    let levels = level_map(blocks);
    let mut out = Vec::new();
    for (&i, &li) in &levels {
        for (&j, &lj) in &levels {
            if lj < li {
                out.push((j, i));
            }
        }
    }
    out
}

/// Peers of an edge into `dst`: every block strictly below `dst`'s level.
pub fn peer_set(dst: usize, blocks: &[BlockSpec]) -> PeerSet {
    let levels = level_map(blocks);
    let Some(&li) = levels.get(&dst) else { return PeerSet(Vec::new()) };
    PeerSet(levels.iter().filter(|(_, &l)| l < li).map(|(&p, _)| p).collect())
}

impl ConnectivityGraph {
    pub fn new(blocks: Vec<BlockSpec>, edges: Vec<ConnectionEdge>) -> Result<Self> {
        let graph = ConnectivityGraph { blocks, edges };
        graph.validate()?;
        Ok(graph)
    }

    pub fn block(&self, index: usize) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.index == index)
    }

    pub fn level(&self, index: usize) -> Option<usize> {
        self.block(index).map(|b| b.level)
    }

    pub fn peer_set(&self, dst: usize) -> PeerSet {
        peer_set(dst, &self.blocks)
    }

    pub fn incoming(&self, dst: usize) -> impl Iterator<Item = &ConnectionEdge> {
        self.edges.iter().filter(move |e| e.dst == dst)
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&ConnectionEdge> {
        self.edges.iter().find(|e| e.src == src && e.dst == dst)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for b in &self.blocks {
            b.validate()?;
            if !seen.insert(b.index) {
                return Err(Error::Graph(format!("duplicate block index {}", b.index)));
            }
        }
        let levels = level_map(&self.blocks);
        let mut pairs = HashSet::new();
        for e in &self.edges {
            let (Some(&lj), Some(&li)) = (levels.get(&e.src), levels.get(&e.dst)) else {
                return Err(Error::Graph(format!("edge {}->{} references a missing block", e.src, e.dst)));
            };
            if lj >= li {
                return Err(Error::Graph(format!(
                    "edge {}->{} violates the level order ({lj} >= {li})",
                    e.src, e.dst
                )));
            }
            if !pairs.insert((e.src, e.dst)) {
                return Err(Error::Graph(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
            let peers = self.peer_set(e.dst);
            let err = |detail: String| Error::Attention { src: e.src, dst: e.dst, detail };
            match e.attention.mode {
                AttentionMode::Peer(k) if !peers.contains(k) => {
                    return Err(err(format!("peer {k} is not below level {li}")));
                }
                AttentionMode::OneShot if e.attention.h.len() != peers.len() => {
                    return Err(err(format!("{} mixing weights for {} peers", e.attention.h.len(), peers.len())));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Blocks ascending by level, ties by index.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut order: Vec<(usize, usize)> = self.blocks.iter().map(|b| (b.level, b.index)).collect();
        order.sort_unstable();
        let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(p, &(_, i))| (i, p)).collect();
        for e in &self.edges {
            match (position.get(&e.src), position.get(&e.dst)) {
                (Some(a), Some(b)) if a < b && self.level(e.src) < self.level(e.dst) => {}
                _ => return Err(Error::Graph(format!("edge {}->{} cannot be ordered", e.src, e.dst))),
            }
        }
        Ok(order.into_iter().map(|(_, i)| i).collect())
    }

    /// Adds every missing legal edge with a neutral gate and no attention.
    pub fn densify(&self) -> ConnectivityGraph {
        let mut edges = Vec::new();
        for (j, i) in valid_edges(&self.blocks) {
            edges.push(self.edge(j, i).cloned().unwrap_or_else(|| ConnectionEdge::new(j, i)));
        }
        ConnectivityGraph { blocks: self.blocks.clone(), edges }
    }

    /// Drops edges whose gate is below `threshold`, except that every block
    /// with incoming edges keeps at least its strongest one.
    pub fn prune_connections(&self, threshold: f64) -> ConnectivityGraph {
        let mut strongest: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in &self.edges {
            let entry = strongest.entry(e.dst).or_insert((f64::NEG_INFINITY, usize::MAX));
            if e.weight > entry.0 || (e.weight == entry.0 && e.src < entry.1) {
                *entry = (e.weight, e.src);
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| e.gate() >= threshold || strongest[&e.dst].1 == e.src)
            .cloned()
            .collect();
        ConnectivityGraph { blocks: self.blocks.clone(), edges }
    }

    /// Replaces every one-shot binding by a single peer: the argmax of its
    /// mixing logits, ties going to the lowest block index.
    pub fn prune_attention(&self) -> ConnectivityGraph {
        let mut out = self.clone();
        for e in &mut out.edges {
            if e.attention.mode == AttentionMode::OneShot {
                let peers = peer_set(e.dst, &self.blocks);
                let k = argmax_first(&e.attention.h).map(|p| peers.0[p]);
                if let Some(k) = k {
                    e.attention = AttentionBinding::with_mode(AttentionMode::Peer(k));
                }
            }
        }
        out
    }

    /// Per-level channel sums over blocks that carry learned features
    /// (object blocks carry raw one-hot classes and are skipped).
    pub fn level_channel_sums(&self) -> Vec<usize> {
        let top = self.blocks.iter().map(|b| b.level).max().map_or(0, |l| l + 1);
        let mut sums = vec![0; top];
        for b in self.blocks.iter().filter(|b| b.kind != BlockKind::Object) {
            sums[b.level] += b.channels;
        }
        sums
    }

    pub fn to_dot(&self) -> String {
        if self.blocks.is_empty() {
            return "digraph { }\n".to_string();
        }
        let mut s = String::from("digraph {\n  rankdir=BT;\n  node [shape=box];\n");
        let mut blocks: Vec<&BlockSpec> = self.blocks.iter().collect();
        blocks.sort_by_key(|b| (b.level, b.index));
        for b in &blocks {
            let _ = writeln!(
                s,
                "  b{} [label=\"{} {} L{} C{}\"];",
                b.index,
                b.index,
                b.kind.name(),
                b.level,
                b.channels
            );
        }
        for e in &self.edges {
            let object = self.block(e.src).is_some_and(|b| b.kind == BlockKind::Object);
            let color = if object { ", color=blue, penwidth=2" } else { "" };
            let _ = writeln!(s, "  b{} -> b{} [label=\"{:.3}\"{color}];", e.src, e.dst, e.gate());
        }
        for e in &self.edges {
            if let AttentionMode::Peer(k) = e.attention.mode {
                let _ = writeln!(
                    s,
                    "  b{k} -> b{} [style=dashed, color=gray, label=\"attn {}->{}\"];",
                    e.dst, e.src, e.dst
                );
            }
        }
        s.push_str("}\n");
        s
    }

    pub fn export_dot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dot()).map_err(|e| Error::io(path, e))
    }
}

fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Counts `(nodes, solid edges, dashed edges)` in DOT text written by
/// [`ConnectivityGraph::to_dot`].
pub fn dot_counts(text: &str) -> (usize, usize, usize) {
    let (mut nodes, mut solid, mut dashed) = (0, 0, 0);
    for line in text.lines().map(str::trim) {
        if line.contains("->") {
            if line.contains("style=dashed") {
                dashed += 1;
            } else {
                solid += 1;
            }
        } else if line.starts_with('b') && line.contains("[label=") {
            nodes += 1;
        }
    }
    (nodes, solid, dashed)
}
