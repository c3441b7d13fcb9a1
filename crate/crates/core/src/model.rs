//! Architecture tables and assembled multi-stream models.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{fuse_inputs, ATTENTION_INIT_LOGIT, head_init, projector_init, AttentionSlot, Linear};
use crate::blocks::{make_conv_block, make_input_block, Block, BlockKind, BlockSpec, ConvLayer};
use crate::error::{Error, Result};
use crate::graph::{AttentionBinding, AttentionMode, ConnectionEdge, ConnectivityGraph};
use crate::params::{he_normal, stream_rng, ParamClass, ParamId, ParamStore, Ratio};
use crate::tape::{ConvGeometry, CostKind, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// The shipped 15-block, four-level architecture.
pub const DEFAULT_TABLE: &str = include_str!("../../../tables/assemblenet_pp.json");

/// Smallest width any scaled block may have.
pub const MIN_WIDTH: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub index: usize,
    pub level: usize,
    pub inputs: Vec<usize>,
    pub channels: usize,
    pub dilation: usize,
    pub stride: usize,
    pub kind: BlockKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureTable {
    pub blocks: Vec<TableRow>,
    pub num_classes: usize,
}

pub fn parse_architecture(text: &str) -> Result<ArchitectureTable> {
    let table: ArchitectureTable = serde_json::from_str(text)?;
    table.validate()?;
    Ok(table)
}

impl ArchitectureTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_architecture(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (pos, row) in self.blocks.iter().enumerate() {
            let err = |detail: String| Err(Error::Table { row: pos, detail });
            if row.index != pos {
                return err(format!("index {} where {pos} was expected", row.index));
            }
            if row.channels == 0 || row.stride == 0 {
                return err("channels and stride must be positive".into());
            }
            if ![1, 2, 4, 8].contains(&row.dilation) {
                return err(format!("dilation {} not in {{1, 2, 4, 8}}", row.dilation));
            }
            if row.kind.is_input() != (row.level == 0) {
                return err(format!("{} block at level {}", row.kind.name(), row.level));
            }
            if row.kind.is_input() && !row.inputs.is_empty() {
                return err("input blocks take no block connections".into());
            }
            if !row.kind.is_input() && row.inputs.is_empty() {
                return err("conv block without input connections".into());
            }
            let mut seen = HashSet::new();
            for &j in &row.inputs {
                let Some(src) = self.blocks.get(j) else {
                    return err(format!("input {j} does not exist"));
                };
                if src.level >= row.level {
                    return err(format!(
                        "input {j} at level {} is not below level {}",
                        src.level, row.level
                    ));
                }
                if !seen.insert(j) {
                    return err(format!("input {j} listed twice"));
                }
            }
        }
        Ok(())
    }

    pub fn edge_count(&self) -> usize {
        self.blocks.iter().map(|r| r.inputs.len()).sum()
    }

    /// Block specs with widths scaled by the config.
    pub fn block_specs(&self, config: &ModelConfig) -> Vec<BlockSpec> {
        self.blocks
            .iter()
            .map(|r| BlockSpec {
                index: r.index,
                level: r.level,
                channels: match r.kind {
                    BlockKind::Object => config.object_channels.unwrap_or(r.channels),
                    _ => config.width_scale.round(r.channels).max(MIN_WIDTH),
                },
                temporal_dilation: r.dilation,
                spatial_stride: r.stride,
                kind: r.kind,
                repeats: 0,
            })
            .collect()
    }

    /// The table's connectivity with neutral gates and the config's default
    /// attention on every edge.
    pub fn graph(&self, config: &ModelConfig) -> Result<ConnectivityGraph> {
        let blocks = self.block_specs(config);
        let mut edges = Vec::new();
        for row in &self.blocks {
            for &j in &row.inputs {
                edges.push(ConnectionEdge::new(j, row.index));
            }
        }
        let mut graph = ConnectivityGraph { blocks, edges };
        apply_attention(&mut graph, config.attention)?;
        graph.validate()?;
        Ok(graph)
    }
}

/// Binds every edge into block `i` to peer attention from the highest-index
/// block among `i`'s table inputs, the deepest stream feeding it.
pub fn apply_table_peers(graph: &mut ConnectivityGraph, table: &ArchitectureTable) -> Result<()> {
    for e in &mut graph.edges {
        let row = table.blocks.get(e.dst).ok_or_else(|| Error::Graph(format!("block {} not in table", e.dst)))?;
        let peer = *row.inputs.iter().max().ok_or_else(|| Error::Graph(format!("block {} has no table inputs", e.dst)))?;
        e.attention = AttentionBinding::with_mode(AttentionMode::Peer(peer));
    }
    graph.validate()
}

/// Sets every edge's binding to `mode`; one-shot bindings start with zero
/// mixing logits.
pub fn apply_attention(graph: &mut ConnectivityGraph, mode: AttentionMode) -> Result<()> {
    for i in 0..graph.edges.len() {
        let dst = graph.edges[i].dst;
        let h = if mode == AttentionMode::OneShot { vec![0.0; graph.peer_set(dst).len()] } else { Vec::new() };
        graph.edges[i].attention = AttentionBinding { mode, h };
    }
    graph.validate()
}

/// Whether attention state is kept per edge or shared by all edges into a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionSharing {
    #[default]
    PerEdge,
    PerDestination,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width_scale: Ratio,
    pub depth_scale: Ratio,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    /// Overrides the table's class count.
    pub num_classes: Option<usize>,
    /// Overrides the object block width (the one-hot class count).
    pub object_channels: Option<usize>,
    pub attention: AttentionMode,
    pub sharing: AttentionSharing,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_scale: Ratio { num: 1, den: 8 },
            depth_scale: Ratio::ONE,
            frames: 4,
            height: 16,
            width: 16,
            batch: 4,
            num_classes: None,
            object_channels: None,
            attention: AttentionMode::None,
            sharing: AttentionSharing::PerEdge,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.frames, self.height, self.width, self.batch];
        if dims.contains(&0) || self.num_classes == Some(0) || self.object_channels == Some(0) {
            return Err(Error::Config("frames, height, width, batch and widths must be positive".into()));
        }
        if let AttentionMode::Peer(_) = self.attention {
            return Err(Error::Config("peer attention is bound per edge, not as a global default".into()));
        }
        Ok(())
    }
}

/// Raw modality tensors, each `(N, T, H, W, C)`.
#[derive(Clone, Debug, Default)]
pub struct ModalityInputs {
    pub rgb: Option<Tensor>,
    pub flow: Option<Tensor>,
    pub object: Option<Tensor>,
}

impl ModalityInputs {
    fn get(&self, kind: BlockKind) -> Result<&Tensor> {
        let (slot, name) = match kind {
            BlockKind::Rgb => (&self.rgb, "rgb"),
            BlockKind::Flow => (&self.flow, "flow"),
            BlockKind::Object => (&self.object, "object"),
            BlockKind::Conv => unreachable!("conv blocks take no modality"),
        };
        slot.as_ref().ok_or(Error::MissingModality(name))
    }
}

/// Spatial pooling plus 1x1 conv that brings a source output to the
/// destination's input resolution and width.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub pool_to: Option<(usize, usize)>,
    pub conv: ConvLayer,
}

/// Applies an edge's adapter; an absent adapter is the identity.
pub fn resolution_match(tape: &mut Tape, store: &ParamStore, adapter: Option<&Adapter>, x: Var) -> Result<Var> {
    let Some(adapter) = adapter else { return Ok(x) };
    let prev = tape.set_cost_kind(Some(CostKind::Adapter));
    let out = (|| {
        let pooled = match adapter.pool_to {
            Some((h, w)) => tape.avg_pool_to(x, h, w)?,
            None => x,
        };
        adapter.conv.forward(tape, store, pooled)
    })();
    tape.set_cost_kind(prev);
    out
}

#[derive(Clone, Debug)]
pub struct EdgeParams {
    pub src: usize,
    pub dst: usize,
    pub weight: ParamId,
    pub adapter: Option<Adapter>,
    pub slot: Option<usize>,
}

/// Input and output spatial extent of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent {
    pub input: (usize, usize),
    pub output: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub structure: ConnectivityGraph,
    pub order: Vec<usize>,
    pub blocks: BTreeMap<usize, Block>,
    pub extents: BTreeMap<usize, Extent>,
    pub edges: Vec<EdgeParams>,
    pub slots: Vec<AttentionSlot>,
    pub classifier: Linear,
    pub params: ParamStore,
}

/// Builds the model described by `table` under `config`.
pub fn build_model(table: &ArchitectureTable, config: &ModelConfig) -> Result<Model> {
    let graph = table.graph(config)?;
    Model::from_graph(graph, config, config.num_classes.unwrap_or(table.num_classes), None)
}

fn slot_name(sharing: AttentionSharing, src: usize, dst: usize) -> String {
    match sharing {
        AttentionSharing::PerEdge => format!("att{src}_{dst}"),
        AttentionSharing::PerDestination => format!("att{dst}"),
    }
}

impl Model {
    /// Builds a model for `graph`. Parameters whose name and shape match an
    /// entry of `carry` take that value instead of a fresh initialisation.
    pub fn from_graph(
        graph: ConnectivityGraph,
        config: &ModelConfig,
        num_classes: usize,
        carry: Option<&ParamStore>,
    ) -> Result<Model> {
        config.validate()?;
        graph.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let order = graph.topo_order()?;
        let last = *order.last().ok_or_else(|| Error::Graph("empty graph".into()))?;
        let mut params = ParamStore::new();
        let mut blocks = BTreeMap::new();
        let mut extents: BTreeMap<usize, Extent> = BTreeMap::new();
        let object_channels = |spec: &BlockSpec| config.object_channels.unwrap_or(spec.channels);

        for &id in &order {
            let spec = graph.block(id).expect("ordered block exists");
            let (block, input) = if spec.kind.is_input() {
                let raw = spec.kind.raw_channels(object_channels(spec)).expect("input kind");
                (make_input_block(spec, raw, &mut params, config.seed)?, (config.height, config.width))
            } else {
                let below = extents
                    .iter()
                    .filter(|(k, _)| graph.level(**k).is_some_and(|l| l < spec.level))
                    .map(|(_, e)| e.output);
                let input = below
                    .reduce(|a, b| (a.0.min(b.0), a.1.min(b.1)))
                    .ok_or_else(|| Error::Graph(format!("conv block {id} has nothing below it")))?;
                (make_conv_block(spec, spec.channels, config.depth_scale, &mut params, config.seed)?, input)
            };
            let output = (spec.output_extent(input.0), spec.output_extent(input.1));
            extents.insert(id, Extent { input, output });
            blocks.insert(id, block);
        }

        let mut edges = Vec::with_capacity(graph.edges.len());
        for e in &graph.edges {
            let (src, dst) = (&blocks[&e.src], &blocks[&e.dst]);
            let (from, to) = (extents[&e.src].output, extents[&e.dst].input);
            if from.0 < to.0 || from.1 < to.1 {
                return Err(Error::Upsample { from, to });
            }
            let src_width = src.spec.channels;
            let dst_width = dst.in_channels;
            let adapter = (from != to || src_width != dst_width).then(|| {
                let mut rng = stream_rng(config.seed, &[0xada, e.src as u64, e.dst as u64]);
                Adapter {
                    pool_to: (from != to).then_some(to),
                    conv: ConvLayer::new(
                        &mut params,
                        &format!("edge{}_{}.adapter", e.src, e.dst),
                        ParamClass::Adapter,
                        [1, 1, 1],
                        src_width,
                        dst_width,
                        ConvGeometry::UNIT,
                        1.0,
                        &mut rng,
                    ),
                }
            });
            let weight =
                params.add(format!("edge{}_{}.w", e.src, e.dst), ParamClass::Connection, Tensor::scalar(e.weight));
            edges.push(EdgeParams { src: e.src, dst: e.dst, weight, adapter, slot: None });
        }

        let mut slots: Vec<AttentionSlot> = Vec::new();
        let mut slot_by_name: HashMap<String, usize> = HashMap::new();
        for (idx, e) in graph.edges.iter().enumerate() {
            let mode = e.attention.mode;
            if mode == AttentionMode::None {
                continue;
            }
            if config.sharing == AttentionSharing::PerDestination && mode == AttentionMode::SelfAttention {
                return Err(Error::Config("self-attention cannot be shared across a block's inputs".into()));
            }
            let name = slot_name(config.sharing, e.src, e.dst);
            if let Some(&s) = slot_by_name.get(&name) {
                let existing = &slots[s];
                if existing.mode != mode {
                    return Err(Error::Attention {
                        src: e.src,
                        dst: e.dst,
                        detail: format!("shared slot is {} but edge is {}", existing.mode.label(), mode.label()),
                    });
                }
                edges[idx].slot = Some(s);
                continue;
            }
            let slot = build_slot(&graph, &blocks, e, &name, config, &mut params)?;
            slot_by_name.insert(name, slots.len());
            edges[idx].slot = Some(slots.len());
            slots.push(slot);
        }

        let final_width = blocks[&last].spec.channels;
        let mut rng = stream_rng(config.seed, &[0xc1a5]);
        let classifier = Linear::new(
            &mut params,
            "classifier",
            ParamClass::Classifier,
            he_normal(Shape::new(1, 1, 1, final_width, num_classes), final_width, 1.0 / 2f64.sqrt(), &mut rng),
            Tensor::zeros(Shape::vector(num_classes)),
        );

        if let Some(carry) = carry {
            copy_matching(&mut params, carry);
        }
        let mut structure = graph;
        for b in &mut structure.blocks {
            b.repeats = match &blocks[&b.index].body {
                crate::blocks::BlockBody::Conv { modules } => modules.len(),
                _ => 0,
            };
        }
        Ok(Model {
            config: config.clone(),
            num_classes,
            structure,
            order,
            blocks,
            extents,
            edges,
            slots,
            classifier,
            params,
        })
    }

    pub fn final_block(&self) -> usize {
        *self.order.last().expect("non-empty model")
    }

    /// The connectivity graph with current gate logits and mixing weights.
    pub fn graph(&self) -> ConnectivityGraph {
        let mut g = self.structure.clone();
        for (e, p) in g.edges.iter_mut().zip(&self.edges) {
            e.weight = self.params.value(p.weight).item();
            if let Some(s) = p.slot {
                if let Some(h) = self.slots[s].mix_logits {
                    e.attention.h = self.params.value(h).data().to_vec();
                }
            }
        }
        g
    }

    /// Forward pass to per-video logits `(N, 1, 1, 1, classes)`: per-frame
    /// logits max-pooled over time.
    pub fn forward(&self, tape: &mut Tape, inputs: &ModalityInputs) -> Result<Var> {
        let store = &self.params;
        let mut outputs: HashMap<usize, Var> = HashMap::new();
        let mut pooled: HashMap<usize, Var> = HashMap::new();
        let mut leaves: HashMap<BlockKind, Var> = HashMap::new();
        // shared slots evaluate once per pass; self-attention is never shared
        let mut slot_cache: HashMap<usize, Option<Var>> = HashMap::new();
        for &id in &self.order {
            let block = &self.blocks[&id];
            let x = if block.spec.kind.is_input() {
                match leaves.get(&block.spec.kind) {
                    Some(v) => *v,
                    None => {
                        let t = inputs.get(block.spec.kind)?;
                        let s = t.shape();
                        if (s.h(), s.w()) != (self.config.height, self.config.width) {
                            return Err(Error::Shape {
                                op: "model_forward",
                                detail: format!(
                                    "{} input {s:?} but the model is built for {}x{}",
                                    block.spec.kind.name(),
                                    self.config.height,
                                    self.config.width
                                ),
                            });
                        }
                        let v = tape.leaf(t.clone())?;
                        leaves.insert(block.spec.kind, v);
                        v
                    }
                }
            } else {
                let mut terms = Vec::new();
                for e in self.edges.iter().filter(|e| e.dst == id) {
                    let src = outputs[&e.src];
                    let adapted = resolution_match(tape, store, e.adapter.as_ref(), src)?;
                    let w = tape.param(e.weight.index(), store.value(e.weight))?;
                    let a = match e.slot {
                        Some(s) => match slot_cache.get(&s) {
                            Some(a) => *a,
                            None => {
                                let a = self.slots[s].evaluate(tape, store, e.src, &outputs, &mut pooled)?;
                                slot_cache.insert(s, a);
                                a
                            }
                        },
                        None => None,
                    };
                    terms.push((adapted, w, a));
                }
                if terms.is_empty() {
                    return Err(Error::Graph(format!("block {id} has no incoming connections")));
                }
                fuse_inputs(tape, &terms)?
            };
            let out = block.forward(tape, store, x)?;
            outputs.insert(id, out);
        }
        let prev = tape.set_cost_kind(Some(CostKind::Classifier));
        let logits = (|| {
            let pooled = tape.gap_spatial(outputs[&self.final_block()])?;
            self.classifier.forward(tape, store, pooled)
        })();
        tape.set_cost_kind(prev);
        tape.temporal_max(logits?)
    }

    /// Convenience forward without gradients; returns the logits tensor.
    pub fn logits(&self, inputs: &ModalityInputs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, inputs)?;
        Ok(tape.value(v).clone())
    }

    /// Drops weak connections; see [`ConnectivityGraph::prune_connections`].
    pub fn prune_connections(&self, threshold: f64) -> Result<Model> {
        let graph = self.graph().prune_connections(threshold);
        Model::from_graph(graph, &self.config, self.num_classes, Some(&self.params))
    }

    /// Replaces each one-shot binding by its argmax peer. The selected
    /// peer's projector is folded into the head, so the result is a single
    /// fully connected layer from the peer's native width.
    pub fn prune_attention(&self) -> Result<Model> {
        let graph = self.graph().prune_attention();
        let mut folded: Vec<(String, Tensor, Tensor)> = Vec::new();
        let mut dropped: HashSet<ParamId> = HashSet::new();
        for (edge, new_edge) in self.edges.iter().zip(&graph.edges) {
            let Some(s) = edge.slot else { continue };
            let slot = &self.slots[s];
            let AttentionMode::Peer(k) = new_edge.attention.mode else { continue };
            if slot.mode != AttentionMode::OneShot || folded.iter().any(|(n, ..)| *n == slot.name) {
                continue;
            }
            let p = slot.peers.iter().position(|&q| q == k).expect("argmax peer is in the peer set");
            let (w, b) = fold_linear(&self.params, &slot.projectors[p], slot.head.as_ref().expect("one-shot head"));
            dropped.extend(slot.param_ids());
            folded.push((slot.name.clone(), w, b));
        }
        let mut carry = ParamStore::new();
        for (id, p) in self.params.iter() {
            if !dropped.contains(&id) {
                carry.add(p.name.clone(), p.class, p.value.clone());
            }
        }
        for (name, w, b) in folded {
            carry.add(format!("{name}.head.w"), ParamClass::AttentionHead, w);
            carry.add(format!("{name}.head.b"), ParamClass::AttentionHead, b);
        }
        Model::from_graph(graph, &self.config, self.num_classes, Some(&carry))
    }

    /// Writes `<stem>.bin`, `<stem>.json` (parameter manifest) and
    /// `<stem>.model.json` (config and graph).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.params.save_checkpoint(dir, stem)?;
        let meta = SavedModel { config: self.config.clone(), num_classes: self.num_classes, graph: self.graph() };
        let path = dir.join(format!("{stem}.model.json"));
        let text = serde_json::to_string_pretty(&meta).expect("model metadata serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Model> {
        let path = dir.join(format!("{stem}.model.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: SavedModel =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut model = Model::from_graph(meta.graph, &meta.config, meta.num_classes, None)?;
        model.params.load_checkpoint(dir, stem)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: ModelConfig,
    num_classes: usize,
    graph: ConnectivityGraph,
}

fn build_slot(
    graph: &ConnectivityGraph,
    blocks: &BTreeMap<usize, Block>,
    edge: &ConnectionEdge,
    name: &str,
    config: &ModelConfig,
    params: &mut ParamStore,
) -> Result<AttentionSlot> {
    let dst = &blocks[&edge.dst];
    let width = dst.in_channels;
    let mut rng = stream_rng(config.seed, &[0xa77, edge.dst as u64, edge.src as u64]);
    let mut slot = AttentionSlot {
        name: name.to_string(),
        dst: edge.dst,
        mode: edge.attention.mode,
        width,
        head: None,
        static_logits: None,
        peers: Vec::new(),
        projectors: Vec::new(),
        mix_logits: None,
    };
    let head = |params: &mut ParamStore, from: usize, rng: &mut _| {
        let (w, b) = head_init(from, width, rng);
        Linear::new(params, &format!("{name}.head"), ParamClass::AttentionHead, w, b)
    };
    match edge.attention.mode {
        AttentionMode::None => {}
        AttentionMode::Static => {
            slot.static_logits =
                Some(params.add(format!("{name}.static"), ParamClass::StaticLogits, Tensor::full(Shape::vector(width), ATTENTION_INIT_LOGIT)));
        }
        AttentionMode::SelfAttention => {
            slot.head = Some(head(params, blocks[&edge.src].spec.channels, &mut rng));
        }
        AttentionMode::Peer(k) => {
            slot.head = Some(head(params, blocks[&k].spec.channels, &mut rng));
        }
        AttentionMode::OneShot => {
            let peers = graph.peer_set(edge.dst).0;
            if peers.is_empty() {
                return Err(Error::Attention { src: edge.src, dst: edge.dst, detail: "no peers".into() });
            }
            for &p in &peers {
                let (w, b) = projector_init(blocks[&p].spec.channels, width, &mut rng);
                slot.projectors.push(Linear::new(params, &format!("{name}.proj{p}"), ParamClass::AttentionProjector, w, b));
            }
            slot.head = Some(head(params, width, &mut rng));
            slot.mix_logits = Some(params.add(
                format!("{name}.h"),
                ParamClass::PeerLogits,
                Tensor::vector(&edge.attention.h),
            ));
            slot.peers = peers;
        }
    }
    Ok(slot)
}

/// Composes `head(proj(x))` into one linear map.
fn fold_linear(store: &ParamStore, proj: &Linear, head: &Linear) -> (Tensor, Tensor) {
    let (pw, pb) = (store.value(proj.weight).data(), store.value(proj.bias).data());
    let (hw, hb) = (store.value(head.weight).data(), store.value(head.bias).data());
    let (ci, mid, co) = (proj.in_features, proj.out_features, head.out_features);
    let mut w = vec![0.0; ci * co];
    for r in 0..ci {
        for m in 0..mid {
            let p = pw[r * mid + m];
            for c in 0..co {
                w[r * co + c] += p * hw[m * co + c];
            }
        }
    }
    let mut b = hb.to_vec();
    for m in 0..mid {
        for c in 0..co {
            b[c] += pb[m] * hw[m * co + c];
        }
    }
    (
        Tensor::from_vec(Shape::new(1, 1, 1, ci, co), w).expect("folded weight shape"),
        Tensor::vector(&b),
    )
}

fn copy_matching(params: &mut ParamStore, carry: &ParamStore) {
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.get(id).name.clone();
        if let Some(src) = carry.by_name(&name) {
            if src.value.shape() == params.value(id).shape() {
                *params.value_mut(id) = src.value.clone();
            }
        }
    }
}
