//! Static parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs, sigmoid and softmax as 4 per
//! element and global average pooling as one add per input element. Pooling,
//! ReLU, gating and the other elementwise glue are free. The counts equal
//! what an instrumented forward pass charges to each [`CostKind`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::AttentionMode;
use crate::model::Model;
use crate::params::ParamClass;
use crate::tape::CostKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComponentCost {
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    /// `[N, T, H, W]` the FLOPs were counted for.
    pub input: [usize; 4],
    pub components: BTreeMap<&'static str, ComponentCost>,
    pub total_params: u64,
    pub total_flops: u64,
    pub attention_param_ratio: f64,
    pub attention_flops_ratio: f64,
}

pub fn component_name(kind: CostKind) -> &'static str {
    match kind {
        CostKind::Conv => "conv_blocks",
        CostKind::Adapter => "adapters",
        CostKind::Attention => "attention_heads",
        CostKind::AttentionPooling => "attention_pooling",
        CostKind::Classifier => "classifier",
        CostKind::Other => "other",
    }
}

fn class_component(class: ParamClass) -> CostKind {
    match class {
        ParamClass::Conv => CostKind::Conv,
        ParamClass::Adapter | ParamClass::Connection => CostKind::Adapter,
        ParamClass::Classifier => CostKind::Classifier,
        ParamClass::AttentionHead
        | ParamClass::AttentionProjector
        | ParamClass::PeerLogits
        | ParamClass::StaticLogits => CostKind::Attention,
    }
}

/// Learnable scalars per component.
pub fn count_params(model: &Model) -> BTreeMap<CostKind, u64> {
    let mut out: BTreeMap<CostKind, u64> = CostKind::ALL.iter().map(|&k| (k, 0)).collect();
    for (_, p) in model.params.iter() {
        *out.entry(class_component(p.class)).or_default() += p.value.len() as u64;
    }
    out
}

/// FLOPs per component for a batch of `batch` clips of `frames` frames at
/// the model's configured spatial size.
pub fn count_flops(model: &Model, batch: usize, frames: usize) -> BTreeMap<CostKind, u64> {
    let (n, t) = (batch as u64, frames as u64);
    let mut out: BTreeMap<CostKind, u64> = CostKind::ALL.iter().map(|&k| (k, 0)).collect();
    let mut add = |k: CostKind, v: u64| *out.get_mut(&k).expect("all kinds present") += v;

    for (&id, block) in &model.blocks {
        let (h, w) = model.extents[&id].input;
        add(CostKind::Conv, n * block.flops(frames, h, w));
    }
    for e in &model.edges {
        if let Some(a) = &e.adapter {
            let (h, w) = model.extents[&e.dst].input;
            add(CostKind::Adapter, n * a.conv.flops(frames, h, w));
        }
    }

    let mut pooled = BTreeSet::new();
    let linear = |ci: usize, co: usize| 2 * n * t * (ci * co) as u64;
    for (s, slot) in model.slots.iter().enumerate() {
        match slot.mode {
            AttentionMode::None | AttentionMode::Static => continue,
            AttentionMode::SelfAttention => {
                for e in model.edges.iter().filter(|e| e.slot == Some(s)) {
                    pooled.insert(e.src);
                }
            }
            AttentionMode::Peer(k) => {
                pooled.insert(k);
            }
            AttentionMode::OneShot => {
                pooled.extend(slot.peers.iter().copied());
                for p in &slot.projectors {
                    add(CostKind::Attention, linear(p.in_features, p.out_features));
                }
            }
        }
        let head = slot.head.as_ref().expect("mode with head");
        add(CostKind::Attention, linear(head.in_features, head.out_features) + 4 * n * t * head.out_features as u64);
    }
    for k in pooled {
        let (h, w) = model.extents[&k].output;
        add(CostKind::AttentionPooling, n * t * (h * w * model.blocks[&k].spec.channels) as u64);
    }

    let last = model.final_block();
    let (h, w) = model.extents[&last].output;
    let c = model.blocks[&last].spec.channels;
    add(CostKind::Classifier, n * t * (h * w * c) as u64 + linear(c, model.num_classes));
    out
}

fn is_attention(kind: CostKind) -> bool {
    matches!(kind, CostKind::Attention | CostKind::AttentionPooling)
}

pub fn cost_report(model: &Model, batch: usize, frames: usize) -> CostReport {
    let params = count_params(model);
    let flops = count_flops(model, batch, frames);
    let mut components = BTreeMap::new();
    for &k in &CostKind::ALL {
        if k == CostKind::Other {
            continue;
        }
        components.insert(component_name(k), ComponentCost { params: params[&k], flops: flops[&k] });
    }
    let total_params: u64 = params.values().sum();
    let total_flops: u64 = flops.values().sum();
    let att_params: u64 = params.iter().filter(|(k, _)| is_attention(**k)).map(|(_, v)| v).sum();
    let att_flops: u64 = flops.iter().filter(|(k, _)| is_attention(**k)).map(|(_, v)| v).sum();
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CostReport {
        input: [batch, frames, model.config.height, model.config.width],
        components,
        total_params,
        total_flops,
        attention_param_ratio: ratio(att_params, total_params),
        attention_flops_ratio: ratio(att_flops, total_flops),
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20} {:>14} {:>18}\n", "component", "params", "flops");
        for (name, c) in &self.components {
            let _ = writeln!(out, "{name:<20} {:>14} {:>18}", c.params, c.flops);
        }
        let _ = writeln!(out, "{:<20} {:>14} {:>18}", "total", self.total_params, self.total_flops);
        let _ = writeln!(
            out,
            "attention share: {:.4}% of params, {:.4}% of flops",
            100.0 * self.attention_param_ratio,
            100.0 * self.attention_flops_ratio
        );
        out
    }
}

/// Relative parameter and FLOP increase of `with` over `without`; the two
/// models must share blocks, edges and widths.
pub fn attention_overhead(with: &Model, without: &Model, batch: usize, frames: usize) -> Result<(f64, f64)> {
    let shape = |m: &Model| {
        let edges: Vec<(usize, usize)> = m.edges.iter().map(|e| (e.src, e.dst)).collect();
        (m.structure.blocks.clone(), edges, m.config.height, m.config.width, m.num_classes)
    };
    if shape(with) != shape(without) {
        return Err(Error::Incomparable("models differ in blocks, edges, input size or classes".into()));
    }
    let a = cost_report(with, batch, frames);
    let b = cost_report(without, batch, frames);
    let rel = |x: u64, y: u64| (x as f64 - y as f64) / y as f64;
    Ok((rel(a.total_params, b.total_params), rel(a.total_flops, b.total_flops)))
}
