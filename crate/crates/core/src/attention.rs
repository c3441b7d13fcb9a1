//! Channel-wise attention on block connections.
//!
//! The input of block `i` is `Σ_j sigmoid(w_ji) · (A · x_j)`, where the
//! per-frame channel vector `A = sigmoid(f(GAP(x_k)))` is produced from a
//! source block `k` chosen by the binding mode:
//!
//! * `None`: `A = 1`;
//! * `Static`: `A = sigmoid(logits)`, a learned input-independent vector;
//! * `Self`: `k = j`;
//! * `Peer(k)`: a fixed peer block;
//! * `OneShot`: `GAP(x)` of the softmax(h)-weighted mixture of all peers.
//!
//! Peers have different widths, so for one-shot search every peer's pooled
//! vector is first projected to the destination width `C_i` by its own
//! learned projector. Pooling and projection are linear, so this equals
//! mixing projected peer tensors and pooling afterwards.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::AttentionMode;
use crate::params::{he_normal, ParamClass, ParamId, ParamStore};
use crate::tape::{CostKind, Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Standard deviation of freshly initialised attention head weights.
pub const HEAD_INIT_STD: f64 = 0.01;
/// Initial attention logit. Without normalization layers an attention of
/// 0.5 on every edge shrinks activations level after level, so heads and
/// static logits start close to a pass-through.
pub const ATTENTION_INIT_LOGIT: f64 = 3.0;

/// Fully connected layer over the channel axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, class: ParamClass, weight: Tensor, bias: Tensor) -> Self {
        let (in_features, out_features) = (weight.shape().w(), weight.shape().c());
        let weight = store.add(format!("{name}.w"), class, weight);
        let bias = store.add(format!("{name}.b"), class, bias);
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.weight.index(), store.value(self.weight))?;
        let b = tape.param(self.bias.index(), store.value(self.bias))?;
        tape.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    /// FLOPs over `rows` positions.
    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.in_features * self.out_features) as u64
    }
}

pub fn linear_weight_shape(in_features: usize, out_features: usize) -> Shape {
    Shape::new(1, 1, 1, in_features, out_features)
}

/// A small-init head `C_src -> C_dst` whose output starts near
/// `sigmoid(ATTENTION_INIT_LOGIT)` on every channel.
pub fn head_init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    (
        Tensor::normal(linear_weight_shape(in_features, out_features), HEAD_INIT_STD, rng),
        Tensor::full(Shape::vector(out_features), ATTENTION_INIT_LOGIT),
    )
}

pub fn projector_init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    (
        he_normal(linear_weight_shape(in_features, out_features), in_features, 1.0, rng),
        Tensor::zeros(Shape::vector(out_features)),
    )
}

/// `A = sigmoid(f(GAP(x)))`, one `C_i` vector per frame.
pub fn attention_vector(tape: &mut Tape, store: &ParamStore, head: &Linear, x: Var) -> Result<Var> {
    let pooled = tape.gap_spatial(x)?;
    head_on_pooled(tape, store, head, pooled)
}

fn head_on_pooled(tape: &mut Tape, store: &ParamStore, head: &Linear, pooled: Var) -> Result<Var> {
    let width = tape.shape(pooled).c();
    if width != head.in_features {
        return Err(Error::Shape {
            op: "attention_vector",
            detail: format!("head expects {} channels, input has {width}", head.in_features),
        });
    }
    let z = head.forward(tape, store, pooled)?;
    tape.sigmoid(z)
}

/// `Σ_k softmax(h)_k · x_k` over same-shaped peer tensors.
pub fn one_shot_peer_mix(tape: &mut Tape, h: Var, peers: &[Var]) -> Result<Var> {
    if peers.is_empty() {
        return Err(Error::Empty("one_shot_peer_mix"));
    }
    let weights = tape.softmax(h)?;
    tape.weighted_sum(weights, peers)
}

/// Learned state behind one attention binding. With per-destination
/// sharing a single slot serves every edge into the block.
#[derive(Clone, Debug)]
pub struct AttentionSlot {
    pub name: String,
    pub dst: usize,
    pub mode: AttentionMode,
    /// Destination input width `C_i`.
    pub width: usize,
    pub head: Option<Linear>,
    pub static_logits: Option<ParamId>,
    /// One-shot only: peer block indices (sorted) with their projectors,
    /// and the mixing logits `h`.
    pub peers: Vec<usize>,
    pub projectors: Vec<Linear>,
    pub mix_logits: Option<ParamId>,
}

impl AttentionSlot {
    /// Parameters owned by this slot.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in self.head.iter().chain(&self.projectors) {
            ids.push(l.weight);
            ids.push(l.bias);
        }
        ids.extend(self.static_logits);
        ids.extend(self.mix_logits);
        ids
    }

    /// Attention for an edge from `src`, or `None` when the mode applies no
    /// attention. `outputs` holds every evaluated block output and `pooled`
    /// caches their spatial averages.
    pub fn evaluate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        src: usize,
        outputs: &HashMap<usize, Var>,
        pooled: &mut HashMap<usize, Var>,
    ) -> Result<Option<Var>> {
        let mut pool = |tape: &mut Tape, k: usize| -> Result<Var> {
            if let Some(v) = pooled.get(&k) {
                return Ok(*v);
            }
            let x = *outputs
                .get(&k)
                .ok_or_else(|| Error::Graph(format!("attention source {k} evaluated after block {}", self.dst)))?;
            let prev = tape.set_cost_kind(Some(CostKind::AttentionPooling));
            let v = tape.gap_spatial(x);
            tape.set_cost_kind(prev);
            let v = v?;
            pooled.insert(k, v);
            Ok(v)
        };
        let head = || self.head.as_ref().expect("mode with head");
        match self.mode {
            AttentionMode::None => Ok(None),
            AttentionMode::Static => {
                let id = self.static_logits.expect("static logits");
                let logits = tape.param(id.index(), store.value(id))?;
                let prev = tape.set_cost_kind(None);
                let a = tape.sigmoid(logits);
                tape.set_cost_kind(prev);
                a.map(Some)
            }
            AttentionMode::SelfAttention | AttentionMode::Peer(_) => {
                let k = if let AttentionMode::Peer(k) = self.mode { k } else { src };
                let p = pool(tape, k)?;
                let prev = tape.set_cost_kind(Some(CostKind::Attention));
                let a = head_on_pooled(tape, store, head(), p);
                tape.set_cost_kind(prev);
                a.map(Some)
            }
            AttentionMode::OneShot => {
                let mut projected = Vec::with_capacity(self.peers.len());
                for (&k, proj) in self.peers.iter().zip(&self.projectors) {
                    let p = pool(tape, k)?;
                    let prev = tape.set_cost_kind(Some(CostKind::Attention));
                    let v = proj.forward(tape, store, p);
                    tape.set_cost_kind(prev);
                    projected.push(v?);
                }
                let id = self.mix_logits.expect("mixing logits");
                let h = tape.param(id.index(), store.value(id))?;
                let prev = tape.set_cost_kind(None);
                let mixed = one_shot_peer_mix(tape, h, &projected);
                tape.set_cost_kind(Some(CostKind::Attention));
                let a = mixed.and_then(|m| head_on_pooled(tape, store, head(), m));
                tape.set_cost_kind(prev);
                a.map(Some)
            }
        }
    }
}

/// Gated, attention-weighted sum of already resolution-matched source
/// tensors: `Σ sigmoid(w) · (A · x)`. Each term is
/// `(adapted source, gate logit, attention or None)`.
pub fn fuse_inputs(tape: &mut Tape, terms: &[(Var, Var, Option<Var>)]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Empty("fuse_inputs"));
    }
    let mut parts = Vec::with_capacity(terms.len());
    for &(x, w, a) in terms {
        let prev = tape.set_cost_kind(None);
        let gate = tape.sigmoid(w);
        tape.set_cost_kind(prev);
        let attended = match a {
            Some(a) => tape.channel_scale(x, a)?,
            None => x,
        };
        parts.push(tape.scale(attended, gate?)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.add_n(&parts)
}
