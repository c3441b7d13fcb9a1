//! Naive reference implementations and finite-difference helpers shared by
//! the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use modalnet::graph::AttentionMode;
use modalnet::model::{parse_architecture, ModalityInputs, Model, ModelConfig};
use modalnet::params::{ParamClass, Ratio};
use modalnet::tape::Tape;
use modalnet::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn gap(x: &Tensor) -> Tensor {
    let [n, t, h, w, c] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, t, 1, 1, c));
    for b in 0..n {
        for f in 0..t {
            for ch in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        s += x.at(b, f, y, xx, ch);
                    }
                }
                let o = out.shape().offset(b, f, 0, 0, ch);
                out.data_mut()[o] = s / (h * w) as f64;
            }
        }
    }
    out
}

/// `a` is `(n,t,1,1,c)`.
pub fn channel_scale(x: &Tensor, a: &Tensor) -> Tensor {
    let [n, t, h, w, c] = x.shape().0;
    let mut out = x.clone();
    for b in 0..n {
        for f in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let o = x.shape().offset(b, f, y, xx, ch);
                        out.data_mut()[o] = x.at(b, f, y, xx, ch) * a.at(b, f, 0, 0, ch);
                    }
                }
            }
        }
    }
    out
}

/// Per-position fully connected layer; `w` is `(1,1,1,ci,co)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, t, h, wd, ci] = x.shape().0;
    let co = w.shape().c();
    let mut out = Tensor::zeros(Shape::new(n, t, h, wd, co));
    for bb in 0..n {
        for f in 0..t {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..co {
                        let mut s = b.data()[o];
                        for i in 0..ci {
                            s += x.at(bb, f, y, xx, i) * w.at(0, 0, 0, i, o);
                        }
                        let off = out.shape().offset(bb, f, y, xx, o);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
    }
    out
}

/// Same-padded convolution: output extent `ceil(in / stride)`, spatial
/// padding split with the extra cell after, temporal taps centred with
/// spacing `dilation`.
pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize, stride: usize) -> Tensor {
    let [n, t, h, wd, ci] = x.shape().0;
    let [kt, kh, kw, _, co] = w.shape().0;
    let ho = (h + stride - 1) / stride;
    let wo = (wd + stride - 1) / stride;
    let pad = |inp: usize, out: usize, k: usize| (((out - 1) * stride + k) as i64 - inp as i64).max(0) / 2;
    let (ph, pw) = (pad(h, ho, kh), pad(wd, wo, kw));
    let pt = ((kt - 1) * dilation / 2) as i64;
    let mut out = Tensor::zeros(Shape::new(n, t, ho, wo, co));
    for bb in 0..n {
        for f in 0..t {
            for y in 0..ho {
                for xx in 0..wo {
                    for o in 0..co {
                        let mut s = b.data()[o];
                        for a in 0..kt {
                            let tf = f as i64 - pt + (a * dilation) as i64;
                            if tf < 0 || tf >= t as i64 {
                                continue;
                            }
                            for p in 0..kh {
                                let yi = (y * stride) as i64 - ph + p as i64;
                                if yi < 0 || yi >= h as i64 {
                                    continue;
                                }
                                for q in 0..kw {
                                    let xi = (xx * stride) as i64 - pw + q as i64;
                                    if xi < 0 || xi >= wd as i64 {
                                        continue;
                                    }
                                    for i in 0..ci {
                                        s += x.at(bb, tf as usize, yi as usize, xi as usize, i) * w.at(a, p, q, i, o);
                                    }
                                }
                            }
                        }
                        let off = out.shape().offset(bb, f, y, xx, o);
                        out.data_mut()[off] = s;
                    }
                }
            }
        }
    }
    out
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// True when `a` and `b` agree to relative error `rel`, or absolute error
/// `abs` where both are tiny.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let diff = (a - b).abs();
    diff <= abs || diff <= rel * a.abs().max(b.abs())
}

/// A three-block graph: rgb and flow inputs feeding one conv block.
pub const TINY_TABLE: &str = r#"{
  "num_classes": 3,
  "blocks": [
    {"index": 0, "level": 0, "inputs": [], "channels": 4, "dilation": 1, "stride": 1, "kind": "rgb"},
    {"index": 1, "level": 0, "inputs": [], "channels": 6, "dilation": 1, "stride": 1, "kind": "flow"},
    {"index": 2, "level": 1, "inputs": [0, 1], "channels": 6, "dilation": 1, "stride": 2, "kind": "conv"}
  ]
}"#;

/// Three blocks: rgb and flow feeding one conv block, one-shot attention on
/// the rgb edge and static attention on the flow edge, with every learnable
/// attention and connection parameter randomised away from its init.
pub fn tiny_model(seed: u64) -> (Model, ModalityInputs, Vec<usize>) {
    let table = parse_architecture(TINY_TABLE).unwrap();
    let config = ModelConfig {
        width_scale: Ratio::ONE,
        depth_scale: Ratio::new(1, 3).unwrap(),
        frames: 3,
        height: 8,
        width: 8,
        batch: 2,
        attention: AttentionMode::OneShot,
        seed,
        ..ModelConfig::default()
    };
    let mut graph = table.graph(&config).unwrap();
    graph.edges[1].attention.mode = AttentionMode::Static;
    graph.edges[1].attention.h.clear();
    let mut model = Model::from_graph(graph, &config, 3, None).unwrap();
    let mut r = rng(seed + 1);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let class = model.params.get(id).class;
        if matches!(class, ParamClass::Connection | ParamClass::PeerLogits | ParamClass::StaticLogits | ParamClass::AttentionHead) {
            let shape = model.params.value(id).shape();
            *model.params.value_mut(id) = random(shape, &mut r);
        }
    }
    let inputs = ModalityInputs {
        rgb: Some(random(Shape::new(2, 3, 8, 8, 3), &mut r)),
        flow: Some(random(Shape::new(2, 3, 8, 8, 2), &mut r)),
        object: None,
    };
    (model, inputs, vec![1, 2])
}

pub struct GradientReport {
    pub classes: BTreeSet<String>,
    pub mismatches: Vec<String>,
    pub checked: usize,
}

/// Compares the tape's parameter gradients of the softmax loss with central
/// differences at step 1e-5 (relative 1e-4, absolute 1e-7).
pub fn model_gradient_check(model: &Model, inputs: &ModalityInputs, labels: &[usize]) -> GradientReport {
    let loss_of = |m: &Model| {
        let mut t = Tape::new();
        let z = m.forward(&mut t, inputs).unwrap();
        let l = t.softmax_cross_entropy(z, labels).unwrap();
        (t, l)
    };
    let (tape, l) = loss_of(model);
    let grads = tape.backward(l).unwrap();
    let mut report = GradientReport { classes: BTreeSet::new(), mismatches: Vec::new(), checked: 0 };
    for (id, p) in model.params.iter() {
        report.classes.insert(format!("{:?}", p.class));
        let analytic = grads.param(id.index()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.value.len()]);
        let numeric = numeric_grad(&p.value, 1e-5, |probe| {
            let mut m = model.clone();
            *m.params.value_mut(id) = probe.clone();
            let (t, l) = loss_of(&m);
            t.value(l).item()
        });
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            report.checked += 1;
            if !close(*a, *n, 1e-4, 1e-7) {
                report.mismatches.push(format!("{} [{i}]: analytic {a} numeric {n}", p.name));
            }
        }
    }
    report
}

/// Tolerance per op for [`oracle_sweep`]; conv sums long products in a
/// different order than the nested-loop oracle.
pub const ORACLE_TOLERANCES: [(&str, f64); 6] =
    [("softmax", 1e-12), ("sigmoid", 1e-12), ("gap", 1e-12), ("channel_scale", 1e-12), ("conv", 1e-10), ("linear", 1e-12)];

/// Runs `cases` random cases per op against the nested-loop oracles and
/// returns the largest absolute deviation seen for each op.
pub fn oracle_sweep(cases: usize, seed: u64) -> std::collections::BTreeMap<&'static str, f64> {
    use modalnet::tape::ConvGeometry;
    let mut worst = std::collections::BTreeMap::new();
    let mut note = |op: &'static str, err: f64| {
        let e = worst.entry(op).or_insert(0.0f64);
        *e = e.max(if err.is_nan() { f64::INFINITY } else { err });
    };
    let mut r = rng(seed);
    let dims = |r: &mut ChaCha8Rng| (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7), r.gen_range(1..6));
    for _ in 0..cases {
        let c = r.gen_range(1..9);
        let x: Vec<f64> = (0..c).map(|_| r.gen_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&x)).unwrap();
        let s = tape.softmax(v).unwrap();
        let g = tape.sigmoid(v).unwrap();
        let top = x.iter().cloned().fold(f64::MIN, f64::max);
        let shifted: Vec<f64> = x.iter().map(|v| v - top).collect();
        for (a, b) in tape.value(s).data().iter().zip(softmax(&shifted)) {
            note("softmax", (a - b).abs());
        }
        for (a, b) in tape.value(g).data().iter().zip(&x) {
            note("sigmoid", (a - sigmoid(*b)).abs());
        }

        let (n, t, h, w, c) = dims(&mut r);
        let x = random(Shape::new(n, t, h, w, c), &mut r);
        let a = random(Shape::new(n, t, 1, 1, c), &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let av = tape.leaf(a.clone()).unwrap();
        let g = tape.gap_spatial(xv).unwrap();
        let s = tape.channel_scale(xv, av).unwrap();
        note("gap", tape.value(g).max_abs_diff(&gap(&x)));
        note("channel_scale", tape.value(s).max_abs_diff(&channel_scale(&x, &a)));

        let (n, t, h, w, ci) = dims(&mut r);
        let co = r.gen_range(1..5);
        let kt = [1, 3, 5][r.gen_range(0..3)];
        let k = [1, 3, 7][r.gen_range(0..3)];
        let dilation = [1, 2, 4, 8][r.gen_range(0..4)];
        let stride = r.gen_range(1..4);
        let x = random(Shape::new(n, t, h, w, ci), &mut r);
        let wt = random(Shape::new(kt, k, k, ci, co), &mut r);
        let b = random(Shape::vector(co), &mut r);
        let lw = random(Shape::new(1, 1, 1, ci, co), &mut r);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone()).unwrap();
        let wv = tape.leaf(wt.clone()).unwrap();
        let bv = tape.leaf(b.clone()).unwrap();
        let lv = tape.leaf(lw.clone()).unwrap();
        let y = tape.conv(xv, wv, bv, ConvGeometry { dilation, stride }).unwrap();
        let z = tape.linear(xv, lv, bv).unwrap();
        let want = conv(&x, &wt, &b, dilation, stride);
        note("conv", if tape.shape(y) == want.shape() { tape.value(y).max_abs_diff(&want) } else { f64::INFINITY });
        note("linear", tape.value(z).max_abs_diff(&linear(&x, &lw, &b)));
    }
    worst
}

/// A random leveled graph: 2..=12 blocks, level 0 holding the inputs, a
/// random subset of legal edges with random gates and one-shot bindings.
pub fn random_graph(r: &mut ChaCha8Rng) -> modalnet::graph::ConnectivityGraph {
    use modalnet::blocks::{BlockKind, BlockSpec};
    use modalnet::graph::{valid_edges, AttentionBinding, ConnectionEdge, ConnectivityGraph};
    let n = r.gen_range(2..=12);
    let top = r.gen_range(1..=4);
    let mut levels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { r.gen_range(0..=top) }).collect();
    levels.sort_unstable();
    let blocks: Vec<BlockSpec> = levels
        .iter()
        .enumerate()
        .map(|(index, &level)| BlockSpec {
            index,
            level,
            channels: r.gen_range(1..9),
            temporal_dilation: 1,
            spatial_stride: 1,
            kind: if level == 0 { [BlockKind::Rgb, BlockKind::Flow, BlockKind::Object][index % 3] } else { BlockKind::Conv },
            repeats: if level == 0 { 0 } else { 1 },
        })
        .collect();
    let mut edges = Vec::new();
    for (j, i) in valid_edges(&blocks) {
        if r.gen_bool(0.5) {
            let peers = modalnet::graph::peer_set(i, &blocks).len();
            let mut e = ConnectionEdge::new(j, i);
            e.weight = r.gen_range(-4.0..4.0);
            e.attention = AttentionBinding { mode: AttentionMode::OneShot, h: (0..peers).map(|_| r.gen_range(-3.0..3.0)).collect() };
            edges.push(e);
        }
    }
    ConnectivityGraph { blocks, edges }
}
