//! Toy experiments: the attention-mode ablation and the object-ratio sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::data::{generate_dataset, GeneratorConfig, Split, SyntheticSample};
use crate::error::Result;
use crate::graph::{AttentionMode, ConnectionEdge, ConnectivityGraph};
use crate::model::{apply_attention, ArchitectureTable, Model, ModelConfig};
use crate::trainer::{evaluate, train, train_span, EvalMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Share of the budget spent on one-shot search before argmax pruning;
    /// the rest fine-tunes the pruned model.
    pub search_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = GeneratorConfig::default();
        ExperimentConfig {
            model: ModelConfig {
                num_classes: Some(data.num_classes),
                object_channels: Some(data.mask_channels()),
                frames: data.frames,
                height: data.height,
                width: data.width,
                depth_scale: crate::params::Ratio { num: 1, den: 2 },
                ..ModelConfig::default()
            },
            data,
            train: TrainConfig { base_lr: 0.02, ..TrainConfig::default() },
            search_fraction: 0.75,
        }
    }
}

pub struct Datasets {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl Datasets {
    pub fn generate(config: &GeneratorConfig) -> Result<Self> {
        Ok(Datasets { train: generate_dataset(config, Split::Train)?, test: generate_dataset(config, Split::Test)? })
    }
}

fn num_classes(table: &ArchitectureTable, config: &ExperimentConfig) -> usize {
    config.model.num_classes.unwrap_or(table.num_classes)
}

/// Trains a model on `graph`. One-shot bindings are searched for part of the
/// budget, argmax-pruned, then fine-tuned for the remainder.
pub fn train_graph(
    table: &ArchitectureTable,
    graph: ConnectivityGraph,
    config: &ExperimentConfig,
    data: &Datasets,
) -> Result<(Model, EvalMetrics)> {
    let mut model = Model::from_graph(graph, &config.model, num_classes(table, config), None)?;
    let searching = model.slots.iter().any(|s| s.mode == AttentionMode::OneShot);
    if searching {
        let total = config.train.iterations;
        let search = ((total as f64 * config.search_fraction).round() as usize).clamp(1, total);
        train_span(&mut model, &data.train, None, &config.train, 0..search)?;
        model = model.prune_attention()?;
        if total > search {
            train_span(&mut model, &data.train, None, &config.train, search..total)?;
        }
    } else {
        train(&mut model, &data.train, None, &config.train)?;
    }
    let metrics = evaluate(&model, &data.test, 16)?;
    Ok((model, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: &'static str,
    pub objects: bool,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
}

pub const ABLATION_MODES: [(&str, AttentionMode); 4] = [
    ("none", AttentionMode::None),
    ("static", AttentionMode::Static),
    ("self", AttentionMode::SelfAttention),
    ("peer", AttentionMode::OneShot),
];

/// Eight trainings: four attention modes, each with and without object
/// edges, sharing seeds and budgets.
pub fn ablate_attention(
    table: &ArchitectureTable,
    config: &ExperimentConfig,
    data: &Datasets,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for objects in [true, false] {
        for (name, mode) in ABLATION_MODES {
            let mut graph = table.graph(&config.model)?;
            if !objects {
                graph = without_object_block(&graph);
            }
            apply_attention(&mut graph, mode)?;
            let (_, m) = train_graph(table, graph, config, data)?;
            let row = AblationRow { mode: name, objects, accuracy: m.accuracy, mean_class_accuracy: m.mean_class_accuracy };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("mode,objects,test_accuracy,test_mean_class_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:?},{:?}", r.mode, if r.objects { "on" } else { "off" }, r.accuracy, r.mean_class_accuracy);
    }
    out
}

fn object_blocks(graph: &ConnectivityGraph) -> Vec<usize> {
    graph.blocks.iter().filter(|b| b.kind == BlockKind::Object).map(|b| b.index).collect()
}

/// Drops object input blocks and every edge leaving them.
pub fn without_object_block(graph: &ConnectivityGraph) -> ConnectivityGraph {
    let objects = object_blocks(graph);
    let mut g = graph.clone();
    g.blocks.retain(|b| !objects.contains(&b.index));
    g.edges.retain(|e| !objects.contains(&e.src));
    g
}

/// The graph with object edges to every block above the input level.
pub fn omnipresent_objects(graph: &ConnectivityGraph) -> ConnectivityGraph {
    let mut g = graph.clone();
    for o in object_blocks(graph) {
        for b in graph.blocks.iter().filter(|b| !b.kind.is_input()) {
            if g.edge(o, b.index).is_none() {
                g.edges.push(ConnectionEdge::new(o, b.index));
            }
        }
    }
    g.edges.sort_by_key(|e| (e.dst, e.src));
    g
}

/// Keeps object edges only to the `keep` destinations ranked first.
pub fn restrict_objects(graph: &ConnectivityGraph, ranking: &[usize], keep: usize) -> ConnectivityGraph {
    let chosen = &ranking[..keep.min(ranking.len())];
    let objects = object_blocks(graph);
    let mut g = omnipresent_objects(graph);
    g.edges.retain(|e| !objects.contains(&e.src) || chosen.contains(&e.dst));
    g
}

pub const SWEEP_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub object_edges: usize,
    pub accuracy: f64,
}

pub struct SweepOutcome {
    pub ranking: Vec<usize>,
    pub rows: Vec<SweepRow>,
    pub spearman: f64,
}

/// Ranks destinations by the learned object gate of an omnipresent model,
/// then retrains with object edges to the top share of them per ratio.
pub fn sweep_object_ratio(
    table: &ArchitectureTable,
    config: &ExperimentConfig,
    data: &Datasets,
    mut progress: impl FnMut(&SweepRow),
) -> Result<SweepOutcome> {
    let base = table.graph(&config.model)?;
    let (ranker, _) = train_graph(table, omnipresent_objects(&base), config, data)?;
    let learned = ranker.graph();
    let objects = object_blocks(&learned);
    let mut scored: Vec<(f64, usize)> =
        learned.edges.iter().filter(|e| objects.contains(&e.src)).map(|e| (e.gate(), e.dst)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let ranking: Vec<usize> = scored.iter().map(|s| s.1).collect();

    let mut rows = Vec::new();
    for ratio in SWEEP_RATIOS {
        let keep = (ratio * ranking.len() as f64 + 0.5).floor() as usize;
        let graph = restrict_objects(&base, &ranking, keep);
        let (_, m) = train_graph(table, graph, config, data)?;
        let row = SweepRow { ratio, object_edges: keep, accuracy: m.accuracy };
        progress(&row);
        rows.push(row);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    Ok(SweepOutcome { ranking, spearman: spearman(&xs, &ys), rows })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,object_edges,test_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{:?},{},{:?}", r.ratio, r.object_edges, r.accuracy);
    }
    out
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks. Zero when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}
