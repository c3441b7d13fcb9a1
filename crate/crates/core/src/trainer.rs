//! Joint SGD training of conv weights, gates and attention, plus the
//! search-then-prune pipeline.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{collate, Batcher, SyntheticSample};
use crate::error::{Error, Result};
use crate::graph::AttentionMode;
use crate::model::{apply_attention, ArchitectureTable, ModalityInputs, Model, ModelConfig};
use crate::params::ParamId;
use crate::tape::{Tape, Var};

/// Gradient global-norm ceiling.
pub const CLIP_NORM: f64 = 10.0;
/// Gate threshold used when pruning searched connections.
pub const PRUNE_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Cosine,
    CosineWarmRestart { cycle_len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SoftmaxCe,
    SigmoidBce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Evaluate on the held-out split every this many iterations (0: only at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            base_lr: 0.05,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            batch: 4,
            seed: 0,
            loss: LossKind::SoftmaxCe,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.batch == 0 {
            return Err(Error::Config("momentum must lie in [0, 1) and batch must be positive".into()));
        }
        if let Schedule::CosineWarmRestart { cycle_len } = self.schedule {
            if cycle_len == 0 || self.iterations % cycle_len != 0 {
                return Err(Error::Config(format!(
                    "cycle length {cycle_len} must divide {} iterations",
                    self.iterations
                )));
            }
        }
        Ok(())
    }
}

pub fn lr_at(schedule: Schedule, base_lr: f64, iterations: usize, iter: usize) -> f64 {
    let phase = match schedule {
        Schedule::Cosine => iter.min(iterations) as f64 / iterations as f64,
        Schedule::CosineWarmRestart { cycle_len } => (iter % cycle_len) as f64 / cycle_len as f64,
    };
    0.5 * base_lr * (1.0 + (PI * phase).cos())
}

/// Adds the configured loss on top of `logits`.
pub fn loss(tape: &mut Tape, logits: Var, labels: &[usize], kind: LossKind) -> Result<Var> {
    match kind {
        LossKind::SoftmaxCe => tape.softmax_cross_entropy(logits, labels),
        LossKind::SigmoidBce => {
            let k = tape.shape(logits).c();
            let mut targets = vec![0.0; labels.len() * k];
            for (row, &l) in labels.iter().enumerate() {
                if l >= k {
                    return Err(Error::LabelOutOfRange { label: l, classes: k });
                }
                targets[row * k + l] = 1.0;
            }
            tape.sigmoid_bce(logits, &targets)
        }
    }
}

/// SGD with momentum over every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    velocity: Vec<Vec<f64>>,
    /// Global gradient norm of the last step, before clipping.
    pub last_grad_norm: f64,
}

impl Optimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn step(
        &mut self,
        model: &mut Model,
        inputs: &ModalityInputs,
        labels: &[usize],
        lr: f64,
        config: &TrainConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, inputs)?;
        let l = loss(&mut tape, logits, labels, config.loss)?;
        let value = tape.value(l).item();
        let grads = tape.backward(l)?;
        let ids: Vec<ParamId> = model.params.ids().collect();
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|&id| vec![0.0; model.params.value(id).len()]).collect();
        }
        let norm = ids
            .iter()
            .filter_map(|id| grads.param(id.index()))
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient_norm", node: l.index() });
        }
        self.last_grad_norm = norm;
        let clip = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        for (k, &id) in ids.iter().enumerate() {
            let v = &mut self.velocity[k];
            match grads.param(id.index()) {
                Some(g) => v.iter_mut().zip(g).for_each(|(v, g)| *v = config.momentum * *v + clip * g),
                None => v.iter_mut().for_each(|v| *v *= config.momentum),
            }
            for (p, v) in model.params.value_mut(id).data_mut().iter_mut().zip(v.iter()) {
                *p -= lr * v;
            }
        }
        Ok(value)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
}

/// Logits for `samples`, evaluated `batch` at a time.
pub fn predict(model: &Model, samples: &[SyntheticSample], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (inputs, _) = collate(samples, chunk)?;
        let logits = model.logits(&inputs)?;
        out.extend(logits.data().chunks(model.num_classes).map(<[f64]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[SyntheticSample], batch: usize) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluate"));
    }
    let logits = predict(model, samples, batch)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let predictions: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
    let mut nll = 0.0;
    for (row, &l) in logits.iter().zip(&labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        nll += max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[l];
    }
    Ok(EvalMetrics {
        loss: nll / samples.len() as f64,
        accuracy: accuracy(&predictions, &labels),
        mean_class_accuracy: mean_class_accuracy(&predictions, &labels, model.num_classes),
    })
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy averaged over the classes present in `labels`.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        hit[l] += usize::from(p == l);
    }
    let present: Vec<f64> =
        total.iter().zip(&hit).filter(|(t, _)| **t > 0).map(|(t, h)| *h as f64 / *t as f64).collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

/// Mean over classes of average precision; classes without positives are
/// skipped. `scores` and `targets` are row-major `(samples, classes)`.
pub fn mean_average_precision(scores: &[f64], targets: &[bool], classes: usize) -> f64 {
    let rows = scores.len() / classes;
    let mut aps = Vec::new();
    for c in 0..classes {
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| scores[b * classes + c].total_cmp(&scores[a * classes + c]).then(a.cmp(&b)));
        let positives = order.iter().filter(|&&r| targets[r * classes + c]).count();
        if positives == 0 {
            continue;
        }
        let (mut seen, mut sum) = (0usize, 0.0);
        for (rank, &r) in order.iter().enumerate() {
            if targets[r * classes + c] {
                seen += 1;
                sum += seen as f64 / (rank + 1) as f64;
            }
        }
        aps.push(sum / positives as f64);
    }
    aps.iter().sum::<f64>() / aps.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub lr: Option<f64>,
    pub loss: Option<f64>,
    pub metric: Option<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push_step(&mut self, iter: usize, lr: f64, loss: f64) {
        self.rows.push(MetricRow { iter, lr: Some(lr), loss: Some(loss), metric: None });
    }

    pub fn push_metric(&mut self, iter: usize, name: &str, value: f64) {
        self.rows.push(MetricRow { iter, lr: None, loss: None, metric: Some((name.to_string(), value)) });
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter_map(|r| r.loss)
    }

    pub fn last_metric(&self, name: &str) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.metric.as_ref().filter(|(n, _)| n == name).map(|(_, v)| *v))
    }

    /// CSV with header `iter,lr,loss,metric_name,metric_value`; floats use
    /// the shortest exact representation so logs compare bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss,metric_name,metric_value\n");
        let num = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.rows {
            let (name, value) = match &r.metric {
                Some((n, v)) => (n.as_str(), format!("{v:?}")),
                None => ("", String::new()),
            };
            let _ = writeln!(out, "{},{},{},{name},{value}", r.iter, num(r.lr), num(r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    fn extend_offset(&mut self, other: MetricsLog, offset: usize) {
        self.rows.extend(other.rows.into_iter().map(|r| MetricRow { iter: r.iter + offset, ..r }));
    }
}

/// Trains `model` in place; evaluates on `test` per `eval_every` and at the end.
pub fn train(
    model: &mut Model,
    train_set: &[SyntheticSample],
    test_set: Option<&[SyntheticSample]>,
    config: &TrainConfig,
) -> Result<MetricsLog> {
    train_span(model, train_set, test_set, config, 0..config.iterations)
}

/// Runs iterations `span` of the schedule and batch stream that `config`
/// describes, so consecutive spans on one model (or on a model rebuilt
/// between them) see the same learning rates and batches as a single run.
/// Momentum restarts at the start of each span.
pub fn train_span(
    model: &mut Model,
    train_set: &[SyntheticSample],
    test_set: Option<&[SyntheticSample]>,
    config: &TrainConfig,
    span: Range<usize>,
) -> Result<MetricsLog> {
    config.validate()?;
    if span.end > config.iterations || span.start > span.end {
        return Err(Error::Config(format!("span {span:?} outside {} iterations", config.iterations)));
    }
    let mut batches = Batcher::new(train_set.len(), config.batch, config.seed)?;
    for _ in 0..span.start {
        batches.next();
    }
    let mut opt = Optimizer::new();
    let mut log = MetricsLog::default();
    for iter in span {
        let lr = lr_at(config.schedule, config.base_lr, config.iterations, iter);
        let idx = batches.next().expect("batcher is endless");
        let (inputs, labels) = collate(train_set, &idx)?;
        let l = opt.step(model, &inputs, &labels, lr, config)?;
        log.push_step(iter, lr, l);
        let last = iter + 1 == config.iterations;
        let due = config.eval_every > 0 && (iter + 1) % config.eval_every == 0;
        if let Some(test) = test_set.filter(|_| last || due) {
            let m = evaluate(model, test, config.batch.max(16))?;
            log.push_metric(iter + 1, "test_accuracy", m.accuracy);
            log.push_metric(iter + 1, "test_mean_class_accuracy", m.mean_class_accuracy);
        }
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub threshold: f64,
    /// Iterations of fine-tuning after pruning (0 to skip).
    pub finetune_iters: usize,
    /// Directory for metrics and checkpoints.
    pub out: Option<PathBuf>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { threshold: PRUNE_THRESHOLD, finetune_iters: 0, out: None }
    }
}

pub struct PipelineOutcome {
    pub searched: Model,
    pub pruned: Model,
    pub log: MetricsLog,
}

/// Densifies the table's graph, attaches one-shot attention everywhere,
/// trains, prunes weak connections and non-argmax peers, then optionally
/// fine-tunes. Writes `metrics.csv`, `searched.*` and `pruned.*` under
/// `options.out` when given.
pub fn run_pipeline(
    table: &ArchitectureTable,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[SyntheticSample],
    test_set: &[SyntheticSample],
    options: &PipelineOptions,
) -> Result<PipelineOutcome> {
    let mut graph = table.graph(model_config)?.densify();
    apply_attention(&mut graph, AttentionMode::OneShot)?;
    let num_classes = model_config.num_classes.unwrap_or(table.num_classes);
    let mut searched = Model::from_graph(graph, model_config, num_classes, None)?;
    let mut log = train(&mut searched, train_set, Some(test_set), train_config)?;
    let mut pruned = searched.prune_connections(options.threshold)?.prune_attention()?;
    let m = evaluate(&pruned, test_set, train_config.batch.max(16))?;
    log.push_metric(train_config.iterations, "pruned_test_accuracy", m.accuracy);
    if options.finetune_iters > 0 {
        let ft = TrainConfig { iterations: options.finetune_iters, seed: train_config.seed ^ 0xf1e, ..train_config.clone() };
        let ft_log = train(&mut pruned, train_set, Some(test_set), &ft)?;
        log.extend_offset(ft_log, train_config.iterations);
    }
    if let Some(dir) = &options.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        log.write_csv(&dir.join("metrics.csv"))?;
        searched.save(dir, "searched")?;
        pruned.save(dir, "pruned")?;
    }
    Ok(PipelineOutcome { searched, pruned, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(lr_at(Schedule::Cosine, 0.1, 100, 0), 0.1);
        assert!((lr_at(Schedule::Cosine, 0.1, 100, 50) - 0.05).abs() < 1e-15);
        let wr = Schedule::CosineWarmRestart { cycle_len: 100 };
        assert_eq!(lr_at(wr, 0.1, 300, 100), 0.1);
        assert!(lr_at(wr, 0.1, 300, 99) < 0.001);
    }

    #[test]
    fn restart_cycle_must_divide() {
        let c = TrainConfig { iterations: 250, schedule: Schedule::CosineWarmRestart { cycle_len: 100 }, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn metrics() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.75);
        assert!((mean_class_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 1], 3) - 1.0).abs() < 1e-15);
        assert!((mean_class_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1], 2) - 0.5).abs() < 1e-15);
        // class 0 ranked perfectly; class 1 has its positive second: AP 1/2
        let scores = [0.9, 0.1, 0.2, 0.8, 0.3, 0.7];
        let targets = [true, false, false, false, false, true];
        let map = mean_average_precision(&scores, &targets, 2);
        assert!((map - (1.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn csv_header_and_blank_fields() {
        let mut log = MetricsLog::default();
        log.push_step(0, 0.1, 2.5);
        log.push_metric(1, "acc", 0.5);
        assert_eq!(log.to_csv(), "iter,lr,loss,metric_name,metric_value\n0,0.1,2.5,,\n1,,,acc,0.5\n");
    }
}
