use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use modalnet::cost::cost_report;
use modalnet::data::{dump_split, Split};
use modalnet::error::{Error, Result};
use modalnet::experiments::{
    ablate_attention, ablation_csv, sweep_csv, sweep_object_ratio, train_graph, without_object_block, Datasets,
    ExperimentConfig,
};
use modalnet::graph::{dot_counts, AttentionMode};
use modalnet::model::{
    apply_attention, apply_table_peers, parse_architecture, ArchitectureTable, Model, DEFAULT_TABLE,
};
use modalnet::params::Ratio;
use modalnet::trainer::{evaluate, run_pipeline, train, PipelineOptions, PRUNE_THRESHOLD};

#[derive(Parser)]
#[command(name = "modalnet", version, about = "Multi-stream video connectivity search on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AttentionArg {
    None,
    Static,
    #[value(name = "self")]
    #[serde(rename = "self")]
    SelfAttention,
    Peer,
    Oneshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Toggle {
    On,
    Off,
}

#[derive(Args, Clone, Debug, Serialize)]
struct Common {
    /// Architecture table (JSON); defaults to the built-in 15-block table.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value = "1/8")]
    width_scale: Ratio,
    #[arg(long, default_value = "1/2")]
    depth_scale: Ratio,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    attention: AttentionArg,
    #[arg(long, value_enum, default_value = "on")]
    objects: Toggle,
}

#[derive(Args, Clone, Debug, Serialize)]
struct CheckpointArgs {
    /// Directory holding the checkpoint; defaults to --out.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    stem: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test splits and dump them under --out/data.
    GenData(Common),
    /// Build a model from the table and write its initial checkpoint.
    Build(Common),
    /// Train the table's connectivity with the chosen attention mode.
    Train(Common),
    /// Densify, one-shot search, prune and fine-tune.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = PRUNE_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        finetune_iters: usize,
    },
    /// Prune connections and argmax attention of a saved model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
        #[arg(long, default_value_t = PRUNE_THRESHOLD)]
        threshold: f64,
    },
    /// Evaluate a saved model on the synthetic test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        checkpoint: CheckpointArgs,
    },
    /// Parameter and FLOP accounting for the built model.
    Cost {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Square input size.
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Write the table's connectivity as Graphviz DOT.
    ExportDot(Common),
    /// Four attention modes with and without object edges.
    AblateAttention(Common),
    /// Accuracy versus the share of blocks fed by the object stream.
    SweepObjectRatio(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Build(_) => "build",
            Command::Train(_) => "train",
            Command::Search { .. } => "search",
            Command::Prune { .. } => "prune",
            Command::Eval { .. } => "eval",
            Command::Cost { .. } => "cost",
            Command::ExportDot(_) => "export-dot",
            Command::AblateAttention(_) => "ablate-attention",
            Command::SweepObjectRatio(_) => "sweep-object-ratio",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Build(c)
            | Command::Train(c)
            | Command::ExportDot(c)
            | Command::AblateAttention(c)
            | Command::SweepObjectRatio(c) => c,
            Command::Search { common, .. }
            | Command::Prune { common, .. }
            | Command::Eval { common, .. }
            | Command::Cost { common, .. } => common,
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    table: String,
    attention: AttentionArg,
    objects: Toggle,
    experiment: &'a ExperimentConfig,
    outputs: Vec<String>,
}

struct Run {
    table: ArchitectureTable,
    table_name: String,
    config: ExperimentConfig,
    common: Common,
    outputs: Vec<String>,
}

impl Run {
    fn new(common: &Common) -> Result<Run> {
        let (table, table_name) = match &common.table {
            Some(p) => (ArchitectureTable::load(p)?, p.display().to_string()),
            None => (parse_architecture(DEFAULT_TABLE)?, "builtin".to_string()),
        };
        let mut config = ExperimentConfig::default();
        config.data.seed = common.seed;
        config.model.seed = common.seed;
        config.model.width_scale = common.width_scale;
        config.model.depth_scale = common.depth_scale;
        config.model.attention = match common.attention {
            AttentionArg::None | AttentionArg::Peer => AttentionMode::None,
            AttentionArg::Static => AttentionMode::Static,
            AttentionArg::SelfAttention => AttentionMode::SelfAttention,
            AttentionArg::Oneshot => AttentionMode::OneShot,
        };
        config.train.iterations = common.iters;
        config.train.base_lr = common.lr;
        config.train.seed = common.seed;
        config.train.validate()?;
        config.model.validate()?;
        fs::create_dir_all(&common.out).map_err(|e| io_err(&common.out, e))?;
        Ok(Run { table, table_name, config, common: common.clone(), outputs: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.common.out.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    /// The table graph with the requested attention and object setting.
    /// `peer` binds each block to its deepest table input.
    fn graph(&self) -> Result<modalnet::graph::ConnectivityGraph> {
        let mut g = self.table.graph(&self.config.model)?;
        if self.common.objects == Toggle::Off {
            g = without_object_block(&g);
        }
        match self.common.attention {
            AttentionArg::Peer => apply_table_peers(&mut g, &self.table)?,
            _ => apply_attention(&mut g, self.config.model.attention)?,
        }
        Ok(g)
    }

    fn num_classes(&self) -> usize {
        self.config.model.num_classes.unwrap_or(self.table.num_classes)
    }

    fn checkpoint_dir(&self, c: &CheckpointArgs) -> PathBuf {
        c.from.clone().unwrap_or_else(|| self.common.out.clone())
    }

    fn finish(&mut self, command: &str) -> Result<()> {
        self.outputs.push("config.json".into());
        let resolved = Resolved {
            command,
            table: self.table_name.clone(),
            attention: self.common.attention,
            objects: self.common.objects,
            experiment: &self.config,
            outputs: self.outputs.clone(),
        };
        let text = serde_json::to_string_pretty(&resolved).expect("config serializes");
        let path = self.common.out.join("config.json");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn echo_config(command: &str, run: &Run) {
    let resolved = serde_json::json!({
        "command": command,
        "table": run.table_name,
        "attention": run.common.attention,
        "objects": run.common.objects,
        "out": run.common.out,
        "experiment": run.config,
    });
    eprintln!("{resolved}");
}

fn execute(cmd: &Command) -> Result<()> {
    let mut run = Run::new(cmd.common())?;
    echo_config(cmd.name(), &run);
    match cmd {
        Command::GenData(_) => {
            let data = Datasets::generate(&run.config.data)?;
            let dir = run.path("data");
            dump_split(&dir, Split::Train, &data.train, &run.config.data)?;
            dump_split(&dir, Split::Test, &data.test, &run.config.data)?;
            println!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), dir.display());
        }
        Command::Build(_) => {
            let model = Model::from_graph(run.graph()?, &run.config.model, run.num_classes(), None)?;
            run.outputs.extend(["model.bin", "model.json", "model.model.json"].map(String::from));
            model.save(&run.common.out, "model")?;
            println!(
                "{} blocks, {} edges, {} parameters",
                model.blocks.len(),
                model.edges.len(),
                model.params.total_elements()
            );
        }
        Command::Train(_) => {
            let data = Datasets::generate(&run.config.data)?;
            let graph = run.graph()?;
            let model = if run.config.model.attention == AttentionMode::OneShot {
                let mut m = Model::from_graph(graph, &run.config.model, run.num_classes(), None)?;
                let log = train(&mut m, &data.train, Some(&data.test), &run.config.train)?;
                let path = run.path("metrics.csv");
                log.write_csv(&path)?;
                m
            } else {
                let (m, metrics) = train_graph(&run.table, graph, &run.config, &data)?;
                run.write("eval.json", &metrics_json(metrics.accuracy, metrics.mean_class_accuracy))?;
                m
            };
            run.outputs.extend(["trained.bin", "trained.json", "trained.model.json"].map(String::from));
            model.save(&run.common.out, "trained")?;
            let m = evaluate(&model, &data.test, 16)?;
            println!("test_accuracy {:.4} test_mean_class_accuracy {:.4}", m.accuracy, m.mean_class_accuracy);
        }
        Command::Search { threshold, finetune_iters, .. } => {
            let data = Datasets::generate(&run.config.data)?;
            let options =
                PipelineOptions { threshold: *threshold, finetune_iters: *finetune_iters, out: Some(run.common.out.clone()) };
            let out = run_pipeline(&run.table, &run.config.model, &run.config.train, &data.train, &data.test, &options)?;
            for stem in ["searched", "pruned"] {
                run.outputs.extend(["bin", "json", "model.json"].map(|e| format!("{stem}.{e}")));
            }
            run.outputs.push("metrics.csv".into());
            let dot = out.pruned.graph().to_dot();
            run.write("pruned.dot", &dot)?;
            let m = evaluate(&out.pruned, &data.test, 16)?;
            println!(
                "searched {} edges, kept {}; pruned test_accuracy {:.4}",
                out.searched.edges.len(),
                out.pruned.edges.len(),
                m.accuracy
            );
        }
        Command::Prune { checkpoint, threshold, .. } => {
            let model = Model::load(&run.checkpoint_dir(checkpoint), &checkpoint.stem)?;
            let pruned = model.prune_connections(*threshold)?.prune_attention()?;
            let stem = format!("{}_pruned", checkpoint.stem);
            run.outputs.extend(["bin", "json", "model.json"].map(|e| format!("{stem}.{e}")));
            pruned.save(&run.common.out, &stem)?;
            println!("kept {} of {} edges", pruned.edges.len(), model.edges.len());
        }
        Command::Eval { checkpoint, .. } => {
            let model = Model::load(&run.checkpoint_dir(checkpoint), &checkpoint.stem)?;
            let data = Datasets::generate(&run.config.data)?;
            let m = evaluate(&model, &data.test, 16)?;
            run.write("eval.json", &metrics_json(m.accuracy, m.mean_class_accuracy))?;
            println!("test_accuracy {:.4} test_mean_class_accuracy {:.4}", m.accuracy, m.mean_class_accuracy);
        }
        Command::Cost { batch, frames, size, .. } => {
            run.config.model.frames = *frames;
            run.config.model.height = *size;
            run.config.model.width = *size;
            run.config.model.batch = *batch;
            let model = Model::from_graph(run.graph()?, &run.config.model, run.num_classes(), None)?;
            let report = cost_report(&model, *batch, *frames);
            run.write("cost.json", &report.to_json())?;
            print!("{}", report.to_table());
        }
        Command::ExportDot(_) => {
            let dot = run.graph()?.to_dot();
            run.write("graph.dot", &dot)?;
            let (nodes, solid, dashed) = dot_counts(&dot);
            println!("{nodes} nodes, {solid} connection edges, {dashed} attention edges");
        }
        Command::AblateAttention(_) => {
            let data = Datasets::generate(&run.config.data)?;
            let rows = ablate_attention(&run.table, &run.config, &data, |r| {
                eprintln!("{} objects={} accuracy={:.4}", r.mode, r.objects, r.accuracy)
            })?;
            let csv = ablation_csv(&rows);
            run.write("ablation.csv", &csv)?;
            print!("{csv}");
        }
        Command::SweepObjectRatio(_) => {
            let data = Datasets::generate(&run.config.data)?;
            let out = sweep_object_ratio(&run.table, &run.config, &data, |r| {
                eprintln!("ratio={} accuracy={:.4}", r.ratio, r.accuracy)
            })?;
            let csv = sweep_csv(&out.rows);
            run.write("sweep.csv", &csv)?;
            print!("{csv}");
            println!("spearman {:.4}", out.spearman);
        }
    }
    run.finish(cmd.name())
}

fn metrics_json(accuracy: f64, mean_class_accuracy: f64) -> String {
    serde_json::json!({ "test_accuracy": accuracy, "test_mean_class_accuracy": mean_class_accuracy }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
