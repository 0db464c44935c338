//! Experiment grids: presets, the multi-seed runner, and cross-seed
//! aggregation.
//!
//! A sweep is a list of run configurations crossed with seed indices. Each
//! run derives every seed it needs from `hash(master_seed, config_digest,
//! seed)`, so adding configurations or seeds never perturbs existing
//! runs. The runner writes one directory per run plus a manifest, skips
//! runs already recorded as finished, and keeps going when individual runs
//! fail.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{generate_train_test, DatasetError};
use crate::digest::{mix_seed, run_seed};
use crate::graphs::{transitive_closure, GraphError, GraphSpec};
use crate::model::{flops_per_example, ModelConfig};
use crate::training::{
    self, config_digest, train_with, MetricRecord, RunStatus, TrainConfig, TrainError,
};

/// Environment variable that bounds the worker pool.
pub const WORKERS_ENV: &str = "REACHLAB_WORKERS";

pub const DEFAULT_MASTER_SEED: u64 = 17;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("no manifest at {0}; run the sweep first")]
    MissingManifest(PathBuf),
    #[error("runs under config {digest} disagree on the FLOP grid")]
    MismatchedFlopGrids { digest: String },
    #[error("unknown sweep family {0}")]
    UnknownFamily(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFamily {
    ModelScaling,
    GraphScaling,
    GridDimensionality,
    ChainCount,
}

impl SweepFamily {
    pub fn slug(&self) -> &'static str {
        match self {
            SweepFamily::ModelScaling => "model_scaling",
            SweepFamily::GraphScaling => "graph_scaling",
            SweepFamily::GridDimensionality => "grid_dimensionality",
            SweepFamily::ChainCount => "chain_count",
        }
    }

    pub fn parse(name: &str) -> Result<Self, SweepError> {
        match name {
            "model_scaling" | "model-scaling" => Ok(SweepFamily::ModelScaling),
            "graph_scaling" | "graph-scaling" => Ok(SweepFamily::GraphScaling),
            "grid_dimensionality" | "grid-dimensionality" => Ok(SweepFamily::GridDimensionality),
            "chain_count" | "chain-count" => Ok(SweepFamily::ChainCount),
            other => Err(SweepError::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepScale {
    /// The full published grids; far beyond desk budgets.
    Paper,
    /// Shrunk budgets that preserve the orderings under test.
    Desk,
}

/// Seed-free graph description used in sweep configurations; chain graphs
/// receive their generation seed per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum GraphConfig {
    Grid { n: usize, k: usize },
    Chain { n: usize, chains: usize },
}

impl GraphConfig {
    pub fn num_nodes(&self) -> usize {
        match *self {
            GraphConfig::Grid { n, .. } | GraphConfig::Chain { n, .. } => n,
        }
    }

    pub fn with_seed(&self, seed: u64) -> GraphSpec {
        match *self {
            GraphConfig::Grid { n, k } => GraphSpec::Grid { n, k },
            GraphConfig::Chain { n, chains } => GraphSpec::Chain { n, chains, seed },
        }
    }

    /// Seed-independent identity used in config digests.
    pub fn group_id(&self) -> String {
        match *self {
            GraphConfig::Grid { n, k } => format!("grid-n{n}-k{k}"),
            GraphConfig::Chain { n, chains } => format!("chain-n{n}-c{chains}"),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            GraphConfig::Grid { n, k } => format!("grid n={n} k={k}"),
            GraphConfig::Chain { n, chains } => format!("chain n={n} C={chains}"),
        }
    }

    /// Whether the family admits any disconnected pair at all: a
    /// 1-dimensional grid or a single chain is a total order.
    fn has_disconnected_pairs(&self) -> bool {
        match *self {
            GraphConfig::Grid { k, .. } => k > 1,
            GraphConfig::Chain { chains, .. } => chains > 1,
        }
    }
}

/// One cell of a sweep grid; everything except the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph: GraphConfig,
    pub d_emb: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub pos_test: usize,
    pub disc_test: usize,
}

impl RunConfig {
    pub fn new(graph: GraphConfig, d_emb: usize, epochs: usize) -> Self {
        Self {
            graph,
            d_emb,
            epochs,
            batch_size: 1024,
            lr: 1e-3,
            eval_every: 50,
            pos_test: crate::dataset::DEFAULT_POS_TEST,
            disc_test: crate::dataset::DEFAULT_DISC_TEST,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.d_emb, self.graph.num_nodes() + 2)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            eval_every: self.eval_every,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn digest(&self) -> String {
        config_digest::<f32>(&self.graph.group_id(), &self.model_config(), &self.train_config(0))
    }

    pub fn label(&self) -> String {
        format!("{} d_emb={}", self.graph.label(), self.d_emb)
    }

    /// Train-split size implied by the configuration, assuming the test
    /// demands are met (zero disconnected pairs in total orders).
    pub fn expected_train_size(&self) -> usize {
        let n = self.graph.num_nodes();
        let disc = if self.graph.has_disconnected_pairs() { self.disc_test } else { 0 };
        n * (n - 1) - 2 * self.pos_test - 2 * disc
    }

    /// Total accounted FLOPs of one full run of this configuration.
    pub fn flop_budget(&self) -> u64 {
        self.epochs as u64
            * self.expected_train_size() as u64
            * flops_per_example(&self.model_config())
    }
}

/// Epoch count for `graph`/`d_emb` spending the same accounted FLOPs as the
/// reference configuration (rounded to the nearest whole epoch, minimum 1).
pub fn equal_flop_epochs(reference: &RunConfig, graph: GraphConfig, d_emb: usize) -> usize {
    let mut probe = RunConfig { graph, d_emb, ..reference.clone() };
    probe.epochs = 1;
    let per_epoch = probe.flop_budget();
    let epochs = (reference.flop_budget() as f64 / per_epoch as f64).round() as usize;
    epochs.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub sweep_id: String,
    pub family: SweepFamily,
    pub scale: SweepScale,
    pub master_seed: u64,
    pub seed_indices: Vec<u64>,
    pub configs: Vec<RunConfig>,
}

impl SweepSpec {
    /// Restricts to the first `count` seed indices (or extends the list).
    pub fn with_seeds(mut self, count: usize) -> Self {
        self.seed_indices = (0..count as u64).collect();
        self
    }
}

/// The experiment grids. Paper scale reproduces the published parameter
/// grids and epoch schedules; desk scale keeps the comparisons but shrinks
/// budgets to 3 seeds, d_emb 64, and 3000 epochs at n = 100 (graph-size
/// comparisons hold the FLOP budget fixed instead of the epoch count).
pub fn preset(family: SweepFamily, scale: SweepScale) -> SweepSpec {
    let seeds: Vec<u64> = match scale {
        SweepScale::Paper => (0..10).collect(),
        SweepScale::Desk => (0..3).collect(),
    };
    // Epoch schedule by embedding width; larger models get fewer epochs.
    let epochs_for_demb = |d_emb: usize| -> usize {
        match d_emb {
            0..=64 => 15000,
            65..=256 => 10000,
            _ => 5000,
        }
    };
    // Epoch schedule by node count for the graph-size grid.
    let epochs_for_n = |n: usize| -> usize {
        match n {
            0..=50 => 15000,
            51..=200 => 10000,
            _ => 5000,
        }
    };
    let mut configs = Vec::new();
    match (family, scale) {
        (SweepFamily::ModelScaling, SweepScale::Paper) => {
            for graph in
                [GraphConfig::Grid { n: 100, k: 2 }, GraphConfig::Chain { n: 100, chains: 10 }]
            {
                for d_emb in [32, 64, 128, 256, 512, 1024] {
                    configs.push(RunConfig::new(graph, d_emb, epochs_for_demb(d_emb)));
                }
            }
        }
        (SweepFamily::ModelScaling, SweepScale::Desk) => {
            for graph in
                [GraphConfig::Grid { n: 100, k: 2 }, GraphConfig::Chain { n: 100, chains: 10 }]
            {
                for d_emb in [32, 64] {
                    configs.push(RunConfig::new(graph, d_emb, 3000));
                }
            }
        }
        (SweepFamily::GraphScaling, SweepScale::Paper) => {
            for n in [50, 100, 200, 400, 800] {
                for graph in
                    [GraphConfig::Grid { n, k: 2 }, GraphConfig::Chain { n, chains: 10 }]
                {
                    configs.push(RunConfig::new(graph, 256, epochs_for_n(n)));
                }
            }
        }
        (SweepFamily::GraphScaling, SweepScale::Desk) => {
            let reference = RunConfig::new(GraphConfig::Chain { n: 100, chains: 10 }, 64, 3000);
            for graph in [
                GraphConfig::Grid { n: 100, k: 2 },
                GraphConfig::Chain { n: 100, chains: 10 },
            ] {
                configs.push(RunConfig::new(graph, 64, 3000));
            }
            for graph in [
                GraphConfig::Grid { n: 400, k: 2 },
                GraphConfig::Chain { n: 400, chains: 10 },
            ] {
                let epochs = equal_flop_epochs(&reference, graph, 64);
                configs.push(RunConfig::new(graph, 64, epochs));
            }
        }
        (SweepFamily::GridDimensionality, SweepScale::Paper) => {
            // Exactly the three published slices.
            for (n, d_emb) in [(100, 256), (100, 1024), (400, 256)] {
                for k in 1..=5 {
                    configs.push(RunConfig::new(
                        GraphConfig::Grid { n, k },
                        d_emb,
                        epochs_for_demb(d_emb),
                    ));
                }
            }
        }
        (SweepFamily::GridDimensionality, SweepScale::Desk) => {
            for k in [1, 5] {
                configs.push(RunConfig::new(GraphConfig::Grid { n: 100, k }, 64, 3000));
            }
        }
        (SweepFamily::ChainCount, SweepScale::Paper) => {
            for (n, d_emb) in [(100, 256), (100, 1024), (400, 256)] {
                for chains in [1, 5, 10, 15, 20] {
                    configs.push(RunConfig::new(
                        GraphConfig::Chain { n, chains },
                        d_emb,
                        epochs_for_demb(d_emb),
                    ));
                }
            }
        }
        (SweepFamily::ChainCount, SweepScale::Desk) => {
            for chains in [1, 5, 10] {
                configs.push(RunConfig::new(GraphConfig::Chain { n: 100, chains }, 64, 3000));
            }
        }
    }
    let scale_slug = match scale {
        SweepScale::Paper => "paper",
        SweepScale::Desk => "desk",
    };
    SweepSpec {
        sweep_id: format!("{}_{scale_slug}", family.slug()),
        family,
        scale,
        master_seed: DEFAULT_MASTER_SEED,
        seed_indices: seeds,
        configs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunState {
    Pending,
    Completed,
    Diverged { epoch: u64 },
    Failed { message: String },
}

impl RunState {
    pub fn is_done(&self) -> bool {
        matches!(self, RunState::Completed | RunState::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub config_digest: String,
    pub config_label: String,
    pub seed: u64,
    pub run_seed: u64,
    pub status: RunState,
    pub metrics_path: String,
    pub checkpoint_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sweep_id: String,
    pub spec: SweepSpec,
    pub runs: Vec<ManifestRun>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load(out_dir: &Path) -> Result<Self, SweepError> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Err(SweepError::MissingManifest(path));
        }
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    fn save(&self, out_dir: &Path) -> Result<(), SweepError> {
        let file = std::fs::File::create(Self::path(out_dir))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

fn worker_count(requested: Option<usize>, pending: usize) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let from_env = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    requested
        .or(from_env)
        .unwrap_or(available)
        .clamp(1, pending.max(1))
}

/// Executes every (config, seed) run of the spec into `out_dir`, skipping
/// runs the manifest already records as finished. Individual failures are
/// recorded without aborting the sweep. Returns the final manifest.
pub fn run_sweep(
    spec: &SweepSpec,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<Manifest, SweepError> {
    std::fs::create_dir_all(out_dir)?;
    let previous = Manifest::load(out_dir).ok();
    let mut runs = Vec::new();
    for config in &spec.configs {
        let digest = config.digest();
        for &seed in &spec.seed_indices {
            let run_dir = format!("runs/{digest}/seed{seed:02}");
            let metrics_path = format!("{run_dir}/metrics.csv");
            let checkpoint_path = format!("{run_dir}/checkpoint.json");
            let status = previous
                .as_ref()
                .and_then(|m| {
                    m.runs
                        .iter()
                        .find(|r| r.config_digest == digest && r.seed == seed)
                })
                .filter(|r| r.status.is_done() && out_dir.join(&r.metrics_path).exists())
                .map(|r| r.status.clone())
                .unwrap_or(RunState::Pending);
            runs.push(ManifestRun {
                config_digest: digest.clone(),
                config_label: config.label(),
                seed,
                run_seed: run_seed(spec.master_seed, &digest, seed),
                status,
                metrics_path,
                checkpoint_path,
            });
        }
    }
    let manifest = Mutex::new(Manifest {
        sweep_id: spec.sweep_id.clone(),
        spec: spec.clone(),
        runs,
    });
    manifest.lock().unwrap().save(out_dir)?;

    let pending: Vec<(usize, RunConfig, ManifestRun)> = {
        let m = manifest.lock().unwrap();
        m.runs
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.status.is_done())
            .map(|(i, r)| {
                let config = spec
                    .configs
                    .iter()
                    .find(|c| c.digest() == r.config_digest)
                    .expect("manifest runs come from spec configs")
                    .clone();
                (i, config, r.clone())
            })
            .collect()
    };
    if pending.is_empty() {
        return Ok(manifest.into_inner().unwrap());
    }

    let finish_one = |(index, config, run): &(usize, RunConfig, ManifestRun)| {
        let status = match execute_run(config, run, out_dir) {
            Ok(status) => status,
            Err(error) => RunState::Failed { message: error.to_string() },
        };
        let mut m = manifest.lock().unwrap();
        m.runs[*index].status = status;
        // Flushed after every run so interrupted sweeps resume where they
        // stopped.
        let _ = m.save(out_dir);
    };
    let workers = worker_count(workers, pending.len());
    if workers == 1 {
        // Run on the calling thread: numeric kernels inside each run then
        // parallelize over the global pool instead of serializing in a
        // one-thread sweep pool.
        pending.iter().for_each(finish_one);
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            use rayon::prelude::*;
            pending.par_iter().for_each(finish_one);
        });
    }

    let manifest = manifest.into_inner().unwrap();
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn execute_run(
    config: &RunConfig,
    run: &ManifestRun,
    out_dir: &Path,
) -> Result<RunState, SweepError> {
    let run_dir = out_dir.join(format!("runs/{}/seed{:02}", run.config_digest, run.seed));
    std::fs::create_dir_all(&run_dir)?;

    let graph_seed = mix_seed(run.run_seed ^ 1);
    let split_seed = mix_seed(run.run_seed ^ 2);
    let train_seed = mix_seed(run.run_seed ^ 3);

    let spec = config.graph.with_seed(graph_seed);
    let (graph, _) = spec.generate()?;
    let closure = transitive_closure(&graph);
    let mut split_rng = crate::seeded_rng(split_seed);
    let split = generate_train_test(
        &graph,
        &closure,
        &spec.id(),
        config.pos_test,
        config.disc_test,
        split_seed,
        &mut split_rng,
    )?;

    let effective = serde_json::json!({
        "config": config,
        "config_digest": run.config_digest,
        "seed": run.seed,
        "run_seed": run.run_seed,
        "graph_seed": graph_seed,
        "split_seed": split_seed,
        "train_seed": train_seed,
        "graph_id": spec.id(),
        "flops_formula": crate::model::FLOPS_FORMULA_VERSION,
    });
    std::fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&effective)?)?;

    let model_config = config.model_config();
    let train_config = config.train_config(train_seed);

    let metrics_file = std::fs::File::create(run_dir.join("metrics.csv"))?;
    let mut writer = std::io::BufWriter::new(metrics_file);
    writeln!(writer, "{}", training::METRICS_HEADER)?;
    writer.flush()?;
    let run_result = train_with::<f32>(
        &split,
        &config.graph.group_id(),
        &model_config,
        &train_config,
        |record| {
            let _ = writeln!(writer, "{}", training::record_to_csv(record));
            let _ = writer.flush();
        },
    )?;
    drop(writer);

    training::Checkpoint::from_run(&run_result).save(&run_dir.join("checkpoint.json"))?;
    Ok(match run_result.status {
        RunStatus::Completed => RunState::Completed,
        RunStatus::Diverged { epoch } => RunState::Diverged { epoch },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mut mean = values.iter().sum::<f64>() / n;
    // The exact mean lies within [min, max]; keep the rounded one there too.
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mean < lo {
        mean = lo;
    }
    if mean > hi {
        mean = hi;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub epoch: u64,
    pub cum_flops: u64,
    pub train_loss: MeanStd,
    pub train_acc: MeanStd,
    pub test_loss: MeanStd,
    pub test_acc: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub config_digest: String,
    pub label: String,
    pub seeds: usize,
    pub points: Vec<AggregatePoint>,
}

/// Cross-seed aggregation of one group of metric streams. All runs must
/// share the (epoch, cum_flops) grid. Standard deviations are population
/// deviations.
pub fn aggregate_group(
    digest: &str,
    label: &str,
    runs: &[Vec<MetricRecord>],
) -> Result<AggregateCurve, SweepError> {
    let reference: Vec<(u64, u64)> = runs[0].iter().map(|r| (r.epoch, r.cum_flops)).collect();
    for run in runs.iter().skip(1) {
        let grid: Vec<(u64, u64)> = run.iter().map(|r| (r.epoch, r.cum_flops)).collect();
        if grid != reference {
            return Err(SweepError::MismatchedFlopGrids { digest: digest.to_string() });
        }
    }
    let points = (0..reference.len())
        .map(|i| {
            let collect = |f: fn(&MetricRecord) -> f64| -> Vec<f64> {
                runs.iter().map(|run| f(&run[i])).collect()
            };
            AggregatePoint {
                epoch: reference[i].0,
                cum_flops: reference[i].1,
                train_loss: mean_std(&collect(|r| r.train_loss)),
                train_acc: mean_std(&collect(|r| r.train_acc)),
                test_loss: mean_std(&collect(|r| r.test_loss)),
                test_acc: mean_std(&collect(|r| r.test_acc)),
            }
        })
        .collect();
    Ok(AggregateCurve {
        config_digest: digest.to_string(),
        label: label.to_string(),
        seeds: runs.len(),
        points,
    })
}

/// Reads a sweep directory and aggregates completed runs per configuration,
/// in the order the spec lists configurations.
pub fn aggregate(out_dir: &Path) -> Result<Vec<AggregateCurve>, SweepError> {
    let manifest = Manifest::load(out_dir)?;
    let mut curves = Vec::new();
    for config in &manifest.spec.configs {
        let digest = config.digest();
        let mut records = Vec::new();
        for run in &manifest.runs {
            if run.config_digest == digest && run.status == RunState::Completed {
                let file = std::fs::File::open(out_dir.join(&run.metrics_path))?;
                records.push(training::read_metrics_csv(std::io::BufReader::new(file))?);
            }
        }
        if records.is_empty() {
            continue;
        }
        curves.push(aggregate_group(&digest, &config.label(), &records)?);
    }
    Ok(curves)
}

/// CSV rendering of aggregate curves: one row per (config, point, metric).
pub fn aggregates_to_csv(curves: &[AggregateCurve]) -> String {
    let mut out = String::from("config_digest,cum_flops,metric,mean,std\n");
    for curve in curves {
        for point in &curve.points {
            for (metric, value) in [
                ("train_loss", point.train_loss),
                ("train_acc", point.train_acc),
                ("test_loss", point.test_loss),
                ("test_acc", point.test_acc),
            ] {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    curve.config_digest, point.cum_flops, metric, value.mean, value.std
                ));
            }
        }
    }
    out
}
