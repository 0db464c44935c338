//! Command-line front end: graph generation, dataset construction, training,
//! sweeps, plotting, and verification.
//!
//! Exit codes: 0 success, 1 usage error, 2 invariant/verification failure,
//! 3 runtime failure (for example a run aborted on a non-finite loss).

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use reachlab_core::dataset::{
    self, generate_train_test, label_census, read_jsonl, write_jsonl, DatasetError,
};
use reachlab_core::graphs::{
    connectivity, grid_connectivity_via_embedding, transitive_closure, GraphDocument, GraphSpec,
};
use reachlab_core::model::{self, ModelConfig, PositionalEncoding};
use reachlab_core::numerics::{finite_difference_check, set_validation, ParamStore, Tape};
use reachlab_core::reporting::{summary_table, write_figure_set};
use reachlab_core::seeded_rng;
use reachlab_core::sweeps::{
    aggregate, aggregates_to_csv, preset, run_sweep, Manifest, RunState, SweepFamily, SweepScale,
};
use reachlab_core::training::{
    self, train_with, Checkpoint, RunStatus, TrainConfig, METRICS_HEADER,
};

const EXIT_USAGE: i32 = 1;
const EXIT_VERIFICATION: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(
    name = "reachlab",
    version,
    about = "Train small transformers on directed-graph connectivity and study how performance scales with compute"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a grid or chain graph and write it as JSON.
    GenGraph(GenGraphArgs),
    /// Build a train/test split from a generated graph.
    MakeDataset(MakeDatasetArgs),
    /// Train one model on a dataset, streaming metrics to CSV.
    Train(TrainArgs),
    /// Run a preset experiment grid across seeds.
    Sweep(SweepArgs),
    /// Aggregate a sweep directory and render figures.
    Plot(PlotArgs),
    /// Run invariant suites; nonzero exit on any failed check.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Grid,
    Chain,
}

#[derive(Args)]
struct GenGraphArgs {
    /// Graph family.
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Number of nodes.
    #[arg(long)]
    n: usize,
    /// Grid dimensionality (grid family only).
    #[arg(long)]
    k: Option<usize>,
    /// Number of chains (chain family only).
    #[arg(long)]
    chains: Option<usize>,
    /// Generation seed (chain family only; grids are deterministic).
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Graph JSON produced by gen-graph.
    #[arg(long)]
    graph: PathBuf,
    /// Positive test pairs to sample (multi-hop only).
    #[arg(long, default_value_t = dataset::DEFAULT_POS_TEST)]
    pos_test: usize,
    /// Disconnected test pairs to sample (both directions move to test).
    #[arg(long, default_value_t = dataset::DEFAULT_DISC_TEST)]
    disc_test: usize,
    /// Split sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON-lines path.
    #[arg(long)]
    out: PathBuf,
}

/// Optional config-file overlay for train. Flags beat file values, file
/// values beat built-in defaults.
#[derive(Default, serde::Deserialize)]
struct TrainFileConfig {
    d_emb: Option<usize>,
    num_heads: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    eval_every: Option<usize>,
    seed: Option<u64>,
    trainable_positions: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset JSON-lines produced by make-dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for metrics.csv, checkpoint.json, config.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Token-embedding width.
    #[arg(long)]
    d_emb: Option<usize>,
    /// Attention heads (must divide the model width).
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Epochs between metric records / test evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Master seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Learn the two positional code vectors instead of fixed one-hots.
    #[arg(long)]
    trainable_positions: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    ModelScaling,
    GraphScaling,
    GridDimensionality,
    ChainCount,
}

impl PresetArg {
    fn family(self) -> SweepFamily {
        match self {
            PresetArg::ModelScaling => SweepFamily::ModelScaling,
            PresetArg::GraphScaling => SweepFamily::GraphScaling,
            PresetArg::GridDimensionality => SweepFamily::GridDimensionality,
            PresetArg::ChainCount => SweepFamily::ChainCount,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Paper,
    Desk,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment family preset.
    #[arg(long, value_enum)]
    preset: PresetArg,
    /// Paper-scale grids or shrunk desk budgets.
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    /// Number of seeds (defaults: 10 paper, 3 desk).
    #[arg(long)]
    seeds: Option<usize>,
    /// Master seed all run seeds derive from.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Output directory (manifest, per-run files, aggregates).
    #[arg(long)]
    out: PathBuf,
    /// Worker pool size; REACHLAB_WORKERS env is the fallback, then the
    /// logical core count capped at the number of pending runs.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Sweep directory containing manifest.json.
    #[arg(long)]
    sweep_dir: PathBuf,
    /// Output directory for figures (default: <sweep-dir>/figures).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyMode {
    /// Vector-difference connectivity vs BFS on grid graphs.
    GridEmbedding,
    /// Full-model analytic gradients vs central finite differences.
    Gradients,
    /// Dataset split invariants: disjointness, coverage, labels, pairing.
    Splits,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    mode: VerifyMode,
    /// Node count (grid-embedding: single graph; splits: generated graph).
    #[arg(long)]
    n: Option<usize>,
    /// Grid dimensionality.
    #[arg(long)]
    k: Option<usize>,
    /// Chain count (splits with --family chain).
    #[arg(long)]
    chains: Option<usize>,
    /// Graph family for splits mode.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Seed for generated graphs and splits.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset file to check instead of generating one (splits mode).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Embedding width for the gradient check.
    #[arg(long, default_value_t = 8)]
    d_emb: usize,
    /// Sampled coordinates for the gradient check.
    #[arg(long, default_value_t = 256)]
    coords: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(error) => {
            let code = match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = error.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            EXIT_USAGE
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenGraph(args) => gen_graph(args),
        Command::MakeDataset(args) => make_dataset(args),
        Command::Train(args) => train_command(args),
        Command::Sweep(args) => sweep_command(args),
        Command::Plot(args) => plot_command(args),
        Command::Verify(args) => verify_command(args),
    }
}

fn gen_graph(args: GenGraphArgs) -> Result<i32> {
    let spec = match args.family {
        FamilyArg::Grid => {
            if args.chains.is_some() || args.seed.is_some() {
                bail!("--chains/--seed apply only to the chain family");
            }
            let k = args.k.context("grid graphs need --k")?;
            GraphSpec::Grid { n: args.n, k }
        }
        FamilyArg::Chain => {
            if args.k.is_some() {
                bail!("--k applies only to the grid family");
            }
            let chains = args.chains.context("chain graphs need --chains")?;
            GraphSpec::Chain { n: args.n, chains, seed: args.seed.unwrap_or(0) }
        }
    };
    let document = GraphDocument::build(spec)?;
    let graph = document.to_graph()?;
    write_text(&args.out, &(serde_json::to_string_pretty(&document)? + "\n"))?;
    println!(
        "nodes={} edges={} components={}",
        graph.num_nodes(),
        graph.num_edges(),
        graph.weakly_connected_components().len()
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn make_dataset(args: MakeDatasetArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.graph)
        .with_context(|| format!("reading {}", args.graph.display()))?;
    let document: GraphDocument = serde_json::from_str(&text).context("parsing graph JSON")?;
    let graph = document.to_graph()?;
    let closure = transitive_closure(&graph);
    let split = match generate_train_test(
        &graph,
        &closure,
        &document.spec.id(),
        args.pos_test,
        args.disc_test,
        args.seed,
        &mut seeded_rng(args.seed),
    ) {
        Ok(split) => split,
        Err(DatasetError::InsufficientMultiHop { requested, available }) => {
            eprintln!(
                "error: {requested} multi-hop positive test pairs requested but only \
                 {available} exist in this graph"
            );
            return Ok(EXIT_USAGE);
        }
        Err(other) => return Err(other.into()),
    };
    if split.provenance.disc_test_sampled < args.disc_test {
        eprintln!(
            "warning: only {} of {} requested disconnected pairs exist; test set has {} examples",
            split.provenance.disc_test_sampled,
            args.disc_test,
            split.test.len()
        );
    }
    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_jsonl(&split, std::io::BufWriter::new(file))?;
    let census = label_census(&split);
    println!(
        "train={} (Y={} N={}) test={} (Y={} N={})",
        split.train.len(),
        census.train_y,
        census.train_n,
        split.test.len(),
        census.test_y,
        census.test_n
    );
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn train_command(args: TrainArgs) -> Result<i32> {
    let file_config: TrainFileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).context("parsing train config JSON")?
        }
        None => TrainFileConfig::default(),
    };
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        epochs: args.epochs.or(file_config.epochs).unwrap_or(defaults.epochs),
        batch_size: args.batch_size.or(file_config.batch_size).unwrap_or(defaults.batch_size),
        lr: args.lr.or(file_config.lr).unwrap_or(defaults.lr),
        beta1: args.beta1.or(file_config.beta1).unwrap_or(defaults.beta1),
        beta2: args.beta2.or(file_config.beta2).unwrap_or(defaults.beta2),
        eps: args.eps.or(file_config.eps).unwrap_or(defaults.eps),
        eval_every: args.eval_every.or(file_config.eval_every).unwrap_or(defaults.eval_every),
        seed: args.seed.or(file_config.seed).unwrap_or(defaults.seed),
    };
    let d_emb = args.d_emb.or(file_config.d_emb).unwrap_or(64);

    let file = std::fs::File::open(&args.dataset)
        .with_context(|| format!("reading {}", args.dataset.display()))?;
    let split = read_jsonl(std::io::BufReader::new(file))?;
    let mut model_config = ModelConfig::new(d_emb, split.num_nodes() + 2);
    if let Some(heads) = args.num_heads.or(file_config.num_heads) {
        model_config.num_heads = heads;
    }
    if args.trainable_positions || file_config.trainable_positions.unwrap_or(false) {
        model_config.positional = PositionalEncoding::Trainable;
    }
    model_config.validate().map_err(anyhow::Error::from)?;

    std::fs::create_dir_all(&args.out)?;
    let effective = serde_json::json!({
        "dataset": args.dataset.display().to_string(),
        "graph_id": split.provenance.graph_id,
        "model": model_config,
        "train": train_config,
        "flops_formula": model::FLOPS_FORMULA_VERSION,
        "flops_per_example": model::flops_per_example(&model_config),
    });
    write_text(
        &args.out.join("config.json"),
        &(serde_json::to_string_pretty(&effective)? + "\n"),
    )?;

    let metrics_path = args.out.join("metrics.csv");
    let metrics_file = std::fs::File::create(&metrics_path)?;
    let mut writer = std::io::BufWriter::new(metrics_file);
    writeln!(writer, "{METRICS_HEADER}")?;
    writer.flush()?;
    // Group identity for the config digest: the graph id without the
    // generation seed, so runs differing only by seed aggregate together.
    let graph_group = split
        .provenance
        .graph_id
        .rsplit_once("-s")
        .map(|(group, _)| group.to_string())
        .unwrap_or_else(|| split.provenance.graph_id.clone());
    let run = train_with::<f32>(&split, &graph_group, &model_config, &train_config, |record| {
        let _ = writeln!(writer, "{}", training::record_to_csv(record));
        let _ = writer.flush();
    })?;
    drop(writer);
    Checkpoint::from_run(&run).save(&args.out.join("checkpoint.json"))?;

    if let Some(last) = run.records.last() {
        println!(
            "epochs={} cum_flops={} train_loss={:.4} train_acc={:.4} test_loss={:.4} test_acc={:.4}",
            last.epoch, last.cum_flops, last.train_loss, last.train_acc, last.test_loss,
            last.test_acc
        );
    }
    println!("wrote {}", metrics_path.display());
    match run.status {
        RunStatus::Completed => Ok(0),
        RunStatus::Diverged { epoch } => {
            eprintln!("error: training aborted at epoch {epoch}: non-finite loss");
            Ok(EXIT_RUNTIME)
        }
    }
}

fn sweep_command(args: SweepArgs) -> Result<i32> {
    let scale = match args.scale {
        ScaleArg::Paper => SweepScale::Paper,
        ScaleArg::Desk => SweepScale::Desk,
    };
    let mut spec = preset(args.preset.family(), scale);
    if let Some(seeds) = args.seeds {
        spec = spec.with_seeds(seeds);
    }
    if let Some(master) = args.master_seed {
        spec.master_seed = master;
    }
    let total_flops: u64 =
        spec.configs.iter().map(|c| c.flop_budget() * spec.seed_indices.len() as u64).sum();
    println!(
        "sweep {}: {} configs x {} seeds = {} runs (~{:.2e} accounted FLOPs)",
        spec.sweep_id,
        spec.configs.len(),
        spec.seed_indices.len(),
        spec.configs.len() * spec.seed_indices.len(),
        total_flops as f64
    );
    let manifest = run_sweep(&spec, &args.out, args.workers)?;
    let mut completed = 0;
    let mut diverged = 0;
    let mut failed = 0;
    for run in &manifest.runs {
        match &run.status {
            RunState::Completed => completed += 1,
            RunState::Diverged { .. } => diverged += 1,
            RunState::Failed { message } => {
                failed += 1;
                eprintln!(
                    "warning: {} seed {} failed: {message}",
                    run.config_label, run.seed
                );
            }
            RunState::Pending => {}
        }
    }
    println!("completed={completed} diverged={diverged} failed={failed}");

    let curves = aggregate(&args.out)?;
    write_text(&args.out.join("aggregates.csv"), &aggregates_to_csv(&curves))?;
    write_text(&args.out.join("summary.csv"), &summary_table(&curves))?;
    println!("wrote {}", args.out.join("aggregates.csv").display());
    println!("wrote {}", args.out.join("summary.csv").display());
    Ok(0)
}

fn plot_command(args: PlotArgs) -> Result<i32> {
    let manifest = Manifest::load(&args.sweep_dir)?;
    let curves = aggregate(&args.sweep_dir)?;
    if curves.is_empty() {
        eprintln!("error: no completed runs to plot");
        return Ok(EXIT_USAGE);
    }
    let out = args.out.unwrap_or_else(|| args.sweep_dir.join("figures"));
    let paths = write_figure_set(
        &curves,
        &manifest.sweep_id,
        manifest.spec.family.slug(),
        &out,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    write_text(&out.join("summary.csv"), &summary_table(&curves))?;
    for path in paths {
        println!("wrote {}", path.display());
    }
    println!("wrote {}", out.join("summary.csv").display());
    Ok(0)
}

fn verify_command(args: VerifyArgs) -> Result<i32> {
    match args.mode {
        VerifyMode::GridEmbedding => verify_grid_embedding(&args),
        VerifyMode::Gradients => verify_gradients(&args),
        VerifyMode::Splits => verify_splits(&args),
    }
}

fn verify_grid_embedding(args: &VerifyArgs) -> Result<i32> {
    let cases: Vec<(usize, usize)> = match (args.n, args.k) {
        (Some(n), Some(k)) => vec![(n, k)],
        (Some(n), None) => (1..=5).map(|k| (n, k)).collect(),
        (None, _) => {
            let mut all = Vec::new();
            for n in [4, 5, 8, 27, 50, 100, 200] {
                for k in 1..=5 {
                    all.push((n, k));
                }
            }
            all
        }
    };
    let mut checked = 0u64;
    for (n, k) in cases {
        let (graph, embedding) = reachlab_core::graphs::generate_grid_graph(n, k)?;
        let closure = transitive_closure(&graph);
        for u in 0..n as u32 {
            for v in 0..n as u32 {
                if u == v {
                    continue;
                }
                let by_embedding = grid_connectivity_via_embedding(&embedding, u, v)?;
                let by_bfs = connectivity(&closure, u, v)?;
                if by_embedding != by_bfs {
                    println!(
                        "counterexample: n={n} k={k} pair ({u}, {v}): embedding says \
                         {by_embedding}, BFS says {by_bfs}"
                    );
                    return Ok(EXIT_VERIFICATION);
                }
                checked += 1;
            }
        }
        println!("n={n} k={k}: all {} ordered pairs agree", n * (n - 1));
    }
    println!("grid-embedding: {checked} pair checks, zero mismatches");
    Ok(0)
}

fn verify_gradients(args: &VerifyArgs) -> Result<i32> {
    let n = args.n.unwrap_or(10);
    let vocab = n + 2;
    let config = ModelConfig::new(args.d_emb, vocab);
    config.validate().map_err(anyhow::Error::from)?;
    set_validation(true);
    let mut params = model::init_params::<f64, _>(&config, &mut seeded_rng(args.seed))?;
    model::prepare_gradcheck_point(&mut params, &mut seeded_rng(args.seed ^ 0x9E37));
    let tokens: Vec<[u32; 2]> =
        (0..64).map(|i| [(i % n) as u32, ((i * 7 + 3) % n) as u32]).collect();
    let targets: std::sync::Arc<Vec<u32>> =
        std::sync::Arc::new((0..64).map(|i| (n + (i % 2)) as u32).collect());
    let loss_of = {
        let config = config.clone();
        let tokens = tokens.clone();
        let targets = targets.clone();
        move |store: &ParamStore<f64>| -> f64 {
            let rebound = model::ModelParams::from_store(config.clone(), store.clone())
                .expect("store matches config");
            let mut tape = Tape::new();
            let logits = model::forward(&mut tape, &rebound, &tokens).expect("forward");
            let loss = tape.cross_entropy_mean(logits, targets.clone());
            tape.value(loss).item()
        }
    };
    {
        let mut tape = Tape::new();
        let logits = model::forward(&mut tape, &params, &tokens)?;
        let loss = tape.cross_entropy_mean(logits, targets.clone());
        tape.backward(loss, params.store_mut()).map_err(anyhow::Error::from)?;
    }
    let report = finite_difference_check(
        params.store_mut(),
        loss_of,
        args.step,
        args.coords,
        &mut seeded_rng(args.seed ^ 0x51CA),
    );
    set_validation(false);
    println!(
        "gradients: max relative error {:.3e} over {} coordinates (d_emb={}, n={n}, h={:.1e})",
        report.max_rel_error, report.coords_checked, args.d_emb, args.step
    );
    if let Some(worst) = &report.worst {
        println!(
            "worst coordinate: {}[{}] analytic {:.6e} vs numeric {:.6e}",
            worst.param, worst.index, worst.analytic, worst.numeric
        );
    }
    if report.max_rel_error < args.tolerance {
        Ok(0)
    } else {
        println!("tolerance {} exceeded", args.tolerance);
        Ok(EXIT_VERIFICATION)
    }
}

fn verify_splits(args: &VerifyArgs) -> Result<i32> {
    let split = match &args.dataset {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("reading {}", path.display()))?;
            read_jsonl(std::io::BufReader::new(file))?
        }
        None => {
            let n = args.n.unwrap_or(50);
            let spec = match args.family.unwrap_or(FamilyArg::Grid) {
                FamilyArg::Grid => GraphSpec::Grid { n, k: args.k.unwrap_or(2) },
                FamilyArg::Chain => GraphSpec::Chain {
                    n,
                    chains: args.chains.unwrap_or(10),
                    seed: args.seed,
                },
            };
            let (graph, _) = spec.generate()?;
            let closure = transitive_closure(&graph);
            generate_train_test(
                &graph,
                &closure,
                &spec.id(),
                dataset::DEFAULT_POS_TEST.min(count_multi_hop(&closure)),
                dataset::DEFAULT_DISC_TEST,
                args.seed,
                &mut seeded_rng(args.seed),
            )?
        }
    };

    // Rebuild the oracle from the recorded provenance and re-check every
    // invariant.
    let n = split.num_nodes();
    let graph = rebuild_graph(&split.provenance.graph_id, n)?;
    let closure = transitive_closure(&graph);
    let mut seen = std::collections::HashSet::new();
    let mut violations = 0usize;
    for example in split.train.iter().chain(&split.test) {
        if example.start == example.goal {
            println!("violation: self pair ({}, {})", example.start, example.goal);
            violations += 1;
        }
        if !seen.insert((example.start, example.goal)) {
            println!("violation: duplicate pair ({}, {})", example.start, example.goal);
            violations += 1;
        }
        let reachable = closure.is_reachable(example.start, example.goal);
        if (example.label == dataset::Label::Y) != reachable {
            println!(
                "violation: label of ({}, {}) disagrees with the oracle",
                example.start, example.goal
            );
            violations += 1;
        }
    }
    if seen.len() != n * (n - 1) {
        println!("violation: {} pairs present, expected {}", seen.len(), n * (n - 1));
        violations += 1;
    }
    let test_pairs: std::collections::HashSet<(u32, u32)> =
        split.test.iter().map(|e| (e.start, e.goal)).collect();
    for example in &split.test {
        if example.label == dataset::Label::Y {
            match closure.dist(example.start, example.goal) {
                Some(d) if d > 1 => {}
                _ => {
                    println!(
                        "violation: test positive ({}, {}) is not multi-hop",
                        example.start, example.goal
                    );
                    violations += 1;
                }
            }
            if !test_pairs.contains(&(example.goal, example.start)) {
                println!(
                    "violation: reverse of test positive ({}, {}) missing from test",
                    example.start, example.goal
                );
                violations += 1;
            }
        }
    }
    let census = label_census(&split);
    println!(
        "splits: train={} (Y={} N={}) test={} (Y={} N={})",
        split.train.len(),
        census.train_y,
        census.train_n,
        split.test.len(),
        census.test_y,
        census.test_n
    );
    if violations == 0 {
        println!("splits: disjointness, coverage, labels, reverse pairing all hold");
        Ok(0)
    } else {
        println!("splits: {violations} violations");
        Ok(EXIT_VERIFICATION)
    }
}

fn count_multi_hop(closure: &reachlab_core::graphs::ReachabilityClosure) -> usize {
    let n = closure.num_nodes() as u32;
    let mut count = 0;
    for u in 0..n {
        for v in 0..n {
            if u != v && closure.dist(u, v).map(|d| d > 1).unwrap_or(false) {
                count += 1;
            }
        }
    }
    count
}

/// Parses graph ids of the forms `grid-n{n}-k{k}` and `chain-n{n}-c{c}-s{seed}`.
fn rebuild_graph(graph_id: &str, n: usize) -> Result<reachlab_core::graphs::DirectedGraph> {
    let parse = |tag: &str| -> Option<u64> {
        graph_id
            .split('-')
            .find(|part| part.starts_with(tag) && part[tag.len()..].parse::<u64>().is_ok())
            .and_then(|part| part[tag.len()..].parse().ok())
    };
    if graph_id.starts_with("grid-") {
        let k = parse("k").context("grid id missing k")? as usize;
        let spec = GraphSpec::Grid { n, k };
        Ok(spec.generate()?.0)
    } else if graph_id.starts_with("chain-") {
        let chains = parse("c").context("chain id missing c")? as usize;
        let seed = parse("s").context("chain id missing seed")?;
        let spec = GraphSpec::Chain { n, chains, seed };
        Ok(spec.generate()?.0)
    } else {
        bail!("cannot rebuild graph from id {graph_id:?}");
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
