//! Seeded training loop producing FLOP-indexed metric records.
//!
//! One [`Trainer`] owns one model run: it shuffles the train split each
//! epoch with a seeded generator, steps the optimizer per minibatch, and
//! emits a [`MetricRecord`] at epoch 1, every `eval_every` epochs, and at the
//! final epoch. Cumulative FLOPs advance by `batch_len x flops_per_example`
//! per step, so with full epochs the counter is exactly
//! `epochs x train_size x flops_per_example`.
//!
//! A non-finite training loss aborts the run with a diagnostic record; test
//! metrics are recorded as they come, divergence included.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{build_vocabulary, encode_example, DatasetError, DatasetSplit, Label};
use crate::digest::digest_of;
use crate::model::{
    self, flops_per_example, init_params, ModelConfig, ModelError, ModelParams,
    FLOPS_FORMULA_VERSION,
};
use crate::numerics::{
    backward_call_count, validation_enabled, AdamSettings, Scalar, StoreSnapshot, Tape,
};
use crate::seeded_rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Evaluation batches are capped so huge test sets cannot blow up memory.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training needs a nonempty train split")]
    EmptyTrainSplit,
    #[error("model vocabulary {model} does not match dataset vocabulary {data}")]
    VocabularyMismatch { model: usize, data: usize },
    #[error("epochs, batch_size, and eval_every must all be >= 1")]
    BadSchedule,
    #[error("checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between test evaluations / metric records.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 1024,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamSettings {
        AdamSettings { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 || self.batch_size < 1 || self.eval_every < 1 {
            return Err(TrainError::BadSchedule);
        }
        Ok(())
    }
}

/// One snapshot of a run. Train metrics are running means over the epoch's
/// minibatches; test metrics come from a full no-gradient pass. Test columns
/// are NaN when the test split is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    pub cum_flops: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub test_acc_y: f64,
    pub test_acc_n: f64,
    pub seconds: f64,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: u64 },
}

/// Loss, overall accuracy, and per-class accuracy (NaN for absent classes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub acc_y: f64,
    pub acc_n: f64,
}

/// Seed-independent identity of a run configuration: graph family and
/// parameters, model configuration, and training schedule. Runs that differ
/// only by seed share a digest, which is what sweeps aggregate over.
#[derive(Serialize)]
struct DigestView<'a> {
    graph_group: &'a str,
    model: &'a ModelConfig,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    eval_every: usize,
    precision: &'static str,
    flops_formula: &'static str,
}

pub fn config_digest<S: Scalar>(
    graph_group: &str,
    model: &ModelConfig,
    train: &TrainConfig,
) -> String {
    digest_of(&DigestView {
        graph_group,
        model,
        epochs: train.epochs,
        batch_size: train.batch_size,
        lr: train.lr,
        beta1: train.beta1,
        beta2: train.beta2,
        eps: train.eps,
        eval_every: train.eval_every,
        precision: S::TAG,
        flops_formula: FLOPS_FORMULA_VERSION,
    })
}

#[cfg(not(target_arch = "wasm32"))]
fn clock() -> Option<std::time::Instant> {
    Some(std::time::Instant::now())
}

#[cfg(target_arch = "wasm32")]
fn clock() -> Option<std::time::Instant> {
    None
}

fn elapsed(start: &Option<std::time::Instant>) -> f64 {
    start.map(|t| t.elapsed().as_secs_f64()).unwrap_or(0.0)
}

/// An in-progress training run; step it by whole epochs. The web demo drives
/// this incrementally, [`train`] drives it to completion.
pub struct Trainer<S: Scalar> {
    params: ModelParams<S>,
    train_set: Vec<([u32; 2], u32)>,
    test_set: Vec<([u32; 2], u32)>,
    test_labels: Vec<Label>,
    config: TrainConfig,
    adam: AdamSettings,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: u64,
    cum_flops: u64,
    fpe: u64,
    digest: String,
    records: Vec<MetricRecord>,
    status: RunStatus,
    started: Option<std::time::Instant>,
}

impl<S: Scalar> Trainer<S> {
    /// Validates configs, encodes the split, and initializes parameters from
    /// the run seed. `graph_group` is the seed-independent graph identity
    /// used for the config digest.
    pub fn new(
        split: &DatasetSplit,
        graph_group: &str,
        model_config: &ModelConfig,
        train_config: &TrainConfig,
    ) -> Result<Self, TrainError> {
        train_config.validate()?;
        model_config.validate()?;
        if split.train.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        let vocab = build_vocabulary(split.num_nodes())?;
        if vocab.size() != model_config.vocab_size {
            return Err(TrainError::VocabularyMismatch {
                model: model_config.vocab_size,
                data: vocab.size(),
            });
        }
        let train_set = split
            .train
            .iter()
            .map(|e| encode_example(e, &vocab))
            .collect::<Result<Vec<_>, _>>()?;
        let test_set = split
            .test
            .iter()
            .map(|e| encode_example(e, &vocab))
            .collect::<Result<Vec<_>, _>>()?;
        let test_labels = split.test.iter().map(|e| e.label).collect();
        let mut rng = seeded_rng(train_config.seed);
        let params = init_params::<S, _>(model_config, &mut rng)?;
        let digest = config_digest::<S>(graph_group, model_config, train_config);
        let order = (0..train_set.len()).collect();
        Ok(Self {
            params,
            train_set,
            test_set,
            test_labels,
            config: train_config.clone(),
            adam: train_config.adam(),
            rng,
            order,
            epoch: 0,
            cum_flops: 0,
            fpe: flops_per_example(model_config),
            digest,
            records: Vec::new(),
            status: RunStatus::Completed,
            started: clock(),
        })
    }

    pub fn config_digest(&self) -> &str {
        &self.digest
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn status(&self) -> RunStatus {
        self.status
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut_for_tests(&mut self) -> &mut crate::numerics::ParamStore<S> {
        self.params.store_mut()
    }

    pub fn epochs_done(&self) -> u64 {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs as u64 || matches!(self.status, RunStatus::Diverged { .. })
    }

    /// Serialized generator state alongside the seed; restoring both resumes
    /// the stream exactly.
    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Runs up to `count` further epochs, appending records on evaluation
    /// epochs. Returns how many records were appended. Stops early on
    /// divergence.
    pub fn run_epochs(
        &mut self,
        count: usize,
        mut observer: impl FnMut(&MetricRecord),
    ) -> Result<usize, TrainError> {
        let mut appended = 0;
        let total = self.config.epochs as u64;
        for _ in 0..count {
            if self.finished() {
                break;
            }
            let epoch = self.epoch + 1;
            self.order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;
            let mut diverged = false;
            for chunk in self.order.chunks(self.config.batch_size) {
                let tokens: Vec<[u32; 2]> =
                    chunk.iter().map(|&i| self.train_set[i].0).collect();
                let targets: Vec<u32> = chunk.iter().map(|&i| self.train_set[i].1).collect();
                let batch_loss;
                {
                    let mut tape = Tape::new();
                    let logits = model::forward(&mut tape, &self.params, &tokens)?;
                    let loss = tape.cross_entropy_mean(logits, Arc::new(targets.clone()));
                    batch_loss = tape.value(loss).item().to_f64();
                    if !batch_loss.is_finite() {
                        diverged = true;
                    } else {
                        correct += model::count_correct(tape.value(logits), &targets);
                        tape.backward(loss, self.params.store_mut())
                            .expect("loss is scalar by construction");
                    }
                }
                if diverged {
                    break;
                }
                self.params.store_mut().adam_step(&self.adam);
                self.params.store_mut().zero_grads();
                loss_sum += batch_loss * chunk.len() as f64;
                self.cum_flops += self.fpe * chunk.len() as u64;
            }
            self.epoch = epoch;
            if diverged {
                self.status = RunStatus::Diverged { epoch };
                let record = self.diagnostic_record(epoch);
                observer(&record);
                self.records.push(record);
                appended += 1;
                break;
            }
            let record_due = epoch == 1 || epoch % self.config.eval_every as u64 == 0
                || epoch == total;
            if record_due {
                let train_loss = loss_sum / self.train_set.len() as f64;
                let train_acc = correct as f64 / self.train_set.len() as f64;
                let test = if self.test_set.is_empty() {
                    EvalMetrics {
                        loss: f64::NAN,
                        accuracy: f64::NAN,
                        acc_y: f64::NAN,
                        acc_n: f64::NAN,
                    }
                } else {
                    evaluate_encoded(&self.params, &self.test_set, &self.test_labels)?
                };
                let record = MetricRecord {
                    epoch,
                    cum_flops: self.cum_flops,
                    train_loss,
                    train_acc,
                    test_loss: test.loss,
                    test_acc: test.accuracy,
                    test_acc_y: test.acc_y,
                    test_acc_n: test.acc_n,
                    seconds: elapsed(&self.started),
                    seed: self.config.seed,
                    config_digest: self.digest.clone(),
                };
                observer(&record);
                self.records.push(record);
                appended += 1;
            }
        }
        Ok(appended)
    }

    fn diagnostic_record(&self, epoch: u64) -> MetricRecord {
        MetricRecord {
            epoch,
            cum_flops: self.cum_flops,
            train_loss: f64::NAN,
            train_acc: f64::NAN,
            test_loss: f64::NAN,
            test_acc: f64::NAN,
            test_acc_y: f64::NAN,
            test_acc_n: f64::NAN,
            seconds: elapsed(&self.started),
            seed: self.config.seed,
            config_digest: self.digest.clone(),
        }
    }

    fn into_run(self) -> TrainRun<S> {
        TrainRun {
            records: self.records,
            status: self.status,
            rng_state: RngState::capture(&self.rng),
            config_digest: self.digest,
            train_config: self.config,
            params: self.params,
        }
    }
}

/// Finished run: metric stream, final parameters, and generator state.
pub struct TrainRun<S: Scalar> {
    pub records: Vec<MetricRecord>,
    pub status: RunStatus,
    pub rng_state: RngState,
    pub config_digest: String,
    pub train_config: TrainConfig,
    pub params: ModelParams<S>,
}

/// Trains to completion, invoking `observer` at every metric record (the CLI
/// streams records to disk through this).
pub fn train_with<S: Scalar>(
    split: &DatasetSplit,
    graph_group: &str,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    observer: impl FnMut(&MetricRecord),
) -> Result<TrainRun<S>, TrainError> {
    let mut trainer = Trainer::new(split, graph_group, model_config, train_config)?;
    trainer.run_epochs(train_config.epochs, observer)?;
    Ok(trainer.into_run())
}

/// Trains to completion without an observer.
pub fn train<S: Scalar>(
    split: &DatasetSplit,
    graph_group: &str,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainRun<S>, TrainError> {
    train_with(split, graph_group, model_config, train_config, |_| {})
}

/// Loss, accuracy, and per-class accuracy on a list of examples. Never
/// mutates parameters and never computes gradients; in validation mode that
/// is asserted via the global backward counter.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    examples: &[crate::dataset::PairExample],
) -> Result<EvalMetrics, TrainError> {
    let vocab = build_vocabulary(params.config().vocab_size - 2)?;
    let encoded = examples
        .iter()
        .map(|e| encode_example(e, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<Label> = examples.iter().map(|e| e.label).collect();
    evaluate_encoded(params, &encoded, &labels)
}

fn evaluate_encoded<S: Scalar>(
    params: &ModelParams<S>,
    encoded: &[([u32; 2], u32)],
    labels: &[Label],
) -> Result<EvalMetrics, TrainError> {
    if encoded.is_empty() {
        return Err(TrainError::Model(ModelError::EmptyBatch));
    }
    let backward_before = backward_call_count();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut correct_y = 0usize;
    let mut correct_n = 0usize;
    let mut count_y = 0usize;
    let mut count_n = 0usize;
    for (chunk, chunk_labels) in
        encoded.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK))
    {
        let tokens: Vec<[u32; 2]> = chunk.iter().map(|(t, _)| *t).collect();
        let targets: Vec<u32> = chunk.iter().map(|(_, t)| *t).collect();
        let mut tape = Tape::new();
        let logits = model::forward(&mut tape, params, &tokens)?;
        let loss = tape.cross_entropy_mean(logits, Arc::new(targets.clone()));
        loss_sum += tape.value(loss).item().to_f64() * chunk.len() as f64;
        let values = tape.value(logits);
        for (r, (&target, &label)) in targets.iter().zip(chunk_labels).enumerate() {
            let row_correct = {
                let row = values.row(r);
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best == target as usize
            };
            correct += row_correct as usize;
            match label {
                Label::Y => {
                    count_y += 1;
                    correct_y += row_correct as usize;
                }
                Label::N => {
                    count_n += 1;
                    correct_n += row_correct as usize;
                }
            }
        }
    }
    if validation_enabled() {
        assert_eq!(
            backward_call_count(),
            backward_before,
            "evaluation must not compute gradients"
        );
    }
    let ratio = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    Ok(EvalMetrics {
        loss: loss_sum / encoded.len() as f64,
        accuracy: correct as f64 / encoded.len() as f64,
        acc_y: ratio(correct_y, count_y),
        acc_n: ratio(correct_n, count_n),
    })
}

/// Column layout of the metrics stream.
pub const METRICS_HEADER: &str = "epoch,cum_flops,train_loss,train_acc,test_loss,test_acc,test_acc_Y,test_acc_N,seconds,seed,config_digest";

pub fn record_to_csv(record: &MetricRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        record.epoch,
        record.cum_flops,
        record.train_loss,
        record.train_acc,
        record.test_loss,
        record.test_acc,
        record.test_acc_y,
        record.test_acc_n,
        record.seconds,
        record.seed,
        record.config_digest
    )
}

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for record in records {
        writeln!(out, "{}", record_to_csv(record))?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(reader: R) -> Result<Vec<MetricRecord>, TrainError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| TrainError::MalformedCheckpoint("empty metrics file".into()))??;
    if header.trim() != METRICS_HEADER {
        return Err(TrainError::MalformedCheckpoint(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(TrainError::MalformedCheckpoint(format!(
                "expected 11 columns, got {}",
                fields.len()
            )));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| {
            TrainError::MalformedCheckpoint(format!("bad float {s:?}: {e}"))
        });
        records.push(MetricRecord {
            epoch: fields[0]
                .parse()
                .map_err(|e| TrainError::MalformedCheckpoint(format!("bad epoch: {e}")))?,
            cum_flops: fields[1]
                .parse()
                .map_err(|e| TrainError::MalformedCheckpoint(format!("bad flops: {e}")))?,
            train_loss: parse_f(fields[2])?,
            train_acc: parse_f(fields[3])?,
            test_loss: parse_f(fields[4])?,
            test_acc: parse_f(fields[5])?,
            test_acc_y: parse_f(fields[6])?,
            test_acc_n: parse_f(fields[7])?,
            seconds: parse_f(fields[8])?,
            seed: fields[9]
                .parse()
                .map_err(|e| TrainError::MalformedCheckpoint(format!("bad seed: {e}")))?,
            config_digest: fields[10].to_string(),
        });
    }
    Ok(records)
}

/// Exact generator state: seed bytes plus stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        Self {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, TrainError> {
        if self.seed_hex.len() != 64 {
            return Err(TrainError::MalformedCheckpoint("bad rng seed length".into()));
        }
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.iter_mut().enumerate() {
            *chunk = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|e| TrainError::MalformedCheckpoint(format!("bad rng seed: {e}")))?;
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

/// On-disk checkpoint: model and training configuration, generator state,
/// and every parameter tensor bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub status: RunStatus,
    pub rng: RngState,
    pub store: StoreSnapshot,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_run<S: Scalar>(run: &TrainRun<S>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: run.params.config().clone(),
            train_config: run.train_config.clone(),
            status: run.status,
            rng: run.rng_state.clone(),
            store: run.params.store().snapshot(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    pub fn params<S: Scalar>(&self) -> Result<ModelParams<S>, TrainError> {
        let store = crate::numerics::ParamStore::<S>::from_snapshot(&self.store)
            .map_err(|e| TrainError::MalformedCheckpoint(e.to_string()))?;
        Ok(ModelParams::from_store(self.model_config.clone(), store)?)
    }
}
