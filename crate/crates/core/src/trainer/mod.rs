//! The momentum-contrastive training loop.
//!
//! One step: embed the first views with the query encoder; embed the
//! shuffled second views with the key encoder (no gradient) and unshuffle;
//! evaluate the filtered dual-view loss against the bank; backpropagate into
//! the query encoder and take an SGD step; move the key encoder toward the
//! query encoder; enqueue the keys.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{DataConfig, DataSource, TrainConfig};
pub use optim::{sgd_step, OptimizerState};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::RngCore;

use crate::data::{gen_clusters, load_cifar10, load_cifar100, read_csv, Augmenter, Dataset, Normalizer, VectorAugment};
use crate::encoder::{EncoderPair, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{embed_dataset, knn_top1, KnnConfig};
use crate::memory_bank::MemoryBank;
use crate::numeric::Matrix;
use crate::objective::filtered_dual_view_loss;
use crate::rng::SeededRng;

pub const METRICS_HEADER: &str = "step,epoch,loss,loss_query_term,loss_key_term,lr,queue_ptr,knn_top1";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

// stream ids carved out of the run seed
const STREAM_ENCODER_INIT: u64 = 1;
const STREAM_BANK_INIT: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    SeededRng::with_stream(seed, stream).next_u64()
}

/// Permutes batch rows; returns the permuted batch and the permutation
/// (`out[i] = batch[perm[i]]`).
pub fn shuffle_batch(batch: &Matrix, rng: &mut SeededRng) -> Result<(Matrix, Vec<usize>)> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let perm = rng.permutation(batch.rows());
    Ok((batch.select_rows(&perm), perm))
}

/// Inverse of [`shuffle_batch`].
pub fn unshuffle_batch(shuffled: &Matrix, perm: &[usize]) -> Result<Matrix> {
    if shuffled.rows() != perm.len() {
        return Err(Error::ShapeMismatch(format!("{} rows for a permutation of {}", shuffled.rows(), perm.len())));
    }
    let mut out = Matrix::zeros(shuffled.rows(), shuffled.cols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(shuffled.row(i));
    }
    Ok(out)
}

/// Mutable state of a run: everything a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoders: EncoderPair,
    pub optimizer: OptimizerState,
    pub bank: MemoryBank,
    pub rng: SeededRng,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoders = EncoderPair::new(
            &config.encoder,
            derive_seed(config.seed, STREAM_ENCODER_INIT),
            config.momentum_coefficient,
        )?;
        let bank = MemoryBank::new(
            config.queue_capacity,
            config.encoder.embedding_dim(),
            derive_seed(config.seed, STREAM_BANK_INIT),
        )?;
        Ok(Self::from_parts(config, encoders, bank))
    }

    /// State with explicit encoders and bank; the optimizer starts at rest.
    pub fn from_parts(config: TrainConfig, encoders: EncoderPair, bank: MemoryBank) -> Self {
        let optimizer = OptimizerState::new(&encoders.query);
        let rng = SeededRng::new(config.seed);
        Self { config, encoders, optimizer, bank, rng, step: 0 }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            query: self.encoders.query.clone(),
            key: self.encoders.key.clone(),
            velocity: self.optimizer.velocity.clone(),
            bank: self.bank.clone(),
            rng: self.rng.state(),
            step: self.step,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let encoders = EncoderPair::from_parts(ckpt.query, ckpt.key, ckpt.config.momentum_coefficient)?;
        Ok(Self {
            optimizer: OptimizerState { velocity: ckpt.velocity },
            bank: ckpt.bank,
            rng: SeededRng::from_state(ckpt.rng),
            step: ckpt.step,
            config: ckpt.config,
            encoders,
        })
    }
}

/// Loss components of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    pub query_term: f64,
    pub key_term: f64,
    /// Bank write pointer after the enqueue.
    pub queue_ptr: usize,
}

/// One optimization step on a batch of paired views (row `i` of `view1` and
/// `view2` are two views of the same item).
pub fn train_step(state: &mut TrainState, view1: &Matrix, view2: &Matrix) -> Result<StepMetrics> {
    if view1.rows() != view2.rows() || view1.cols() != view2.cols() {
        return Err(Error::ShapeMismatch("view batches differ in shape".into()));
    }
    let cfg = &state.config;

    let cache = state.encoders.query.forward(view1)?;
    let keys = {
        let (shuffled, perm) = shuffle_batch(view2, &mut state.rng)?;
        let k = state.encoders.key.embed(&shuffled)?;
        unshuffle_batch(&k, &perm)?
    };

    let loss = filtered_dual_view_loss(cache.output(), &keys, &state.bank, &cfg.loss)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = state.encoders.query.backward(&cache, &loss.grad_q)?;
    sgd_step(
        &mut state.encoders.query,
        &grads,
        &mut state.optimizer.velocity,
        cfg.learning_rate,
        cfg.sgd_momentum,
        cfg.weight_decay,
    )?;
    state.encoders.momentum_update();
    state.bank.enqueue(&keys)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        loss: loss.total,
        query_term: loss.query_term,
        key_term: loss.key_term,
        queue_ptr: state.bank.write_ptr(),
    })
}

/// Train/test splits and the augmentation derived from a [`DataConfig`].
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub augmenter: Augmenter,
}

impl TrainData {
    pub fn prepare(config: &TrainConfig) -> Result<Self> {
        let d = &config.data;
        let path = || d.path.clone().ok_or_else(|| Error::ConfigInvalid("data.path is required".into()));
        let (train, test, vector) = match d.source {
            DataSource::Synthetic => {
                let all = gen_clusters(d.classes, d.per_class, d.dim, d.spread, d.seed)?;
                let (a, b) = all.split(d.test_fraction, d.split_seed)?;
                (a, b, true)
            }
            DataSource::Csv => {
                let all = read_csv(&path()?)?;
                let (a, b) = all.split(d.test_fraction, d.split_seed)?;
                (a, b, true)
            }
            DataSource::Cifar10 => {
                let (a, b) = load_cifar10(&path()?)?;
                (a, b, false)
            }
            DataSource::Cifar100 => {
                let (a, b) = load_cifar100(&path()?)?;
                (a, b, false)
            }
        };
        Self::from_splits(config, train, test, vector)
    }

    /// Normalization statistics always come from `train`.
    pub fn from_splits(config: &TrainConfig, train: Dataset, test: Dataset, vector: bool) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidShape("training split is empty".into()));
        }
        if train.feature_len() != config.encoder.input_dim() {
            return Err(Error::ConfigInvalid(format!(
                "encoder input width {} does not match data feature length {}",
                config.encoder.input_dim(),
                train.feature_len()
            )));
        }
        let augmenter = if vector {
            Augmenter::Vector(VectorAugment {
                noise_sigma: config.data.noise_sigma.unwrap_or(config.data.spread / 2.0),
                dropout_prob: config.data.dropout_prob,
                normalizer: Normalizer::per_coordinate(&train)?,
            })
        } else {
            Augmenter::Image(config.augment.clone().with_stats(&Normalizer::per_channel(&train)?))
        };
        Ok(Self { train, test, augmenter })
    }
}

/// Embeds both splits with `params` and scores weighted KNN top-1.
/// `k` is capped at the training-set size.
pub fn evaluate_knn(params: &EncoderParams, data: &TrainData, knn: &KnnConfig) -> Result<f64> {
    let normalizer = data.augmenter.normalizer();
    let train_idx = embed_dataset(params, &data.train, &normalizer)?;
    let test_idx = embed_dataset(params, &data.test, &normalizer)?;
    let cfg = knn.clamped_to(train_idx.len());
    if cfg.neighbors != knn.neighbors {
        info!("knn: k clamped from {} to {} (training set size)", knn.neighbors, cfg.neighbors);
    }
    knn_top1(&train_idx, &test_idx, &cfg)
}

/// One metrics CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub metrics: StepMetrics,
    /// 1-based epoch containing this step.
    pub epoch: u64,
    pub lr: f64,
    pub knn_top1: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let m = &self.metrics;
        let knn = self.knn_top1.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            m.step, self.epoch, m.loss, m.query_term, m.key_term, self.lr, m.queue_ptr, knn
        )
    }
}

/// A run bound to its data: draws batches, augments, steps and evaluates.
#[derive(Debug, Clone)]
pub struct Trainer {
    state: TrainState,
    data: TrainData,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let data = TrainData::prepare(&config)?;
        Self::with_data(TrainState::new(config)?, data)
    }

    pub fn with_data(state: TrainState, data: TrainData) -> Result<Self> {
        if data.train.len() < state.config.batch_size {
            return Err(Error::ConfigInvalid(format!(
                "batch_size {} exceeds the {} training items",
                state.config.batch_size,
                data.train.len()
            )));
        }
        Ok(Self { state, data, epoch_order: None })
    }

    /// Resumes from a checkpoint. `config`, when given, replaces the saved
    /// one and must agree with it on every shape-determining field.
    pub fn resume(ckpt: Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let mut state = TrainState::from_checkpoint(ckpt)?;
        if let Some(cfg) = config {
            cfg.validate()?;
            cfg.check_resumable_from(&state.config)?;
            state.encoders = EncoderPair::from_parts(
                state.encoders.query.clone(),
                state.encoders.key.clone(),
                cfg.momentum_coefficient,
            )?;
            state.config = cfg;
        }
        let data = TrainData::prepare(&state.config)?;
        Self::with_data(state, data)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.train.len() / self.state.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.state.config.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = self.state.step / spe;
        let pos = (self.state.step % spe) as usize;
        let order = match &self.epoch_order {
            Some((e, order)) if *e == epoch => order,
            _ => {
                let order = SeededRng::with_stream(self.state.config.seed, STREAM_EPOCH_BASE + epoch)
                    .permutation(self.data.train.len());
                &self.epoch_order.insert((epoch, order)).1
            }
        };
        let b = self.state.config.batch_size;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    /// Draws the next batch, augments it, and takes one step. Runs KNN
    /// evaluation when the step closes an evaluation epoch.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let indices = self.batch_indices();
        let f = self.data.train.feature_len();
        let mut v1 = Vec::with_capacity(indices.len() * f);
        let mut v2 = Vec::with_capacity(indices.len() * f);
        for &i in &indices {
            let (a, b) = self.data.augmenter.two_views(&self.data.train.items[i].image, &mut self.state.rng)?;
            v1.extend_from_slice(a.as_slice());
            v2.extend_from_slice(b.as_slice());
        }
        let v1 = Matrix::from_vec(indices.len(), f, v1)?;
        let v2 = Matrix::from_vec(indices.len(), f, v2)?;
        let metrics = train_step(&mut self.state, &v1, &v2)?;

        let spe = self.steps_per_epoch();
        let epoch = (metrics.step - 1) / spe + 1;
        let interval = self.state.config.eval_interval as u64;
        let knn_top1 = if interval > 0
            && metrics.step % spe == 0
            && epoch.is_multiple_of(interval)
            && !self.data.test.is_empty()
        {
            let acc = evaluate_knn(&self.state.encoders.query, &self.data, &self.state.config.knn)?;
            info!("epoch {epoch}: knn_top1 = {acc:.4}");
            Some(acc)
        } else {
            None
        };
        Ok(MetricsRow { metrics, epoch, lr: self.state.config.learning_rate, knn_top1 })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint()
    }

    /// KNN top-1 of the current query encoder on the held-out split.
    pub fn evaluate(&self) -> Result<f64> {
        evaluate_knn(&self.state.encoders.query, &self.data, &self.state.config.knn)
    }

    /// Runs to completion, writing metrics and checkpoints to the output
    /// directory. On resume, metrics rows past the checkpoint are dropped
    /// before new rows are appended.
    pub fn run(&mut self) -> Result<RunOutcome> {
        self.run_with(|_| {})
    }

    /// [`Trainer::run`], calling `on_row` with every metrics row written.
    pub fn run_with(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunOutcome> {
        let dir = self.state.config.output_dir.clone();
        fs::create_dir_all(&dir)?;
        let metrics_path = dir.join(METRICS_FILE);
        let kept = existing_rows_through(&metrics_path, self.state.step)?;
        let mut out = BufWriter::new(File::create(&metrics_path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        for line in kept {
            writeln!(out, "{line}")?;
        }
        if self.state.step == 0 {
            self.checkpoint().save(&checkpoint_path(&dir, 0))?;
        }
        let mut last_knn = None;
        let mut last_loss = None;
        while !self.is_done() {
            let row = self.step()?;
            writeln!(out, "{}", row.to_csv_line())?;
            on_row(&row);
            last_loss = Some(row.metrics.loss);
            if row.knn_top1.is_some() {
                last_knn = row.knn_top1;
            }
            let every = self.state.config.checkpoint_interval as u64;
            if every > 0 && self.state.step.is_multiple_of(every) {
                out.flush()?;
                self.checkpoint().save(&checkpoint_path(&dir, self.state.step))?;
            }
        }
        out.flush()?;
        let final_checkpoint = dir.join(FINAL_CHECKPOINT);
        self.checkpoint().save(&final_checkpoint)?;
        Ok(RunOutcome { metrics_path, final_checkpoint, steps: self.state.step, last_loss, last_knn })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub last_loss: Option<f64>,
    pub last_knn: Option<f64>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

fn existing_rows_through(path: &Path, step: u64) -> Result<Vec<String>> {
    if step == 0 || !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(str::to_string)
        .collect())
}

/// Trains from scratch as described by `config`.
pub fn train(config: TrainConfig) -> Result<RunOutcome> {
    Trainer::new(config)?.run()
}

/// Continues the run stored at `checkpoint`.
pub fn resume(checkpoint: &Path, config: Option<TrainConfig>) -> Result<RunOutcome> {
    Trainer::resume(Checkpoint::load(checkpoint)?, config)?.run()
}
