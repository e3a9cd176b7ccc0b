//! Training loops for encoder pretraining and the full model.

mod data;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use edgeseg_tensor::{Gradients, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::AugmentConfig;
use crate::edge::EdgeExtractor;
use crate::losses::{cross_entropy, dice_loss, total_loss, LossWeights};
use crate::network::{load_encoder_checkpoint, Checkpoint, LoadReport, Mode, Model, NetworkConfig};
use crate::{derive_seed, Error, Result, Scalar};

pub use data::{list_cases, make_sample, Case, Dataset, Normalization, Preprocess, Sample, LABEL_SUFFIX};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_SAMPLE: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    /// Iterations between tenfold learning-rate drops (full mode).
    pub lr_step: u64,
    /// Optional per-epoch multiplicative learning-rate decay (pretrain mode):
    /// `lr = base * (1 - decay)^epoch`.
    pub pretrain_lr_decay: Option<f64>,
    /// Forces a fixed learning rate, bypassing the schedule.
    pub lr_override: Option<f64>,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Samples per forward/backward pass; divides `batch_size`.
    pub micro_batch: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
    pub edge_extractor: EdgeExtractor,
    pub loss: LossWeights,
    /// Sample-generation threads; 1 is the reference deterministic mode, and
    /// results do not depend on this value.
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        TrainConfig {
            mode,
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::for_mode(mode),
            lr_step: 2000,
            pretrain_lr_decay: None,
            lr_override: None,
            batch_size: 16,
            micro_batch: 1,
            max_iterations: 6000,
            seed: 0,
            checkpoint_every: 500,
            augment: AugmentConfig::default(),
            edge_extractor: EdgeExtractor::Surface,
            loss: LossWeights::default(),
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.micro_batch == 0 || self.batch_size % self.micro_batch != 0 {
            return Err(Error::Config(format!(
                "train.micro_batch ({}) must divide train.batch_size ({})",
                self.micro_batch, self.batch_size
            )));
        }
        if self.lr_step == 0 || self.checkpoint_every == 0 || self.workers == 0 {
            return Err(Error::Config("lr_step, checkpoint_every and workers must be positive".into()));
        }
        if let Some(lr) = self.lr_override {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning-rate override must be >= 0, got {lr}")));
            }
        }
        if let Some(d) = self.pretrain_lr_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("train.pretrain_lr_decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

/// Learning rate for the step that starts at `iteration`.
///
/// Full mode drops tenfold every `lr_step` iterations. Pretrain mode is
/// constant unless the per-epoch decay is enabled; an epoch is one pass over
/// the `dataset_len` cases.
pub fn lr_schedule(iteration: u64, config: &TrainConfig, dataset_len: usize) -> f64 {
    if let Some(lr) = config.lr_override {
        return lr;
    }
    let base = config.optimizer.lr;
    match config.mode {
        Mode::Full => {
            let drops = (iteration / config.lr_step) as i32;
            // dividing by an exact power of ten keeps 1e-3 -> 1e-4 -> 1e-5 exact
            base / 10f64.powi(drops)
        }
        Mode::Pretrain => match config.pretrain_lr_decay {
            Some(decay) => {
                let epoch = iteration * config.batch_size as u64 / dataset_len.max(1) as u64;
                base * (1.0 - decay).powi(epoch as i32)
            }
            None => base,
        },
    }
}

/// One structured log line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    pub total: f64,
    pub dice: f64,
    /// Unweighted edge terms, coarsest first (full mode).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<[f64; 3]>,
    /// Cross-entropy (pretrain mode, where it is the optimized loss).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_entropy: Option<f64>,
    /// Seconds since the trainer was created.
    pub wall_time: f64,
}

impl LogRecord {
    /// Loss values only, for bitwise comparison of runs.
    pub fn losses(&self) -> Vec<f64> {
        let mut v = vec![self.lr, self.total, self.dice];
        v.extend(self.edge.iter().flatten());
        v.extend(self.cross_entropy);
        v
    }

    fn check_finite(&self) -> Result<()> {
        let mut terms: Vec<(&str, f64)> = vec![("dice", self.dice)];
        if let Some(e) = self.edge {
            terms.extend([("edge1", e[0]), ("edge2", e[1]), ("edge3", e[2])]);
        }
        if let Some(ce) = self.cross_entropy {
            terms.push(("cross_entropy", ce));
        }
        terms.push(("total", self.total));
        match terms.into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFinite { term: term.to_string(), iteration: self.iteration }),
            None => Ok(()),
        }
    }
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: Model<T>,
    optimizer: Optimizer<T>,
    dataset: Dataset<T>,
    iteration: u64,
    forward_passes: u64,
    history: Vec<LogRecord>,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, dataset: Dataset<T>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.network, config.mode, derive_seed(config.seed, STREAM_INIT))?;
        Self::with_model(config, model, dataset)
    }

    pub fn with_model(config: TrainConfig, model: Model<T>, dataset: Dataset<T>) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if model.mode() != config.mode {
            return Err(Error::Config(format!("model is in {} mode, config asks for {}", model.mode(), config.mode)));
        }
        let optimizer = Optimizer::new(config.optimizer.clone(), model.params());
        Ok(Trainer {
            config,
            model,
            optimizer,
            dataset,
            iteration: 0,
            forward_passes: 0,
            history: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, dataset: Dataset<T>, path: &Path) -> Result<Self> {
        let ck = Checkpoint::<T>::load(path)?;
        let mut trainer = Self::new(config, dataset)?;
        ck.restore_model(&mut trainer.model)?;
        let steps = ck.meta.extra.get("optimizer_steps").and_then(|v| v.as_u64()).unwrap_or(ck.meta.iteration);
        trainer.optimizer =
            Optimizer::restore(trainer.config.optimizer.clone(), steps, trainer.model.params(), &ck)?;
        trainer.iteration = ck.meta.iteration;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model<T> {
        &mut self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn forward_passes(&self) -> u64 {
        self.forward_passes
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.dataset
    }

    pub fn load_encoder(&mut self, path: &Path, strict: bool) -> Result<LoadReport> {
        load_encoder_checkpoint(&mut self.model, path, strict)
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.iteration, &self.config, self.dataset.len())
    }

    /// Case index for global sample number `sample`: each epoch visits every
    /// case once in a seeded order.
    pub fn case_for_sample(&self, sample: u64) -> usize {
        let n = self.dataset.len() as u64;
        let (epoch, pos) = (sample / n, sample % n);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let seed = derive_seed(derive_seed(self.config.seed, STREAM_ORDER), epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order[pos as usize]
    }

    /// Samples of the step that starts at the current iteration. Each sample
    /// depends only on the seed and its global index, so the batch is the
    /// same for any worker count and after a resume.
    pub fn next_batch(&self) -> Result<Vec<Sample<T>>> {
        let bs = self.config.batch_size as u64;
        let first = self.iteration * bs;
        let make = |s: u64| {
            let case = &self.dataset.cases()[self.case_for_sample(s)];
            let seed = derive_seed(derive_seed(self.config.seed, STREAM_SAMPLE), s);
            make_sample(case, &self.config.augment, self.config.edge_extractor, seed)
        };
        let indices: Vec<u64> = (first..first + bs).collect();
        let workers = self.config.workers.min(indices.len()).max(1);
        if workers == 1 {
            return indices.into_iter().map(make).collect();
        }
        let chunk = indices.len().div_ceil(workers);
        let parts: Vec<Result<Vec<Sample<T>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> =
                indices.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(|&s| make(s)).collect())).collect();
            handles.into_iter().map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e))).collect()
        });
        let mut out = Vec::with_capacity(indices.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Generates the next batch and applies one optimizer step.
    pub fn step(&mut self) -> Result<LogRecord> {
        let batch = self.next_batch()?;
        self.train_step(&batch)
    }

    /// Accumulates gradients over micro-batches of `batch`, then applies one
    /// optimizer step at the scheduled learning rate.
    pub fn train_step(&mut self, batch: &[Sample<T>]) -> Result<LogRecord> {
        let mb = self.config.micro_batch;
        if batch.is_empty() || batch.len() % mb != 0 {
            return Err(Error::Contract(format!("batch of {} samples is not a multiple of micro_batch {mb}", batch.len())));
        }
        let chunks = batch.len() / mb;
        let mut grads = Gradients::empty(self.model.params().len());
        let (mut total, mut dice, mut ce) = (0.0, 0.0, 0.0);
        let mut edge = [0.0; 3];
        for micro in batch.chunks(mb) {
            let (g, rec) = self.micro_step(micro)?;
            grads.merge(g);
            self.forward_passes += 1;
            total += rec.total;
            dice += rec.dice;
            if let Some(e) = rec.edge {
                (0..3).for_each(|i| edge[i] += e[i]);
            }
            ce += rec.cross_entropy.unwrap_or(0.0);
        }
        let k = chunks as f64;
        grads.scale(T::of(1.0 / k));
        let lr = self.current_lr();
        let record = LogRecord {
            iteration: self.iteration,
            lr,
            total: total / k,
            dice: dice / k,
            edge: (self.config.mode == Mode::Full).then(|| edge.map(|e| e / k)),
            cross_entropy: (self.config.mode == Mode::Pretrain).then_some(ce / k),
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        record.check_finite()?;
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        self.iteration += 1;
        self.history.push(record.clone());
        Ok(record)
    }

    fn micro_step(&self, micro: &[Sample<T>]) -> Result<(Gradients<T>, LogRecord)> {
        let image = Tensor::stack_batch(&micro.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let label = Tensor::stack_batch(&micro.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
        let mut g = Graph::new(self.model.params());
        let x = g.input(image);
        let out = self.model.forward_graph(&mut g, x)?;
        let mut record = LogRecord {
            iteration: self.iteration,
            lr: 0.0,
            total: 0.0,
            dice: 0.0,
            edge: None,
            cross_entropy: None,
            wall_time: 0.0,
        };
        let seeds = match (self.config.mode, out.edges) {
            (Mode::Full, Some(edge_vars)) => {
                let targets: Vec<Tensor<T>> = (0..3)
                    .map(|i| Tensor::stack_batch(&micro.iter().map(|s| s.edges[i].clone()).collect::<Vec<_>>()))
                    .collect();
                let (breakdown, lg) = total_loss(
                    g.value(out.prob),
                    edge_vars.map(|v| g.value(v)),
                    &label,
                    [&targets[0], &targets[1], &targets[2]],
                    &self.config.loss,
                )?;
                record.total = breakdown.total;
                record.dice = breakdown.dice;
                record.edge = Some(breakdown.edge);
                let [g1, g2, g3] = lg.edges;
                vec![(out.prob, lg.prob), (edge_vars[0], g1), (edge_vars[1], g2), (edge_vars[2], g3)]
            }
            _ => {
                let l = cross_entropy(g.value(out.prob), &label, self.config.loss.eps_log)?;
                record.total = l.value;
                record.cross_entropy = Some(l.value);
                record.dice = dice_loss(g.value(out.prob), &label, self.config.loss.eps_dice)?.value;
                vec![(out.prob, l.grad)]
            }
        };
        Ok((g.backward(&seeds), record))
    }

    /// Parameters, optimizer state and iteration counter.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(&self.model, self.iteration);
        self.optimizer.save_into(self.model.params(), &mut ck);
        ck.meta.extra = serde_json::json!({
            "optimizer": self.optimizer.config(),
            "optimizer_steps": self.optimizer.steps(),
            "seed": self.config.seed,
            "network": self.config.network,
        });
        ck
    }

    pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
        dir.join(format!("iter_{iteration:06}.ckpt"))
    }

    /// Runs to `max_iterations`, appending one JSON line per step to
    /// `train_log.jsonl` and writing checkpoints under `checkpoints/` on the
    /// configured cadence and at the end. Returns the final checkpoint path.
    pub fn run(&mut self, run_dir: &Path) -> Result<PathBuf> {
        let ck_dir = run_dir.join("checkpoints");
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        let log_path = run_dir.join("train_log.jsonl");
        let file: File =
            OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut last_saved = None;
        if self.iteration >= self.config.max_iterations {
            let path = Self::checkpoint_path(&ck_dir, self.iteration);
            self.checkpoint().save(&path)?;
            return Ok(path);
        }
        while self.iteration < self.config.max_iterations {
            let record = self.step()?;
            let line = serde_json::to_string(&record).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
            if self.iteration % self.config.checkpoint_every == 0 {
                let path = Self::checkpoint_path(&ck_dir, self.iteration);
                self.checkpoint().save(&path)?;
                last_saved = Some(path);
            }
        }
        match last_saved {
            Some(p) if p == Self::checkpoint_path(&ck_dir, self.iteration) => Ok(p),
            _ => {
                let path = Self::checkpoint_path(&ck_dir, self.iteration);
                self.checkpoint().save(&path)?;
                Ok(path)
            }
        }
    }
}

/// Builds a trainer and runs it; see [`Trainer::run`].
pub fn train<T: Scalar>(config: TrainConfig, dataset: Dataset<T>, run_dir: &Path) -> Result<PathBuf> {
    Trainer::new(config, dataset)?.run(run_dir)
}
