//! Teacher-forced training with RMSProp, gradient clipping, plateau decay
//! of the learning rate and best-validation model selection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{clip_gradients, global_norm, RmsPropState, Tape, Tensor, TensorError};
use crate::datagen::Manifest;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{Model, ModelConfig};
use crate::persistence::{Checkpoint, TrainerState};
use crate::routing::{route, ResizeFilter, RoutedImage};

/// Desk default learning rate. The 1e-3 of the original schedule leaves
/// small models on their initial plateau for most of a 3000-step budget.
pub const DESK_LEARNING_RATE: f64 = 3e-3;

/// Batch size used for inference passes over a dataset.
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_decay: f64,
    /// Validation checks without improvement before decaying.
    pub patience: u32,
    pub clip_norm: f64,
    pub iterations: u64,
    pub val_interval: u64,
    pub seed: u64,
    pub workers: usize,
    /// Where `last.ckpt` and `best.ckpt` go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
    /// Progress lines on standard error.
    pub verbose: bool,
}

impl TrainConfig {
    /// Desk defaults for the given model configuration.
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            model,
            batch: 16,
            learning_rate: DESK_LEARNING_RATE,
            lr_decay: 0.9,
            patience: 10,
            clip_norm: 5.0,
            iterations: 3000,
            val_interval: 100,
            seed: 0,
            workers: 1,
            checkpoint_dir: None,
            verbose: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr decay {} outside (0, 1)", self.lr_decay));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad(format!("clip norm {} must be positive", self.clip_norm));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.val_interval == 0 {
            return bad("validation interval must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One routed, labelled sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub path: Option<PathBuf>,
    pub label: String,
    pub routed: RoutedImage,
    /// Class indices of the label.
    pub target: Vec<usize>,
}

/// Samples routed once up front; routing does not depend on the variant.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_images<'a>(
        config: &ModelConfig,
        items: impl IntoIterator<Item = (&'a str, &'a GrayImage)>,
    ) -> Result<Self> {
        let router = router(config);
        let samples = items
            .into_iter()
            .map(|(label, image)| {
                let label = label.to_lowercase();
                Ok(Sample {
                    path: None,
                    target: config.vocab.encode(&label)?,
                    routed: router(image)?,
                    label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn from_manifest(config: &ModelConfig, manifest: &Manifest) -> Result<Self> {
        let router = router(config);
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let path = manifest.resolve(e);
                let image = GrayImage::read_pgm(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                Ok(Sample {
                    target: config.vocab.encode(&e.label)?,
                    routed: router(&image)?,
                    label: e.label.to_lowercase(),
                    path: Some(path),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn router(config: &ModelConfig) -> impl Fn(&GrayImage) -> Result<RoutedImage> + '_ {
    move |image| Ok(route(image, config.input_size, ResizeFilter::Bilinear)?)
}

/// Greedy transcriptions of every sample, in order.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let refs: Vec<&RoutedImage> = chunk.iter().map(|s| &s.routed).collect();
        out.extend(model.recognize_routed(&refs)?.into_iter().map(|r| r.text));
    }
    Ok(out)
}

/// Lexicon-free sequence accuracy: the case-insensitive fraction of exact
/// matches. Zero for an empty set.
pub fn evaluate_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predictions = predict(model, data)?;
    let correct = predictions
        .iter()
        .zip(&data.samples)
        .filter(|(p, s)| p.to_lowercase() == s.label)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Summary of one validation interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub iteration: u64,
    /// Mean per-symbol training loss over the interval.
    pub loss: f64,
    pub val_acc: f64,
    /// Learning rate in effect after this check.
    pub lr: f64,
    /// Mean clipping factor over the interval (1 when nothing was clipped).
    pub clip_scale: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    /// Per-iteration training loss, for trajectory comparisons.
    pub losses: Vec<f64>,
    pub best_iteration: u64,
    pub best_val_acc: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,val_acc,lr,clip_scale\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.loss, r.val_acc, r.lr, r.clip_scale);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Deterministic sample order: epoch `e` visits a permutation drawn from
/// `(seed, e)`, so the `k`-th batch depends only on the seed and `k`.
struct BatchOrder {
    seed: u64,
    len: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl BatchOrder {
    fn new(seed: u64, len: usize) -> Self {
        BatchOrder {
            seed,
            len,
            epoch: None,
        }
    }

    fn batch(&mut self, index: u64, size: usize) -> Vec<usize> {
        (0..size as u64)
            .map(|k| {
                let pos = index * size as u64 + k;
                let epoch = pos / self.len as u64;
                if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(epoch + 1);
                    let mut perm: Vec<usize> = (0..self.len).collect();
                    perm.shuffle(&mut rng);
                    self.epoch = Some((epoch, perm));
                }
                self.epoch.as_ref().expect("permutation").1[(pos % self.len as u64) as usize]
            })
            .collect()
    }
}

/// Loss and gradients of one batch. The loss is the per-symbol mean
/// (EOS included) so its scale does not depend on label lengths.
pub fn batch_gradients(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    workers: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let total_symbols: usize = indices.iter().map(|&i| data.samples[i].target.len() + 1).sum();
    let divisor = total_symbols as f64;
    let shard = |part: &[usize]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape);
        let images: Vec<&RoutedImage> = part.iter().map(|&i| &data.samples[i].routed).collect();
        let labels: Vec<Vec<usize>> = part.iter().map(|&i| data.samples[i].target.clone()).collect();
        let (loss, _) = model.loss(&mut tape, &params, &images, &labels, divisor)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads = params
            .values()
            .into_iter()
            .zip(model.params.values())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    };

    let workers = workers.clamp(1, indices.len().max(1));
    if workers == 1 {
        return shard(indices);
    }
    let parts: Vec<&[usize]> = (0..workers)
        .map(|w| &indices[w * indices.len() / workers..(w + 1) * indices.len() / workers])
        .filter(|p| !p.is_empty())
        .collect();
    let results: Vec<Result<(f64, Vec<Tensor>)>> = thread::scope(|s| {
        let handles: Vec<_> = parts
            .iter()
            .map(|p| {
                let shard = &shard;
                s.spawn(move || shard(p))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    });
    let mut total = 0.0;
    let mut sum: Option<Vec<Tensor>> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok((total, sum.expect("at least one shard")))
}

/// Mutable run state; everything needed to continue bit-for-bit.
struct RunState {
    model: Model,
    optimizer: RmsPropState,
    iteration: u64,
    stale_checks: u32,
    best_accuracy: f64,
    best_iteration: u64,
    best_params: Option<Vec<Tensor>>,
}

impl RunState {
    fn checkpoint(&self, config: &TrainConfig, val_accuracy: f64) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            iteration: self.iteration,
            seed: config.seed,
            val_accuracy,
            trainer: Some(TrainerState {
                optimizer: self.optimizer.clone(),
                stale_checks: self.stale_checks,
                best_accuracy: self.best_accuracy,
                best_iteration: self.best_iteration,
                batches_drawn: self.iteration,
                best_params: self.best_params.clone(),
            }),
        }
    }

    fn best_model(&self) -> Result<Model> {
        match &self.best_params {
            Some(values) => Model::from_parts(self.model.config.clone(), values.clone()),
            None => Ok(self.model.clone()),
        }
    }
}

/// Trains from a fresh seeded initialisation.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let model = Model::new(config.model.clone(), config.seed)?;
    let shapes: Vec<&[usize]> = model.params.values().into_iter().map(|t| t.shape()).collect();
    let optimizer = RmsPropState::new(shapes, config.learning_rate);
    let state = RunState {
        model,
        optimizer,
        iteration: 0,
        stale_checks: 0,
        best_accuracy: f64::NEG_INFINITY,
        best_iteration: 0,
        best_params: None,
    };
    run(config, state, train_set, val_set)
}

/// Continues a run from a checkpoint written by [`train`]. `config` must
/// describe the same model and seed; `iterations` is the total target.
pub fn resume(
    config: &TrainConfig,
    checkpoint: Checkpoint,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    checkpoint.ensure_flags(config.model.flags)?;
    if checkpoint.model.config != config.model {
        return Err(Error::Config("checkpoint model configuration differs from the requested one".into()));
    }
    if checkpoint.seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint was trained with seed {}, requested {}",
            checkpoint.seed, config.seed
        )));
    }
    let trainer = checkpoint
        .trainer
        .ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
    let state = RunState {
        model: checkpoint.model,
        optimizer: trainer.optimizer,
        iteration: trainer.batches_drawn,
        stale_checks: trainer.stale_checks,
        best_accuracy: trainer.best_accuracy,
        best_iteration: trainer.best_iteration,
        best_params: trainer.best_params,
    };
    run(config, state, train_set, val_set)
}

fn run(config: &TrainConfig, mut state: RunState, train_set: &Dataset, val_set: &Dataset) -> Result<(Model, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Argument("validation set is empty".into()));
    }
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut order = BatchOrder::new(config.seed, train_set.len());
    let mut report = TrainReport::default();
    let mut interval_loss = 0.0;
    let mut interval_clip = 0.0;
    let mut interval_steps = 0u64;
    let started = Instant::now();

    while state.iteration < config.iterations {
        let indices = order.batch(state.iteration, config.batch);
        let (loss, mut grads) = match batch_gradients(&state.model, train_set, &indices, config.workers) {
            Ok(r) => r,
            Err(Error::Tensor(TensorError::NonFinite { .. })) => {
                return Err(Error::Diverged {
                    iteration: state.iteration + 1,
                    samples: indices,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !global_norm(&grads).is_finite() {
            return Err(Error::Diverged {
                iteration: state.iteration + 1,
                samples: indices,
            });
        }
        let clip = clip_gradients(&mut grads, config.clip_norm);
        let mut values: Vec<Tensor> = state.model.params.values().into_iter().cloned().collect();
        state.optimizer.step(&mut values, &grads);
        state.model.params = state.model.params.with_values(values)?;
        state.iteration += 1;
        report.losses.push(loss);
        interval_loss += loss;
        interval_clip += clip;
        interval_steps += 1;

        let at_check = state.iteration.is_multiple_of(config.val_interval) || state.iteration == config.iterations;
        if !at_check {
            continue;
        }
        let val_acc = evaluate_accuracy(&state.model, val_set)?;
        if val_acc > state.best_accuracy {
            state.best_accuracy = val_acc;
            state.best_iteration = state.iteration;
            state.best_params = Some(state.model.params.values().into_iter().cloned().collect());
            state.stale_checks = 0;
            if let Some(dir) = &config.checkpoint_dir {
                let mut best = Checkpoint::of_model(state.model.clone());
                best.iteration = state.iteration;
                best.seed = config.seed;
                best.val_accuracy = val_acc;
                best.save(&dir.join("best.ckpt"))?;
            }
        } else {
            state.stale_checks += 1;
            if state.stale_checks >= config.patience {
                state.optimizer.learning_rate *= config.lr_decay;
                state.stale_checks = 0;
            }
        }
        let row = ReportRow {
            iteration: state.iteration,
            loss: interval_loss / interval_steps as f64,
            val_acc,
            lr: state.optimizer.learning_rate,
            clip_scale: interval_clip / interval_steps as f64,
        };
        if config.verbose {
            eprintln!(
                "[{}] iter {:>6}  loss {:.4}  val_acc {:.4}  lr {:.3e}  clip {:.3}  ({:.0}s)",
                config.model.flags.variant_name(),
                row.iteration,
                row.loss,
                row.val_acc,
                row.lr,
                row.clip_scale,
                started.elapsed().as_secs_f64()
            );
        }
        report.rows.push(row);
        interval_loss = 0.0;
        interval_clip = 0.0;
        interval_steps = 0;
        if let Some(dir) = &config.checkpoint_dir {
            state.checkpoint(config, val_acc).save(&dir.join("last.ckpt"))?;
        }
    }

    report.best_iteration = state.best_iteration;
    report.best_val_acc = state.best_accuracy.max(0.0);
    let best = state.best_model()?;
    Ok((best, report))
}
