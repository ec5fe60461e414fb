//! Episodic training of the embedding and re-embedding with Adam.

mod checkpoint;
mod log;
mod model;
mod optim;

use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, BatchStats, BnMode, GradCheckConfig, GradCheckReport, Graph, Var};
use crate::episodes::{episode_batch, Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::eval::episode_accuracies;
use crate::tensor::{DType, Real, Tensor};

pub use checkpoint::{
    decode_container, encode_container, Checkpoint, CheckpointStore, IndexEntry, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, INDEX_FILE,
};
pub use log::{LogRecord, TrainingLog, LOG_HEADER};
pub use model::{count_correct, ModelConfig, ModelParams, ModelVars};
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes_per_batch: usize,
    pub total_episodes: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    /// A checkpoint is validated and stored whenever the episode counter
    /// reaches a multiple of this period.
    pub val_period: usize,
    pub val_episodes: usize,
    /// Seed of the fixed validation episode set.
    pub val_seed: u64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub precision: DType,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            way: 5,
            shot: 1,
            queries: 10,
            episodes_per_batch: 1,
            total_episodes: 20_000,
            lr: 1e-3,
            lr_halving_period: 50_000,
            val_period: 1_000,
            val_episodes: 200,
            val_seed: 1,
            adam: AdamConfig::default(),
            seed: 0,
            precision: DType::F32,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.queries),
            ("episodes_per_batch", self.episodes_per_batch),
            ("lr_halving_period", self.lr_halving_period),
            ("val_period", self.val_period),
            ("val_episodes", self.val_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.adam.validate()
    }

    pub fn lr_at(&self, counter: usize) -> f64 {
        lr_at(counter, self.lr, self.lr_halving_period)
    }

    /// Errors unless `split` of `ds` supports this episode shape.
    pub fn check_split(&self, ds: &Dataset, split: Split) -> Result<()> {
        let classes = ds.split_classes(split).len();
        if classes < self.way {
            return Err(Error::Sampling {
                what: format!("classes in {split} split"),
                required: self.way,
                available: classes,
            });
        }
        let smallest = ds.min_class_size(split);
        if smallest < self.shot + self.queries {
            return Err(Error::Sampling {
                what: format!("samples per class in {split} split"),
                required: self.shot + self.queries,
                available: smallest,
            });
        }
        Ok(())
    }
}

/// Training-mode loss graph of one episode.
pub struct EpisodeLoss<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub vars: ModelVars,
    pub stats: Vec<BatchStats<T>>,
}

impl<T: Real> EpisodeLoss<T> {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).data()[0].as_f64()
    }

    /// Gradients for every parameter, in [`ModelParams::tensors`] order.
    pub fn gradients(&self) -> Result<Vec<Tensor<T>>> {
        let vars = self.vars.all();
        self.graph.backward(self.loss, &vars)?.collect(&vars)
    }
}

/// Mean negative log-likelihood of the episode's queries, with train-mode BN
/// over the episode's support and query samples together.
pub fn episode_loss<T: Real>(model: &ModelParams<T>, ds: &Dataset, ep: &Episode) -> Result<EpisodeLoss<T>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut stats = Vec::new();
    let loss = episode_nll(model, &mut g, &vars, ds, ep, &mut stats)?;
    Ok(EpisodeLoss {
        graph: g,
        loss,
        vars,
        stats,
    })
}

fn episode_nll<T: Real>(
    model: &ModelParams<T>,
    g: &mut Graph<T>,
    vars: &ModelVars,
    ds: &Dataset,
    ep: &Episode,
    stats: &mut Vec<BatchStats<T>>,
) -> Result<Var> {
    let x = g.leaf(model.episode_input(ds, ep)?);
    let probs = model.forward(g, vars, x, ep.support.len(), BnMode::Train, stats)?;
    g.nll(probs, &ep.query_labels())
}

/// One optimizer step on the mean loss of `episodes`; returns that loss.
/// Running BN statistics are updated once per episode, in order.
pub fn train_step<T: Real>(
    model: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    ds: &Dataset,
    episodes: &[Episode],
    lr: f64,
    cfg: &AdamConfig,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Contract("train step needs at least one episode".into()));
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut total = None;
    for ep in episodes {
        let mut stats = Vec::new();
        let l = episode_nll(model, &mut g, &vars, ds, ep, &mut stats)?;
        per_episode.push(stats);
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let loss = g.scale(total.expect("nonempty"), 1.0 / episodes.len() as f64);
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::State(format!("non-finite training loss {value}")));
    }
    let all = vars.all();
    let grads = g.backward(loss, &all)?;
    adam_step(&mut model.tensors_mut(), &all, &grads, adam, lr, cfg)?;
    for stats in &per_episode {
        model.apply_stats(stats)?;
    }
    Ok(value)
}

/// Fraction of correctly classified queries over a fixed episode set drawn
/// from `seed`, with eval-mode BN. Episodes are evaluated in parallel and
/// reduced in episode order.
#[allow(clippy::too_many_arguments)]
pub fn validate<T: Real>(
    model: &ModelParams<T>,
    ds: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("validation needs at least one episode".into()));
    }
    let accs = episode_accuracies(model, ds, split, way, shot, queries, episodes, seed)?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub log: TrainingLog,
    pub model: ModelParams<T>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs the full training loop. The model before any update is validated and
/// stored as checkpoint 0; afterwards a checkpoint is stored every
/// `val_period` episodes. The log and all parameters depend only on the
/// config and the dataset.
pub fn train<T: Real>(cfg: &TrainConfig, ds: &Dataset, store: &mut CheckpointStore) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    cfg.check_split(ds, Split::Train)?;
    cfg.check_split(ds, Split::Val)?;
    let mut model = ModelParams::<T>::build(&cfg.model, cfg.shot)?;
    let mut adam = AdamState::new(model.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut next_id = 0;

    let mut checkpoint = |model: &ModelParams<T>, adam: &AdamState<T>, episode: usize, store: &mut CheckpointStore| -> Result<(f64, usize)> {
        let acc = validate(model, ds, Split::Val, cfg.way, cfg.shot, cfg.queries, cfg.val_episodes, cfg.val_seed)?;
        let id = next_id;
        next_id += 1;
        store.save(&Checkpoint {
            id,
            episode,
            val_acc: acc,
            wall_clock: now(),
            provenance: "train".into(),
            model: model.clone(),
            adam: Some(adam.clone()),
        })?;
        Ok((acc, id))
    };

    let (acc, id) = checkpoint(&model, &adam, 0, store)?;
    log.push(LogRecord {
        episode: 0,
        loss: None,
        lr: cfg.lr_at(0),
        val_acc: Some(acc),
        checkpoint_id: Some(id),
    })?;

    let mut counter = 0;
    while counter < cfg.total_episodes {
        let b = cfg.episodes_per_batch.min(cfg.total_episodes - counter);
        let lr = cfg.lr_at(counter);
        let ctx = |e: Error| e.context(format!("training episode {counter}"));
        let eps = episode_batch(ds, Split::Train, cfg.way, cfg.shot, cfg.queries, b, &mut rng).map_err(ctx)?;
        let loss = train_step(&mut model, &mut adam, ds, &eps, lr, &cfg.adam).map_err(ctx)?;
        let prev = counter;
        counter += b;
        let mut rec = LogRecord {
            episode: counter,
            loss: Some(loss),
            lr,
            val_acc: None,
            checkpoint_id: None,
        };
        if counter / cfg.val_period > prev / cfg.val_period {
            let (acc, id) = checkpoint(&model, &adam, counter, store)?;
            rec.val_acc = Some(acc);
            rec.checkpoint_id = Some(id);
        }
        log.push(rec)?;
    }
    Ok(TrainOutcome { log, model })
}

/// Compares the reverse-mode gradient of [`episode_loss`] with central
/// differences over every parameter tensor of `model`.
pub fn episode_grad_check(
    model: &ModelParams<f64>,
    ds: &Dataset,
    ep: &Episode,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let with = |p: &[Tensor<f64>]| -> ModelParams<f64> {
        let mut m = model.clone();
        for (dst, src) in m.tensors_mut().into_iter().zip(p) {
            dst.clone_from(src);
        }
        m
    };
    let mut params: Vec<Tensor<f64>> = model.tensors().into_iter().cloned().collect();
    grad_check(
        &mut params,
        |p| Ok(episode_loss(&with(p), ds, ep)?.value()),
        |p| episode_loss(&with(p), ds, ep)?.gradients(),
        cfg,
    )
}
