//! Approximate ensembles: averaging the parameters of the best validation
//! checkpoints of one training run, and the prediction ensembles they stand in for.

use serde::{Deserialize, Serialize};

use crate::episodes::{Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::eval::{episode_accuracies, Classifier, Variant};
use crate::tensor::{Real, Tensor};
use crate::trainer::{CheckpointStore, ModelParams, TrainingLog};

pub const DEFAULT_T: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    #[default]
    ProbAvg,
    MajorityVote,
}

impl std::fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnsembleMode::ProbAvg => "prob_avg",
            EnsembleMode::MajorityVote => "majority_vote",
        })
    }
}

impl std::str::FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob_avg" => Ok(EnsembleMode::ProbAvg),
            "majority_vote" => Ok(EnsembleMode::MajorityVote),
            _ => Err(Error::Config(format!("unknown ensemble mode {s:?} (prob_avg|majority_vote)"))),
        }
    }
}

/// The `t` best checkpoints, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AemlSelection {
    pub t: usize,
    pub ids: Vec<usize>,
    pub val_accs: Vec<f64>,
    pub episodes: Vec<usize>,
}

/// Picks the `t` logged checkpoints with the highest validation accuracy;
/// among equal accuracies the later episode comes first.
pub fn select_top_t(log: &TrainingLog, store: &CheckpointStore, t: usize) -> Result<AemlSelection> {
    if t == 0 {
        return Err(Error::Config("t must be at least 1".into()));
    }
    let mut cands = Vec::new();
    for r in log.checkpoints() {
        let id = r.checkpoint_id.expect("filtered");
        let acc = r
            .val_acc
            .ok_or_else(|| Error::Contract(format!("checkpoint {id} has no validation accuracy in the log")))?;
        if !store.entries().iter().any(|e| e.id == id) {
            return Err(Error::Contract(format!("logged checkpoint {id} is missing from the store")));
        }
        cands.push((acc, r.episode, id));
    }
    if cands.len() < t {
        return Err(Error::Selection {
            requested: t,
            available: cands.len(),
        });
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    cands.truncate(t);
    Ok(AemlSelection {
        t,
        ids: cands.iter().map(|c| c.2).collect(),
        val_accs: cands.iter().map(|c| c.0).collect(),
        episodes: cands.iter().map(|c| c.1).collect(),
    })
}

/// Elementwise mean of named tensor sets with identical layout, computed as
/// `x₀ + Σᵢ (xᵢ − x₀) / t` in 64-bit. A single set, or identical sets, come
/// back bit-identical.
pub fn average_tensors<T: Real>(sets: &[Vec<(String, Tensor<T>)>]) -> Result<Vec<(String, Tensor<T>)>> {
    let first = sets.first().ok_or_else(|| Error::Contract("nothing to average".into()))?;
    for (k, s) in sets.iter().enumerate().skip(1) {
        let same = s.len() == first.len()
            && s.iter().zip(first).all(|((n, t), (n0, t0))| n == n0 && t.shape() == t0.shape());
        if !same {
            return Err(Error::Contract(format!("parameter set {k} differs in architecture from set 0")));
        }
    }
    let t = sets.len() as f64;
    Ok(first
        .iter()
        .enumerate()
        .map(|(j, (name, base))| {
            let data = base
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x0)| {
                    let x0 = x0.as_f64();
                    let shift: f64 = sets.iter().map(|s| s[j].1.data()[i].as_f64() - x0).sum();
                    T::lit(x0 + shift / t)
                })
                .collect();
            (name.clone(), Tensor::new(base.shape().to_vec(), data).expect("same shape"))
        })
        .collect())
}

/// Averages parameters and BN running statistics of models that share one
/// configuration. Pass models in a fixed order (see [`load_selection`]) for
/// results that are bit-identical across selections.
pub fn average_models<T: Real>(models: &[ModelParams<T>]) -> Result<ModelParams<T>> {
    let first = models.first().ok_or_else(|| Error::Contract("nothing to average".into()))?;
    for (k, m) in models.iter().enumerate().skip(1) {
        if !m.config.same_architecture(&first.config) || m.shots != first.shots {
            return Err(Error::Contract(format!("model {k} differs in architecture from model 0")));
        }
    }
    let states: Vec<_> = models.iter().map(ModelParams::state).collect();
    let mut flags = first.bn_initialized();
    for m in &models[1..] {
        for (f, g) in flags.iter_mut().zip(m.bn_initialized()) {
            *f &= g;
        }
    }
    ModelParams::from_state(&first.config, first.shots, average_tensors(&states)?, &flags)
}

/// Loads the selected checkpoints in ascending id order, so the result is
/// independent of the selection order.
pub fn load_selection<T: Real>(selection: &AemlSelection, store: &CheckpointStore) -> Result<Vec<ModelParams<T>>> {
    let mut ids = selection.ids.clone();
    ids.sort_unstable();
    ids.iter().map(|&id| Ok(store.load::<T>(id)?.model)).collect()
}

pub fn average_params<T: Real>(selection: &AemlSelection, store: &CheckpointStore) -> Result<ModelParams<T>> {
    average_models(&load_selection(selection, store)?)
}

/// Combines per-model prediction matrices `[P, N]`. `ProbAvg` is the mean;
/// `MajorityVote` gives the one-hot of the most frequent argmax, ties going
/// to the tied class with the larger mean probability.
pub fn combine_predictions(preds: &[Tensor<f64>], mode: EnsembleMode) -> Result<Tensor<f64>> {
    let first = preds.first().ok_or_else(|| Error::Contract("empty ensemble".into()))?;
    if first.ndim() != 2 || preds.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::dim("ensemble members disagree on prediction shape"));
    }
    let t = preds.len() as f64;
    let mut mean = Tensor::zeros(first.shape().to_vec());
    for p in preds {
        for (m, &v) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += v;
        }
    }
    mean.data_mut().iter_mut().for_each(|m| *m /= t);
    if mode == EnsembleMode::ProbAvg {
        return Ok(mean);
    }
    let (rows, n) = (first.shape()[0], first.shape()[1]);
    let mut out = Tensor::zeros(vec![rows, n]);
    for r in 0..rows {
        let mut votes = vec![0usize; n];
        for p in preds {
            votes[crate::attention::argmax(p.row(r))] += 1;
        }
        let top = *votes.iter().max().expect("n ≥ 1");
        let avg = mean.row(r);
        let mut best = None;
        for c in (0..n).filter(|&c| votes[c] == top) {
            if best.is_none_or(|b: usize| avg[c] > avg[b]) {
                best = Some(c);
            }
        }
        out.data_mut()[r * n + best.expect("some class has the top count")] = 1.0;
    }
    Ok(out)
}

/// A committee of models evaluated on the same episodes.
pub struct Ensemble<T> {
    pub models: Vec<ModelParams<T>>,
    pub mode: EnsembleMode,
}

impl<T: Real> Classifier for Ensemble<T> {
    fn predict(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<f64>> {
        let preds = self
            .models
            .iter()
            .map(|m| m.predict(ds, ep))
            .collect::<Result<Vec<_>>>()?;
        combine_predictions(&preds, self.mode)
    }

    fn variant(&self) -> Option<Variant> {
        self.models.first().and_then(Classifier::variant)
    }
}

pub fn ensemble_predict<T: Real>(
    selection: &AemlSelection,
    store: &CheckpointStore,
    ds: &Dataset,
    ep: &Episode,
    mode: EnsembleMode,
) -> Result<Tensor<f64>> {
    let ens = Ensemble {
        models: load_selection::<T>(selection, store)?,
        mode,
    };
    ens.predict(ds, ep)
}

/// Episode shape and seed of a fixed evaluation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            split: Split::Test,
            way: 5,
            shot: 1,
            queries: 10,
            episodes: 2000,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub t: usize,
    pub mode: EnsembleMode,
    pub acc_single: f64,
    pub acc_aeml: f64,
    pub acc_ensemble: f64,
    pub delta_aeml: f64,
    pub delta_ensemble: f64,
    pub episodes: usize,
    pub seed: u64,
}

pub const COMPARISON_CSV_HEADER: &str = "t,mode,acc_single,acc_aeml,acc_ensemble,delta_aeml,delta_ensemble,episodes,seed";

impl ComparisonReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.t,
            self.mode,
            self.acc_single,
            self.acc_aeml,
            self.acc_ensemble,
            self.delta_aeml,
            self.delta_ensemble,
            self.episodes,
            self.seed
        )
    }
}

fn mean_accuracy<C: Classifier + ?Sized>(clf: &C, ds: &Dataset, e: &EvalSettings) -> Result<f64> {
    let accs = episode_accuracies(clf, ds, e.split, e.way, e.shot, e.queries, e.episodes, e.seed)?;
    Ok(accs.iter().sum::<f64>() / accs.len().max(1) as f64)
}

/// Best single checkpoint, averaged model and prediction ensemble on one
/// shared episode set.
pub fn compare_aeml_ensemble<T: Real>(
    selection: &AemlSelection,
    store: &CheckpointStore,
    ds: &Dataset,
    eval: &EvalSettings,
    mode: EnsembleMode,
) -> Result<ComparisonReport> {
    let best = store.load::<T>(selection.ids[0])?.model;
    let members = load_selection::<T>(selection, store)?;
    let averaged = average_models(&members)?;
    let acc_single = mean_accuracy(&best, ds, eval)?;
    let acc_aeml = mean_accuracy(&averaged, ds, eval)?;
    let acc_ensemble = mean_accuracy(&Ensemble { models: members, mode }, ds, eval)?;
    Ok(ComparisonReport {
        t: selection.t,
        mode,
        acc_single,
        acc_aeml,
        acc_ensemble,
        delta_aeml: acc_aeml - acc_single,
        delta_ensemble: acc_ensemble - acc_single,
        episodes: eval.episodes,
        seed: eval.seed,
    })
}
