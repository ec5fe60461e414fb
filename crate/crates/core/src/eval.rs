//! Episode-set evaluation, confidence intervals and the ablation grid.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aeml::{average_models, load_selection, select_top_t, EnsembleMode, EvalSettings, DEFAULT_T};
use crate::attention::{HeadKind, Sign};
use crate::episodes::{
    episode_seeds, load_omniglot, read_dataset, sample_episode_seeded, synth_family, Dataset, Episode, OmniglotConfig,
    Split, SynthFamilyConfig,
};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};
use crate::trainer::{count_correct, train, CheckpointStore, ModelParams, TrainConfig};

/// Anything that assigns class probabilities to an episode's queries.
pub trait Classifier: Sync {
    /// `[N·Q, N]` probabilities, rows in query order.
    fn predict(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<f64>>;

    fn variant(&self) -> Option<Variant> {
        None
    }
}

/// Model switches recorded in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub class_support: bool,
    pub sign: Sign,
    pub head: HeadKind,
}

impl<T: Real> Classifier for ModelParams<T> {
    fn predict(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<f64>> {
        Ok(self.predict_episode(ds, ep)?.cast())
    }

    fn variant(&self) -> Option<Variant> {
        Some(Variant {
            class_support: self.class_support.is_some(),
            sign: self.config.sign,
            head: self.config.head,
        })
    }
}

/// Nearest support sample in raw input space (Euclidean, ties to the lowest
/// support index), reported as a one-hot distribution.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawNearestNeighbor;

impl Classifier for RawNearestNeighbor {
    fn predict(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<f64>> {
        let mut out = Tensor::zeros(vec![ep.query.len(), ep.way]);
        for (r, q) in ep.query.iter().enumerate() {
            let x = ds.sample(q.class, q.index);
            let mut best = (f64::INFINITY, 0);
            for (i, s) in ep.support.iter().enumerate() {
                let d: f64 = ds
                    .sample(s.class, s.index)
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            out.data_mut()[r * ep.way + best.1 / ep.shot] = 1.0;
        }
        Ok(out)
    }
}

/// Per-episode accuracy over the fixed episode set of `seed`, computed in
/// parallel and returned in episode order.
#[allow(clippy::too_many_arguments)]
pub fn episode_accuracies<C: Classifier + ?Sized>(
    clf: &C,
    ds: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if queries == 0 {
        return Err(Error::Config("evaluation needs at least one query per class".into()));
    }
    episode_seeds(seed, episodes)
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| {
            let ctx = |e: Error| e.context(format!("evaluation episode {i}"));
            let ep = sample_episode_seeded(ds, split, way, shot, queries, s).map_err(ctx)?;
            let probs = clf.predict(ds, &ep).map_err(ctx)?;
            let labels = ep.query_labels();
            Ok(count_correct(&probs, &labels) as f64 / labels.len() as f64)
        })
        .collect()
}

/// Half-width `1.96 · s / √n` of the normal-approximation 95% interval,
/// with the `n − 1` sample standard deviation.
pub fn ci95(accs: &[f64]) -> Result<f64> {
    let n = accs.len();
    if n < 2 {
        return Err(Error::Statistics(format!("ci95 needs at least 2 values, got {n}")));
    }
    if accs.iter().all(|&a| a == accs[0]) {
        return Ok(0.0);
    }
    let rough = accs.iter().sum::<f64>() / n as f64;
    // one correction pass removes the rounding error of the first mean
    let mean = rough + accs.iter().map(|a| a - rough).sum::<f64>() / n as f64;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Checkpoint id, `aeml(t=..)`, or a baseline name.
    pub model: String,
    pub variant: Option<Variant>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Raw per-episode dump with header `episode_idx,accuracy`.
    pub fn accuracies_csv(&self) -> String {
        let mut out = String::from("episode_idx,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {}-way {}-shot, {} episodes ({} split): {:.2}% ± {:.2}%",
            self.model,
            self.way,
            self.shot,
            self.episodes,
            self.split,
            100.0 * self.mean,
            100.0 * self.ci95
        )
    }
}

pub fn evaluate<C: Classifier + ?Sized>(clf: &C, model: &str, ds: &Dataset, e: &EvalSettings) -> Result<EvalReport> {
    let accuracies = episode_accuracies(clf, ds, e.split, e.way, e.shot, e.queries, e.episodes, e.seed)?;
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let ci95 = ci95(&accuracies)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mean,
        ci95,
        split: e.split,
        way: e.way,
        shot: e.shot,
        queries: e.queries,
        episodes: accuracies.len(),
        seed: e.seed,
        model: model.to_string(),
        variant: clf.variant(),
        accuracies,
    })
}

/// Where a run's dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synth(SynthFamilyConfig),
    Cache { path: PathBuf },
    Omniglot {
        root: PathBuf,
        #[serde(default)]
        config: OmniglotConfig,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthFamilyConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synth(cfg) => synth_family(cfg),
            DatasetSource::Cache { path } => read_dataset(path).map_err(|e| e.context(format!("loading {}", path.display()))),
            DatasetSource::Omniglot { root, config } => load_omniglot(root, config),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AemlSettings {
    pub t: usize,
    pub mode: EnsembleMode,
}

impl Default for AemlSettings {
    fn default() -> Self {
        AemlSettings {
            t: DEFAULT_T,
            mode: EnsembleMode::ProbAvg,
        }
    }
}

/// Complete description of a train, evaluation or ablation run.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub aeml: AemlSettings,
    /// Shot counts of the ablation grid.
    pub ablation_shots: Vec<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let e = &self.eval;
        if e.way == 0 || e.shot == 0 || e.queries == 0 || e.episodes < 2 {
            return Err(Error::Config("eval needs way, shot, queries ≥ 1 and at least 2 episodes".into()));
        }
        if self.aeml.t == 0 {
            return Err(Error::Config("aeml.t must be at least 1".into()));
        }
        if self.ablation_shots.contains(&0) {
            return Err(Error::Config("ablation shots must be at least 1".into()));
        }
        let checkpoints = 1 + self.train.total_episodes / self.train.val_period;
        if self.aeml.t > checkpoints {
            return Err(Error::Config(format!(
                "aeml.t = {} but training stores only {checkpoints} checkpoints",
                self.aeml.t
            )));
        }
        Ok(())
    }

    /// Checks against the loaded dataset, for every shot the run will use.
    pub fn validate_for(&self, ds: &Dataset) -> Result<()> {
        self.validate()?;
        let shots: Vec<usize> = if self.ablation_shots.is_empty() {
            vec![self.train.shot]
        } else {
            self.ablation_shots.clone()
        };
        for &k in &shots {
            let t = TrainConfig { shot: k, ..self.train.clone() };
            t.check_split(ds, Split::Train)?;
            t.check_split(ds, Split::Val)?;
            let e = TrainConfig {
                way: self.eval.way,
                shot: k,
                queries: self.eval.queries,
                ..self.train.clone()
            };
            e.check_split(ds, self.eval.split)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub shot: usize,
    pub class_support: bool,
    pub aeml: bool,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub shot: usize,
    /// `class_support` (on − off) or `aeml` (on − off).
    pub factor: String,
    /// Setting of the other factor.
    pub given: bool,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub cells: Vec<AblationCell>,
    pub deltas: Vec<AblationDelta>,
}

impl AblationReport {
    pub fn cell(&self, shot: usize, class_support: bool, aeml: bool) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.shot == shot && c.class_support == class_support && c.aeml == aeml)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("shot,class_support,aeml,mean,ci95,episodes,seed\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.shot, c.class_support, c.aeml, c.report.mean, c.report.ci95, c.report.episodes, c.report.seed
            ));
        }
        out
    }
}

/// Trains with and without the class support re-embedding for every shot
/// count and evaluates the best single checkpoint and the AEML average of
/// each run on one shared episode set.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset) -> Result<AblationReport> {
    match cfg.train.precision {
        DType::F32 => run_ablation_as::<f32>(cfg, ds),
        DType::F64 => run_ablation_as::<f64>(cfg, ds),
    }
}

fn run_ablation_as<T: Real>(cfg: &RunConfig, ds: &Dataset) -> Result<AblationReport> {
    cfg.validate_for(ds)?;
    let shots = if cfg.ablation_shots.is_empty() {
        vec![cfg.train.shot]
    } else {
        cfg.ablation_shots.clone()
    };
    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    for &shot in &shots {
        let mut acc = [[0.0; 2]; 2];
        for (ci, class_support) in [true, false].into_iter().enumerate() {
            let mut tc = cfg.train.clone();
            tc.shot = shot;
            tc.model.class_support = class_support;
            let mut store = CheckpointStore::memory();
            let ctx = |e: Error| e.context(format!("ablation cell shot={shot} class_support={class_support}"));
            let out = train::<T>(&tc, ds, &mut store).map_err(ctx)?;
            let eval = EvalSettings { shot, ..cfg.eval.clone() };
            let best = select_top_t(&out.log, &store, 1)?;
            let single = store.load::<T>(best.ids[0])?.model;
            let single_report = evaluate(&single, &format!("checkpoint {}", best.ids[0]), ds, &eval).map_err(ctx)?;
            let sel = select_top_t(&out.log, &store, cfg.aeml.t)?;
            let averaged = average_models(&load_selection::<T>(&sel, &store)?)?;
            let aeml_report = evaluate(&averaged, &format!("aeml(t={})", cfg.aeml.t), ds, &eval).map_err(ctx)?;
            acc[ci] = [single_report.mean, aeml_report.mean];
            for (aeml, report) in [(false, single_report), (true, aeml_report)] {
                cells.push(AblationCell {
                    shot,
                    class_support,
                    aeml,
                    report,
                });
            }
        }
        for (ai, aeml) in [false, true].into_iter().enumerate() {
            deltas.push(AblationDelta {
                shot,
                factor: "class_support".into(),
                given: aeml,
                delta: acc[0][ai] - acc[1][ai],
            });
        }
        for (ci, class_support) in [true, false].into_iter().enumerate() {
            deltas.push(AblationDelta {
                shot,
                factor: "aeml".into(),
                given: class_support,
                delta: acc[ci][1] - acc[ci][0],
            });
        }
    }
    Ok(AblationReport {
        config: cfg.clone(),
        cells,
        deltas,
    })
}
