use serde::{Deserialize, Serialize};

use crate::attention::{head_probs, HeadKind, HeadSpec, Sign};
use crate::autodiff::{BatchStats, BnMode, Graph, RunningStats, Var};
use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::networks::{ArchSpec, ClassSupportParams, EmbeddingParams, DEFAULT_CHANNELS};
use crate::tensor::{Real, Tensor};

/// Everything that determines a freshly built model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchSpec,
    /// `false` replaces the class support re-embedding by the identity.
    pub class_support: bool,
    /// Channel width `m` of the re-embedding.
    pub channels: usize,
    pub head: HeadKind,
    pub sign: Sign,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: ArchSpec::Mlp { widths: vec![8, 64, 64] },
            class_support: true,
            channels: DEFAULT_CHANNELS,
            head: HeadKind::Competitive,
            sign: Sign::Negative,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Equal in everything but the initialization seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        ModelConfig { seed: other.seed, ..self.clone() } == *other
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            kind: self.head,
            sign: self.sign,
        }
    }
}

/// θ and φ together, with their BN running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub shots: usize,
    pub embedding: EmbeddingParams<T>,
    pub class_support: Option<ClassSupportParams<T>>,
}

/// Graph leaves of a bound model, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Vec<Var>,
    pub class_support: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        self.embedding.iter().chain(&self.class_support).copied().collect()
    }
}

impl<T: Real> ModelParams<T> {
    /// The embedding is seeded with `config.seed`, the re-embedding with `config.seed + 1`.
    pub fn build(config: &ModelConfig, shots: usize) -> Result<Self> {
        let embedding = EmbeddingParams::build(config.arch.clone(), config.seed)?;
        let class_support = if config.class_support {
            Some(ClassSupportParams::build(
                shots,
                embedding.output_dim(),
                config.channels,
                config.seed.wrapping_add(1),
            )?)
        } else {
            if shots == 0 {
                return Err(Error::Config("shots must be at least 1".into()));
            }
            None
        };
        Ok(ModelParams {
            config: config.clone(),
            shots,
            embedding,
            class_support,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            embedding: self.embedding.params.bind(g),
            class_support: self.class_support.as_ref().map(|c| c.params.bind(g)).unwrap_or_default(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let emb = self.embedding.params.names().map(|n| format!("emb.{n}"));
        let cs = self.class_support.iter().flat_map(|c| c.params.names().map(str::to_string));
        emb.chain(cs).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.embedding.params.tensors().collect();
        if let Some(c) = &self.class_support {
            out.extend(c.params.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.embedding.params.tensors_mut().collect();
        if let Some(c) = &mut self.class_support {
            out.extend(c.params.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn running_stats(&self) -> Vec<&RunningStats<T>> {
        let mut out: Vec<&RunningStats<T>> = self.embedding.bn.iter().collect();
        if let Some(c) = &self.class_support {
            out.extend(c.bn.iter());
        }
        out
    }

    fn running_stats_mut(&mut self) -> Vec<&mut RunningStats<T>> {
        let mut out: Vec<&mut RunningStats<T>> = self.embedding.bn.iter_mut().collect();
        if let Some(c) = &mut self.class_support {
            out.extend(c.bn.iter_mut());
        }
        out
    }

    /// Class probabilities `[P, N]` for an input batch whose first
    /// `n_support` rows are the support samples (class-major, `shots` per
    /// class) and whose remaining `P` rows are queries. In train mode, BN
    /// statistics of the embedding run over all rows and one [`BatchStats`]
    /// per BN layer is appended to `stats`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        x: Var,
        n_support: usize,
        mode: BnMode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if n_support == 0 || n_support % self.shots != 0 || n_support >= rows {
            return Err(Error::dim(format!(
                "{n_support} support rows of {rows} do not form {}-shot classes with queries",
                self.shots
            )));
        }
        let feats = self.embedding.forward(g, &vars.embedding, x, mode, stats)?;
        let mut support = g.slice_rows(feats, 0, n_support)?;
        let query = g.slice_rows(feats, n_support, rows)?;
        if let Some(cs) = &self.class_support {
            support = cs.forward(g, &vars.class_support, support, mode, stats)?;
        }
        head_probs(g, self.config.head_spec(), support, query, self.shots)
    }

    /// Input tensor for an episode: support rows then query rows.
    pub fn episode_input(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<T>> {
        if ep.shot != self.shots {
            return Err(Error::dim(format!("{}-shot episode for a {}-shot model", ep.shot, self.shots)));
        }
        let refs: Vec<_> = ep.support.iter().chain(&ep.query).copied().collect();
        ds.gather(&refs)
    }

    /// Eval-mode class probabilities `[N·Q, N]` for an episode's queries.
    pub fn predict_episode(&self, ds: &Dataset, ep: &Episode) -> Result<Tensor<T>> {
        let input = self.episode_input(ds, ep)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.leaf(input);
        let probs = self.forward(&mut g, &vars, x, ep.support.len(), BnMode::Eval, &mut Vec::new())?;
        Ok(g.value(probs).clone())
    }

    /// Number of queries of `ep` whose argmax prediction is their label.
    pub fn correct_on(&self, ds: &Dataset, ep: &Episode) -> Result<usize> {
        let probs = self.predict_episode(ds, ep)?;
        Ok(count_correct(&probs, &ep.query_labels()))
    }

    /// Folds train-mode statistics (embedding layers first) into the running stats.
    pub fn apply_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        let n_emb = self.embedding.bn.len();
        if stats.len() < n_emb {
            return Err(Error::Contract(format!("{} batch stats for {n_emb} embedding BN layers", stats.len())));
        }
        self.embedding.apply_stats(&stats[..n_emb])?;
        match &mut self.class_support {
            Some(cs) => cs.apply_stats(&stats[n_emb..]),
            None if stats.len() == n_emb => Ok(()),
            None => Err(Error::Contract("batch stats left over for a bypassed re-embedding".into())),
        }
    }

    /// Parameters followed by BN running means and variances, all named.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .param_names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect();
        for (i, s) in self.running_stats().into_iter().enumerate() {
            let c = s.channels();
            out.push((format!("running.{i}.mean"), Tensor::new(vec![c], s.mean.clone()).expect("channels")));
            out.push((format!("running.{i}.var"), Tensor::new(vec![c], s.var.clone()).expect("channels")));
        }
        out
    }

    pub fn bn_initialized(&self) -> Vec<bool> {
        self.running_stats().iter().map(|s| s.is_initialized()).collect()
    }

    /// Rebuilds a model from [`ModelParams::state`] output. Names, order and
    /// shapes must match what `config` and `shots` build.
    pub fn from_state(config: &ModelConfig, shots: usize, state: Vec<(String, Tensor<T>)>, bn_initialized: &[bool]) -> Result<Self> {
        let mut model = Self::build(config, shots)?;
        let expect = model.state();
        if expect.len() != state.len() {
            return Err(Error::Contract(format!("state has {} tensors, model needs {}", state.len(), expect.len())));
        }
        for ((en, et), (n, t)) in expect.iter().zip(&state) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "state tensor {n} {:?} does not match {en} {:?}",
                    t.shape(),
                    et.shape()
                )));
            }
        }
        if bn_initialized.len() != model.running_stats().len() {
            return Err(Error::Contract("BN flag count does not match the model".into()));
        }
        let mut it = state.into_iter().map(|(_, t)| t);
        for dst in model.tensors_mut() {
            *dst = it.next().expect("length checked");
        }
        for (s, &init) in model.running_stats_mut().into_iter().zip(bn_initialized) {
            let mean = it.next().expect("length checked").into_data();
            let var = it.next().expect("length checked").into_data();
            *s = RunningStats::from_parts(mean, var, init)?;
        }
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let state = self.state().into_iter().map(|(n, t)| (n, t.cast())).collect();
        ModelParams::from_state(&self.config, self.shots, state, &self.bn_initialized()).expect("same layout")
    }
}

pub fn count_correct<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| crate::attention::argmax(probs.row(r)) == y)
        .count()
}
