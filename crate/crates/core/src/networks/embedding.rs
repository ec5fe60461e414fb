use serde::{Deserialize, Serialize};

use super::{check_positive, Init, NamedTensors};
use crate::autodiff::{BatchStats, BnMode, Graph, Padding, PoolMode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Architecture of the per-sample embedding network.
///
/// * `mlp`: dense layers with ReLU between them (none after the last).
/// * `conv4`: four blocks of 64 3×3 filters, BN, ReLU, 2×2 max-pool.
/// * `conv6`: conv4 with two extra unpooled 64-filter blocks after the second
///   pooled block.
/// * `conv9`: four blocks of two 3×3 conv+BN+ReLU layers (64, 128, 256, 512
///   filters) each followed by a 2×2 max-pool, then 2000 1×1 filters and a
///   global average pool.
///
/// Pooling floors odd extents, so 28×28 inputs reduce 28→14→7→3→1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ArchSpec {
    Mlp { widths: Vec<usize> },
    Conv4 { input_shape: [usize; 3] },
    Conv6 { input_shape: [usize; 3] },
    Conv9 { input_shape: [usize; 3] },
}

#[derive(Clone, Copy, Debug)]
struct ConvStage {
    filters: usize,
    ksize: usize,
    bn_relu: bool,
    pool: bool,
}

const fn block(filters: usize, pool: bool) -> ConvStage {
    ConvStage {
        filters,
        ksize: 3,
        bn_relu: true,
        pool,
    }
}

impl ArchSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ArchSpec::Mlp { .. } => "mlp",
            ArchSpec::Conv4 { .. } => "conv4",
            ArchSpec::Conv6 { .. } => "conv6",
            ArchSpec::Conv9 { .. } => "conv9",
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { widths } => vec![widths.first().copied().unwrap_or(0)],
            ArchSpec::Conv4 { input_shape } | ArchSpec::Conv6 { input_shape } | ArchSpec::Conv9 { input_shape } => {
                input_shape.to_vec()
            }
        }
    }

    fn stages(&self) -> Vec<ConvStage> {
        match self {
            ArchSpec::Mlp { .. } => vec![],
            ArchSpec::Conv4 { .. } => vec![block(64, true); 4],
            ArchSpec::Conv6 { .. } => vec![
                block(64, true),
                block(64, true),
                block(64, false),
                block(64, false),
                block(64, true),
                block(64, true),
            ],
            ArchSpec::Conv9 { .. } => {
                let mut s = Vec::new();
                for f in [64, 128, 256, 512] {
                    s.push(block(f, false));
                    s.push(block(f, true));
                }
                s.push(ConvStage {
                    filters: 2000,
                    ksize: 1,
                    bn_relu: false,
                    pool: false,
                });
                s
            }
        }
    }

    /// Validates the architecture and returns the embedding dimension.
    pub fn output_dim(&self) -> Result<usize> {
        match self {
            ArchSpec::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(Error::Config(format!("mlp needs at least input and output widths, got {widths:?}")));
                }
                for &w in widths {
                    check_positive("mlp width", w)?;
                }
                Ok(*widths.last().expect("nonempty"))
            }
            _ => {
                let [c, mut h, mut w] = match self {
                    ArchSpec::Conv4 { input_shape } | ArchSpec::Conv6 { input_shape } | ArchSpec::Conv9 { input_shape } => {
                        *input_shape
                    }
                    ArchSpec::Mlp { .. } => unreachable!(),
                };
                check_positive("input channels", c)?;
                let mut channels = c;
                for (i, st) in self.stages().iter().enumerate() {
                    if st.pool {
                        if h < 2 || w < 2 {
                            return Err(Error::Config(format!(
                                "{}: input {:?} shrinks to {h}x{w} before pooling stage {i}",
                                self.kind(),
                                self.input_shape()
                            )));
                        }
                        h /= 2;
                        w /= 2;
                    }
                    channels = st.filters;
                }
                Ok(match self {
                    ArchSpec::Conv9 { .. } => channels,
                    _ => channels * h * w,
                })
            }
        }
    }
}

/// Parameters θ of the embedding network.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams<T> {
    pub arch: ArchSpec,
    pub seed: u64,
    pub params: NamedTensors<T>,
    pub bn: Vec<RunningStats<T>>,
}

impl<T: Real> EmbeddingParams<T> {
    /// He-initialized weights, zero biases, BN γ=1/β=0 with identity running stats.
    pub fn build(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.output_dim()?;
        let mut init = Init::new(seed);
        let mut params = NamedTensors::new();
        let mut bn = Vec::new();
        match &arch {
            ArchSpec::Mlp { widths } => {
                for (i, pair) in widths.windows(2).enumerate() {
                    params.push(format!("fc{i}.weight"), init.he(vec![pair[0], pair[1]], pair[0]));
                    params.push(format!("fc{i}.bias"), Tensor::zeros(vec![pair[1]]));
                }
            }
            _ => {
                let mut channels = arch.input_shape()[0];
                for (i, st) in arch.stages().iter().enumerate() {
                    let fan_in = channels * st.ksize * st.ksize;
                    params.push(
                        format!("conv{i}.weight"),
                        init.he(vec![st.filters, channels, st.ksize, st.ksize], fan_in),
                    );
                    if st.bn_relu {
                        params.push(format!("bn{i}.gamma"), Tensor::full(vec![st.filters], T::one()));
                        params.push(format!("bn{i}.beta"), Tensor::zeros(vec![st.filters]));
                        bn.push(RunningStats::identity(st.filters));
                    } else {
                        params.push(format!("conv{i}.bias"), Tensor::zeros(vec![st.filters]));
                    }
                    channels = st.filters;
                }
            }
        }
        Ok(EmbeddingParams { arch, seed, params, bn })
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim().expect("validated at build")
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Embeds a `[B, input_shape...]` batch to `[B, D]`. `vars` are the bound
    /// parameters (see [`NamedTensors::bind`]). Train mode appends one
    /// [`BatchStats`] per BN layer to `stats`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: BnMode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let expect = self.arch.input_shape();
        let shape = g.shape(x).to_vec();
        if shape.len() != expect.len() + 1 || shape[1..] != expect[..] {
            return Err(Error::dim(format!(
                "{} embedding expects [B, {expect:?}], got {shape:?}",
                self.arch.kind()
            )));
        }
        let batch = shape[0];
        match &self.arch {
            ArchSpec::Mlp { widths } => {
                let layers = widths.len() - 1;
                let mut h = x;
                for i in 0..layers {
                    h = g.dense(h, vars[2 * i], vars[2 * i + 1])?;
                    if i + 1 < layers {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            _ => {
                let mut h = x;
                let mut vi = 0;
                let mut bi = 0;
                for st in self.arch.stages() {
                    if st.bn_relu {
                        h = g.conv2d(h, vars[vi], 1, Padding::Same)?;
                        h = match mode {
                            BnMode::Train => {
                                let (out, s) = g.batch_norm_train(h, vars[vi + 1], vars[vi + 2])?;
                                stats.push(s);
                                out
                            }
                            BnMode::Eval => g.batch_norm_eval(h, vars[vi + 1], vars[vi + 2], &self.bn[bi])?,
                        };
                        h = g.relu(h);
                        vi += 3;
                        bi += 1;
                    } else {
                        // 1×1 head with bias: run as a conv1d over the flattened plane
                        let s = g.shape(h).to_vec();
                        let flat = g.reshape(h, vec![s[0], s[1], s[2] * s[3]])?;
                        let kshape = g.shape(vars[vi]).to_vec();
                        let k = g.reshape(vars[vi], vec![kshape[0], kshape[1], 1])?;
                        let out = g.conv1d(flat, k, Some(vars[vi + 1]), 1, Padding::Valid)?;
                        h = g.reshape(out, vec![s[0], kshape[0], s[2], s[3]])?;
                        vi += 2;
                    }
                    if st.pool {
                        h = g.max_pool2d(h, PoolMode::Floor)?;
                    }
                }
                match self.arch {
                    ArchSpec::Conv9 { .. } => g.global_avg_pool(h),
                    _ => g.reshape(h, vec![batch, self.output_dim()]),
                }
            }
        }
    }

    /// Eval-mode embedding of a batch tensor.
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let x = g.leaf(batch.clone());
        let out = self.forward(&mut g, &vars, x, BnMode::Eval, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

    /// Folds train-mode batch statistics (one per BN layer, in order) into the running stats.
    pub fn apply_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(Error::Contract(format!(
                "{} batch stats for {} BN layers",
                stats.len(),
                self.bn.len()
            )));
        }
        for (r, s) in self.bn.iter_mut().zip(stats) {
            r.update(s)?;
        }
        Ok(())
    }
}
