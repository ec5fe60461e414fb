use super::{check_positive, Init, NamedTensors};
use crate::autodiff::{BatchStats, BnMode, Graph, Padding, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Default channel width `m` of the per-point layers.
pub const DEFAULT_CHANNELS: usize = 64;

/// Parameters φ of the class support re-embedding.
///
/// Maps the `K` embedded support points of one class (`[K, D]`) to `K` new
/// points. Layers 1 and 2 are `Conv1D(m, 3)` + BN + ReLU applied to each
/// support point separately (weights shared across points, feature axis as
/// the sequence axis). Layer 3 is a kernel-size-1 convolution whose inputs
/// are the `K·m` stacked channel maps of all points and whose `K` outputs
/// become the new points.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSupportParams<T> {
    pub shots: usize,
    pub dim: usize,
    pub channels: usize,
    pub seed: u64,
    pub params: NamedTensors<T>,
    pub bn: Vec<RunningStats<T>>,
}

impl<T: Real> ClassSupportParams<T> {
    pub fn build(shots: usize, dim: usize, channels: usize, seed: u64) -> Result<Self> {
        check_positive("shots", shots)?;
        check_positive("feature dim", dim)?;
        check_positive("class support channels", channels)?;
        let mut init = Init::new(seed);
        let mut params = NamedTensors::new();
        params.push("cs.conv1.weight", init.he(vec![channels, 1, 3], 3));
        params.push("cs.bn1.gamma", Tensor::full(vec![channels], T::one()));
        params.push("cs.bn1.beta", Tensor::zeros(vec![channels]));
        params.push("cs.conv2.weight", init.he(vec![channels, channels, 3], channels * 3));
        params.push("cs.bn2.gamma", Tensor::full(vec![channels], T::one()));
        params.push("cs.bn2.beta", Tensor::zeros(vec![channels]));
        params.push("cs.mix.weight", init.he(vec![shots, shots * channels, 1], shots * channels));
        params.push("cs.mix.bias", Tensor::zeros(vec![shots]));
        Ok(ClassSupportParams {
            shots,
            dim,
            channels,
            seed,
            params,
            bn: vec![RunningStats::identity(channels), RunningStats::identity(channels)],
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Re-embeds `x: [G·K, D]`, the support points of `G` classes stacked
    /// class-major, into a tensor of the same shape. In train mode the two BN
    /// layers use statistics over all `G·K` points.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: BnMode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (k, d, m) = (self.shots, self.dim, self.channels);
        if shape.len() != 2 || shape[1] != d || shape[0] % k != 0 || shape[0] == 0 {
            return Err(Error::dim(format!(
                "class support expects [G·{k}, {d}], got {shape:?}"
            )));
        }
        let rows = shape[0];
        let groups = rows / k;
        let mut h = g.reshape(x, vec![rows, 1, d])?;
        for (layer, (w, gamma, beta)) in [(vars[0], vars[1], vars[2]), (vars[3], vars[4], vars[5])]
            .into_iter()
            .enumerate()
        {
            h = g.conv1d(h, w, None, 1, Padding::Same)?;
            h = match mode {
                BnMode::Train => {
                    let (out, s) = g.batch_norm_train(h, gamma, beta)?;
                    stats.push(s);
                    out
                }
                BnMode::Eval => g.batch_norm_eval(h, gamma, beta, &self.bn[layer])?,
            };
            h = g.relu(h);
        }
        let stacked = g.reshape(h, vec![groups, k * m, d])?;
        let mixed = g.conv1d(stacked, vars[6], Some(vars[7]), 1, Padding::Valid)?;
        g.reshape(mixed, vec![rows, d])
    }

    /// Eval-mode re-embedding of one class, `[K, D] -> [K, D]`.
    pub fn apply(&self, class_feats: &Tensor<T>) -> Result<Tensor<T>> {
        if class_feats.shape() != [self.shots, self.dim] {
            return Err(Error::dim(format!(
                "class support expects [{}, {}], got {:?}",
                self.shots,
                self.dim,
                class_feats.shape()
            )));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let x = g.leaf(class_feats.clone());
        let out = self.forward(&mut g, &vars, x, BnMode::Eval, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

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

/// The identity map used when the re-embedding is ablated.
pub fn bypass_class_support<T: Real>(class_feats: &Tensor<T>) -> Tensor<T> {
    class_feats.clone()
}
