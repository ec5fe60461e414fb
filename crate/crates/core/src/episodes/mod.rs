//! Task datasets and the N-way K-shot episode sampler.

mod cache;
mod omniglot;
mod synth;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use cache::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use omniglot::{load_omniglot, rotate90, OmniglotConfig, OMNIGLOT_SAMPLES, OMNIGLOT_SIDE};
pub use synth::{synth_family, SynthFamilyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Split> {
        Split::ALL.get(tag as usize).copied()
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|val|test)"))),
        }
    }
}

/// One class: a global id, its split and its samples stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub split: Split,
    data: Vec<f32>,
    count: usize,
}

impl ClassRecord {
    pub fn new(id: usize, split: Split, sample_len: usize, data: Vec<f32>) -> Result<Self> {
        if sample_len == 0 || data.len() % sample_len != 0 {
            return Err(Error::dim(format!(
                "class {id}: {} values do not divide into samples of {sample_len}",
                data.len()
            )));
        }
        Ok(ClassRecord {
            id,
            split,
            count: data.len() / sample_len,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    sample_len: usize,
    classes: Vec<ClassRecord>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, classes: Vec<ClassRecord>) -> Result<Self> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_shape.is_empty() || sample_len == 0 {
            return Err(Error::dim(format!("invalid sample shape {sample_shape:?}")));
        }
        for c in &classes {
            if c.data.len() != c.count * sample_len {
                return Err(Error::dim(format!("class {} does not hold samples of shape {sample_shape:?}", c.id)));
            }
        }
        Ok(Dataset {
            sample_shape,
            sample_len,
            classes,
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_len
    }

    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(ClassRecord::len).sum()
    }

    pub fn sample(&self, class: usize, index: usize) -> &[f32] {
        &self.classes[class].data[index * self.sample_len..][..self.sample_len]
    }

    /// Positions (into [`Dataset::classes`]) of the classes in `split`, in order.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Smallest class size within `split`, or 0 if the split is empty.
    pub fn min_class_size(&self, split: Split) -> usize {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(ClassRecord::len)
            .min()
            .unwrap_or(0)
    }

    /// Stacks the referenced samples into `[refs.len(), ...sample_shape]`.
    pub fn gather<T: Real>(&self, refs: &[SampleRef]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(refs.len() * self.sample_len);
        for r in refs {
            data.extend(self.sample(r.class, r.index).iter().map(|&v| T::lit(v as f64)));
        }
        let mut shape = vec![refs.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, data)
    }
}

/// Position of a sample: class position in the dataset and sample index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleRef {
    pub class: usize,
    pub index: usize,
}

/// One N-way K-shot task. Support and query samples are stored class-major
/// by local label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub split: Split,
    /// `classes[local]` = position of that class in the dataset.
    pub classes: Vec<usize>,
    pub support: Vec<SampleRef>,
    pub query: Vec<SampleRef>,
    /// Seed of the generator that drew this episode.
    pub seed: u64,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|c| std::iter::repeat_n(c, self.shot)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|c| std::iter::repeat_n(c, self.queries)).collect()
    }

    /// Global class id for each local label.
    pub fn global_ids(&self, ds: &Dataset) -> Vec<usize> {
        self.classes.iter().map(|&c| ds.classes()[c].id).collect()
    }
}

/// Draws one episode. A fresh seed is taken from `rng` and the episode is
/// sampled from a generator seeded with it, so [`Episode::seed`] reproduces it.
pub fn sample_episode(
    ds: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut impl RngCore,
) -> Result<Episode> {
    let seed = rng.next_u64();
    sample_episode_seeded(ds, split, way, shot, queries, seed)
}

pub fn sample_episode_seeded(
    ds: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Config("way and shot must be at least 1".into()));
    }
    let pool = ds.split_classes(split);
    if pool.len() < way {
        return Err(Error::Sampling {
            what: format!("classes in {split} split"),
            required: way,
            available: pool.len(),
        });
    }
    let per_class = shot + queries;
    let smallest = ds.min_class_size(split);
    if smallest < per_class {
        return Err(Error::Sampling {
            what: format!("samples per class in {split} split"),
            required: per_class,
            available: smallest,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<usize> = index::sample(&mut rng, pool.len(), way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for &class in &classes {
        let picks = index::sample(&mut rng, ds.classes()[class].len(), per_class).into_vec();
        support.extend(picks[..shot].iter().map(|&index| SampleRef { class, index }));
        query.extend(picks[shot..].iter().map(|&index| SampleRef { class, index }));
    }
    Ok(Episode {
        way,
        shot,
        queries,
        split,
        classes,
        support,
        query,
        seed,
    })
}

pub fn episode_batch(
    ds: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries: usize,
    count: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<Episode>> {
    (0..count)
        .map(|i| {
            sample_episode(ds, split, way, shot, queries, rng).map_err(|e| e.context(format!("episode {i}")))
        })
        .collect()
}

/// Seeds for a fixed evaluation set: episode `i` uses the `i`-th draw of a
/// ChaCha stream seeded with `seed`.
pub fn episode_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}
