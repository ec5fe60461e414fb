//! Classification heads over embedded support sets.
//!
//! The competitive head first lets the `K` support points of every class
//! compete for the query (nearest point wins, ties to the lowest shot index),
//! then takes a softmax over the `N` winning distances. The matching head
//! attends every support point; the prototype head compares against class
//! means. Pure functions operate on plain slices; [`head_probs`] builds the
//! same heads inside a [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sign of the distance inside the competitive softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    /// `softmax(−d)`: the nearest class gets the largest weight.
    #[default]
    Negative,
    /// `softmax(+d)`, the exponent taken without negation.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    #[default]
    Competitive,
    Matching,
    Prototype,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub sign: Sign,
}

/// `K` support vectors of dimension `D` for each of `N` classes, stored class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSupports<T> {
    shots: usize,
    dim: usize,
    points: Vec<T>,
}

impl<T: Real> ClassSupports<T> {
    /// From a `[N·K, D]` tensor whose rows are grouped by class.
    pub fn from_tensor(t: &Tensor<T>, shots: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || shots == 0 || s[0] % shots != 0 {
            return Err(Error::dim(format!("class supports: shape {s:?} with {shots} shots")));
        }
        Ok(ClassSupports {
            shots,
            dim: s[1],
            points: t.data().to_vec(),
        })
    }

    /// From `classes[i][j]` = shot `j` of class `i`.
    pub fn from_nested(classes: &[Vec<Vec<T>>]) -> Result<Self> {
        let shots = classes.first().map(Vec::len).unwrap_or(0);
        let dim = classes.first().and_then(|c| c.first()).map(Vec::len).unwrap_or(0);
        if shots == 0 || dim == 0 {
            return Err(Error::dim("class supports need at least one class, shot and feature"));
        }
        let mut points = Vec::with_capacity(classes.len() * shots * dim);
        for class in classes {
            if class.len() != shots {
                return Err(Error::dim(format!("classes disagree on shots: {} vs {shots}", class.len())));
            }
            for p in class {
                if p.len() != dim {
                    return Err(Error::dim(format!("support point of dim {} vs {dim}", p.len())));
                }
                points.extend_from_slice(p);
            }
        }
        Ok(ClassSupports { shots, dim, points })
    }

    pub fn classes(&self) -> usize {
        self.points.len() / (self.shots * self.dim)
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, class: usize, shot: usize) -> &[T] {
        &self.points[(class * self.shots + shot) * self.dim..][..self.dim]
    }

    fn check_query(&self, query: &[T]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::dim(format!(
                "query dim {} does not match support dim {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T> {
    pub winners: Vec<usize>,
    pub winner_dists: Vec<T>,
    pub weights: Vec<T>,
    pub predicted: Vec<T>,
}

pub fn euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    squared_euclidean(a, b).sqrt()
}

pub fn squared_euclidean<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Per class, the index of the support point nearest to `query` and its distance.
pub fn select_winners<T: Real>(supports: &ClassSupports<T>, query: &[T]) -> Result<(Vec<usize>, Vec<T>)> {
    supports.check_query(query)?;
    let mut winners = Vec::with_capacity(supports.classes());
    let mut dists = Vec::with_capacity(supports.classes());
    for i in 0..supports.classes() {
        let mut best = 0;
        let mut best_d = euclidean(supports.point(i, 0), query);
        for j in 1..supports.shots() {
            let d = euclidean(supports.point(i, j), query);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        winners.push(best);
        dists.push(best_d);
    }
    Ok((winners, dists))
}

pub fn competitive_weights<T: Real>(winner_dists: &[T], sign: Sign) -> Vec<T> {
    let logits: Vec<T> = match sign {
        Sign::Negative => winner_dists.iter().map(|&d| -d).collect(),
        Sign::Literal => winner_dists.to_vec(),
    };
    let mut out = vec![T::zero(); logits.len()];
    softmax_row(&logits, &mut out);
    out
}

/// `Σ_i weights[i] · labels[i]` for label vectors `labels[i]`.
pub fn predict<T: Real>(weights: &[T], labels: &[Vec<T>]) -> Result<Vec<T>> {
    if weights.len() != labels.len() {
        return Err(Error::dim(format!("{} weights for {} labels", weights.len(), labels.len())));
    }
    let width = labels.first().map(Vec::len).unwrap_or(0);
    let mut out = vec![T::zero(); width];
    for (&w, y) in weights.iter().zip(labels) {
        if y.len() != width {
            return Err(Error::dim("label vectors differ in length"));
        }
        for (o, &v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One-hot rows for local labels `0..n`.
pub fn one_hot<T: Real>(n: usize) -> Vec<Vec<T>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect()
}

/// Winner selection, competitive weights and prediction for one query.
pub fn competitive_attention<T: Real>(supports: &ClassSupports<T>, query: &[T], sign: Sign) -> Result<AttentionResult<T>> {
    let (winners, winner_dists) = select_winners(supports, query)?;
    let weights = competitive_weights(&winner_dists, sign);
    let predicted = predict(&weights, &one_hot(supports.classes()))?;
    Ok(AttentionResult {
        winners,
        winner_dists,
        weights,
        predicted,
    })
}

/// Softmax over `−distance` to every support point; a class's probability is
/// the total weight of its members. Classes are `0..=max label`.
pub fn matching_attention<T: Real>(support: &[(&[T], usize)], query: &[T]) -> Result<Vec<T>> {
    let n = support
        .iter()
        .map(|(_, c)| c + 1)
        .max()
        .ok_or_else(|| Error::dim("matching attention needs a nonempty support set"))?;
    let mut logits = Vec::with_capacity(support.len());
    for (p, _) in support {
        if p.len() != query.len() {
            return Err(Error::dim(format!("support dim {} vs query dim {}", p.len(), query.len())));
        }
        logits.push(-euclidean(p, query));
    }
    let mut w = vec![T::zero(); logits.len()];
    softmax_row(&logits, &mut w);
    let mut out = vec![T::zero(); n];
    for (&wi, (_, c)) in w.iter().zip(support) {
        out[*c] += wi;
    }
    Ok(out)
}

/// Softmax over `−‖mean_j(x_ij) − query‖²`.
pub fn prototype_head<T: Real>(supports: &ClassSupports<T>, query: &[T]) -> Result<Vec<T>> {
    supports.check_query(query)?;
    let k = T::lit(supports.shots() as f64);
    let logits: Vec<T> = (0..supports.classes())
        .map(|i| {
            let mut proto = vec![T::zero(); supports.dim()];
            for j in 0..supports.shots() {
                for (p, &v) in proto.iter_mut().zip(supports.point(i, j)) {
                    *p += v;
                }
            }
            proto.iter_mut().for_each(|p| *p /= k);
            -squared_euclidean(&proto, query)
        })
        .collect();
    let mut out = vec![T::zero(); logits.len()];
    softmax_row(&logits, &mut out);
    Ok(out)
}

/// Class probabilities `[P, N]` for queries `[P, D]` against supports
/// `[N·shots, D]` (class-major), built inside `g`.
pub fn head_probs<T: Real>(g: &mut Graph<T>, head: HeadSpec, supports: Var, queries: Var, shots: usize) -> Result<Var> {
    match head.kind {
        HeadKind::Competitive => {
            let d = g.pairwise_dist(queries, supports, false)?;
            let winners = g.group_min(d, shots)?;
            let logits = match head.sign {
                Sign::Negative => g.scale(winners, -1.0),
                Sign::Literal => winners,
            };
            g.softmax(logits)
        }
        HeadKind::Matching => {
            let d = g.pairwise_dist(queries, supports, false)?;
            let logits = g.scale(d, -1.0);
            let w = g.softmax(logits)?;
            g.group_sum(w, shots)
        }
        HeadKind::Prototype => {
            let protos = g.group_mean_rows(supports, shots)?;
            let d = g.pairwise_dist(queries, protos, true)?;
            let logits = g.scale(d, -1.0);
            g.softmax(logits)
        }
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn supports_1d(classes: &[&[f64]]) -> ClassSupports<f64> {
        let nested: Vec<Vec<Vec<f64>>> = classes.iter().map(|c| c.iter().map(|&v| vec![v]).collect()).collect();
        ClassSupports::from_nested(&nested).unwrap()
    }

    #[test]
    fn select_winners_examples() {
        let s = supports_1d(&[&[0.0, 4.0]]);
        let (w, d) = select_winners(&s, &[2.5]).unwrap();
        assert_eq!(w, vec![1]);
        assert!((d[0] - 1.5).abs() < 1e-15);

        let s = supports_1d(&[&[1.0], &[3.0], &[-2.0]]);
        let (w, d) = select_winners(&s, &[0.0]).unwrap();
        assert_eq!(w, vec![0, 0, 0]);
        assert_eq!(d, vec![1.0, 3.0, 2.0]);

        let s = supports_1d(&[&[5.0, 1.0, 1.0]]);
        assert_eq!(select_winners(&s, &[0.0]).unwrap().0, vec![1]);

        assert!(matches!(select_winners(&s, &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn competitive_weights_examples() {
        let u = competitive_weights(&[2.0f64, 2.0, 2.0, 2.0], Sign::Negative);
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let e = std::f64::consts::E;
        let neg = competitive_weights(&[0.5, 1.5], Sign::Negative);
        assert!((neg[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((neg[0] - 0.7311).abs() < 1e-4 && (neg[1] - 0.2689).abs() < 1e-4);
        let lit = competitive_weights(&[0.5, 1.5], Sign::Literal);
        assert!((lit[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((lit[0] - 0.2689).abs() < 1e-4 && (lit[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[1.0f64], &one_hot(1)).unwrap(), vec![1.0]);
        assert_eq!(predict(&[0.7f64, 0.3], &one_hot(2)).unwrap(), vec![0.7, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let dists: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let p = predict(&competitive_weights(&dists, Sign::Negative), &one_hot(5)).unwrap();
            let argmin = dists.iter().enumerate().fold(0, |b, (i, &d)| if d < dists[b] { i } else { b });
            assert_eq!(argmax(&p), argmin);
        }
    }

    #[test]
    fn matching_attention_cases() {
        let s = supports_1d(&[&[1.0], &[3.0], &[-2.5]]);
        let flat: Vec<(&[f64], usize)> = (0..3).map(|i| (s.point(i, 0), i)).collect();
        let m = matching_attention(&flat, &[0.7]).unwrap();
        let c = competitive_attention(&s, &[0.7], Sign::Negative).unwrap();
        for (a, b) in m.iter().zip(&c.predicted) {
            assert!((a - b).abs() <= 1e-12);
        }

        // duplicating a class-0 point raises class 0's mass
        let a = [0.0f64];
        let b = [2.0f64];
        let single = matching_attention(&[(&a[..], 0), (&b[..], 1)], &[1.2]).unwrap();
        let dup = matching_attention(&[(&a[..], 0), (&a[..], 0), (&b[..], 1)], &[1.2]).unwrap();
        let e08 = (-1.2f64).exp();
        let e02 = (-0.8f64).exp();
        assert!((dup[0] - 2.0 * e08 / (2.0 * e08 + e02)).abs() < 1e-15);
        assert!(dup[0] > single[0]);

        // points symmetric about the query
        let l = [-1.0f64, 0.0];
        let r = [1.0f64, 0.0];
        let u = [0.0f64, 1.0];
        let d = [0.0f64, -1.0];
        let m = matching_attention(&[(&l[..], 0), (&r[..], 1), (&u[..], 2), (&d[..], 3)], &[0.0, 0.0]).unwrap();
        assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn prototype_head_cases() {
        let s = supports_1d(&[&[-1.0, 1.0], &[5.0, 7.0]]);
        let p = prototype_head(&s, &[0.0]).unwrap();
        // prototypes 0 and 6: logits 0 and −36
        assert!((p[0] - 1.0 / (1.0 + (-36f64).exp())).abs() < 1e-15);

        let s = supports_1d(&[&[-1.0], &[1.0]]);
        assert_eq!(prototype_head(&s, &[0.0]).unwrap(), vec![0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let nested: Vec<Vec<Vec<f64>>> = (0..4)
                .map(|_| vec![(0..3).map(|_| rng.random_range(-2.0..2.0)).collect()])
                .collect();
            let s = ClassSupports::from_nested(&nested).unwrap();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c = competitive_attention(&s, &q, Sign::Negative).unwrap();
            assert_eq!(argmax(&prototype_head(&s, &q).unwrap()), argmax(&c.predicted));
        }
    }

    #[test]
    fn graph_heads_agree_with_pure_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k, d, p) = (4, 3, 5, 6);
        let sup = Tensor::from_f64(vec![n * k, d], &(0..n * k * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let qs = Tensor::from_f64(vec![p, d], &(0..p * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let cs = ClassSupports::from_tensor(&sup, k).unwrap();
        let flat: Vec<(&[f64], usize)> = (0..n * k).map(|r| (sup.row(r), r / k)).collect();
        for kind in [HeadKind::Competitive, HeadKind::Matching, HeadKind::Prototype] {
            for sign in [Sign::Negative, Sign::Literal] {
                if kind != HeadKind::Competitive && sign == Sign::Literal {
                    continue;
                }
                let mut g = Graph::<f64>::new();
                let sv = g.leaf(sup.clone());
                let qv = g.leaf(qs.clone());
                let probs = head_probs(&mut g, HeadSpec { kind, sign }, sv, qv, k).unwrap();
                assert_eq!(g.shape(probs), &[p, n]);
                for r in 0..p {
                    let q = qs.row(r);
                    let expect = match kind {
                        HeadKind::Competitive => competitive_attention(&cs, q, sign).unwrap().predicted,
                        HeadKind::Matching => matching_attention(&flat, q).unwrap(),
                        HeadKind::Prototype => prototype_head(&cs, q).unwrap(),
                    };
                    for (a, b) in g.value(probs).row(r).iter().zip(&expect) {
                        assert!((a - b).abs() < 1e-12, "{kind:?} {sign:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn non_winning_points_get_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, k, d) = (3, 4, 2);
        let sup = Tensor::from_f64(vec![n * k, d], &(0..n * k * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        let q = Tensor::from_f64(vec![1, d], &[0.1, -0.2]).unwrap();
        let mut g = Graph::<f64>::new();
        let sv = g.leaf(sup.clone());
        let qv = g.leaf(q.clone());
        let probs = head_probs(&mut g, HeadSpec::default(), sv, qv, k).unwrap();
        let loss = g.nll(probs, &[1]).unwrap();
        let grads = g.backward(loss, &[sv, qv]).unwrap();
        let gs = grads.get(sv).unwrap();
        let cs = ClassSupports::from_tensor(&sup, k).unwrap();
        let (winners, _) = select_winners(&cs, q.data()).unwrap();
        for i in 0..n {
            for j in 0..k {
                let row = gs.row(i * k + j);
                if j == winners[i] {
                    assert!(row.iter().any(|&v| v != 0.0));
                } else {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(grads.get(qv).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
