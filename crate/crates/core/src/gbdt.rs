//! Multiclass gradient boosting with exact-greedy regression trees.
//!
//! Each round fits one tree per class to the softmax residuals
//! `onehot - softmax(score)`; leaves hold the mean residual and scores move by
//! `shrinkage` times the tree output.

use rayon::prelude::*;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 3,
            shrinkage: 0.1,
            min_samples_leaf: 5,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrinkage.is_finite() && self.shrinkage > 0.0) {
            return Err(Error::config("gbdt_shrinkage", "must be positive"));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::config("gbdt_min_samples_leaf", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Binary tree stored flat; node 0 is the root.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf(v) => return v,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GbdtModel {
    n_classes: usize,
    n_features: usize,
    shrinkage: f64,
    /// `rounds[r][k]` is the tree for class `k` in round `r`.
    rounds: Vec<Vec<RegressionTree>>,
}

pub struct Prediction {
    pub classes: Vec<usize>,
    /// Row-major `[M, K]`.
    pub probabilities: Vec<f64>,
}

fn softmax_row(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    x: &'a [f64],
    d: usize,
    /// Sample indices sorted by each feature (ties by index).
    sorted: &'a [Vec<u32>],
    params: &'a GbdtParams,
}

impl Builder<'_> {
    fn value(&self, i: usize, f: usize) -> f64 {
        self.x[i * self.d + f]
    }

    fn build(&self, residual: &[f64], samples: Vec<usize>) -> RegressionTree {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut member = vec![false; residual.len()];
        self.grow(&mut tree, residual, samples, 0, &mut member);
        tree
    }

    fn grow(
        &self,
        tree: &mut RegressionTree,
        residual: &[f64],
        samples: Vec<usize>,
        depth: usize,
        member: &mut [bool],
    ) -> usize {
        let id = tree.nodes.len();
        let n = samples.len();
        let total: f64 = samples.iter().map(|&i| residual[i]).sum();
        tree.nodes.push(TreeNode::Leaf(total / n as f64));
        let min_leaf = self.params.min_samples_leaf;
        let mean = total / n as f64;
        let spread = samples.iter().map(|&i| (residual[i] - mean).abs()).fold(0.0, f64::max);
        // Impure nodes split even at zero gain, so symmetric patterns such
        // as XOR can be separated one level down.
        if depth >= self.params.max_depth || n < 2 * min_leaf || spread <= 1e-12 {
            return id;
        }
        for &i in &samples {
            member[i] = true;
        }
        let parent = total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut ordered = Vec::with_capacity(n);
        for f in 0..self.d {
            ordered.clear();
            ordered.extend(self.sorted[f].iter().map(|&i| i as usize).filter(|&i| member[i]));
            let mut left_sum = 0.0;
            for pos in 0..n - 1 {
                left_sum += residual[ordered[pos]];
                let nl = pos + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (a, b) = (self.value(ordered[pos], f), self.value(ordered[pos + 1], f));
                if a >= b {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / nr as f64 - parent;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mid = 0.5 * (a + b);
                    let threshold = if mid >= b { a } else { mid };
                    best = Some((gain, f, threshold));
                }
            }
        }
        for &i in &samples {
            member[i] = false;
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&i| self.value(i, feature) <= threshold);
        let left = self.grow(tree, residual, l, depth + 1, member);
        let right = self.grow(tree, residual, r, depth + 1, member);
        tree.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

fn mean_nll(probs: &[f64], labels: &[usize], k: usize) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[i * k + y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64
}

impl GbdtModel {
    pub fn fit(
        features: &Tensor<f64>,
        labels: &[usize],
        n_classes: usize,
        params: &GbdtParams,
    ) -> Result<Self> {
        Self::fit_traced(features, labels, n_classes, params).map(|(m, _)| m)
    }

    /// Fits and also returns the mean training negative log-likelihood before
    /// the first round and after every round.
    pub fn fit_traced(
        features: &Tensor<f64>,
        labels: &[usize],
        n_classes: usize,
        params: &GbdtParams,
    ) -> Result<(Self, Vec<f64>)> {
        params.validate()?;
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(Error::dim(format!("features must be [N, D], got {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if n != labels.len() {
            return Err(Error::dim(format!("{n} rows but {} labels", labels.len())));
        }
        if n < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::InvalidArgument(
                "labels contain a single class; need at least 2 distinct labels".into(),
            ));
        }
        let x = features.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let sorted: Vec<Vec<u32>> = (0..d)
            .map(|f| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| {
                    x[a as usize * d + f]
                        .total_cmp(&x[b as usize * d + f])
                        .then(a.cmp(&b))
                });
                idx
            })
            .collect();
        let builder = Builder {
            x,
            d,
            sorted: &sorted,
            params,
        };
        let k = n_classes;
        let mut scores = vec![0.0; n * k];
        let mut probs = vec![0.0; n * k];
        for i in 0..n {
            softmax_row(&scores[i * k..(i + 1) * k], &mut probs[i * k..(i + 1) * k]);
        }
        let mut trace = vec![mean_nll(&probs, labels, k)];
        let mut rounds = Vec::with_capacity(params.rounds);
        for _ in 0..params.rounds {
            let trees: Vec<RegressionTree> = (0..k)
                .into_par_iter()
                .map(|c| {
                    let residual: Vec<f64> = (0..n)
                        .map(|i| f64::from(u8::from(labels[i] == c)) - probs[i * k + c])
                        .collect();
                    builder.build(&residual, (0..n).collect())
                })
                .collect();
            for i in 0..n {
                let row = &x[i * d..(i + 1) * d];
                for (c, tree) in trees.iter().enumerate() {
                    scores[i * k + c] += params.shrinkage * tree.predict_row(row);
                }
                softmax_row(&scores[i * k..(i + 1) * k], &mut probs[i * k..(i + 1) * k]);
            }
            trace.push(mean_nll(&probs, labels, k));
            rounds.push(trees);
        }
        Ok((
            Self {
                n_classes,
                n_features: d,
                shrinkage: params.shrinkage,
                rounds,
            },
            trace,
        ))
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn rounds(&self) -> &[Vec<RegressionTree>] {
        &self.rounds
    }

    pub fn predict(&self, features: &Tensor<f64>) -> Result<Prediction> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.n_features {
            return Err(Error::dim(format!(
                "model was fit on {} features, got {shape:?}",
                self.n_features
            )));
        }
        let (m, k) = (shape[0], self.n_classes);
        let mut scores = vec![0.0; k];
        let mut probabilities = vec![0.0; m * k];
        let mut classes = Vec::with_capacity(m);
        for (i, row) in features.data().chunks(self.n_features).enumerate() {
            scores.iter_mut().for_each(|s| *s = 0.0);
            for round in &self.rounds {
                for (c, tree) in round.iter().enumerate() {
                    scores[c] += self.shrinkage * tree.predict_row(row);
                }
            }
            let p = &mut probabilities[i * k..(i + 1) * k];
            softmax_row(&scores, p);
            classes.push(argmax(p));
        }
        Ok(Prediction {
            classes,
            probabilities,
        })
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.n_classes);
        w.usize(self.n_features);
        w.f64(self.shrinkage);
        w.usize(self.rounds.len());
        for round in &self.rounds {
            for tree in round {
                w.usize(tree.nodes.len());
                for node in &tree.nodes {
                    match *node {
                        TreeNode::Leaf(v) => {
                            w.u8(0);
                            w.f64(v);
                        }
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            w.u8(1);
                            w.usize(feature);
                            w.f64(threshold);
                            w.usize(left);
                            w.usize(right);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let n_classes = r.usize()?;
        let n_features = r.usize()?;
        let shrinkage = r.f64()?;
        let n_rounds = r.count(n_classes)?;
        let bad = |msg: &str| Error::Format(format!("tree ensemble: {msg}"));
        let mut rounds = Vec::with_capacity(n_rounds);
        for _ in 0..n_rounds {
            let mut trees = Vec::with_capacity(n_classes);
            for _ in 0..n_classes {
                let count = r.count(9)?;
                let mut nodes = Vec::with_capacity(count);
                for _ in 0..count {
                    nodes.push(match r.u8()? {
                        0 => TreeNode::Leaf(r.f64()?),
                        1 => TreeNode::Split {
                            feature: r.usize()?,
                            threshold: r.f64()?,
                            left: r.usize()?,
                            right: r.usize()?,
                        },
                        t => return Err(bad(&format!("unknown node tag {t}"))),
                    });
                }
                if nodes.is_empty() {
                    return Err(bad("empty tree"));
                }
                for (i, node) in nodes.iter().enumerate() {
                    if let TreeNode::Split {
                        feature, left, right, ..
                    } = *node
                    {
                        if feature >= n_features || left <= i || right <= i || left >= count || right >= count {
                            return Err(bad("malformed split node"));
                        }
                    }
                }
                trees.push(RegressionTree { nodes });
            }
            rounds.push(trees);
        }
        Ok(Self {
            n_classes,
            n_features,
            shrinkage,
            rounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rounds: usize, depth: usize, min_leaf: usize) -> GbdtParams {
        GbdtParams {
            rounds,
            max_depth: depth,
            shrinkage: 0.1,
            min_samples_leaf: min_leaf,
        }
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let x = Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap();
        let m = GbdtModel::fit(&x, &[0, 1], 3, &params(0, 3, 1)).unwrap();
        let p = m.predict(&x).unwrap();
        assert_eq!(p.classes, vec![0, 0]);
        assert!(p.probabilities.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_class_and_bad_input_rejected() {
        let x = Tensor::from_f64(&[2, 1], &[0.0, 1.0]).unwrap();
        assert!(GbdtModel::fit(&x, &[1, 1], 2, &params(1, 1, 1)).is_err());
        let nan = Tensor::new(&[2, 1], vec![0.0, f64::NAN]).unwrap();
        assert!(GbdtModel::fit(&nan, &[0, 1], 2, &params(1, 1, 1)).is_err());
        let m = GbdtModel::fit(&x, &[0, 1], 2, &params(1, 1, 1)).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let x = Tensor::from_f64(&[6, 2], &[0., 1., 1., 0., 2., 2., 3., 1., 4., 0., 5., 3.]).unwrap();
        let m = GbdtModel::fit(&x, &[0, 0, 1, 1, 2, 2], 3, &params(5, 2, 1)).unwrap();
        let mut w = Writer::new();
        m.write(&mut w);
        let back = GbdtModel::read(&mut Reader::new(&w.buf)).unwrap();
        assert_eq!(back, m);
    }
}
