//! Regression forests: bagged variance-reduction trees with per-node
//! feature subsampling, averaged at prediction time.

use std::sync::OnceLock;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TrainingSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_tree: usize,
    /// Features drawn (without replacement) as split candidates at each node.
    pub n_split: usize,
    pub min_leaf: usize,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    /// Train each tree on a bootstrap resample. Disabling it is meant for tests.
    pub bootstrap: bool,
    /// Set by the caller per training problem; not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_tree: 200,
            n_split: 20,
            min_leaf: 5,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, feature_len: usize) -> Result<()> {
        if self.n_tree == 0 {
            return Err(Error::Config("n_tree must be at least 1".into()));
        }
        if self.n_split == 0 || self.n_split > feature_len {
            return Err(Error::Config(format!(
                "n_split must lie in 1..={feature_len}, got {}",
                self.n_split
            )));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_features: usize,
}

impl RegressionTree {
    /// A tree that predicts `value` for every input.
    pub fn constant(value: f64, n_features: usize) -> Self {
        RegressionTree {
            nodes: vec![Node::Leaf(value)],
            n_features,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf(v) => Some(*v),
            Node::Split { .. } => None,
        })
    }

    /// `(feature, threshold)` of the root split, if any.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => Some((feature, threshold)),
            Node::Leaf(_) => None,
        }
    }

    /// Tree output; `x` must have `n_features` entries.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<RegressionTree>,
}

impl ForestModel {
    pub fn from_trees(trees: Vec<RegressionTree>) -> Result<Self> {
        let n = trees
            .first()
            .ok_or_else(|| Error::Config("a forest needs at least one tree".into()))?
            .n_features;
        if trees.iter().any(|t| t.n_features != n) {
            return Err(Error::DimensionMismatch(
                "trees disagree on feature length".into(),
            ));
        }
        Ok(ForestModel { trees })
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.trees[0].n_features
    }

    /// Mean of the per-tree outputs.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.len()
            )));
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }
}

/// Column-major feature matrix with one label per row.
struct Dataset {
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    /// Rows sorted by each feature, built on first use. The top bit marks
    /// a value strictly above the previous entry's.
    order: Vec<OnceLock<Vec<u16>>>,
}

impl Dataset {
    fn from_samples(samples: &[TrainingSample]) -> Self {
        let d = samples[0].features.len();
        let n = samples.len();
        let mut x = vec![0.0; n * d];
        for (row, s) in samples.iter().enumerate() {
            assert_eq!(s.features.len(), d, "samples disagree on feature length");
            for (f, &v) in s.features.iter().enumerate() {
                x[f * n + row] = v;
            }
        }
        Dataset {
            x,
            y: samples.iter().map(|s| s.label).collect(),
            d,
            order: (0..d).map(|_| OnceLock::new()).collect(),
        }
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.x[feature * self.y.len() + row]
    }

    fn order(&self, feature: usize) -> &[u16] {
        self.order[feature].get_or_init(|| {
            let mut rows: Vec<u16> = (0..self.len() as u16).collect();
            rows.sort_unstable_by(|&a, &b| {
                self.value(a as usize, feature)
                    .total_cmp(&self.value(b as usize, feature))
            });
            let mut prev = f64::NEG_INFINITY;
            for r in &mut rows {
                let v = self.value(*r as usize, feature);
                if v > prev {
                    *r |= RISE;
                }
                prev = v;
            }
            rows
        })
    }
}

const RISE: u16 = 1 << 15;

struct Split {
    feature: usize,
    threshold: f64,
    sse: f64,
}

/// Best split search over one node's rows. Splits are ranked by
/// `sum_l²/n_l + sum_r²/n_r`, which is `total_sq - sse`.
struct Scan<'a> {
    n: usize,
    min_leaf: usize,
    total: f64,
    /// `inv[k] = 1/k`.
    inv: &'a [f64],
    best: Option<(f64, usize, f64)>,
}

impl Scan<'_> {
    /// Walks one feature in ascending value order. Entries are
    /// `(label, multiplicity, rises, key)` where `rises` marks a value above
    /// the previous entry's; multiplicity 0 entries only carry `rises`.
    /// Returns the keys on either side of an improving split.
    #[inline]
    fn column(
        &mut self,
        entries: impl Iterator<Item = (f64, u32, bool, u32)>,
    ) -> Option<(f64, u32, u32)> {
        let (n, min_leaf) = (self.n, self.min_leaf);
        let (mut sum_l, mut nl) = (0.0, 0usize);
        let mut rose = false;
        let mut last = 0u32;
        let mut best = self.best.map_or(f64::NEG_INFINITY, |b| b.0);
        let mut found = None;
        for (y, c, rises, key) in entries {
            rose |= rises;
            let nr = n - nl;
            let valid = (c > 0) & (nl >= min_leaf) & (nr >= min_leaf) & rose;
            let sum_r = self.total - sum_l;
            let score = sum_l * sum_l * self.inv[nl] + sum_r * sum_r * self.inv[nr];
            if valid & (score > best) {
                best = score;
                found = Some((score, last, key));
            }
            sum_l += c as f64 * y;
            nl += c as usize;
            if c > 0 {
                last = key;
                rose = false;
            }
        }
        found
    }

    fn record(&mut self, score: f64, feature: usize, below: f64, above: f64) {
        let mut threshold = 0.5 * (below + above);
        if threshold >= above {
            threshold = below;
        }
        self.best = Some((score, feature, threshold));
    }
}

struct Grower<'a> {
    data: &'a Dataset,
    cfg: &'a ForestConfig,
    n_split: usize,
    nodes: Vec<Node>,
    /// `(value, label)` of a small node, sorted by value.
    scratch: Vec<(f64, f64)>,
    counts: Vec<u32>,
    inv: Vec<f64>,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&r| self.data.y[r]).sum::<f64>() / rows.len() as f64
    }

    fn best_split(
        &mut self,
        rows: &[usize],
        parent_sse: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<Split> {
        let data = self.data;
        let total_sq: f64 = rows.iter().map(|&r| data.y[r] * data.y[r]).sum();
        let mut scan = Scan {
            n: rows.len(),
            min_leaf: self.cfg.min_leaf,
            total: rows.iter().map(|&r| data.y[r]).sum(),
            inv: &self.inv,
            best: None,
        };
        for &r in rows {
            self.counts[r] += 1;
        }
        // walking the presorted rows beats sorting once the node is large
        let presorted = rows.len() * 8 >= data.len() && data.len() < RISE as usize;
        for feature in index::sample(rng, data.d, self.n_split) {
            if presorted {
                let counts = &self.counts;
                let entries = data.order(feature).iter().map(|&e| {
                    let r = (e & !RISE) as usize;
                    (data.y[r], counts[r], e & RISE != 0, r as u32)
                });
                if let Some((score, below, above)) = scan.column(entries) {
                    let value = |r: u32| data.value(r as usize, feature);
                    scan.record(score, feature, value(below), value(above));
                }
            } else {
                self.scratch.clear();
                self.scratch
                    .extend(rows.iter().map(|&r| (data.value(r, feature), data.y[r])));
                self.scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
                let sorted = &self.scratch;
                let entries = sorted
                    .iter()
                    .enumerate()
                    .map(|(i, &(v, y))| (y, 1, i == 0 || v > sorted[i - 1].0, i as u32));
                if let Some((score, below, above)) = scan.column(entries) {
                    scan.record(
                        score,
                        feature,
                        sorted[below as usize].0,
                        sorted[above as usize].0,
                    );
                }
            }
        }
        let best = scan.best;
        for &r in rows {
            self.counts[r] = 0;
        }
        let tolerance = 1e-12 * parent_sse.max(1.0);
        best.map(|(score, feature, threshold)| Split {
            feature,
            threshold,
            sse: total_sq - score,
        })
        .filter(|b| b.sse < parent_sse - tolerance)
    }

    /// Grows the subtree over `rows` and returns its node index.
    fn grow(&mut self, rows: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(rows)));

        let first = self.data.y[rows[0]];
        let constant = rows.iter().all(|&r| self.data.y[r] == first);
        if constant
            || rows.len() < 2 * self.cfg.min_leaf
            || self.cfg.max_depth.is_some_and(|m| depth >= m)
        {
            return id;
        }
        let mean = self.leaf_value(rows);
        let parent_sse: f64 = rows.iter().map(|&r| (self.data.y[r] - mean).powi(2)).sum();
        let Some(split) = self.best_split(rows, parent_sse, rng) else {
            return id;
        };

        // stable partition keeps bootstrap order deterministic
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.data.value(r, split.feature) <= split.threshold);
        let nl = left.len();
        let l = self.grow(&mut left, depth + 1, rng);
        let r = self.grow(&mut right, depth + 1, rng);
        rows[..nl].copy_from_slice(&left);
        rows[nl..].copy_from_slice(&right);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }
}

fn grow_tree(
    data: &Dataset,
    rows: &mut [usize],
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> RegressionTree {
    let mut grower = Grower {
        data,
        cfg,
        n_split: cfg.n_split.clamp(1, data.d.max(1)),
        nodes: Vec::new(),
        scratch: Vec::with_capacity(rows.len()),
        counts: vec![0; data.len()],
        inv: (0..=rows.len())
            .map(|k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
            .collect(),
    };
    grower.grow(rows, 0, rng);
    RegressionTree {
        nodes: grower.nodes,
        n_features: data.d,
    }
}

/// Grows one tree on exactly the given samples (no resampling).
///
/// Panics if `samples` is empty.
pub fn train_tree(
    samples: &[TrainingSample],
    cfg: &ForestConfig,
    rng: &mut ChaCha8Rng,
) -> RegressionTree {
    assert!(!samples.is_empty(), "cannot train on zero samples");
    let data = Dataset::from_samples(samples);
    let mut rows: Vec<usize> = (0..samples.len()).collect();
    grow_tree(&data, &mut rows, cfg, rng)
}

/// RNG for tree `tree` of a forest seeded with `seed`. Each tree owns a
/// ChaCha stream, so adding trees leaves earlier ones untouched.
pub fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// Trains `cfg.n_tree` trees, each on its own bootstrap resample.
///
/// Panics if `samples` is empty.
pub fn train_forest(samples: &[TrainingSample], cfg: &ForestConfig) -> ForestModel {
    assert!(!samples.is_empty(), "cannot train on zero samples");
    let data = Dataset::from_samples(samples);
    let n = samples.len();
    let trees = (0..cfg.n_tree.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(cfg.seed, t);
            let mut rows: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(&data, &mut rows, cfg, &mut rng)
        })
        .collect();
    ForestModel { trees }
}
