//! Isolation Forest.
//!
//! Each tree isolates points of a random subsample by recursive axis-aligned
//! splits at uniform random positions. Anomalies isolate near the root, so a
//! short average path length means a high score
//! `s = 2^(-E(h) / c(psi))`, where `c(n)` is the expected unsuccessful-search
//! depth of a binary search tree on `n` keys.
//!
//! Trees are built in parallel; tree `k` draws from
//! [`seed::derive`]`(forest_seed, TREE_STREAM, k)`.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const EULER_GAMMA: f64 = 0.5772156649;
pub const DEFAULT_TREES: usize = 100;
pub const DEFAULT_SUBSAMPLE: usize = 256;
const TREE_STREAM: u64 = 0x7EE5;
const FORMAT_HEADER: &str = "liftwatch-iforest 1";

/// Average path length of an unsuccessful BST search over `n` points.
pub fn c(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n = n as f64;
    2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
}

/// `2^(-E(h) / c(psi))`.
pub fn anomaly_score(mean_path: f64, subsample: usize) -> f64 {
    (-mean_path / c(subsample)).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub tree_count: usize,
    pub subsample_size: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            tree_count: DEFAULT_TREES,
            subsample_size: DEFAULT_SUBSAMPLE,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(seed: u64) -> Self {
        ForestParams {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::config("tree_count", "must be at least 1"));
        }
        if self.subsample_size < 2 {
            return Err(Error::config("subsample_size", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ITreeNode {
    Internal {
        split_feature: usize,
        split_value: f64,
        left: Box<ITreeNode>,
        right: Box<ITreeNode>,
    },
    External {
        size: usize,
    },
}

impl ITreeNode {
    /// Edges to the terminating leaf plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = self;
        let mut depth = 0usize;
        loop {
            match node {
                ITreeNode::Internal {
                    split_feature,
                    split_value,
                    left,
                    right,
                } => {
                    node = if x[*split_feature] < *split_value { left } else { right };
                    depth += 1;
                }
                ITreeNode::External { size } => return depth as f64 + c(*size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            ITreeNode::Internal { left, right, .. } => 1 + left.depth().max(right.depth()),
            ITreeNode::External { .. } => 0,
        }
    }

    pub fn leaf_sizes(&self) -> Vec<usize> {
        match self {
            ITreeNode::Internal { left, right, .. } => {
                let mut v = left.leaf_sizes();
                v.extend(right.leaf_sizes());
                v
            }
            ITreeNode::External { size } => vec![*size],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<ITreeNode>,
    dims: usize,
    /// Effective subsample size (clamped to the training set size).
    subsample: usize,
    height_limit: usize,
    seed: u64,
}

fn check_data(data: &[Vec<f64>]) -> Result<usize> {
    if data.len() < 2 {
        return Err(Error::data(format!("need at least 2 points, got {}", data.len())));
    }
    let dims = data[0].len();
    if dims == 0 {
        return Err(Error::data("points have no features"));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != dims {
            return Err(Error::data(format!(
                "point {i} has {} features, expected {dims}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("point {i} has a non-finite feature")));
        }
    }
    Ok(dims)
}

fn build_tree(data: &[Vec<f64>], idx: &mut [usize], depth: usize, limit: usize, rng: &mut impl Rng) -> ITreeNode {
    if depth >= limit || idx.len() <= 1 {
        return ITreeNode::External { size: idx.len() };
    }
    let dims = data[idx[0]].len();
    let ranges: Vec<(usize, f64, f64)> = (0..dims)
        .filter_map(|f| {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(data[i][f]), hi.max(data[i][f]))
            });
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return ITreeNode::External { size: idx.len() };
    }
    let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let split = loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            break v;
        }
    };
    let mut cut = 0;
    for k in 0..idx.len() {
        if data[idx[k]][feature] < split {
            idx.swap(k, cut);
            cut += 1;
        }
    }
    let (l, r) = idx.split_at_mut(cut);
    ITreeNode::Internal {
        split_feature: feature,
        split_value: split,
        left: Box::new(build_tree(data, l, depth + 1, limit, rng)),
        right: Box::new(build_tree(data, r, depth + 1, limit, rng)),
    }
}

/// Per-point mean path length and score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub mean_path: Vec<f64>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flags: Vec<bool>,
}

impl IsolationForest {
    pub fn fit(data: &[Vec<f64>], params: &ForestParams) -> Result<Self> {
        params.validate()?;
        let dims = check_data(data)?;
        let subsample = params.subsample_size.min(data.len());
        let height_limit = (subsample as f64).log2().ceil() as usize;
        let trees = (0..params.tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(params.seed, TREE_STREAM, t as u64);
                let mut idx = index::sample(&mut rng, data.len(), subsample).into_vec();
                build_tree(data, &mut idx, 0, height_limit, &mut rng)
            })
            .collect();
        Ok(IsolationForest {
            trees,
            dims,
            subsample,
            height_limit,
            seed: params.seed,
        })
    }

    pub fn trees(&self) -> &[ITreeNode] {
        &self.trees
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Returns `(E(h), s)` for one point.
    pub fn score(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dims {
            return Err(Error::data(format!(
                "point has {} features, forest expects {}",
                x.len(),
                self.dims
            )));
        }
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        Ok((mean, anomaly_score(mean, self.subsample)))
    }

    pub fn score_all(&self, data: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        data.par_iter().map(|x| self.score(x)).collect()
    }

    /// Scores `data` and flags the top `contamination` fraction.
    pub fn report(&self, data: &[Vec<f64>], contamination: f64) -> Result<ScoreReport> {
        let scored = self.score_all(data)?;
        let (mean_path, scores): (Vec<f64>, Vec<f64>) = scored.into_iter().unzip();
        let (threshold, flags) = threshold_by_contamination(&scores, contamination)?;
        Ok(ScoreReport {
            mean_path,
            scores,
            threshold,
            flags,
        })
    }

    /// Versioned flat text: a header, the forest parameters, then each tree
    /// in preorder with one node per line (`I <feature> <split bits hex>` or
    /// `E <size>`). Split values are stored as raw IEEE-754 bits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        writeln!(
            out,
            "dims {} subsample {} height_limit {} trees {} seed {}",
            self.dims,
            self.subsample,
            self.height_limit,
            self.trees.len(),
            self.seed
        )
        .unwrap();
        for tree in &self.trees {
            out.push_str("tree\n");
            let mut stack = vec![tree];
            while let Some(node) = stack.pop() {
                match node {
                    ITreeNode::Internal {
                        split_feature,
                        split_value,
                        left,
                        right,
                    } => {
                        writeln!(out, "I {split_feature} {:016x}", split_value.to_bits()).unwrap();
                        stack.push(right);
                        stack.push(left);
                    }
                    ITreeNode::External { size } => writeln!(out, "E {size}").unwrap(),
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let bad = |line: usize, what: &str| Error::data(format!("forest file line {line}: {what}"));
        match lines.next() {
            Some((_, FORMAT_HEADER)) => {}
            _ => return Err(bad(1, "unsupported header")),
        }
        let (n, meta) = lines.next().ok_or_else(|| bad(2, "missing parameters"))?;
        let fields: Vec<&str> = meta.split_whitespace().collect();
        let get = |name: &str| -> Result<u64> {
            fields
                .iter()
                .position(|f| *f == name)
                .and_then(|p| fields.get(p + 1))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(n, &format!("missing {name}")))
        };
        let dims = get("dims")? as usize;
        let subsample = get("subsample")? as usize;
        let height_limit = get("height_limit")? as usize;
        let tree_count = get("trees")? as usize;
        let seed = get("seed")?;

        fn parse_node<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, dims: usize) -> Result<ITreeNode> {
            let (n, line) = lines.next().ok_or_else(|| Error::data("forest file truncated"))?;
            let bad = |what: &str| Error::data(format!("forest file line {n}: {what}"));
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("E") => {
                    let size = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad leaf"))?;
                    Ok(ITreeNode::External { size })
                }
                Some("I") => {
                    let split_feature: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad feature"))?;
                    if split_feature >= dims {
                        return Err(bad("feature out of range"));
                    }
                    let bits = parts
                        .next()
                        .and_then(|s| u64::from_str_radix(s, 16).ok())
                        .ok_or_else(|| bad("bad split value"))?;
                    let left = Box::new(parse_node(lines, dims)?);
                    let right = Box::new(parse_node(lines, dims)?);
                    Ok(ITreeNode::Internal {
                        split_feature,
                        split_value: f64::from_bits(bits),
                        left,
                        right,
                    })
                }
                _ => Err(bad("expected node record")),
            }
        }

        let mut trees = Vec::with_capacity(tree_count);
        for _ in 0..tree_count {
            match lines.next() {
                Some((_, "tree")) => {}
                Some((n, _)) => return Err(bad(n, "expected `tree`")),
                None => return Err(Error::data("forest file truncated")),
            }
            trees.push(parse_node(&mut lines, dims)?);
        }
        if let Some((n, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(n, "trailing data"));
        }
        if trees.is_empty() || subsample < 2 {
            return Err(Error::data("forest file has invalid parameters"));
        }
        Ok(IsolationForest {
            trees,
            dims,
            subsample,
            height_limit,
            seed,
        })
    }
}

/// Flags exactly `ceil(contamination * n)` points: highest scores first,
/// ties broken toward the lower input index. The returned threshold is the
/// largest unflagged score, so with distinct scores it equals the
/// nearest-rank `(1 - contamination)` quantile and every flagged score is
/// strictly above it. When every point is flagged the threshold is `-inf`.
pub fn threshold_by_contamination(scores: &[f64], contamination: f64) -> Result<(f64, Vec<bool>)> {
    if !(contamination > 0.0 && contamination < 1.0) {
        return Err(Error::config(
            "contamination",
            format!("{contamination} is outside (0, 1)"),
        ));
    }
    if scores.is_empty() {
        return Err(Error::data("no scores to threshold"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("NaN score"));
    }
    let n = scores.len();
    let k = flag_count(n, contamination);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut flags = vec![false; n];
    for &i in &order[..k] {
        flags[i] = true;
    }
    let threshold = order.get(k).map_or(f64::NEG_INFINITY, |&i| scores[i]);
    Ok((threshold, flags))
}

/// `ceil(contamination * n)`, with products within 1e-9 of an integer
/// treated as that integer so `0.2 * 1000` is 200, not 201.
pub fn flag_count(n: usize, contamination: f64) -> usize {
    let raw = contamination * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}
