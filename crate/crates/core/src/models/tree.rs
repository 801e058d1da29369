//! Binary CART classifier with gini impurity.
//!
//! Candidate thresholds are midpoints between consecutive distinct values;
//! a row goes left when `x[feature] <= threshold`. A node is split only if
//!
//! ```text
//! n_t / n * (gini_t - n_l / n_t * gini_l - n_r / n_t * gini_r) >= min_impurity_decrease
//! ```
//!
//! Among equally good splits the lowest feature index wins, then the lowest
//! threshold. Leaves with tied counts predict the negative class.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    #[serde(default)]
    pub min_impurity_decrease: f64,
    #[serde(default = "two")]
    pub min_samples_split: usize,
    #[serde(default = "one")]
    pub min_samples_leaf: usize,
    /// Only permutes the order features are visited in; ties are broken by
    /// feature id, so the fitted tree does not depend on it.
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 5,
            min_impurity_decrease: 0.0,
            min_samples_split: 2,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NodeKind {
    Leaf { prediction: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub samples: usize,
    /// `[negative, positive]`
    pub counts: [usize; 2],
    pub gini: f64,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature_ids: Vec<String>,
    pub feature_labels: Vec<String>,
    pub params: TreeParams,
    pub nodes: Vec<TreeNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: usize,
    pub feature: usize,
    pub feature_id: String,
    pub threshold: f64,
    pub value: f64,
    pub went_left: bool,
    /// Class counts and impurity of the training rows reaching this node.
    pub counts: [usize; 2],
    pub gini: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub steps: Vec<PathStep>,
    pub leaf: usize,
    pub prediction: usize,
}

pub fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn majority(counts: [usize; 2]) -> usize {
    (counts[1] > counts[0]) as usize
}

struct Best {
    weighted_child: f64,
    feature: usize,
    threshold: f64,
}

struct Builder<'a> {
    cols: &'a [&'a [f64]],
    y: &'a [usize],
    params: &'a TreeParams,
    order: Vec<usize>,
    /// Position of each column's id in sorted id order; equal-gain splits go
    /// to the lowest rank, then the lowest threshold.
    rank: Vec<usize>,
    nodes: Vec<TreeNode>,
    n_total: f64,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut c = [0, 0];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn best_split(&self, idx: &[usize], counts: [usize; 2]) -> Option<Best> {
        let n = idx.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut best: Option<Best> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for &f in &self.order {
            let col = self.cols[f];
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (col[i], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0usize, 0usize];
            for k in 0..n - 1 {
                left[pairs[k].1] += 1;
                if pairs[k].0 == pairs[k + 1].0 {
                    continue;
                }
                let nl = k + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let right = [counts[0] - left[0], counts[1] - left[1]];
                let w = (nl as f64 * gini(left) + nr as f64 * gini(right)) / n as f64;
                let mut thr = pairs[k].0 / 2.0 + pairs[k + 1].0 / 2.0;
                if thr >= pairs[k + 1].0 {
                    thr = pairs[k].0;
                }
                let better = match &best {
                    None => true,
                    Some(b) => {
                        w < b.weighted_child
                            || (w == b.weighted_child && (self.rank[f], thr) < (self.rank[b.feature], b.threshold))
                    }
                };
                if better {
                    best = Some(Best { weighted_child: w, feature: f, threshold: thr });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let g = gini(counts);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            id,
            depth,
            samples: idx.len(),
            counts,
            gini: g,
            kind: NodeKind::Leaf { prediction: majority(counts) },
        });
        if depth >= self.params.max_depth || idx.len() < self.params.min_samples_split.max(2) || g == 0.0 {
            return id;
        }
        let Some(best) = self.best_split(&idx, counts) else {
            return id;
        };
        let decrease = idx.len() as f64 / self.n_total * (g - best.weighted_child);
        if decrease + 1e-12 < self.params.min_impurity_decrease || !(best.weighted_child < g) {
            return id;
        }
        let col = self.cols[best.feature];
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| col[i] <= best.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id].kind = NodeKind::Split { feature: best.feature, threshold: best.threshold, left, right };
        id
    }
}

impl DecisionTree {
    /// `rows` are feature vectors aligned with `feature_ids`; `y` is 0/1.
    pub fn fit(
        rows: &[Vec<f64>],
        y: &[usize],
        feature_ids: &[String],
        feature_labels: &[String],
        params: &TreeParams,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("cannot fit a tree on zero rows"));
        }
        if rows.len() != y.len() {
            return Err(Error::Internal(format!("{} rows but {} labels", rows.len(), y.len())));
        }
        let width = feature_ids.len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Internal("row width does not match the feature list".into()));
        }
        let cols: Vec<Vec<f64>> = (0..width).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        let views: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        Self::fit_columns(&views, y, feature_ids, feature_labels, params)
    }

    /// Column-major variant of [`DecisionTree::fit`].
    pub fn fit_columns(
        cols: &[&[f64]],
        y: &[usize],
        feature_ids: &[String],
        feature_labels: &[String],
        params: &TreeParams,
    ) -> Result<Self> {
        let width = feature_ids.len();
        if cols.len() != width || feature_labels.len() != width {
            return Err(Error::Internal("column count does not match the feature list".into()));
        }
        if cols.iter().any(|c| c.len() != y.len()) {
            return Err(Error::Internal("column length does not match the label count".into()));
        }
        if y.is_empty() {
            return Err(Error::validation("cannot fit a tree on zero rows"));
        }
        if cols.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::validation("feature values must be finite"));
        }
        let mut order: Vec<usize> = (0..width).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
        let mut by_id: Vec<usize> = (0..width).collect();
        by_id.sort_by(|&a, &b| feature_ids[a].cmp(&feature_ids[b]).then(a.cmp(&b)));
        let mut rank = vec![0; width];
        for (r, &f) in by_id.iter().enumerate() {
            rank[f] = r;
        }
        let mut b = Builder {
            cols,
            y,
            params,
            order,
            rank,
            nodes: Vec::new(),
            n_total: y.len() as f64,
        };
        b.grow((0..y.len()).collect(), 0);
        Ok(DecisionTree {
            feature_ids: feature_ids.to_vec(),
            feature_labels: feature_labels.to_vec(),
            params: params.clone(),
            nodes: b.nodes,
        })
    }

    /// Fits on a feature matrix; both classes must be present.
    pub fn train(matrix: &FeatureMatrix, y: &[usize], params: &TreeParams) -> Result<Self> {
        if !(y.contains(&0) && y.contains(&1)) {
            return Err(Error::validation("training labels hold a single class"));
        }
        if y.len() != matrix.height() {
            return Err(Error::Input(format!("{} labels for {} rows", y.len(), matrix.height())));
        }
        let ids: Vec<String> = matrix.descriptors.iter().map(|d| d.id.clone()).collect();
        let labels: Vec<String> = matrix.descriptors.iter().map(|d| d.label.clone()).collect();
        DecisionTree::fit(&matrix.rows(), y, &ids, &labels, params)
    }

    /// Prediction and path with a width check.
    pub fn predict_checked(&self, row: &[f64]) -> Result<DecisionPath> {
        if row.len() != self.feature_ids.len() {
            return Err(Error::Input(format!(
                "row has {} values, tree expects {}",
                row.len(),
                self.feature_ids.len()
            )));
        }
        Ok(self.decision_path(row))
    }

    /// Reorders a matrix's columns to this tree's feature ids.
    pub fn align(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
        matrix.select_columns(&self.feature_ids)
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        self.decision_path(row).prediction
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Vec<usize> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Positive-class fraction at the reached leaf.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        let n = &self.nodes[self.decision_path(row).leaf];
        n.counts[1] as f64 / n.samples.max(1) as f64
    }

    pub fn decision_path(&self, row: &[f64]) -> DecisionPath {
        let mut steps = Vec::new();
        let mut at = 0;
        loop {
            match &self.nodes[at].kind {
                NodeKind::Leaf { prediction } => {
                    return DecisionPath { steps, leaf: at, prediction: *prediction };
                }
                NodeKind::Split { feature, threshold, left, right } => {
                    let value = row[*feature];
                    let went_left = value <= *threshold;
                    steps.push(PathStep {
                        node: at,
                        feature: *feature,
                        feature_id: self.feature_ids[*feature].clone(),
                        threshold: *threshold,
                        value,
                        went_left,
                        counts: self.nodes[at].counts,
                        gini: self.nodes[at].gini,
                    });
                    at = if went_left { *left } else { *right };
                }
            }
        }
    }

    /// Re-walks a recorded path using only its own comparisons; returns the
    /// prediction it implies, or `None` if the path is inconsistent with the tree.
    pub fn replay(&self, path: &DecisionPath) -> Option<usize> {
        let mut at = 0;
        for s in &path.steps {
            if s.node != at {
                return None;
            }
            let NodeKind::Split { feature, threshold, left, right } = &self.nodes[at].kind else {
                return None;
            };
            if *feature != s.feature || *threshold != s.threshold || (s.value <= *threshold) != s.went_left {
                return None;
            }
            at = if s.went_left { *left } else { *right };
        }
        match self.nodes[at].kind {
            NodeKind::Leaf { prediction } if at == path.leaf => Some(prediction),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf { .. })).count()
    }

    /// Indices of features used in at least one split, ascending.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Split { feature, .. } => Some(feature),
                _ => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Total weighted gini decrease per feature, normalized to sum to 1.
    pub fn importances(&self) -> Vec<f64> {
        let total = self.nodes[0].samples as f64;
        let mut imp = vec![0.0; self.feature_ids.len()];
        for n in &self.nodes {
            if let NodeKind::Split { feature, left, right, .. } = n.kind {
                let (l, r) = (&self.nodes[left], &self.nodes[right]);
                imp[feature] += (n.samples as f64 * n.gini - l.samples as f64 * l.gini - r.samples as f64 * r.gini) / total;
            }
        }
        let s: f64 = imp.iter().sum();
        if s > 0.0 {
            imp.iter_mut().for_each(|v| *v /= s);
        }
        imp
    }

    /// Graphviz rendering with one box per node.
    pub fn to_dot(&self, class_names: [&str; 2]) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph tree {\n  node [shape=box, style=\"rounded\", fontname=\"helvetica\"];\n");
        for n in &self.nodes {
            let stats = format!(
                "gini = {:.3}\\nsamples = {}\\nvalue = [{}, {}]",
                n.gini, n.samples, n.counts[0], n.counts[1]
            );
            let label = match &n.kind {
                NodeKind::Split { feature, threshold, .. } => {
                    format!("{} <= {:.4}\\n{stats}", esc(&self.feature_labels[*feature]), threshold)
                }
                NodeKind::Leaf { prediction } => format!("{stats}\\nclass = {}", class_names[*prediction]),
            };
            let _ = writeln!(out, "  {} [label=\"{label}\"];", n.id);
        }
        for n in &self.nodes {
            if let NodeKind::Split { left, right, .. } = n.kind {
                let _ = writeln!(out, "  {} -> {left} [label=\"yes\"];", n.id);
                let _ = writeln!(out, "  {} -> {right} [label=\"no\"];", n.id);
            }
        }
        out.push_str("}\n");
        out
    }
}
