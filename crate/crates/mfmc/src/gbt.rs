//! Second-order (Newton) gradient-boosted decision trees with binary
//! logistic loss — the meta classifier of the stack.
//!
//! Training is exact greedy: every split scans all features in ascending
//! index order with candidate thresholds at midpoints of consecutive distinct
//! sorted values, and gain ties break toward the lower feature index and
//! lower threshold. There is no row or column subsampling, so fits are fully
//! deterministic. Node `cover` is the training row count, recorded for the
//! cover-weighted conditional expectations the explainer uses.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{logit, sigmoid};

/// One node of a fitted tree. Internal nodes route `x[feature] <= threshold`
/// to the left child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
        cover: usize,
    },
    Leaf {
        value: f64,
        cover: usize,
    },
}

impl TreeNode {
    pub fn cover(&self) -> usize {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }

    /// Margin contribution for `q`: the leaf value along its root-to-leaf path.
    pub fn value_for(&self, q: ArrayView1<'_, f64>) -> f64 {
        match self {
            TreeNode::Leaf { value, .. } => *value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if q[*feature] <= *threshold {
                    left.value_for(q)
                } else {
                    right.value_for(q)
                }
            }
        }
    }

    /// Largest feature index referenced by any split, if there is one.
    pub fn max_feature_index(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split {
                feature,
                left,
                right,
                ..
            } => {
                let mut m = *feature;
                if let Some(l) = left.max_feature_index() {
                    m = m.max(l);
                }
                if let Some(r) = right.max_feature_index() {
                    m = m.max(r);
                }
                Some(m)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TreeNode::Leaf { value, cover } => {
                if !value.is_finite() {
                    return Err(Error::Invalid("non-finite leaf value".into()));
                }
                if *cover == 0 {
                    return Err(Error::Invalid("leaf with zero cover".into()));
                }
                Ok(())
            }
            TreeNode::Split {
                threshold,
                left,
                right,
                cover,
                ..
            } => {
                if !threshold.is_finite() {
                    return Err(Error::Invalid("non-finite split threshold".into()));
                }
                if left.cover() + right.cover() != *cover {
                    return Err(Error::Invalid(format!(
                        "child covers {} + {} do not sum to parent cover {}",
                        left.cover(),
                        right.cover(),
                        cover
                    )));
                }
                left.validate()?;
                right.validate()
            }
        }
    }
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub max_depth: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights (the usual `lambda`).
    pub reg_lambda: f64,
    /// Minimum gain required to keep a split (the usual `gamma`).
    pub gain_penalty: f64,
    pub min_child_count: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            max_depth: 3,
            rounds: 100,
            learning_rate: 0.3,
            reg_lambda: 1.0,
            gain_penalty: 0.0,
            min_child_count: 1,
        }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::Invalid("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid(format!(
                "learning_rate must lie in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::Invalid("reg_lambda must be >= 0".into()));
        }
        if !(self.gain_penalty >= 0.0 && self.gain_penalty.is_finite()) {
            return Err(Error::Invalid("gain_penalty must be >= 0".into()));
        }
        if self.min_child_count < 1 {
            return Err(Error::Invalid("min_child_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Boosted ensemble: initial margin plus an ordered list of trees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    base_score: f64,
    trees: Vec<TreeNode>,
    params: GbtParams,
    n_features: usize,
    /// Rounds that produced no positive-gain split and were skipped.
    skipped_rounds: usize,
}

impl GbtModel {
    /// Fits `rounds` trees on binary labels (`true` = MDD = 1). The initial
    /// margin is `logit(mean(y))`; each round fits one tree to the logistic
    /// gradients/hessians. Rounds whose root has no positive-gain split are
    /// skipped and counted.
    pub fn fit(x: ArrayView2<'_, f64>, y: &[bool], params: &GbtParams) -> Result<Self> {
        params.validate()?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("training matrix contains non-finite values".into()));
        }
        let n = y.len();
        let pos = y.iter().filter(|&&b| b).count();
        if pos == 0 || pos == n {
            return Err(Error::Invalid(
                "training labels contain a single class; need both MDD and NC".into(),
            ));
        }

        let base_score = logit(pos as f64 / n as f64);
        let mut margins = vec![base_score; n];
        let mut trees = Vec::new();
        let mut skipped = 0usize;

        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let all_rows: Vec<usize> = (0..n).collect();
        for _ in 0..params.rounds {
            for i in 0..n {
                let p = sigmoid(margins[i]);
                grad[i] = p - if y[i] { 1.0 } else { 0.0 };
                hess[i] = p * (1.0 - p);
            }
            let builder = TreeBuilder {
                x,
                grad: &grad,
                hess: &hess,
                params,
            };
            match builder.build(&all_rows, 0) {
                TreeNode::Leaf { .. } => {
                    // no positive-gain split at the root
                    skipped += 1;
                }
                tree => {
                    for i in 0..n {
                        margins[i] += tree.value_for(x.row(i));
                    }
                    trees.push(tree);
                }
            }
        }

        Ok(GbtModel {
            base_score,
            trees,
            params: params.clone(),
            n_features: x.ncols(),
            skipped_rounds: skipped,
        })
    }

    /// Assembles a model from parts, checking finiteness and cover
    /// bookkeeping. Intended for test fixtures and deserialization checks.
    pub fn from_parts(base_score: f64, trees: Vec<TreeNode>, params: GbtParams) -> Result<Self> {
        if !base_score.is_finite() {
            return Err(Error::Invalid("non-finite base score".into()));
        }
        for t in &trees {
            t.validate()?;
        }
        let n_features = trees
            .iter()
            .filter_map(TreeNode::max_feature_index)
            .max()
            .map_or(0, |m| m + 1);
        Ok(GbtModel {
            base_score,
            trees,
            params,
            n_features,
            skipped_rounds: 0,
        })
    }

    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn trees(&self) -> &[TreeNode] {
        &self.trees
    }

    pub fn params(&self) -> &GbtParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn skipped_rounds(&self) -> usize {
        self.skipped_rounds
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        let needed = self
            .trees
            .iter()
            .filter_map(TreeNode::max_feature_index)
            .max()
            .map_or(0, |m| m + 1);
        if len < needed {
            return Err(Error::DimensionMismatch(format!(
                "query has {len} features but the trees index up to feature {}",
                needed - 1
            )));
        }
        Ok(())
    }

    /// Raw margin: `base_score` plus each tree's leaf value along `q`'s path.
    pub fn predict_margin(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_dim(q.len())?;
        Ok(self.base_score + self.trees.iter().map(|t| t.value_for(q)).sum::<f64>())
    }

    /// `sigmoid(margin)`.
    pub fn predict_proba(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(sigmoid(self.predict_margin(q)?))
    }

    pub fn predict_proba_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        x.axis_iter(ndarray::Axis(0))
            .map(|q| self.predict_proba(q))
            .collect()
    }
}

struct TreeBuilder<'a, 'b> {
    x: ArrayView2<'a, f64>,
    grad: &'b [f64],
    hess: &'b [f64],
    params: &'b GbtParams,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_, '_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.reg_lambda;
        if denom > 0.0 {
            -self.params.learning_rate * g / denom
        } else {
            0.0
        }
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        let denom = h + self.params.reg_lambda;
        if denom > 0.0 {
            g * g / denom
        } else {
            0.0
        }
    }

    fn build(&self, rows: &[usize], depth: usize) -> TreeNode {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let leaf = TreeNode::Leaf {
            value: self.leaf_value(g, h),
            cover: rows.len(),
        };
        if depth >= self.params.max_depth || rows.len() < 2 * self.params.min_child_count {
            return leaf;
        }
        let best = match self.best_split(rows, g, h) {
            Some(b) => b,
            None => return leaf,
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| self.x[(r, best.feature)] <= best.threshold);
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.build(&left_rows, depth + 1)),
            right: Box::new(self.build(&right_rows, depth + 1)),
            cover: rows.len(),
        }
    }

    fn best_split(&self, rows: &[usize], g_total: f64, h_total: f64) -> Option<BestSplit> {
        let parent_score = self.score(g_total, h_total);
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = Vec::with_capacity(rows.len());
        for feature in 0..self.x.ncols() {
            order.clear();
            order.extend_from_slice(rows);
            order.sort_by(|&a, &b| {
                self.x[(a, feature)]
                    .partial_cmp(&self.x[(b, feature)])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut gl = 0.0;
            let mut hl = 0.0;
            for i in 0..order.len() - 1 {
                let r = order[i];
                gl += self.grad[r];
                hl += self.hess[r];
                let v = self.x[(r, feature)];
                let v_next = self.x[(order[i + 1], feature)];
                if v == v_next {
                    continue;
                }
                let n_left = i + 1;
                let n_right = order.len() - n_left;
                if n_left < self.params.min_child_count || n_right < self.params.min_child_count {
                    continue;
                }
                // midpoint, snapped down if rounding would leak the next value left
                let mut threshold = 0.5 * (v + v_next);
                if threshold >= v_next {
                    threshold = v;
                }
                let gain = 0.5
                    * (self.score(gl, hl) + self.score(g_total - gl, h_total - hl) - parent_score)
                    - self.params.gain_penalty;
                // strict improvement keeps the (feature, threshold) tie order
                if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.gain) {
                    best = Some(BestSplit {
                        gain,
                        feature,
                        threshold,
                    });
                }
            }
        }
        best
    }
}
