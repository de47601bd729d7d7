//! Shapley additive explanations of the boosted tree ensemble.
//!
//! Two routes compute the same attribution: [`exact_shapley`] enumerates
//! every feature subset of the classic weighted-difference formula, and
//! [`tree_shap`] runs the polynomial-time path algorithm over tree paths
//! with cover weights. Both define the conditional expectation of a subset
//! the same way ([`tree_conditional_expectation`]): splits on in-subset
//! features follow the query, splits on out-of-subset features average both
//! children weighted by training cover. The pair stays byte-close (1e-9
//! elementwise), which the test suite exploits as an oracle.
//!
//! Explanations are in margin (log-odds) units; `base_value` is the
//! no-feature expectation and `base_value + sum(phi)` reconstructs the model
//! margin exactly.

use serde::{Deserialize, Serialize};

use ndarray::ArrayView1;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::gbt::{GbtModel, TreeNode};
use crate::stats::sigmoid;

/// Enumeration bound for [`exact_shapley`].
const EXACT_MAX_FEATURES: usize = 20;
/// Allowed drift between the reconstructed and true margin.
const ADDITIVITY_TOL: f64 = 1e-8;

/// Additive attribution of one subject's margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    pub subject_id: String,
    /// Conditional expectation with no features known (margin units).
    pub base_value: f64,
    /// Per-feature attributions, aligned to the model's input layout.
    pub phi: Vec<f64>,
    /// `base_value + sum(phi)`; equals the model margin within 1e-8.
    pub reconstructed_margin: f64,
}

impl ShapExplanation {
    pub fn with_subject_id(mut self, id: impl Into<String>) -> Self {
        self.subject_id = id.into();
        self
    }

    fn assemble(base_value: f64, phi: Vec<f64>, true_margin: f64) -> Result<Self> {
        let reconstructed_margin = base_value + phi.iter().sum::<f64>();
        if (reconstructed_margin - true_margin).abs() > ADDITIVITY_TOL {
            return Err(Error::Numerical(format!(
                "additivity violated: reconstructed {reconstructed_margin} vs margin {true_margin}"
            )));
        }
        Ok(ShapExplanation {
            subject_id: String::new(),
            base_value,
            phi,
            reconstructed_margin,
        })
    }
}

fn expectation_node(node: &TreeNode, q: ArrayView1<'_, f64>, in_subset: &[bool]) -> f64 {
    match node {
        TreeNode::Leaf { value, .. } => *value,
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if in_subset[*feature] {
                if q[*feature] <= *threshold {
                    expectation_node(left, q, in_subset)
                } else {
                    expectation_node(right, q, in_subset)
                }
            } else {
                let cl = left.cover() as f64;
                let cr = right.cover() as f64;
                (cl * expectation_node(left, q, in_subset)
                    + cr * expectation_node(right, q, in_subset))
                    / (*cover as f64)
            }
        }
    }
}

/// Expected margin conditioned on knowing only the features in `subset`:
/// per tree, splits on known features follow `q` and splits on unknown
/// features take the cover-weighted average of both children.
pub fn tree_conditional_expectation(
    model: &GbtModel,
    q: ArrayView1<'_, f64>,
    subset: &[usize],
) -> Result<f64> {
    let mut in_subset = vec![false; q.len()];
    for &j in subset {
        if j >= q.len() {
            return Err(Error::DimensionMismatch(format!(
                "subset feature {j} outside the query's {} features",
                q.len()
            )));
        }
        in_subset[j] = true;
    }
    expectation_with_mask(model, q, &in_subset)
}

fn expectation_with_mask(
    model: &GbtModel,
    q: ArrayView1<'_, f64>,
    in_subset: &[bool],
) -> Result<f64> {
    // reuse the predictor's dimension check via a full-path probe
    if in_subset.iter().all(|&b| b) {
        return model.predict_margin(q);
    }
    model.predict_margin(q)?; // dimension validation only
    Ok(model.base_score()
        + model
            .trees()
            .iter()
            .map(|t| expectation_node(t, q, in_subset))
            .sum::<f64>())
}

/// Exact Shapley attribution by subset enumeration of
/// `phi_i = sum_S |S|!(M-|S|-1)!/M! [f_x(S+i) - f_x(S)]`. Refuses more than
/// 20 features; use [`tree_shap`] beyond that.
pub fn exact_shapley(model: &GbtModel, q: ArrayView1<'_, f64>) -> Result<ShapExplanation> {
    let m = q.len();
    if m > EXACT_MAX_FEATURES {
        return Err(Error::Invalid(format!(
            "exact_shapley enumerates 2^M subsets and refuses M = {m} > {EXACT_MAX_FEATURES}; \
             use tree_shap instead"
        )));
    }
    let true_margin = model.predict_margin(q)?;

    // v[mask] = conditional expectation knowing exactly the masked features
    let n_masks = 1usize << m;
    let mut v = vec![0.0f64; n_masks];
    let mut in_subset = vec![false; m];
    for mask in 0..n_masks {
        for (j, flag) in in_subset.iter_mut().enumerate() {
            *flag = mask & (1 << j) != 0;
        }
        v[mask] = expectation_with_mask(model, q, &in_subset)?;
    }

    // w[s] = s! (M - s - 1)! / M! via exact integer factorials (M <= 20)
    let factorial = |k: usize| -> u128 { (1..=k as u128).product::<u128>().max(1) };
    let m_fact = factorial(m) as f64;
    let weights: Vec<f64> = (0..m)
        .map(|s| (factorial(s) * factorial(m - s - 1)) as f64 / m_fact)
        .collect();

    let mut phi = vec![0.0f64; m];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..n_masks {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            *phi_i += weights[s] * (v[mask | bit] - v[mask]);
        }
    }
    ShapExplanation::assemble(v[0], phi, true_margin)
}

#[derive(Clone, Copy, Debug)]
struct PathElement {
    feature: isize,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero_fraction: f64, one_fraction: f64, feature: isize) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero_fraction,
        one_fraction,
        pweight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let dl = depth as f64 + 1.0;
    for i in (0..depth).rev() {
        path[i + 1].pweight += one_fraction * path[i].pweight * (i as f64 + 1.0) / dl;
        path[i].pweight = zero_fraction * path[i].pweight * (depth - i) as f64 / dl;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let dl = depth as f64 + 1.0;
    let mut next_one_portion = path[depth].pweight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight = next_one_portion * dl / ((i as f64 + 1.0) * one);
            next_one_portion = tmp - path[i].pweight * zero * (depth - i) as f64 / dl;
        } else {
            path[i].pweight = path[i].pweight * dl / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
    path.pop();
}

fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let one = path[index].one_fraction;
    let zero = path[index].zero_fraction;
    let dl = depth as f64 + 1.0;
    let mut next_one_portion = path[depth].pweight;
    let mut total = 0.0;
    if one != 0.0 {
        for i in (0..depth).rev() {
            let tmp = next_one_portion * dl / ((i as f64 + 1.0) * one);
            total += tmp;
            next_one_portion = path[i].pweight - tmp * zero * (depth - i) as f64 / dl;
        }
    } else {
        for i in (0..depth).rev() {
            total += path[i].pweight * dl / (zero * (depth - i) as f64);
        }
    }
    total
}

fn tree_shap_recurse(
    node: &TreeNode,
    q: ArrayView1<'_, f64>,
    phi: &mut [f64],
    parent_path: &[PathElement],
    parent_zero: f64,
    parent_one: f64,
    parent_feature: isize,
) {
    let mut path = parent_path.to_vec();
    extend_path(&mut path, parent_zero, parent_one, parent_feature);
    match node {
        TreeNode::Leaf { value, .. } => {
            for i in 1..path.len() {
                let w = unwound_path_sum(&path, i);
                let el = &path[i];
                phi[el.feature as usize] += w * (el.one_fraction - el.zero_fraction) * value;
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            let (hot, cold): (&TreeNode, &TreeNode) = if q[*feature] <= *threshold {
                (left, right)
            } else {
                (right, left)
            };
            let hot_zero = hot.cover() as f64 / *cover as f64;
            let cold_zero = cold.cover() as f64 / *cover as f64;
            let mut incoming_zero = 1.0;
            let mut incoming_one = 1.0;
            // a repeated split on the same feature replaces its previous
            // path entry rather than appearing twice
            if let Some(k) = path
                .iter()
                .position(|e| e.feature == *feature as isize)
            {
                incoming_zero = path[k].zero_fraction;
                incoming_one = path[k].one_fraction;
                unwind_path(&mut path, k);
            }
            tree_shap_recurse(
                hot,
                q,
                phi,
                &path,
                hot_zero * incoming_zero,
                incoming_one,
                *feature as isize,
            );
            tree_shap_recurse(
                cold,
                q,
                phi,
                &path,
                cold_zero * incoming_zero,
                0.0,
                *feature as isize,
            );
        }
    }
}

/// Path-dependent TreeSHAP: polynomial in tree size, exact under the same
/// conditional-expectation semantics as [`exact_shapley`]. Works for any
/// number of features.
pub fn tree_shap(model: &GbtModel, q: ArrayView1<'_, f64>) -> Result<ShapExplanation> {
    let true_margin = model.predict_margin(q)?;
    let base_value = expectation_with_mask(model, q, &vec![false; q.len()])?;
    let mut phi = vec![0.0f64; q.len()];
    for tree in model.trees() {
        tree_shap_recurse(tree, q, &mut phi, &[], 1.0, 1.0, -1);
    }
    ShapExplanation::assemble(base_value, phi, true_margin)
}

/// One row of a [`FeatureRanking`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub name: String,
    /// Mean |phi| over the explained subjects.
    pub mean_abs_phi: f64,
    /// 1-based rank.
    pub rank: usize,
}

/// Features ordered by mean absolute attribution, with excluded columns'
/// total attribution kept as a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    pub entries: Vec<RankEntry>,
    /// Summed mean |phi| of the columns excluded from the ranking
    /// (base-learner probability columns when ranking a stack's meta model).
    pub excluded_mass: f64,
}

impl FeatureRanking {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// Ranks columns by mean |phi| across explanations, descending, ties broken
/// by name. Columns flagged in `excluded` (e.g. base-learner outputs) are
/// left out of the ranking; their mass is reported separately. `top_k`
/// truncates the ranking; anything larger than the column count returns the
/// full ranking.
pub fn rank_features(
    explanations: &[ShapExplanation],
    column_names: &[String],
    excluded: &[bool],
    top_k: usize,
) -> Result<FeatureRanking> {
    if explanations.is_empty() {
        return Err(Error::Invalid("no explanations to rank".into()));
    }
    let width = column_names.len();
    if excluded.len() != width {
        return Err(Error::DimensionMismatch(format!(
            "{} names but {} exclusion flags",
            width,
            excluded.len()
        )));
    }
    for e in explanations {
        if e.phi.len() != width {
            return Err(Error::DimensionMismatch(format!(
                "explanation for '{}' has {} attributions, expected {}",
                e.subject_id,
                e.phi.len(),
                width
            )));
        }
    }
    let n = explanations.len() as f64;
    let mut mean_abs = vec![0.0f64; width];
    for e in explanations {
        for (j, p) in e.phi.iter().enumerate() {
            mean_abs[j] += p.abs();
        }
    }
    for v in &mut mean_abs {
        *v /= n;
    }
    let excluded_mass = (0..width).filter(|&j| excluded[j]).map(|j| mean_abs[j]).sum();
    let mut order: Vec<usize> = (0..width).filter(|&j| !excluded[j]).collect();
    order.sort_by(|&a, &b| {
        mean_abs[b]
            .partial_cmp(&mean_abs[a])
            .unwrap()
            .then_with(|| column_names[a].cmp(&column_names[b]))
    });
    order.truncate(top_k);
    let entries = order
        .into_iter()
        .enumerate()
        .map(|(i, j)| RankEntry {
            name: column_names[j].clone(),
            mean_abs_phi: mean_abs[j],
            rank: i + 1,
        })
        .collect();
    Ok(FeatureRanking {
        entries,
        excluded_mass,
    })
}

/// One named contribution inside a [`ForceRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceContribution {
    pub name: String,
    pub phi: f64,
}

/// Plot-ready decomposition of a single decision: base value, contributions
/// sorted by |phi| descending, and the margin-space decision (MDD when the
/// reconstructed margin is positive, i.e. probability above one half).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceRecord {
    pub subject_id: String,
    pub base_value: f64,
    pub contributions: Vec<ForceContribution>,
    pub reconstructed_margin: f64,
    pub probability: f64,
    pub decision: Label,
}

/// Builds the force record for one explanation. `column_names` must match
/// the explanation layout.
pub fn force_record(e: &ShapExplanation, column_names: &[String]) -> Result<ForceRecord> {
    if e.phi.len() != column_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "explanation has {} attributions but {} names",
            e.phi.len(),
            column_names.len()
        )));
    }
    let mut order: Vec<usize> = (0..e.phi.len()).collect();
    order.sort_by(|&a, &b| {
        e.phi[b]
            .abs()
            .partial_cmp(&e.phi[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let contributions = order
        .into_iter()
        .map(|j| ForceContribution {
            name: column_names[j].clone(),
            phi: e.phi[j],
        })
        .collect();
    Ok(ForceRecord {
        subject_id: e.subject_id.clone(),
        base_value: e.base_value,
        contributions,
        reconstructed_margin: e.reconstructed_margin,
        probability: sigmoid(e.reconstructed_margin),
        decision: if e.reconstructed_margin > 0.0 {
            Label::Mdd
        } else {
            Label::Nc
        },
    })
}

/// Writes explanations as CSV: `subject_id, base_value, <phi columns>`.
pub fn write_explanations_csv(
    path: impl AsRef<std::path::Path>,
    explanations: &[ShapExplanation],
    column_names: &[String],
) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut out = Vec::new();
    write!(out, "subject_id,base_value").map_err(|e| Error::io(path, e))?;
    for name in column_names {
        write!(out, ",{name}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(out).map_err(|e| Error::io(path, e))?;
    for e in explanations {
        if e.phi.len() != column_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "explanation for '{}' does not match the column layout",
                e.subject_id
            )));
        }
        write!(out, "{},{}", e.subject_id, crate::data::fmt_sig9(e.base_value))
            .map_err(|err| Error::io(path, err))?;
        for p in &e.phi {
            write!(out, ",{}", crate::data::fmt_sig9(*p)).map_err(|err| Error::io(path, err))?;
        }
        writeln!(out).map_err(|err| Error::io(path, err))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
