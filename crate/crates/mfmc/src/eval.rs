//! Evaluation harness: split planning (k-fold, leave-one-out, leave-site-out,
//! combined sites), confusion-matrix metrics, the end-to-end pipeline runner,
//! group-level statistics, and SHAP-guided feature selection with retraining.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, Label, ZScoreParams};
use crate::error::{Error, Result};
use crate::explain::{rank_features, FeatureRanking, ShapExplanation};
use crate::harmonize::ComBatModel;
use crate::stacking::{stack_fit, StackConfig};
use crate::stats::{significance_stars, two_sample_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    KFold,
    Loo,
    Loso,
    Combined,
}

/// One train/test split. Indices refer to rows of the planned table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Held-out site(s) for LOSO/COMBINED plans.
    pub site: Option<String>,
}

/// Ordered list of disjoint train/test splits with a split-kind tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub splits: Vec<Split>,
    pub seed: Option<u64>,
}

/// Stratified fold id per row: classes are shuffled separately with a seeded
/// generator, then dealt round-robin, so fold class proportions stay within
/// one subject of the global proportions.
pub fn stratified_fold_assignment(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Invalid("need at least 2 folds".into()));
    }
    let mut mdd: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut nc: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if mdd.len() < k || nc.len() < k {
        return Err(Error::Invalid(format!(
            "stratified {k}-fold needs at least {k} subjects per class, got {} MDD and {} NC",
            mdd.len(),
            nc.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mdd.shuffle(&mut rng);
    nc.shuffle(&mut rng);
    let mut assignment = vec![0usize; labels.len()];
    for (pos, &row) in mdd.iter().enumerate() {
        assignment[row] = pos % k;
    }
    for (pos, &row) in nc.iter().enumerate() {
        assignment[row] = pos % k;
    }
    Ok(assignment)
}

/// Seeded stratified k-fold plan over a fully labeled table.
pub fn stratified_kfold(table: &FeatureTable, k: usize, seed: u64) -> Result<SplitPlan> {
    let labels = table.binary_labels()?;
    let assignment = stratified_fold_assignment(&labels, k, seed)?;
    let splits = (0..k)
        .map(|f| Split {
            name: format!("fold{}", f + 1),
            train: (0..labels.len()).filter(|&i| assignment[i] != f).collect(),
            test: (0..labels.len()).filter(|&i| assignment[i] == f).collect(),
            site: None,
        })
        .collect();
    Ok(SplitPlan {
        kind: SplitKind::KFold,
        splits,
        seed: Some(seed),
    })
}

/// One split per subject, testing on that subject alone.
pub fn leave_one_out(table: &FeatureTable) -> Result<SplitPlan> {
    let n = table.n_subjects();
    if n < 2 {
        return Err(Error::Invalid("leave-one-out needs at least 2 subjects".into()));
    }
    let splits = (0..n)
        .map(|i| Split {
            name: format!("loo:{}", table.subject_ids()[i]),
            train: (0..n).filter(|&j| j != i).collect(),
            test: vec![i],
            site: None,
        })
        .collect();
    Ok(SplitPlan {
        kind: SplitKind::Loo,
        splits,
        seed: None,
    })
}

fn site_split(table: &FeatureTable, sites: &[String], name: String) -> Result<Split> {
    let known = table.unique_sites();
    for s in sites {
        if !known.contains(s) {
            return Err(Error::Invalid(format!("unknown site '{s}'")));
        }
    }
    let test: Vec<usize> = (0..table.n_subjects())
        .filter(|&i| sites.contains(&table.site_ids()[i]))
        .collect();
    let train: Vec<usize> = (0..table.n_subjects())
        .filter(|&i| !sites.contains(&table.site_ids()[i]))
        .collect();
    if train.is_empty() {
        return Err(Error::Invalid(format!(
            "holding out {sites:?} leaves no training subjects"
        )));
    }
    let train_labels = table.select_rows(&train)?.binary_labels()?;
    let pos = train_labels.iter().filter(|&&b| b).count();
    if pos == 0 || pos == train_labels.len() {
        return Err(Error::Invalid(format!(
            "training remainder after holding out {sites:?} contains a single class"
        )));
    }
    Ok(Split {
        name,
        train,
        test,
        site: Some(sites.join("+")),
    })
}

/// One split per requested site: that site is the test set, everything else
/// trains. Site-disjointness between train and test holds by construction.
pub fn leave_site_out(table: &FeatureTable, sites: &[String]) -> Result<SplitPlan> {
    if sites.is_empty() {
        return Err(Error::Invalid("leave-site-out needs at least one site".into()));
    }
    let splits = sites
        .iter()
        .map(|s| site_split(table, std::slice::from_ref(s), s.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitPlan {
        kind: SplitKind::Loso,
        splits,
        seed: None,
    })
}

/// A single split whose test set is the union of the requested sites.
pub fn combined_sites(table: &FeatureTable, sites: &[String]) -> Result<SplitPlan> {
    if sites.is_empty() {
        return Err(Error::Invalid("combined-sites needs at least one site".into()));
    }
    let split = site_split(table, sites, format!("combined:{}", sites.join("+")))?;
    Ok(SplitPlan {
        kind: SplitKind::Combined,
        splits: vec![split],
        seed: None,
    })
}

/// Confusion counts and derived rates; MDD is the positive class. Rates with
/// an empty denominator are reported as absent, never as zero by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_accuracy: Option<f64>,
}

/// Confusion metrics from parallel label vectors (`true` = MDD).
pub fn compute_metrics(y_true: &[bool], y_pred: &[bool]) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Invalid("cannot compute metrics on an empty set".into()));
    }
    let (mut tp, mut fp, mut false_neg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => false_neg += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| -> Option<f64> {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Ok(MetricsReport {
        tp,
        fp,
        false_neg,
        tn,
        accuracy: (tp + tn) as f64 / y_true.len() as f64,
        sensitivity: ratio(tp, tp + false_neg),
        specificity: ratio(tn, tn + fp),
        f1: ratio(2 * tp, 2 * tp + fp + false_neg),
        delta_accuracy: None,
    })
}

/// Mean and sample standard deviation over the splits where a metric was
/// defined. A single observation has standard deviation zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    fn from_values(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    /// `96.88±0.85` style percentage with two decimals.
    pub fn format_pct(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub accuracy: MeanStd,
    pub sensitivity: Option<MeanStd>,
    pub specificity: Option<MeanStd>,
    pub f1: Option<MeanStd>,
    /// Mean accuracy minus the configured reference accuracy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutcome {
    pub kind: SplitKind,
    pub per_split: Vec<SplitOutcome>,
    pub aggregate: AggregateMetrics,
}

/// When ComBat runs relative to splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombatMode {
    /// No harmonization.
    Off,
    /// Fit once on the whole table before splitting (the default, matching
    /// harmonize-then-train pipelines).
    #[default]
    Global,
    /// Refit inside each training fold; fails on plans whose test sites are
    /// absent from training (leave-site-out), since unseen sites cannot be
    /// adjusted.
    PerFold,
}

/// Everything the pipeline runner needs besides the table and plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stack: StackConfig,
    pub combat: CombatMode,
    /// Preserve the diagnosis effect inside ComBat's location model.
    pub preserve_diagnosis: bool,
    /// Z-score features, fitted on the training side of each split.
    pub zscore: bool,
    /// Reference accuracy for delta reporting (e.g. the 5-fold accuracy when
    /// evaluating combined sites).
    pub reference_accuracy: Option<f64>,
}

impl PipelineConfig {
    pub fn standard() -> Self {
        PipelineConfig {
            stack: StackConfig::default(),
            combat: CombatMode::Global,
            preserve_diagnosis: false,
            zscore: true,
            reference_accuracy: None,
        }
    }
}

fn aggregate_metrics(
    per_split: &[SplitOutcome],
    reference_accuracy: Option<f64>,
) -> AggregateMetrics {
    let acc: Vec<f64> = per_split.iter().map(|s| s.metrics.accuracy).collect();
    let sens: Vec<f64> = per_split.iter().filter_map(|s| s.metrics.sensitivity).collect();
    let spec: Vec<f64> = per_split.iter().filter_map(|s| s.metrics.specificity).collect();
    let f1: Vec<f64> = per_split.iter().filter_map(|s| s.metrics.f1).collect();
    let accuracy = MeanStd::from_values(&acc).expect("plans have at least one split");
    AggregateMetrics {
        delta_accuracy: reference_accuracy.map(|r| accuracy.mean - r),
        accuracy,
        sensitivity: MeanStd::from_values(&sens),
        specificity: MeanStd::from_values(&spec),
        f1: MeanStd::from_values(&f1),
    }
}

/// Runs the full pipeline over every split of `plan`: harmonize per
/// `cfg.combat`, z-score fitted on the training side, stack fit on train,
/// predict on test, metrics per split plus a mean±std aggregate.
pub fn run_pipeline_evaluation(
    table: &FeatureTable,
    plan: &SplitPlan,
    cfg: &PipelineConfig,
) -> Result<EvaluationOutcome> {
    if plan.splits.is_empty() {
        return Err(Error::Invalid("empty split plan".into()));
    }
    let harmonized;
    let working: &FeatureTable = match cfg.combat {
        CombatMode::Global => {
            let model = ComBatModel::fit(table, cfg.preserve_diagnosis)?;
            harmonized = model.apply(table)?;
            &harmonized
        }
        _ => table,
    };

    let mut per_split = Vec::with_capacity(plan.splits.len());
    for split in &plan.splits {
        let mut train = working.select_rows(&split.train)?;
        let mut test = working.select_rows(&split.test)?;
        if cfg.combat == CombatMode::PerFold {
            let model = ComBatModel::fit(&train, cfg.preserve_diagnosis)?;
            train = model.apply(&train)?;
            test = model.apply(&test)?;
        }
        if cfg.zscore {
            let z = ZScoreParams::fit(&train)?;
            train = z.apply(&train)?;
            test = z.apply(&test)?;
        }
        let model = stack_fit(&train, &cfg.stack)?;
        let y_true = test.binary_labels()?;
        let mut y_pred = Vec::with_capacity(test.n_subjects());
        for i in 0..test.n_subjects() {
            y_pred.push(model.predict_proba(test.row(i))? > 0.5);
        }
        let mut metrics = compute_metrics(&y_true, &y_pred)?;
        metrics.delta_accuracy = cfg.reference_accuracy.map(|r| metrics.accuracy - r);
        per_split.push(SplitOutcome {
            name: split.name.clone(),
            n_train: split.train.len(),
            n_test: split.test.len(),
            metrics,
        });
    }
    let aggregate = aggregate_metrics(&per_split, cfg.reference_accuracy);
    Ok(EvaluationOutcome {
        kind: plan.kind,
        per_split,
        aggregate,
    })
}

/// Renders an evaluation as an aligned text table, rates as percentages with
/// two decimals and the aggregate row as `mean±std`.
pub fn render_text_report(outcome: &EvaluationOutcome) -> String {
    let fmt_opt = |v: Option<f64>| -> String {
        v.map_or("-".to_string(), |x| format!("{:.2}", x * 100.0))
    };
    let mut rows: Vec<Vec<String>> = Vec::new();
    rows.push(vec![
        "split".into(),
        "accuracy".into(),
        "sensitivity".into(),
        "specificity".into(),
        "f1".into(),
        "delta".into(),
        "n_test".into(),
    ]);
    for s in &outcome.per_split {
        rows.push(vec![
            s.name.clone(),
            format!("{:.2}", s.metrics.accuracy * 100.0),
            fmt_opt(s.metrics.sensitivity),
            fmt_opt(s.metrics.specificity),
            fmt_opt(s.metrics.f1),
            fmt_opt(s.metrics.delta_accuracy),
            s.n_test.to_string(),
        ]);
    }
    let agg = &outcome.aggregate;
    rows.push(vec![
        "mean±std".into(),
        agg.accuracy.format_pct(),
        agg.sensitivity.map_or("-".into(), |m| m.format_pct()),
        agg.specificity.map_or("-".into(), |m| m.format_pct()),
        agg.f1.map_or("-".into(), |m| m.format_pct()),
        agg.delta_accuracy
            .map_or("-".to_string(), |d| format!("{:.2}", d * 100.0)),
        String::new(),
    ]);
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<width$}", width = widths[c]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-feature group statistics on z-scored values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatRow {
    pub name: String,
    pub mean_mdd: f64,
    pub std_mdd: f64,
    pub mean_nc: f64,
    pub std_nc: f64,
    pub t: f64,
    pub p: f64,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatsReport {
    pub rows: Vec<GroupStatRow>,
}

impl GroupStatsReport {
    pub fn row(&self, name: &str) -> Option<&GroupStatRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Pooled two-sample t-test of MDD vs NC per feature, on values z-scored over
/// all subjects (the display convention; the t statistic itself is invariant
/// to that affine rescaling). `features = None` tests every feature.
pub fn group_ttest(table: &FeatureTable, features: Option<&[String]>) -> Result<GroupStatsReport> {
    let selected: Vec<String> = match features {
        Some(names) => names.to_vec(),
        None => table.feature_names().to_vec(),
    };
    let sub = table.select_features_by_name(&selected)?;
    let z = ZScoreParams::fit(&sub)?.apply(&sub)?;
    let mdd_rows: Vec<usize> = (0..z.n_subjects())
        .filter(|&i| z.labels()[i] == Label::Mdd)
        .collect();
    let nc_rows: Vec<usize> = (0..z.n_subjects())
        .filter(|&i| z.labels()[i] == Label::Nc)
        .collect();
    if mdd_rows.len() < 2 || nc_rows.len() < 2 {
        return Err(Error::Invalid(format!(
            "group t-test needs at least 2 subjects per group, got {} MDD and {} NC",
            mdd_rows.len(),
            nc_rows.len()
        )));
    }
    let sample_std = |vals: &[f64]| -> f64 {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut rows = Vec::with_capacity(z.n_features());
    for j in 0..z.n_features() {
        let col = z.column(j);
        let a: Vec<f64> = mdd_rows.iter().map(|&i| col[i]).collect();
        let b: Vec<f64> = nc_rows.iter().map(|&i| col[i]).collect();
        let tt = two_sample_t(&a, &b)?;
        rows.push(GroupStatRow {
            name: z.feature_names()[j].clone(),
            mean_mdd: a.iter().sum::<f64>() / a.len() as f64,
            std_mdd: sample_std(&a),
            mean_nc: b.iter().sum::<f64>() / b.len() as f64,
            std_nc: sample_std(&b),
            t: tt.t,
            p: tt.p,
            stars: significance_stars(tt.p).to_string(),
        });
    }
    Ok(GroupStatsReport { rows })
}

/// Outcome of SHAP-guided selection: the surviving features, their group
/// statistics, and the reduced model's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub ranking: FeatureRanking,
    pub candidates: Vec<String>,
    pub selected: Vec<String>,
    pub stats: GroupStatsReport,
    pub evaluation: EvaluationOutcome,
}

/// Takes the top `top_k` features by mean |phi| (base-learner columns
/// excluded), keeps those with p < `p_threshold` in the MDD-vs-NC t-test,
/// retrains the stack on the reduced columns, and evaluates under `plan`.
pub fn select_and_retrain(
    table: &FeatureTable,
    explanations: &[ShapExplanation],
    column_names: &[String],
    base_mask: &[bool],
    plan: &SplitPlan,
    cfg: &PipelineConfig,
    top_k: usize,
    p_threshold: f64,
) -> Result<SelectionOutcome> {
    let ranking = rank_features(explanations, column_names, base_mask, top_k)?;
    let candidates: Vec<String> = ranking.entries.iter().map(|e| e.name.clone()).collect();
    let stats = group_ttest(table, Some(&candidates))?;
    let selected: Vec<String> = candidates
        .iter()
        .filter(|name| stats.row(name).is_some_and(|r| r.p < p_threshold))
        .cloned()
        .collect();
    if selected.is_empty() {
        let best = stats
            .rows
            .iter()
            .map(|r| format!("{} (p={:.4})", r.name, r.p))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Invalid(format!(
            "no feature among the top {top_k} passes p < {p_threshold}; candidates: {best}"
        )));
    }
    let reduced = table.select_features_by_name(&selected)?;
    let evaluation = run_pipeline_evaluation(&reduced, plan, cfg)?;
    Ok(SelectionOutcome {
        ranking,
        candidates,
        selected,
        stats,
        evaluation,
    })
}

/// Convenience: explains every subject of a (preprocessed) table with the
/// stack's meta model via TreeSHAP, in row order.
pub fn explain_table(
    model: &crate::stacking::StackModel,
    table: &FeatureTable,
) -> Result<Vec<ShapExplanation>> {
    let mut out = Vec::with_capacity(table.n_subjects());
    for i in 0..table.n_subjects() {
        let meta_input = model.meta_input(table.row(i))?;
        let e = crate::explain::tree_shap(model.meta(), meta_input.view())?
            .with_subject_id(table.subject_ids()[i].clone());
        out.push(e);
    }
    Ok(out)
}

/// Mean |phi| ranking for a whole table in one call.
pub fn rank_table_features(
    model: &crate::stacking::StackModel,
    table: &FeatureTable,
    top_k: usize,
) -> Result<(Vec<ShapExplanation>, FeatureRanking)> {
    let explanations = explain_table(model, table)?;
    let layout = model.layout();
    let ranking = rank_features(
        &explanations,
        &layout.column_names,
        &layout.base_mask(),
        top_k,
    )?;
    Ok((explanations, ranking))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn labeled_table(n_mdd: usize, n_nc: usize, sites: &[&str]) -> FeatureTable {
        let n = n_mdd + n_nc;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let values = Array2::from_shape_fn((n, 3), |(i, _)| {
            rng.gen_range(-1.0..1.0) + if i < n_mdd { 1.0 } else { 0.0 }
        });
        FeatureTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| sites[i % sites.len()].to_string()).collect(),
            (0..n)
                .map(|i| if i < n_mdd { Label::Mdd } else { Label::Nc })
                .collect(),
            vec!["f0".into(), "f1".into(), "f2".into()],
            values,
        )
        .unwrap()
    }

    #[test]
    fn kfold_partitions_with_balanced_classes() {
        let t = labeled_table(10, 10, &["a"]);
        let plan = stratified_kfold(&t, 5, 7).unwrap();
        assert_eq!(plan.splits.len(), 5);
        let mut seen = vec![false; 20];
        for split in &plan.splits {
            assert_eq!(split.test.len(), 4);
            let mdd = split.test.iter().filter(|&&i| i < 10).count();
            assert_eq!(mdd, 2, "fold {} unbalanced", split.name);
            for &i in &split.test {
                assert!(!seen[i], "subject {i} tested twice");
                seen[i] = true;
            }
            for &i in &split.train {
                assert!(!split.test.contains(&i));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kfold_is_seed_deterministic() {
        let t = labeled_table(10, 10, &["a"]);
        assert_eq!(
            stratified_kfold(&t, 5, 7).unwrap(),
            stratified_kfold(&t, 5, 7).unwrap()
        );
        assert_ne!(
            stratified_kfold(&t, 5, 7).unwrap(),
            stratified_kfold(&t, 5, 8).unwrap()
        );
    }

    #[test]
    fn kfold_class_shortage_rejected() {
        let t = labeled_table(3, 10, &["a"]);
        assert!(stratified_kfold(&t, 5, 0).is_err());
    }

    #[test]
    fn loo_enumerates_every_subject() {
        let t = labeled_table(3, 2, &["a"]);
        let plan = leave_one_out(&t).unwrap();
        assert_eq!(plan.splits.len(), 5);
        for (i, split) in plan.splits.iter().enumerate() {
            assert_eq!(split.test, vec![i]);
            assert_eq!(split.train.len(), 4);
        }
    }

    #[test]
    fn loso_is_site_disjoint() {
        let t = labeled_table(12, 12, &["a", "b", "c"]);
        let sites: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let plan = leave_site_out(&t, &sites).unwrap();
        assert_eq!(plan.splits.len(), 3);
        for split in &plan.splits {
            let test_sites: std::collections::HashSet<_> =
                split.test.iter().map(|&i| t.site_ids()[i].clone()).collect();
            let train_sites: std::collections::HashSet<_> =
                split.train.iter().map(|&i| t.site_ids()[i].clone()).collect();
            assert!(test_sites.is_disjoint(&train_sites));
            assert_eq!(test_sites.len(), 1);
        }
    }

    #[test]
    fn combined_sites_make_one_split() {
        let t = labeled_table(12, 12, &["a", "b", "c"]);
        let plan = combined_sites(&t, &["a".into(), "b".into()]).unwrap();
        assert_eq!(plan.splits.len(), 1);
        assert_eq!(plan.kind, SplitKind::Combined);
        let split = &plan.splits[0];
        assert_eq!(split.test.len(), 16);
        for &i in &split.train {
            assert_eq!(t.site_ids()[i], "c");
        }
    }

    #[test]
    fn holding_out_everything_is_rejected() {
        let t = labeled_table(6, 6, &["a"]);
        assert!(leave_site_out(&t, &["a".into()]).is_err());
        let t2 = labeled_table(6, 6, &["a", "b"]);
        assert!(combined_sites(&t2, &["a".into(), "b".into()]).is_err());
        assert!(leave_site_out(&t2, &["nope".into()]).is_err());
    }

    #[test]
    fn site8_counts_reproduce_published_rates() {
        // TP=64 FP=2 FN=11 TN=73 -> 91.33 / 85.33 / 97.33 / 90.78 (%)
        let mut y_true = Vec::new();
        let mut y_pred = Vec::new();
        for _ in 0..64 {
            y_true.push(true);
            y_pred.push(true);
        }
        for _ in 0..2 {
            y_true.push(false);
            y_pred.push(true);
        }
        for _ in 0..11 {
            y_true.push(true);
            y_pred.push(false);
        }
        for _ in 0..73 {
            y_true.push(false);
            y_pred.push(false);
        }
        let m = compute_metrics(&y_true, &y_pred).unwrap();
        assert!((m.accuracy * 100.0 - 91.33).abs() < 0.01);
        assert!((m.sensitivity.unwrap() * 100.0 - 85.33).abs() < 0.01);
        assert!((m.specificity.unwrap() * 100.0 - 97.33).abs() < 0.01);
        assert!((m.f1.unwrap() * 100.0 - 90.78).abs() < 0.01);
    }

    #[test]
    fn perfect_and_degenerate_metric_cases() {
        let m = compute_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.f1, Some(1.0));

        // all predicted MDD on a mixed set
        let m = compute_metrics(&[true, false, false], &[true, true, true]).unwrap();
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(0.0));

        // no MDD in truth: sensitivity is absent, not zero
        let m = compute_metrics(&[false, false], &[false, true]).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.f1, Some(0.0));

        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[true], &[]).is_err());
    }

    #[test]
    fn metric_identities_on_random_confusions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let tp = rng.gen_range(0..50usize);
            let fp = rng.gen_range(0..50usize);
            let fneg = rng.gen_range(0..50usize);
            let tn = rng.gen_range(0..50usize);
            if tp + fp + fneg + tn == 0 {
                continue;
            }
            let mut y_true = Vec::new();
            let mut y_pred = Vec::new();
            for _ in 0..tp {
                y_true.push(true);
                y_pred.push(true);
            }
            for _ in 0..fp {
                y_true.push(false);
                y_pred.push(true);
            }
            for _ in 0..fneg {
                y_true.push(true);
                y_pred.push(false);
            }
            for _ in 0..tn {
                y_true.push(false);
                y_pred.push(false);
            }
            let m = compute_metrics(&y_true, &y_pred).unwrap();
            assert_eq!(m.tp, tp);
            assert_eq!(m.fp, fp);
            assert_eq!(m.false_neg, fneg);
            assert_eq!(m.tn, tn);
            let total = (tp + fp + fneg + tn) as f64;
            assert_eq!(m.accuracy, (tp + tn) as f64 / total);
            match m.sensitivity {
                Some(s) => assert_eq!(s, tp as f64 / (tp + fneg) as f64),
                None => assert_eq!(tp + fneg, 0),
            }
            match m.specificity {
                Some(s) => assert_eq!(s, tn as f64 / (tn + fp) as f64),
                None => assert_eq!(tn + fp, 0),
            }
            match m.f1 {
                Some(f) => assert_eq!(f, 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64),
                None => assert_eq!(2 * tp + fp + fneg, 0),
            }
        }
    }

    // (group_a, group_b, t, p) frozen from an independent oracle run
    const T_ORACLE_CASES: &[(&[f64], &[f64], f64, f64)] = &[
        (&[-2.081, -2.486, -1.078, -0.312], &[-0.496, -0.612, -2.037, -2.428, 0.266, -1.226, -0.433], -0.8163317076558417, 0.43538399969295805),
        (&[0.115, 2.458, -0.868], &[-2.016, -0.591, -2.099, -1.345, -1.29, -0.13, -1.669, -0.394, -0.785], 2.588630505306626, 0.02701335659054414),
        (&[0.278, 2.571, 0.6, -0.084, 2.586, 0.554, 0.618], &[0.886, -1.017, 1.038, 2.17, 0.094], 0.5790258561837176, 0.5753814902837717),
        (&[-0.918, -0.635, 0.7, 0.629], &[-0.341, 0.186, -0.468, -0.787, -0.912, -0.805, -0.837], 1.399917140806892, 0.1950526161868462),
        (&[0.894, 0.629, 0.473, -0.072, 0.136, 1.506, 0.45], &[2.116, 0.583, 0.142, 0.794, 0.556, 1.802], -1.1756299192284638, 0.26456099623178303),
        (&[0.608, -0.636, -0.59, 0.367], &[-2.438, -1.443, -0.902, -3.231], 3.1819109364133786, 0.01902984464145517),
        (&[-0.987, -1.732, -2.857, -1.088, -5.226, -1.719, -2.12, -2.391, 1.671], &[-0.009, 0.267, -1.166, -0.38, -1.092, -0.145], -1.8106556007905117, 0.09335678119048822),
        (&[0.17, 0.164, 0.326, 0.057, -1.224, -0.538, 0.283, -0.606, -0.527], &[0.187, -0.078, -0.737, -0.355, -2.423, -0.989, -0.537, -2.095, -0.659], 1.8853707352015459, 0.07767250140763009),
        (&[-0.326, -0.587, -2.903, -1.872, -1.821], &[-1.061, -0.859, -4.254], 0.5459664933049108, 0.604778853637465),
        (&[2.706, 1.494, 5.189, 3.274], &[4.936, 3.106, 2.249, 0.902, 1.539, 0.779], 0.9058111157097742, 0.3915000854913363),
        (&[-1.373, -0.453, 0.059, 0.804, 2.626, 0.404], &[-0.209, -1.783, -2.321, -1.105, 0.337, -0.799, 0.559, -0.322], 1.6780073718163315, 0.1191765232298391),
        (&[-2.821, -0.061, -3.677, -2.02], &[0.337, 0.677, 0.548, 0.254], -3.3376483197434776, 0.015657332147410472),
        (&[-1.734, 0.186, 0.506, 1.515], &[0.39, -2.874, -1.333, -1.786, -3.643, -1.366, 0.763, 2.69, -3.646], 1.120572436081704, 0.28633870745865014),
        (&[0.044, 1.069, -0.194, 1.404, 2.275, 0.301, 0.942], &[0.877, 2.405, 1.739, 1.491, 1.405, 1.9, 2.149, 0.423, 0.724], -1.6308605459458638, 0.12520319524946677),
        (&[-0.904, -1.476, 0.368], &[-0.6, -0.521, -0.523, -0.761, -1.713, -1.171], 0.46249854473343693, 0.6577563459962426),
        (&[1.113, 4.195, 3.79, 3.198, 1.772, -0.363, 1.799, 1.004], &[-0.151, 2.71, 0.908, 0.954, 0.027, 0.559, 0.959, 0.539, 0.372], 2.188840504375144, 0.0448397471210865),
        (&[0.909, 0.038, -3.814, 3.949, -0.06, -0.77, 1.628, 1.846], &[0.382, 1.811, 1.596], -0.5802051807576568, 0.5760122756869612),
        (&[-1.789, -2.752, -1.034, -1.373, -1.179], &[-3.517, 1.993, 1.657, -1.713, 1.315, -0.057, -0.477], -1.606872081926087, 0.13916241802684456),
        (&[-0.206, 0.043, -1.326, 0.34, -1.254], &[-1.617, -1.91, -1.652, -1.74, -1.315], 3.2822965207135, 0.011149509876980905),
        (&[-1.571, -0.988, -2.751, -0.439, -0.099, -0.594, -3.279, -0.991], &[-3.356, -1.885, 1.572, -1.908], 0.06067677994921669, 0.9528121615730618),
    ];

    #[test]
    fn pooled_t_matches_independent_oracle() {
        for (i, (a, b, want_t, want_p)) in T_ORACLE_CASES.iter().enumerate() {
            let r = two_sample_t(a, b).unwrap();
            assert!((r.t - want_t).abs() < 1e-6, "case {i}: t {} vs {want_t}", r.t);
            assert!((r.p - want_p).abs() < 1e-5, "case {i}: p {} vs {want_p}", r.p);
        }
    }

    #[test]
    fn group_ttest_identical_groups_ns() {
        // MDD and NC rows carry identical values
        let values = Array2::from_shape_vec(
            (6, 1),
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0],
        )
        .unwrap();
        let t = FeatureTable::new(
            (0..6).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); 6],
            vec![
                Label::Mdd,
                Label::Mdd,
                Label::Mdd,
                Label::Nc,
                Label::Nc,
                Label::Nc,
            ],
            vec!["f".into()],
            values,
        )
        .unwrap();
        let r = group_ttest(&t, None).unwrap();
        assert_eq!(r.rows[0].t, 0.0);
        assert_eq!(r.rows[0].p, 1.0);
        assert_eq!(r.rows[0].stars, "ns");
    }

    #[test]
    fn group_ttest_small_group_rejected() {
        let t = labeled_table(1, 5, &["a"]);
        // one MDD subject only
        assert!(group_ttest(&t, None).is_err());
    }

    #[test]
    fn aggregate_of_identical_reports_has_zero_std() {
        let m = compute_metrics(&[true, false], &[true, false]).unwrap();
        let per_split = vec![
            SplitOutcome {
                name: "a".into(),
                n_train: 2,
                n_test: 2,
                metrics: m.clone(),
            },
            SplitOutcome {
                name: "b".into(),
                n_train: 2,
                n_test: 2,
                metrics: m,
            },
        ];
        let agg = aggregate_metrics(&per_split, Some(0.9));
        assert_eq!(agg.accuracy.std, 0.0);
        assert_eq!(agg.accuracy.mean, 1.0);
        assert!((agg.delta_accuracy.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(agg.accuracy.format_pct(), "100.00±0.00");
    }

    #[test]
    fn pipeline_on_separable_single_split_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let values = Array2::from_shape_fn((n, 3), |(i, _)| {
            rng.gen_range(-0.5..0.5) + if i % 2 == 0 { 10.0 } else { 0.0 }
        });
        let t = FeatureTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| format!("site{}", i % 2 + 1)).collect(),
            (0..n)
                .map(|i| if i % 2 == 0 { Label::Mdd } else { Label::Nc })
                .collect(),
            vec!["f0".into(), "f1".into(), "f2".into()],
            values,
        )
        .unwrap();
        let plan = stratified_kfold(&t, 2, 0).unwrap();
        let single = SplitPlan {
            kind: SplitKind::KFold,
            splits: vec![plan.splits[0].clone()],
            seed: plan.seed,
        };
        let mut cfg = PipelineConfig::standard();
        cfg.stack.inner_folds = 2;
        cfg.stack.meta.rounds = 20;
        let out = run_pipeline_evaluation(&t, &single, &cfg).unwrap();
        assert_eq!(out.per_split.len(), 1);
        assert_eq!(out.per_split[0].metrics.accuracy, 1.0);
        let text = render_text_report(&out);
        assert!(text.contains("fold1"));
        assert!(text.contains("100.00"));
    }
}
