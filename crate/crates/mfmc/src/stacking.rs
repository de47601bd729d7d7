//! Two-level stacked generalization: out-of-fold base-classifier
//! probabilities become extra meta features, and a boosted-tree meta
//! classifier learns on top of them.
//!
//! Training rows are split into stratified inner folds; each base learner is
//! fitted K times, once per held-out fold, and its held-out predictions form
//! the out-of-fold (OOF) column the meta learner trains on. At prediction
//! time the K per-fold models vote by averaging their probabilities. With
//! `passthrough` on (the default) the original features are also fed to the
//! meta learner, which is what lets explanations attribute to them.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::classifiers::{KnnModel, QdaModel};
use crate::data::{FeatureTable, ZScoreParams};
use crate::error::{Error, Result};
use crate::eval::stratified_fold_assignment;
use crate::gbt::{GbtModel, GbtParams};
use crate::harmonize::ComBatModel;

/// Names of the meta probability columns, one per base learner.
pub const KNN_COLUMN: &str = "base:knn";
pub const QDA_COLUMN: &str = "base:qda";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnSpec {
    pub k: usize,
}

impl Default for KnnSpec {
    fn default() -> Self {
        KnnSpec { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QdaSpec {
    pub shrinkage: f64,
}

impl Default for QdaSpec {
    fn default() -> Self {
        QdaSpec { shrinkage: 0.1 }
    }
}

/// Stacking configuration. At least one base learner must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub inner_folds: usize,
    pub knn: Option<KnnSpec>,
    pub qda: Option<QdaSpec>,
    pub meta: GbtParams,
    /// Feed the original features to the meta learner alongside the OOF
    /// columns. Required for explanations over the original features.
    pub passthrough: bool,
    /// Seed for the stratified inner-fold shuffle.
    pub seed: u64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            inner_folds: 5,
            knn: Some(KnnSpec::default()),
            qda: Some(QdaSpec::default()),
            meta: GbtParams::default(),
            passthrough: true,
            seed: 0,
        }
    }
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_folds < 2 {
            return Err(Error::Invalid("inner_folds must be >= 2".into()));
        }
        if self.knn.is_none() && self.qda.is_none() {
            return Err(Error::Invalid("stacking needs at least one base learner".into()));
        }
        self.meta.validate()
    }

    fn base_column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.knn.is_some() {
            names.push(KNN_COLUMN.to_string());
        }
        if self.qda.is_some() {
            names.push(QDA_COLUMN.to_string());
        }
        names
    }
}

/// Column layout of the meta learner's input: original feature names first
/// (when passthrough is on), then one probability column per base learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLayout {
    pub column_names: Vec<String>,
    pub n_original: usize,
}

impl MetaLayout {
    pub fn width(&self) -> usize {
        self.column_names.len()
    }

    /// True for columns that carry base-learner probabilities.
    pub fn base_mask(&self) -> Vec<bool> {
        (0..self.width()).map(|j| j >= self.n_original).collect()
    }
}

/// Per-fold fitted base models for one learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModels<M> {
    pub models: Vec<M>,
}

/// Trained two-level stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    feature_names: Vec<String>,
    knn_folds: Option<FoldModels<KnnModel>>,
    qda_folds: Option<FoldModels<QdaModel>>,
    meta: GbtModel,
    layout: MetaLayout,
    config: StackConfig,
    /// Inner-fold id per training row, recorded for leakage audits.
    fold_assignment: Vec<usize>,
    /// Training row indices per fold model (complement of the held-out fold).
    fold_train_rows: Vec<Vec<usize>>,
    /// Optional preprocessing provenance; applied by [`StackModel::predict_table`].
    zscore: Option<ZScoreParams>,
    combat: Option<ComBatModel>,
}

/// Fits the two-level stack on a fully labeled table.
pub fn stack_fit(table: &FeatureTable, config: &StackConfig) -> Result<StackModel> {
    config.validate()?;
    let labels = table.binary_labels()?;
    let (n_mdd, n_nc) = table.class_counts();
    let k = config.inner_folds;
    if n_mdd < k || n_nc < k {
        return Err(Error::Invalid(format!(
            "class counts ({n_mdd} MDD, {n_nc} NC) are below the {k} inner folds; \
             provide more data or reduce inner_folds"
        )));
    }
    for base in config.base_column_names() {
        if table.feature_names().iter().any(|f| *f == base) {
            return Err(Error::Invalid(format!(
                "feature name '{base}' collides with a reserved meta column"
            )));
        }
    }

    let assignment = stratified_fold_assignment(&labels, k, config.seed)?;
    let x = table.values();
    let n = table.n_subjects();
    let d = table.n_features();

    let fold_train_rows: Vec<Vec<usize>> = (0..k)
        .map(|f| (0..n).filter(|&i| assignment[i] != f).collect())
        .collect();
    let fold_test_rows: Vec<Vec<usize>> = (0..k)
        .map(|f| (0..n).filter(|&i| assignment[i] == f).collect())
        .collect();

    let mut oof_columns: Vec<Vec<f64>> = Vec::new();

    let knn_folds = match &config.knn {
        None => None,
        Some(spec) => {
            let mut models = Vec::with_capacity(k);
            let mut oof = vec![0.0; n];
            for f in 0..k {
                let train = &fold_train_rows[f];
                let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
                let model = KnnModel::fit(x.select(Axis(0), train).view(), &y, spec.k)?;
                for &i in &fold_test_rows[f] {
                    oof[i] = model.predict_proba(x.row(i))?;
                }
                models.push(model);
            }
            oof_columns.push(oof);
            Some(FoldModels { models })
        }
    };
    let qda_folds = match &config.qda {
        None => None,
        Some(spec) => {
            let mut models = Vec::with_capacity(k);
            let mut oof = vec![0.0; n];
            for f in 0..k {
                let train = &fold_train_rows[f];
                let y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
                let model = QdaModel::fit(x.select(Axis(0), train).view(), &y, spec.shrinkage)?;
                for &i in &fold_test_rows[f] {
                    oof[i] = model.predict_proba(x.row(i))?;
                }
                models.push(model);
            }
            oof_columns.push(oof);
            Some(FoldModels { models })
        }
    };

    let n_original = if config.passthrough { d } else { 0 };
    let mut column_names: Vec<String> = if config.passthrough {
        table.feature_names().to_vec()
    } else {
        Vec::new()
    };
    column_names.extend(config.base_column_names());
    let layout = MetaLayout {
        column_names,
        n_original,
    };

    let width = layout.width();
    let mut meta_x = Array2::<f64>::zeros((n, width));
    if config.passthrough {
        meta_x.slice_mut(ndarray::s![.., ..d]).assign(&x);
    }
    for (b, oof) in oof_columns.iter().enumerate() {
        for i in 0..n {
            meta_x[(i, n_original + b)] = oof[i];
        }
    }

    let meta = GbtModel::fit(meta_x.view(), &labels, &config.meta)?;

    Ok(StackModel {
        feature_names: table.feature_names().to_vec(),
        knn_folds,
        qda_folds,
        meta,
        layout,
        config: config.clone(),
        fold_assignment: assignment,
        fold_train_rows,
        zscore: None,
        combat: None,
    })
}

impl StackModel {
    /// Attaches preprocessing provenance so [`predict_table`](Self::predict_table)
    /// can run end-to-end from raw tables.
    pub fn with_preprocessing(
        mut self,
        zscore: Option<ZScoreParams>,
        combat: Option<ComBatModel>,
    ) -> Self {
        self.zscore = zscore;
        self.combat = combat;
        self
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn layout(&self) -> &MetaLayout {
        &self.layout
    }

    pub fn meta(&self) -> &GbtModel {
        &self.meta
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn fold_assignment(&self) -> &[usize] {
        &self.fold_assignment
    }

    pub fn fold_train_rows(&self) -> &[Vec<usize>] {
        &self.fold_train_rows
    }

    pub fn knn_folds(&self) -> Option<&[KnnModel]> {
        self.knn_folds.as_ref().map(|f| f.models.as_slice())
    }

    pub fn qda_folds(&self) -> Option<&[QdaModel]> {
        self.qda_folds.as_ref().map(|f| f.models.as_slice())
    }

    pub fn zscore(&self) -> Option<&ZScoreParams> {
        self.zscore.as_ref()
    }

    pub fn combat(&self) -> Option<&ComBatModel> {
        self.combat.as_ref()
    }

    /// Assembles the meta input for one (already preprocessed) query: the
    /// original features (when passthrough is on) followed by each base
    /// learner's probability averaged over its per-fold models.
    pub fn meta_input(&self, q: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if q.len() != self.feature_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} features, the stack was trained on {}",
                q.len(),
                self.feature_names.len()
            )));
        }
        let mut input = Array1::<f64>::zeros(self.layout.width());
        let mut col = 0;
        if self.layout.n_original > 0 {
            for v in q.iter() {
                input[col] = *v;
                col += 1;
            }
        }
        if let Some(folds) = &self.knn_folds {
            input[col] = mean_fold_proba_knn(&folds.models, q)?;
            col += 1;
        }
        if let Some(folds) = &self.qda_folds {
            input[col] = mean_fold_proba_qda(&folds.models, q)?;
        }
        Ok(input)
    }

    /// P(MDD) for one preprocessed query vector of the original width.
    pub fn predict_proba(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        self.meta.predict_proba(self.meta_input(q)?.view())
    }

    /// Meta-model margin (log-odds) for one preprocessed query.
    pub fn predict_margin(&self, q: ArrayView1<'_, f64>) -> Result<f64> {
        self.meta.predict_margin(self.meta_input(q)?.view())
    }

    /// End-to-end prediction on a raw table: applies the attached ComBat and
    /// z-score parameters (if any), then predicts row by row.
    pub fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let mut t = table.clone();
        if let Some(cb) = &self.combat {
            t = cb.apply(&t)?;
        }
        if let Some(z) = &self.zscore {
            t = z.apply(&t)?;
        }
        (0..t.n_subjects()).map(|i| self.predict_proba(t.row(i))).collect()
    }
}

fn mean_fold_proba_knn(models: &[KnnModel], q: ArrayView1<'_, f64>) -> Result<f64> {
    let mut acc = 0.0;
    for m in models {
        acc += m.predict_proba(q)?;
    }
    Ok(acc / models.len() as f64)
}

fn mean_fold_proba_qda(models: &[QdaModel], q: ArrayView1<'_, f64>) -> Result<f64> {
    let mut acc = 0.0;
    for m in models {
        acc += m.predict_proba(q)?;
    }
    Ok(acc / models.len() as f64)
}

/// Hyperparameter grids, searched independently per learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub knn_k: Vec<usize>,
    pub qda_shrinkage: Vec<f64>,
    pub gbt_depth: Vec<usize>,
    pub gbt_rounds: Vec<usize>,
    pub gbt_learning_rate: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            knn_k: vec![3, 5, 7, 9, 11],
            qda_shrinkage: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            gbt_depth: vec![2, 3, 4],
            gbt_rounds: vec![50, 100, 200],
            gbt_learning_rate: vec![0.1, 0.3],
        }
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub description: String,
    /// Mean stratified-CV accuracy; degenerate points score negative infinity
    /// and are reported as `null` in JSON.
    pub score: Option<f64>,
}

/// Winning parameters per learner plus the full score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchOutcome {
    pub knn: KnnSpec,
    pub qda: QdaSpec,
    pub meta: GbtParams,
    pub knn_points: Vec<GridPoint>,
    pub qda_points: Vec<GridPoint>,
    pub meta_points: Vec<GridPoint>,
}

impl GridSearchOutcome {
    /// The winners folded into a stack configuration.
    pub fn to_stack_config(&self, base: &StackConfig) -> StackConfig {
        StackConfig {
            knn: base.knn.map(|_| self.knn),
            qda: base.qda.map(|_| self.qda),
            meta: self.meta.clone(),
            ..base.clone()
        }
    }
}

/// Mean stratified-CV accuracy of a single learner given by `fit_predict`,
/// which maps (train_x, train_y, test_x) to test probabilities.
fn cv_accuracy<F>(
    x: &ndarray::ArrayView2<'_, f64>,
    labels: &[bool],
    assignment: &[usize],
    folds: usize,
    fit_predict: F,
) -> Option<f64>
where
    F: Fn(ndarray::ArrayView2<'_, f64>, &[bool], ndarray::ArrayView2<'_, f64>) -> Result<Vec<f64>>,
{
    let n = labels.len();
    let mut correct = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        let train_y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let probs = match fit_predict(
            x.select(Axis(0), &train).view(),
            &train_y,
            x.select(Axis(0), &test).view(),
        ) {
            Ok(p) => p,
            Err(_) => return None, // degenerate grid point
        };
        for (j, &i) in test.iter().enumerate() {
            if (probs[j] > 0.5) == labels[i] {
                correct += 1;
            }
        }
    }
    Some(correct as f64 / n as f64)
}

/// Grid search per learner: each point is scored by mean stratified-CV
/// accuracy with a shared deterministic fold assignment; the best point wins
/// and exact ties keep the first-declared point. Degenerate points (e.g.
/// k larger than a training fold) score negative infinity instead of failing.
pub fn grid_search(
    table: &FeatureTable,
    grids: &GridSpec,
    folds: usize,
    seed: u64,
) -> Result<GridSearchOutcome> {
    if grids.knn_k.is_empty()
        || grids.qda_shrinkage.is_empty()
        || grids.gbt_depth.is_empty()
        || grids.gbt_rounds.is_empty()
        || grids.gbt_learning_rate.is_empty()
    {
        return Err(Error::Invalid("grid search requires non-empty grids".into()));
    }
    let labels = table.binary_labels()?;
    let assignment = stratified_fold_assignment(&labels, folds, seed)?;
    let x = table.values();

    let mut knn_points = Vec::new();
    let mut best_knn: Option<(f64, KnnSpec)> = None;
    for &k in &grids.knn_k {
        let score = cv_accuracy(&x, &labels, &assignment, folds, |tx, ty, qx| {
            let m = KnnModel::fit(tx, ty, k)?;
            m.predict_proba_batch(qx)
        });
        knn_points.push(GridPoint {
            description: format!("k={k}"),
            score,
        });
        if let Some(s) = score {
            if best_knn.as_ref().map_or(true, |(b, _)| s > *b) {
                best_knn = Some((s, KnnSpec { k }));
            }
        }
    }

    let mut qda_points = Vec::new();
    let mut best_qda: Option<(f64, QdaSpec)> = None;
    for &shrinkage in &grids.qda_shrinkage {
        let score = cv_accuracy(&x, &labels, &assignment, folds, |tx, ty, qx| {
            let m = QdaModel::fit(tx, ty, shrinkage)?;
            m.predict_proba_batch(qx)
        });
        qda_points.push(GridPoint {
            description: format!("shrinkage={shrinkage}"),
            score,
        });
        if let Some(s) = score {
            if best_qda.as_ref().map_or(true, |(b, _)| s > *b) {
                best_qda = Some((s, QdaSpec { shrinkage }));
            }
        }
    }

    let mut meta_points = Vec::new();
    let mut best_meta: Option<(f64, GbtParams)> = None;
    for &depth in &grids.gbt_depth {
        for &rounds in &grids.gbt_rounds {
            for &eta in &grids.gbt_learning_rate {
                let params = GbtParams {
                    max_depth: depth,
                    rounds,
                    learning_rate: eta,
                    ..GbtParams::default()
                };
                let score = cv_accuracy(&x, &labels, &assignment, folds, |tx, ty, qx| {
                    let m = GbtModel::fit(tx, ty, &params)?;
                    m.predict_proba_batch(qx)
                });
                meta_points.push(GridPoint {
                    description: format!("depth={depth},rounds={rounds},eta={eta}"),
                    score,
                });
                if let Some(s) = score {
                    if best_meta.as_ref().map_or(true, |(b, _)| s > *b) {
                        best_meta = Some((s, params.clone()));
                    }
                }
            }
        }
    }

    let knn = best_knn
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Invalid("every kNN grid point was degenerate".into()))?;
    let qda = best_qda
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Invalid("every QDA grid point was degenerate".into()))?;
    let meta = best_meta
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Invalid("every meta grid point was degenerate".into()))?;
    Ok(GridSearchOutcome {
        knn,
        qda,
        meta,
        knn_points,
        qda_points,
        meta_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_from(values: Array2<f64>, labels: Vec<Label>) -> FeatureTable {
        let n = values.nrows();
        FeatureTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["site1".into(); n],
            labels,
            (0..values.ncols()).map(|j| format!("f{j}")).collect(),
            values,
        )
        .unwrap()
    }

    fn clustered_table(n_per_class: usize, gap: f64, seed: u64) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * n_per_class;
        let mut values = Array2::<f64>::zeros((n, 4));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mdd = i % 2 == 0;
            labels.push(if mdd { Label::Mdd } else { Label::Nc });
            for j in 0..4 {
                values[(i, j)] =
                    rng.gen_range(-1.0..1.0) + if mdd && j < 2 { gap } else { 0.0 };
            }
        }
        table_from(values, labels)
    }

    #[test]
    fn constant_base_and_no_passthrough_degenerates_to_prior() {
        // constant features, balanced classes, k = per-fold training size:
        // every kNN vote is exactly 0.5, the meta sees one constant column
        let n = 20;
        let values = Array2::from_elem((n, 3), 2.0);
        let labels: Vec<Label> = (0..n)
            .map(|i| if i % 2 == 0 { Label::Mdd } else { Label::Nc })
            .collect();
        let t = table_from(values, labels);
        let cfg = StackConfig {
            inner_folds: 2,
            knn: Some(KnnSpec { k: 10 }),
            qda: None,
            passthrough: false,
            ..Default::default()
        };
        let m = stack_fit(&t, &cfg).unwrap();
        assert_eq!(m.meta().trees().len(), 0);
        assert_eq!(m.layout().width(), 1);
        let p = m
            .predict_proba(ndarray::Array1::from_elem(3, 2.0).view())
            .unwrap();
        assert_eq!(p, 0.5); // logit of the balanced prior is zero
    }

    #[test]
    fn meta_width_is_original_plus_base_columns() {
        let t = clustered_table(30, 2.0, 1);
        let cfg = StackConfig {
            inner_folds: 3,
            ..Default::default()
        };
        let m = stack_fit(&t, &cfg).unwrap();
        assert_eq!(m.layout().width(), 4 + 2);
        assert_eq!(m.layout().n_original, 4);
        assert_eq!(
            m.layout().column_names[4..],
            [KNN_COLUMN.to_string(), QDA_COLUMN.to_string()]
        );
        assert_eq!(m.layout().base_mask(), vec![false, false, false, false, true, true]);
    }

    #[test]
    fn meta_input_averages_fold_probabilities() {
        let t = clustered_table(20, 1.5, 3);
        let cfg = StackConfig {
            inner_folds: 2,
            ..Default::default()
        };
        let m = stack_fit(&t, &cfg).unwrap();
        let q = t.row(5);
        let input = m.meta_input(q).unwrap();
        // passthrough section mirrors the query
        for j in 0..4 {
            assert_eq!(input[j], q[j]);
        }
        let knn_mean: f64 = m
            .knn_folds()
            .unwrap()
            .iter()
            .map(|f| f.predict_proba(q).unwrap())
            .sum::<f64>()
            / 2.0;
        let qda_mean: f64 = m
            .qda_folds()
            .unwrap()
            .iter()
            .map(|f| f.predict_proba(q).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((input[4] - knn_mean).abs() < 1e-15);
        assert!((input[5] - qda_mean).abs() < 1e-15);
    }

    #[test]
    fn identical_fold_models_average_to_single_output() {
        // both folds see data from the same tight clusters, so their
        // average must equal each individual probability on far queries
        let t = clustered_table(40, 5.0, 9);
        let cfg = StackConfig {
            inner_folds: 2,
            qda: None,
            ..Default::default()
        };
        let m = stack_fit(&t, &cfg).unwrap();
        let q = ndarray::Array1::from_vec(vec![5.0, 5.0, 0.0, 0.0]);
        let per_fold: Vec<f64> = m
            .knn_folds()
            .unwrap()
            .iter()
            .map(|f| f.predict_proba(q.view()).unwrap())
            .collect();
        assert_eq!(per_fold[0], per_fold[1]);
        let input = m.meta_input(q.view()).unwrap();
        assert_eq!(input[4], per_fold[0]);
    }

    #[test]
    fn no_leakage_in_fold_bookkeeping() {
        let t = clustered_table(25, 1.0, 5);
        let cfg = StackConfig {
            inner_folds: 5,
            ..Default::default()
        };
        let m = stack_fit(&t, &cfg).unwrap();
        let assignment = m.fold_assignment();
        assert_eq!(assignment.len(), 50);
        for (f, train) in m.fold_train_rows().iter().enumerate() {
            for &row in train {
                assert_ne!(assignment[row], f, "row {row} leaked into fold {f}");
            }
            // and the train set is exactly the complement
            assert_eq!(
                train.len(),
                assignment.iter().filter(|&&a| a != f).count()
            );
        }
    }

    #[test]
    fn fold_shortage_is_rejected_with_guidance() {
        let t = clustered_table(3, 1.0, 2); // 3 per class
        let cfg = StackConfig {
            inner_folds: 5,
            ..Default::default()
        };
        let err = stack_fit(&t, &cfg).unwrap_err();
        assert!(err.to_string().contains("inner_folds"), "{err}");
    }

    #[test]
    fn serialization_round_trip_preserves_layout() {
        let t = clustered_table(20, 2.0, 7);
        let m = stack_fit(&t, &StackConfig::default()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: StackModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.layout(), m.layout());
        assert_eq!(back, m);
    }

    #[test]
    fn grid_single_point_returned() {
        let t = clustered_table(15, 2.0, 11);
        let grids = GridSpec {
            knn_k: vec![3],
            qda_shrinkage: vec![0.5],
            gbt_depth: vec![2],
            gbt_rounds: vec![10],
            gbt_learning_rate: vec![0.3],
        };
        let out = grid_search(&t, &grids, 3, 0).unwrap();
        assert_eq!(out.knn.k, 3);
        assert_eq!(out.qda.shrinkage, 0.5);
        assert_eq!(out.meta.max_depth, 2);
        assert_eq!(out.meta.rounds, 10);
    }

    #[test]
    fn grid_prefers_k3_on_noisy_duplicates() {
        // two tight 1-D clusters with one mislabeled point each: k=1 copies
        // the noise, k=3 votes it away
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            values.push(i as f64 * 0.1);
            labels.push(if i == 4 { Label::Mdd } else { Label::Nc });
        }
        for i in 0..10 {
            values.push(10.0 + i as f64 * 0.1);
            labels.push(if i == 4 { Label::Nc } else { Label::Mdd });
        }
        let t = table_from(
            Array2::from_shape_vec((20, 1), values).unwrap(),
            labels,
        );
        let grids = GridSpec {
            knn_k: vec![1, 3],
            qda_shrinkage: vec![0.1],
            gbt_depth: vec![2],
            gbt_rounds: vec![10],
            gbt_learning_rate: vec![0.3],
        };
        let out = grid_search(&t, &grids, 5, 42).unwrap();
        assert_eq!(out.knn.k, 3);
        let s1 = out.knn_points[0].score.unwrap();
        let s3 = out.knn_points[1].score.unwrap();
        assert!(s3 > s1, "expected k=3 ({s3}) to beat k=1 ({s1})");
    }

    #[test]
    fn grid_ties_keep_first_declared() {
        // perfectly separated clusters: every k scores 100%
        let t = clustered_table(20, 50.0, 13);
        let grids = GridSpec {
            knn_k: vec![3, 5, 7],
            qda_shrinkage: vec![0.1],
            gbt_depth: vec![2],
            gbt_rounds: vec![10],
            gbt_learning_rate: vec![0.3],
        };
        let out = grid_search(&t, &grids, 4, 0).unwrap();
        let scores: Vec<f64> = out.knn_points.iter().map(|p| p.score.unwrap()).collect();
        assert!(scores.iter().all(|&s| s == scores[0]));
        assert_eq!(out.knn.k, 3);
    }

    #[test]
    fn degenerate_grid_point_scores_none() {
        let t = clustered_table(5, 2.0, 17); // 10 rows; folds of ~3
        let grids = GridSpec {
            knn_k: vec![50, 3], // k=50 can never fit
            qda_shrinkage: vec![0.1],
            gbt_depth: vec![2],
            gbt_rounds: vec![5],
            gbt_learning_rate: vec![0.3],
        };
        let out = grid_search(&t, &grids, 2, 0).unwrap();
        assert!(out.knn_points[0].score.is_none());
        assert_eq!(out.knn.k, 3);
    }
}
