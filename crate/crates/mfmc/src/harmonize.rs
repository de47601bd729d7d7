//! Parametric empirical-Bayes ComBat harmonization of site (batch) effects.
//!
//! The model standardizes each feature by its grand mean and pooled
//! within-site standard deviation, estimates per-site location and scale on
//! the standardized data, shrinks both toward cross-site priors (normal for
//! location, inverse-gamma for scale) by iterating the posterior equations to
//! a fixed point, and adjusts the data with the shrunken parameters.
//!
//! Conventions, chosen so the degenerate cases are exact:
//! - all variances use the population (1/n) denominator, which makes a
//!   single-site fit an exact identity;
//! - prior hyperparameters are estimated per feature by method of moments
//!   across sites; when those moments are degenerate (one site, tied
//!   estimates) the feature falls back to the unshrunken estimates and is
//!   flagged;
//! - features with degenerate variance (overall, or within any single site)
//!   are passed through untouched and flagged.
//!
//! An optional hook preserves the diagnosis effect during harmonization by
//! including an MDD indicator in the location model. It is off by default:
//! with it on, label information flows into the preprocessing, which changes
//! the leakage semantics of downstream cross-validation.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{is_degenerate_variance, FeatureTable};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// Fixed-point tolerance on the maximum absolute parameter change.
const EB_TOL: f64 = 1e-6;
/// Iteration cap for the empirical-Bayes fixed point.
const EB_MAX_ITER: usize = 100;

/// Per-feature empirical-Bayes prior hyperparameters, estimated across sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbPriors {
    /// Prior mean of the site location effects.
    pub gamma_bar: Vec<f64>,
    /// Prior variance of the site location effects.
    pub tau2_bar: Vec<f64>,
    /// Inverse-gamma shape for the site scale effects.
    pub a_prior: Vec<f64>,
    /// Inverse-gamma scale for the site scale effects.
    pub b_prior: Vec<f64>,
}

/// Fitted ComBat model: standardization parameters plus per-site adjusted
/// location/scale effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComBatModel {
    feature_names: Vec<String>,
    /// Grand mean per feature (count-weighted mean of site means).
    grand_mean: Vec<f64>,
    /// Pooled within-site standard deviation per feature.
    pooled_std: Vec<f64>,
    /// Sites in order of first appearance at fit time.
    sites: Vec<String>,
    site_counts: Vec<usize>,
    /// EB-adjusted site location, sites x features.
    gamma_star: Array2<f64>,
    /// EB-adjusted site scale (standard-deviation units), sites x features.
    delta_star: Array2<f64>,
    priors: EbPriors,
    /// Features skipped entirely because their variance is degenerate.
    passthrough: Vec<bool>,
    /// Features where the EB moments were degenerate and raw estimates were kept.
    eb_fallback: Vec<bool>,
    /// Diagnosis effect per feature when the preserve-diagnosis hook is on.
    diagnosis_effect: Option<Vec<f64>>,
    /// Fixed-point iterations used (max over features).
    iterations: usize,
}

impl ComBatModel {
    /// Fits ComBat on `table`. Every site needs at least 2 subjects. With
    /// `preserve_diagnosis` the location model includes an MDD indicator whose
    /// effect is removed before site estimation and restored on adjustment;
    /// this requires every subject to be labeled.
    pub fn fit(table: &FeatureTable, preserve_diagnosis: bool) -> Result<Self> {
        let n = table.n_subjects();
        let d = table.n_features();
        let sites = table.unique_sites();
        if sites.is_empty() {
            return Err(Error::Invalid("cannot fit ComBat on an empty table".into()));
        }
        let site_rows: Vec<Vec<usize>> = sites.iter().map(|s| table.site_rows(s)).collect();
        for (s, rows) in sites.iter().zip(&site_rows) {
            if rows.len() < 2 {
                return Err(Error::Invalid(format!(
                    "site '{s}' has {} subject(s); ComBat needs at least 2 per site",
                    rows.len()
                )));
            }
        }
        let n_sites = sites.len();
        let site_counts: Vec<usize> = site_rows.iter().map(Vec::len).collect();
        let site_of_row = {
            let mut v = vec![0usize; n];
            for (si, rows) in site_rows.iter().enumerate() {
                for &r in rows {
                    v[r] = si;
                }
            }
            v
        };

        let mdd: Option<Vec<f64>> = if preserve_diagnosis {
            let labels = table.binary_labels()?;
            Some(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        } else {
            None
        };

        // Location model: per-feature site means, plus an optional shared
        // diagnosis coefficient fitted by least squares.
        let x = table.values();
        let mut site_means = Array2::<f64>::zeros((n_sites, d));
        let mut diag_effect = vec![0.0; d];
        match &mdd {
            None => {
                for (si, rows) in site_rows.iter().enumerate() {
                    for &r in rows {
                        for j in 0..d {
                            site_means[(si, j)] += x[(r, j)];
                        }
                    }
                    for j in 0..d {
                        site_means[(si, j)] /= rows.len() as f64;
                    }
                }
            }
            Some(mdd) => {
                // Normal equations for design [site indicators | mdd].
                let p = n_sites + 1;
                let mut xtx = Array2::<f64>::zeros((p, p));
                for (si, rows) in site_rows.iter().enumerate() {
                    xtx[(si, si)] = rows.len() as f64;
                    let m: f64 = rows.iter().map(|&r| mdd[r]).sum();
                    xtx[(si, n_sites)] = m;
                    xtx[(n_sites, si)] = m;
                }
                xtx[(n_sites, n_sites)] = mdd.iter().map(|v| v * v).sum();
                let ch = Cholesky::decompose(xtx.view()).map_err(|_| {
                    Error::Invalid(
                        "diagnosis indicator is collinear with sites; \
                         cannot preserve diagnosis in the location model"
                            .into(),
                    )
                })?;
                for j in 0..d {
                    let mut xty = Array1::<f64>::zeros(p);
                    for r in 0..n {
                        xty[site_of_row[r]] += x[(r, j)];
                        xty[n_sites] += mdd[r] * x[(r, j)];
                    }
                    let beta = ch.solve(xty.view());
                    for si in 0..n_sites {
                        site_means[(si, j)] = beta[si];
                    }
                    diag_effect[j] = beta[n_sites];
                }
            }
        }

        // Grand mean and pooled (within-site) population variance.
        let mut grand_mean = vec![0.0; d];
        for j in 0..d {
            for si in 0..n_sites {
                grand_mean[j] += site_counts[si] as f64 / n as f64 * site_means[(si, j)];
            }
        }
        let mut pooled_var = vec![0.0; d];
        for r in 0..n {
            let si = site_of_row[r];
            for j in 0..d {
                let fitted = site_means[(si, j)]
                    + mdd.as_ref().map_or(0.0, |m| diag_effect[j] * m[r]);
                let res = x[(r, j)] - fitted;
                pooled_var[j] += res * res;
            }
        }
        for v in &mut pooled_var {
            *v /= n as f64;
        }

        let mut passthrough: Vec<bool> = (0..d)
            .map(|j| is_degenerate_variance(pooled_var[j], grand_mean[j]))
            .collect();
        let pooled_std: Vec<f64> = pooled_var.iter().map(|v| v.sqrt()).collect();

        // Standardize; z keeps the site deviations, diagnosis effect removed.
        let mut z = Array2::<f64>::zeros((n, d));
        for r in 0..n {
            for j in 0..d {
                if passthrough[j] {
                    continue;
                }
                let centered = x[(r, j)]
                    - grand_mean[j]
                    - mdd.as_ref().map_or(0.0, |m| diag_effect[j] * m[r]);
                z[(r, j)] = centered / pooled_std[j];
            }
        }

        // Raw per-site estimates on the standardized scale.
        let mut gamma_hat = Array2::<f64>::zeros((n_sites, d));
        let mut delta2_hat = Array2::<f64>::zeros((n_sites, d));
        for (si, rows) in site_rows.iter().enumerate() {
            let ni = rows.len() as f64;
            for j in 0..d {
                let mean: f64 = rows.iter().map(|&r| z[(r, j)]).sum::<f64>() / ni;
                let var: f64 = rows
                    .iter()
                    .map(|&r| (z[(r, j)] - mean) * (z[(r, j)] - mean))
                    .sum::<f64>()
                    / ni;
                gamma_hat[(si, j)] = mean;
                delta2_hat[(si, j)] = var;
                // A feature constant inside one site has no estimable scale
                // there; pass the whole feature through.
                if !passthrough[j] && is_degenerate_variance(var, mean) {
                    passthrough[j] = true;
                }
            }
        }

        // Method-of-moments hyperpriors per feature, across sites.
        let mut priors = EbPriors {
            gamma_bar: vec![0.0; d],
            tau2_bar: vec![0.0; d],
            a_prior: vec![0.0; d],
            b_prior: vec![0.0; d],
        };
        let mut eb_fallback = vec![false; d];
        for j in 0..d {
            let g: Vec<f64> = (0..n_sites).map(|si| gamma_hat[(si, j)]).collect();
            let d2: Vec<f64> = (0..n_sites).map(|si| delta2_hat[(si, j)]).collect();
            let gm = g.iter().sum::<f64>() / n_sites as f64;
            let m = d2.iter().sum::<f64>() / n_sites as f64;
            let (tau2, s2) = if n_sites > 1 {
                (
                    g.iter().map(|v| (v - gm) * (v - gm)).sum::<f64>() / (n_sites - 1) as f64,
                    d2.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_sites - 1) as f64,
                )
            } else {
                (0.0, 0.0)
            };
            priors.gamma_bar[j] = gm;
            priors.tau2_bar[j] = tau2;
            if tau2 > 0.0 && s2 > 0.0 {
                let a = (2.0 * s2 + m * m) / s2;
                let b = (m * s2 + m * m * m) / s2;
                if a > 1.0 && b > 0.0 {
                    priors.a_prior[j] = a;
                    priors.b_prior[j] = b;
                } else {
                    eb_fallback[j] = true;
                }
            } else {
                eb_fallback[j] = true;
            }
        }

        // Empirical-Bayes fixed point per feature.
        let mut gamma_star = gamma_hat.clone();
        let mut delta2_star = delta2_hat.clone();
        let mut iterations = 0usize;
        for j in 0..d {
            if passthrough[j] || eb_fallback[j] {
                continue;
            }
            let mut iters = 0usize;
            loop {
                iters += 1;
                let mut change: f64 = 0.0;
                for (si, rows) in site_rows.iter().enumerate() {
                    let ni = rows.len() as f64;
                    let g_new = (ni * priors.tau2_bar[j] * gamma_hat[(si, j)]
                        + delta2_star[(si, j)] * priors.gamma_bar[j])
                        / (ni * priors.tau2_bar[j] + delta2_star[(si, j)]);
                    let ss: f64 = rows
                        .iter()
                        .map(|&r| (z[(r, j)] - g_new) * (z[(r, j)] - g_new))
                        .sum();
                    let d2_new =
                        (priors.b_prior[j] + 0.5 * ss) / (ni / 2.0 + priors.a_prior[j] - 1.0);
                    change = change
                        .max((g_new - gamma_star[(si, j)]).abs())
                        .max((d2_new - delta2_star[(si, j)]).abs());
                    gamma_star[(si, j)] = g_new;
                    delta2_star[(si, j)] = d2_new;
                }
                if change <= EB_TOL || iters >= EB_MAX_ITER {
                    break;
                }
            }
            iterations = iterations.max(iters);
        }

        // Passthrough features carry neutral parameters.
        let mut delta_star = Array2::<f64>::zeros((n_sites, d));
        for j in 0..d {
            for si in 0..n_sites {
                if passthrough[j] {
                    gamma_star[(si, j)] = 0.0;
                    delta_star[(si, j)] = 1.0;
                } else {
                    let d2 = delta2_star[(si, j)];
                    if d2 <= 0.0 || !d2.is_finite() {
                        return Err(Error::Numerical(format!(
                            "non-positive adjusted scale for site '{}', feature '{}'",
                            sites[si],
                            table.feature_names()[j]
                        )));
                    }
                    delta_star[(si, j)] = d2.sqrt();
                }
            }
        }

        Ok(ComBatModel {
            feature_names: table.feature_names().to_vec(),
            grand_mean,
            pooled_std,
            sites,
            site_counts,
            gamma_star,
            delta_star,
            priors,
            passthrough,
            eb_fallback,
            diagnosis_effect: mdd.map(|_| diag_effect),
            iterations,
        })
    }

    /// Adjusts `table` with the fitted parameters:
    /// `x* = pooled_std * (z - gamma*) / delta* + grand_mean` per feature,
    /// where `z` is the standardized value. Every site in `table` must have
    /// been seen at fit time; there is no silent passthrough for new sites.
    pub fn apply(&self, table: &FeatureTable) -> Result<FeatureTable> {
        if table.feature_names() != self.feature_names.as_slice() {
            return Err(Error::DimensionMismatch(
                "feature names do not match the fitted ComBat model".into(),
            ));
        }
        let mdd: Option<Vec<f64>> = match &self.diagnosis_effect {
            Some(_) => {
                let labels = table.binary_labels()?;
                Some(labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            }
            None => None,
        };
        let n = table.n_subjects();
        let d = table.n_features();
        let x = table.values();
        let mut out = x.to_owned();
        for r in 0..n {
            let site = &table.site_ids()[r];
            let si = self
                .sites
                .iter()
                .position(|s| s == site)
                .ok_or_else(|| Error::UnseenSite(site.clone()))?;
            for j in 0..d {
                if self.passthrough[j] {
                    continue;
                }
                let cov = match (&self.diagnosis_effect, &mdd) {
                    (Some(beta), Some(m)) => beta[j] * m[r],
                    _ => 0.0,
                };
                let z = (x[(r, j)] - self.grand_mean[j] - cov) / self.pooled_std[j];
                out[(r, j)] = self.pooled_std[j] * (z - self.gamma_star[(si, j)])
                    / self.delta_star[(si, j)]
                    + self.grand_mean[j]
                    + cov;
            }
        }
        table.with_values(out)
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn sites(&self) -> &[String] {
        &self.sites
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn passthrough_flags(&self) -> &[bool] {
        &self.passthrough
    }

    pub fn eb_fallback_flags(&self) -> &[bool] {
        &self.eb_fallback
    }

    pub fn gamma_star(&self) -> &Array2<f64> {
        &self.gamma_star
    }

    pub fn delta_star(&self) -> &Array2<f64> {
        &self.delta_star
    }

    pub fn grand_mean(&self) -> &[f64] {
        &self.grand_mean
    }

    pub fn pooled_std(&self) -> &[f64] {
        &self.pooled_std
    }

    pub fn priors(&self) -> &EbPriors {
        &self.priors
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use ndarray::array;

    fn two_site_table() -> FeatureTable {
        // Same fixed table as the independent oracle run: site B shifted on
        // f0/f1, spread out on f2.
        let values = array![
            [1.00, 10.0, -2.0],
            [2.00, 12.0, -1.0],
            [0.50, 11.0, -3.0],
            [1.50, 9.0, -2.5],
            [3.00, 14.0, 0.0],
            [4.00, 16.0, 2.0],
            [3.50, 15.0, -4.0],
            [2.50, 13.0, 4.0],
            [3.25, 17.0, 1.0],
        ];
        FeatureTable::new(
            (0..9).map(|i| format!("s{i}")).collect(),
            ["A", "A", "A", "A", "B", "B", "B", "B", "B"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec![Label::Mdd; 9],
            vec!["f0".into(), "f1".into(), "f2".into()],
            values,
        )
        .unwrap()
    }

    #[test]
    fn matches_independent_reference_run() {
        // Expected values frozen from an independent implementation of the
        // same standardize / moment-match / fixed-point equations.
        let m = ComBatModel::fit(&two_site_table(), false).unwrap();
        let want_alpha = [2.3611111111111112, 13.0, -0.61111111111111116];
        let want_sigma = [0.52704627669472992, 1.2909944487358056, 2.0381772902931345];
        for j in 0..3 {
            assert!((m.grand_mean()[j] - want_alpha[j]).abs() < 1e-9);
            assert!((m.pooled_std()[j] - want_sigma[j]).abs() < 1e-9);
        }
        let want_gamma_star = [
            [-2.0434164328524513, -1.8716266990691934, -0.66185576624023457],
            [1.6349556624252914, 1.4926092632305288, 0.43514284064399994],
        ];
        let want_delta2_star: [[f64; 3]; 2] = [
            [1.0178652864883766, 0.93935636203961415, 0.49228479352423743],
            [1.0062591919381128, 1.0192632719428787, 1.3954100685686843],
        ];
        for si in 0..2 {
            for j in 0..3 {
                assert!(
                    (m.gamma_star()[(si, j)] - want_gamma_star[si][j]).abs() < 1e-9,
                    "gamma_star[{si}][{j}]"
                );
                assert!(
                    (m.delta_star()[(si, j)] - want_delta2_star[si][j].sqrt()).abs() < 1e-9,
                    "delta_star[{si}][{j}]"
                );
            }
        }
        assert_eq!(m.iterations(), 5);
        assert_eq!(m.eb_fallback_flags(), &[false, false, false]);

        let adjusted = m.apply(&two_site_table()).unwrap();
        let want_rows = [
            (0usize, [2.0794795997621107, 12.397711595074782, -0.66799221817668963]),
            (4usize, [2.1389967494244777, 12.08185082336983, -0.84457681534686824]),
            (8usize, [2.3882180042678827, 15.0533667829996, 0.0019662839340506277]),
        ];
        for (r, want) in want_rows {
            for j in 0..3 {
                assert!(
                    (adjusted.values()[(r, j)] - want[j]).abs() < 1e-9,
                    "adjusted[{r}][{j}]"
                );
            }
        }
    }

    #[test]
    fn single_site_fit_is_identity() {
        let t = FeatureTable::new(
            (0..5).map(|i| format!("s{i}")).collect(),
            vec!["only".into(); 5],
            vec![Label::Nc; 5],
            vec!["f0".into(), "f1".into()],
            array![[1.0, 5.0], [2.0, 4.0], [3.0, 3.0], [4.0, 2.0], [5.0, 1.0]],
        )
        .unwrap();
        let m = ComBatModel::fit(&t, false).unwrap();
        assert!(m.eb_fallback_flags().iter().all(|&f| f));
        for j in 0..2 {
            assert!(m.gamma_star()[(0, j)].abs() < 1e-12);
            assert!((m.delta_star()[(0, j)] - 1.0).abs() < 1e-12);
        }
        let out = m.apply(&t).unwrap();
        for (a, b) in out.values().iter().zip(t.values().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_feature_passes_through_flagged() {
        let mut values = two_site_table().values().to_owned();
        for r in 0..9 {
            values[(r, 1)] = 42.0;
        }
        let t = two_site_table().with_values(values).unwrap();
        let m = ComBatModel::fit(&t, false).unwrap();
        assert_eq!(m.passthrough_flags(), &[false, true, false]);
        let out = m.apply(&t).unwrap();
        for r in 0..9 {
            assert_eq!(out.values()[(r, 1)], 42.0);
        }
    }

    #[test]
    fn small_site_rejected() {
        let t = FeatureTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["s1".into(), "s1".into(), "s2".into()],
            vec![Label::Mdd; 3],
            vec!["f".into()],
            array![[1.0], [2.0], [3.0]],
        )
        .unwrap();
        let err = ComBatModel::fit(&t, false).unwrap_err();
        assert!(err.to_string().contains("s2"), "{err}");
    }

    #[test]
    fn unseen_site_rejected_on_apply() {
        let m = ComBatModel::fit(&two_site_table(), false).unwrap();
        let stranger = FeatureTable::new(
            vec!["x".into()],
            vec!["C".into()],
            vec![Label::Mdd],
            vec!["f0".into(), "f1".into(), "f2".into()],
            array![[1.0, 2.0, 3.0]],
        )
        .unwrap();
        assert!(matches!(m.apply(&stranger), Err(Error::UnseenSite(s)) if s == "C"));
    }

    #[test]
    fn apply_preserves_metadata_and_shape() {
        let t = two_site_table();
        let m = ComBatModel::fit(&t, false).unwrap();
        let out = m.apply(&t).unwrap();
        assert_eq!(out.subject_ids(), t.subject_ids());
        assert_eq!(out.site_ids(), t.site_ids());
        assert_eq!(out.labels(), t.labels());
        assert_eq!(out.feature_names(), t.feature_names());
    }

    #[test]
    fn deterministic_fit() {
        let a = ComBatModel::fit(&two_site_table(), false).unwrap();
        let b = ComBatModel::fit(&two_site_table(), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn preserve_diagnosis_keeps_class_gap() {
        // Two sites; diagnosis effect +2 on f0; site B shifted +5.
        let mut ids = Vec::new();
        let mut sites = Vec::new();
        let mut labels = Vec::new();
        let mut rows = Vec::new();
        let mut k = 0;
        for (site, shift) in [("A", 0.0), ("B", 5.0)] {
            for i in 0..20 {
                let mdd = i % 2 == 0;
                ids.push(format!("s{k}"));
                k += 1;
                sites.push(site.to_string());
                labels.push(if mdd { Label::Mdd } else { Label::Nc });
                let noise = ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5;
                rows.push(vec![shift + if mdd { 2.0 } else { 0.0 } + noise]);
            }
        }
        let values = Array2::from_shape_vec(
            (rows.len(), 1),
            rows.into_iter().flatten().collect(),
        )
        .unwrap();
        let t = FeatureTable::new(ids, sites, labels, vec!["f0".into()], values).unwrap();

        let m = ComBatModel::fit(&t, true).unwrap();
        let out = m.apply(&t).unwrap();
        let (mut mdd_sum, mut nc_sum) = (0.0, 0.0);
        for (i, l) in t.labels().iter().enumerate() {
            match l {
                Label::Mdd => mdd_sum += out.values()[(i, 0)],
                Label::Nc => nc_sum += out.values()[(i, 0)],
                Label::Unknown => unreachable!(),
            }
        }
        let gap = mdd_sum / 20.0 - nc_sum / 20.0;
        assert!((gap - 2.0).abs() < 0.2, "diagnosis gap {gap} not preserved");
        // while the site gap is removed
        let a_mean: f64 = (0..20).map(|i| out.values()[(i, 0)]).sum::<f64>() / 20.0;
        let b_mean: f64 = (20..40).map(|i| out.values()[(i, 0)]).sum::<f64>() / 20.0;
        assert!((a_mean - b_mean).abs() < 0.2, "site gap {} remains", a_mean - b_mean);
    }
}
