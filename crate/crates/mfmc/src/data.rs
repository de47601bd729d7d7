//! Tabular feature data: ingestion, validation, derivation, concatenation,
//! and z-score normalization.
//!
//! The central type is [`FeatureTable`]: subjects x named features plus site
//! and diagnosis metadata. Tables are immutable after construction and every
//! constructor enforces the type invariants (consistent lengths, distinct
//! ids/names, finite values), so downstream code can rely on them.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary diagnosis label. `Mdd` is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Mdd,
    Nc,
    Unknown,
}

impl Label {
    /// Parses a CSV label token: `MDD`/`NC` case-insensitively, empty means
    /// unknown. Anything else is rejected by the loader.
    pub fn parse(token: &str) -> Option<Label> {
        let t = token.trim();
        if t.is_empty() {
            Some(Label::Unknown)
        } else if t.eq_ignore_ascii_case("mdd") {
            Some(Label::Mdd)
        } else if t.eq_ignore_ascii_case("nc") {
            Some(Label::Nc)
        } else {
            None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Mdd => "MDD",
            Label::Nc => "NC",
            Label::Unknown => "",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Formats a float with 9 significant digits, the convention for every CSV
/// this crate writes. Output parses back with `str::parse::<f64>()`.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.8e}");
    let (_, exp) = sci.split_once('e').expect("exponent in {:.8e} output");
    let exp: i32 = exp.parse().expect("numeric exponent");
    if !(-4..=8).contains(&exp) {
        let (mant, _) = sci.split_once('e').unwrap();
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{exp}")
    } else {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

/// A variance is treated as zero when it is this far below the scale of the
/// mean; guards against the roundoff residue a constant column leaves behind.
pub(crate) fn is_degenerate_variance(var: f64, mean: f64) -> bool {
    var <= 1e-24 * (1.0 + mean * mean)
}

/// Subjects x features with site and diagnosis metadata — the universal
/// interchange object of the pipeline.
///
/// Invariants (enforced at construction):
/// - one subject id / site id / label per row of `values`;
/// - one feature name per column, names pairwise distinct;
/// - subject ids pairwise distinct;
/// - every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    subject_ids: Vec<String>,
    site_ids: Vec<String>,
    labels: Vec<Label>,
    feature_names: Vec<String>,
    values: Array2<f64>,
}

impl FeatureTable {
    pub fn new(
        subject_ids: Vec<String>,
        site_ids: Vec<String>,
        labels: Vec<Label>,
        feature_names: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        if site_ids.len() != n || labels.len() != n || values.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "rows disagree: {} subjects, {} sites, {} labels, {} value rows",
                n,
                site_ids.len(),
                labels.len(),
                values.nrows()
            )));
        }
        if values.ncols() != feature_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names but {} value columns",
                feature_names.len(),
                values.ncols()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &subject_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate subject id '{id}'")));
            }
        }
        let mut seen = HashSet::with_capacity(feature_names.len());
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate feature name '{name}'")));
            }
        }
        if let Some(((r, c), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value {v} for subject '{}', feature '{}'",
                subject_ids[r], feature_names[c]
            )));
        }
        Ok(FeatureTable {
            subject_ids,
            site_ids,
            labels,
            feature_names,
            values,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Same metadata, new value matrix. The shape must match.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        FeatureTable::new(
            self.subject_ids.clone(),
            self.site_ids.clone(),
            self.labels.clone(),
            self.feature_names.clone(),
            values,
        )
    }

    /// Distinct site labels in order of first appearance.
    pub fn unique_sites(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.site_ids {
            if seen.insert(s.as_str()) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Row indices of the given site, in table order.
    pub fn site_rows(&self, site: &str) -> Vec<usize> {
        (0..self.n_subjects())
            .filter(|&i| self.site_ids[i] == site)
            .collect()
    }

    /// Row subset in the order given by `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        for &r in rows {
            if r >= self.n_subjects() {
                return Err(Error::Invalid(format!(
                    "row index {r} out of range (table has {} subjects)",
                    self.n_subjects()
                )));
            }
        }
        FeatureTable::new(
            rows.iter().map(|&r| self.subject_ids[r].clone()).collect(),
            rows.iter().map(|&r| self.site_ids[r].clone()).collect(),
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.feature_names.clone(),
            self.values.select(Axis(0), rows),
        )
    }

    /// Column subset in the order given by `cols`.
    pub fn select_features(&self, cols: &[usize]) -> Result<Self> {
        for &c in cols {
            if c >= self.n_features() {
                return Err(Error::Invalid(format!(
                    "feature index {c} out of range (table has {} features)",
                    self.n_features()
                )));
            }
        }
        FeatureTable::new(
            self.subject_ids.clone(),
            self.site_ids.clone(),
            self.labels.clone(),
            cols.iter()
                .map(|&c| self.feature_names[c].clone())
                .collect(),
            self.values.select(Axis(1), cols),
        )
    }

    /// Column subset by name; errors on an unknown name.
    pub fn select_features_by_name(&self, names: &[String]) -> Result<Self> {
        let cols = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .ok_or_else(|| Error::Invalid(format!("unknown feature '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_features(&cols)
    }

    /// Labels as MDD = true / NC = false; errors if any subject is unlabeled.
    pub fn binary_labels(&self) -> Result<Vec<bool>> {
        self.labels
            .iter()
            .zip(&self.subject_ids)
            .map(|(l, id)| match l {
                Label::Mdd => Ok(true),
                Label::Nc => Ok(false),
                Label::Unknown => Err(Error::Invalid(format!(
                    "subject '{id}' has no diagnosis label"
                ))),
            })
            .collect()
    }

    /// (MDD count, NC count); unknown labels are counted in neither.
    pub fn class_counts(&self) -> (usize, usize) {
        let mdd = self.labels.iter().filter(|l| **l == Label::Mdd).count();
        let nc = self.labels.iter().filter(|l| **l == Label::Nc).count();
        (mdd, nc)
    }

    /// Loads the standard feature CSV: header
    /// `subject_id,site,label,<feature...>`, label in {MDD, NC} (any case) or
    /// empty for unknown. Subject order is preserved from the file.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Invalid(format!("cannot open {display}: {e}")))?;

        let headers = reader
            .headers()
            .map_err(|e| Error::Invalid(format!("cannot read header of {display}: {e}")))?
            .clone();
        if headers.len() < 3
            || headers.get(0) != Some("subject_id")
            || headers.get(1) != Some("site")
            || headers.get(2) != Some("label")
        {
            return Err(Error::Parse {
                path: display,
                row: 1,
                col: 1,
                msg: "header must start with subject_id,site,label".to_string(),
            });
        }
        let feature_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
        let d = feature_names.len();

        let mut subject_ids = Vec::new();
        let mut site_ids = Vec::new();
        let mut labels = Vec::new();
        let mut flat: Vec<f64> = Vec::new();

        for (rec_idx, record) in reader.records().enumerate() {
            let row = rec_idx + 2; // 1-based, header is row 1
            let record =
                record.map_err(|e| Error::Invalid(format!("{display} row {row}: {e}")))?;
            if record.len() != d + 3 {
                return Err(Error::Parse {
                    path: display,
                    row,
                    col: record.len(),
                    msg: format!("expected {} fields, found {}", d + 3, record.len()),
                });
            }
            let id = record.get(0).unwrap();
            if id.is_empty() {
                return Err(Error::Parse {
                    path: display,
                    row,
                    col: 1,
                    msg: "empty subject_id".to_string(),
                });
            }
            subject_ids.push(id.to_string());
            site_ids.push(record.get(1).unwrap().to_string());
            let label_tok = record.get(2).unwrap();
            labels.push(Label::parse(label_tok).ok_or_else(|| Error::Parse {
                path: display.clone(),
                row,
                col: 3,
                msg: format!("unknown label token '{label_tok}' (expected MDD, NC, or empty)"),
            })?);
            for (j, cell) in record.iter().skip(3).enumerate() {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    row,
                    col: j + 4,
                    msg: if cell.is_empty() {
                        "missing feature value".to_string()
                    } else {
                        format!("non-numeric feature value '{cell}'")
                    },
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        path: display.clone(),
                        row,
                        col: j + 4,
                        msg: format!("non-finite feature value '{cell}'"),
                    });
                }
                flat.push(v);
            }
        }

        let n = subject_ids.len();
        let values = Array2::from_shape_vec((n, d), flat)
            .expect("row-major construction matches counted rows");
        FeatureTable::new(subject_ids, site_ids, labels, feature_names, values)
    }

    /// Writes the standard feature CSV with floats at 9 significant digits.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        write!(out, "subject_id,site,label").map_err(|e| Error::io(path, e))?;
        for name in &self.feature_names {
            write!(out, ",{name}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(out).map_err(|e| Error::io(path, e))?;
        for i in 0..self.n_subjects() {
            write!(
                out,
                "{},{},{}",
                self.subject_ids[i], self.site_ids[i], self.labels[i]
            )
            .map_err(|e| Error::io(path, e))?;
            for v in self.values.row(i) {
                write!(out, ",{}", fmt_sig9(*v)).map_err(|e| Error::io(path, e))?;
            }
            writeln!(out).map_err(|e| Error::io(path, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Fisher's r-to-z transform: `z = atanh(r)`. Domain error outside (-1, 1).
pub fn fisher_r_to_z(r: f64) -> Result<f64> {
    if !(r.is_finite() && r.abs() < 1.0) {
        return Err(Error::Invalid(format!(
            "fisher_r_to_z requires |r| < 1, got {r}"
        )));
    }
    Ok(r.atanh())
}

/// Per-subject Fisher-z functional connectivity matrix over `n` regions.
///
/// Invariants: symmetric within 1e-12, diagonal exactly zero, all entries
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    subject_id: String,
    z: Array2<f64>,
}

impl ConnectivityMatrix {
    pub fn new(subject_id: impl Into<String>, z: Array2<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        let n = z.nrows();
        if z.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "connectivity matrix for '{subject_id}' is {}x{}, expected square",
                n,
                z.ncols()
            )));
        }
        for i in 0..n {
            if z[(i, i)] != 0.0 {
                return Err(Error::Invalid(format!(
                    "connectivity matrix for '{subject_id}' has nonzero diagonal at {i}"
                )));
            }
            for j in 0..n {
                let v = z[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite connectivity value at ({i},{j}) for '{subject_id}'"
                    )));
                }
                if (v - z[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Invalid(format!(
                        "connectivity matrix for '{subject_id}' is asymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(ConnectivityMatrix { subject_id, z })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn size(&self) -> usize {
        self.z.nrows()
    }

    pub fn z_values(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    /// Weighted positive-edge degree: `DC_i = sum_{j != i} z_ij * [z_ij > threshold]`.
    /// The threshold must be >= 0.
    pub fn degree_centrality(&self, threshold: f64) -> Result<Array1<f64>> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Invalid(format!(
                "degree centrality threshold must be >= 0, got {threshold}"
            )));
        }
        let n = self.size();
        let mut dc = Array1::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let v = self.z[(i, j)];
                if j != i && v > threshold {
                    acc += v;
                }
            }
            dc[i] = acc;
        }
        Ok(dc)
    }

    /// Reads a headerless n x n CSV named `<subject_id>.fc.csv`; the subject
    /// id is taken from the file name.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let name = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let subject_id = name.strip_suffix(".fc.csv").ok_or_else(|| {
            Error::Invalid(format!(
                "connectivity file '{display}' must be named <subject_id>.fc.csv"
            ))
        })?;

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Invalid(format!("cannot open {display}: {e}")))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (rec_idx, record) in reader.records().enumerate() {
            let row = rec_idx + 1;
            let record =
                record.map_err(|e| Error::Invalid(format!("{display} row {row}: {e}")))?;
            let mut vals = Vec::with_capacity(record.len());
            for (j, cell) in record.iter().enumerate() {
                vals.push(cell.parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    row,
                    col: j + 1,
                    msg: format!("non-numeric connectivity value '{cell}'"),
                })?);
            }
            rows.push(vals);
        }
        let n = rows.len();
        let mut z = Array2::zeros((n, n));
        for (i, vals) in rows.into_iter().enumerate() {
            if vals.len() != n {
                return Err(Error::Parse {
                    path: display,
                    row: i + 1,
                    col: vals.len(),
                    msg: format!("expected {n} values per row, found {}", vals.len()),
                });
            }
            for (j, v) in vals.into_iter().enumerate() {
                z[(i, j)] = v;
            }
        }
        ConnectivityMatrix::new(subject_id, z)
    }

    pub fn save_csv(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf> {
        let path = dir.as_ref().join(format!("{}.fc.csv", self.subject_id));
        let mut out = Vec::new();
        for i in 0..self.size() {
            let line = self
                .z
                .row(i)
                .iter()
                .map(|v| fmt_sig9(*v))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Column-wise concatenation of tables over the same subject set.
///
/// Subjects are aligned by id to the first part's order; site and label
/// metadata must agree part-by-part; feature names must be globally distinct.
pub fn concatenate_features(parts: &[FeatureTable]) -> Result<FeatureTable> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concatenate_features needs at least one part".into()))?;

    let base_ids: HashSet<&str> = first.subject_ids.iter().map(String::as_str).collect();
    for (p, part) in parts.iter().enumerate().skip(1) {
        let ids: HashSet<&str> = part.subject_ids.iter().map(String::as_str).collect();
        if ids != base_ids {
            let only_first: BTreeSet<&&str> = base_ids.difference(&ids).collect();
            let only_part: BTreeSet<&&str> = ids.difference(&base_ids).collect();
            return Err(Error::Invalid(format!(
                "part {p} subject set differs from part 0: only in part 0: {only_first:?}; only in part {p}: {only_part:?}"
            )));
        }
    }

    let mut feature_names = Vec::new();
    let mut seen = HashSet::new();
    for part in parts {
        for name in &part.feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate feature name '{name}' across parts"
                )));
            }
            feature_names.push(name.clone());
        }
    }

    let n = first.n_subjects();
    let d: usize = parts.iter().map(|p| p.n_features()).sum();
    let mut values = Array2::zeros((n, d));
    let mut col0 = 0usize;
    for (p, part) in parts.iter().enumerate() {
        let index: HashMap<&str, usize> = part
            .subject_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        for (row, id) in first.subject_ids.iter().enumerate() {
            let src = index[id.as_str()];
            if part.site_ids[src] != first.site_ids[row] {
                return Err(Error::Invalid(format!(
                    "subject '{id}' has site '{}' in part 0 but '{}' in part {p}",
                    first.site_ids[row], part.site_ids[src]
                )));
            }
            if part.labels[src] != first.labels[row] {
                return Err(Error::Invalid(format!(
                    "subject '{id}' has label '{}' in part 0 but '{}' in part {p}",
                    first.labels[row], part.labels[src]
                )));
            }
            values
                .slice_mut(ndarray::s![row, col0..col0 + part.n_features()])
                .assign(&part.values.row(src));
        }
        col0 += part.n_features();
    }

    FeatureTable::new(
        first.subject_ids.clone(),
        first.site_ids.clone(),
        first.labels.clone(),
        feature_names,
        values,
    )
}

/// Per-feature mean and standard deviation fitted on a reference set.
///
/// Standard deviations use the population (1/n) convention. Columns with zero
/// variance are flagged and passed through unchanged by [`ZScoreParams::apply`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreParams {
    feature_names: Vec<String>,
    means: Vec<f64>,
    stds: Vec<f64>,
    constant: Vec<bool>,
}

impl ZScoreParams {
    pub fn fit(table: &FeatureTable) -> Result<Self> {
        if table.n_subjects() == 0 {
            return Err(Error::Invalid("cannot fit z-score on an empty table".into()));
        }
        let n = table.n_subjects() as f64;
        let mut means = Vec::with_capacity(table.n_features());
        let mut stds = Vec::with_capacity(table.n_features());
        let mut constant = Vec::with_capacity(table.n_features());
        for j in 0..table.n_features() {
            let col = table.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let degenerate = is_degenerate_variance(var, mean);
            means.push(mean);
            stds.push(if degenerate { 1.0 } else { var.sqrt() });
            constant.push(degenerate);
        }
        Ok(ZScoreParams {
            feature_names: table.feature_names().to_vec(),
            means,
            stds,
            constant,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// True for features that had zero variance on the fit set.
    pub fn constant_flags(&self) -> &[bool] {
        &self.constant
    }

    /// `(x - mean) / std` per feature; flagged constant features pass through
    /// unchanged. The table's feature names must match the fitted ones.
    pub fn apply(&self, table: &FeatureTable) -> Result<FeatureTable> {
        if table.feature_names() != self.feature_names.as_slice() {
            return Err(Error::DimensionMismatch(
                "feature names do not match the fitted z-score parameters".into(),
            ));
        }
        let mut values = table.values().to_owned();
        for (j, col) in values.axis_iter_mut(Axis(1)).enumerate() {
            if self.constant[j] {
                continue;
            }
            let (mean, std) = (self.means[j], self.stds[j]);
            for v in col {
                *v = (*v - mean) / std;
            }
        }
        table.with_values(values)
    }
}
