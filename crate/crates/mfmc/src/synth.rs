//! Deterministic generator of multi-site, two-class feature tables with
//! planted site effects and planted discriminative features. Every study
//! protocol in the crate is verified against this ground truth.
//!
//! The generative model matches the harmonizer's assumptions exactly:
//! `x = beta * [MDD] + site_shift + site_scale * noise`, so harmonization
//! acceptance tests have a known correct answer.

use ndarray::Array2;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, Label};
use crate::error::{Error, Result};

/// The 45 bilateral region stems of the standard 90-region parcellation;
/// suffixed `.L`/`.R` they name the feature columns.
const REGION_STEMS: [&str; 45] = [
    "PreCG", "SFGdor", "ORBsup", "MFG", "ORBmid", "IFGoperc", "IFGtriang", "ORBinf", "ROL",
    "SMA", "OLF", "SFGmed", "ORBsupmed", "REC", "INS", "ACG", "DCG", "PCG", "HIP", "PHG",
    "AMYG", "CAL", "CUN", "LING", "SOG", "MOG", "IOG", "FFG", "PoCG", "SPG", "IPL", "SMG",
    "ANG", "PCUN", "PCL", "CAU", "PUT", "PAL", "THA", "HES", "STG", "TPOsup", "MTG", "TPOmid",
    "ITG",
];

/// The four feature kinds, in block order.
pub const FEATURE_KINDS: [&str; 4] = ["ReHo", "DC", "fALFF", "VMHC"];

/// Region names for an `n_regions`-way parcellation.
pub fn region_names(n_regions: usize) -> Vec<String> {
    (0..n_regions)
        .map(|r| {
            if r < 90 {
                let stem = REGION_STEMS[r / 2];
                let side = if r % 2 == 0 { "L" } else { "R" };
                format!("{stem}.{side}")
            } else {
                format!("REG{:03}", r + 1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub n_subjects: usize,
    /// Fraction of the site's subjects labeled MDD.
    pub mdd_fraction: f64,
    /// Additive location shift applied to every feature of this site.
    pub shift: f64,
    /// Multiplicative noise scale for this site; must be positive.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub index: usize,
    /// Class effect size in within-site noise units, added to MDD subjects.
    pub effect_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub sites: Vec<SiteSpec>,
    pub n_regions: usize,
    pub kinds: Vec<String>,
    pub planted: Vec<PlantedFeature>,
    pub noise_std: f64,
    /// Pairwise noise correlation between features of one subject, via a
    /// shared per-subject factor. Zero (the default) means independent noise.
    pub equicorrelation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            sites: vec![
                SiteSpec {
                    name: "site1".into(),
                    n_subjects: 60,
                    mdd_fraction: 0.5,
                    shift: 0.0,
                    scale: 1.0,
                },
                SiteSpec {
                    name: "site2".into(),
                    n_subjects: 60,
                    mdd_fraction: 0.5,
                    shift: 1.0,
                    scale: 1.2,
                },
                SiteSpec {
                    name: "site3".into(),
                    n_subjects: 60,
                    mdd_fraction: 0.5,
                    shift: -1.0,
                    scale: 0.8,
                },
                SiteSpec {
                    name: "site4".into(),
                    n_subjects: 60,
                    mdd_fraction: 0.5,
                    shift: 0.5,
                    scale: 1.0,
                },
            ],
            n_regions: 90,
            kinds: FEATURE_KINDS.iter().map(|s| s.to_string()).collect(),
            planted: default_planted(90, 4, 13, 1.0),
            noise_std: 1.0,
            equicorrelation: 0.0,
        }
    }
}

/// Thirteen planted features by default, spread across the kind blocks: the
/// i-th planted feature sits in block `i % kinds` at region `(7 i + 3) % regions`.
pub fn default_planted(
    n_regions: usize,
    n_kinds: usize,
    count: usize,
    effect_size: f64,
) -> Vec<PlantedFeature> {
    let mut chosen = std::collections::BTreeSet::new();
    let mut planted = Vec::new();
    let mut i = 0usize;
    while planted.len() < count {
        let region = (7 * i + 3) % n_regions;
        let kind = i % n_kinds;
        let index = kind * n_regions + region;
        if chosen.insert(index) {
            planted.push(PlantedFeature { index, effect_size });
        }
        i += 1;
    }
    planted
}

impl SynthConfig {
    pub fn n_features(&self) -> usize {
        self.n_regions * self.kinds.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let regions = region_names(self.n_regions);
        let mut names = Vec::with_capacity(self.n_features());
        for kind in &self.kinds {
            for r in &regions {
                names.push(format!("{r}_{kind}"));
            }
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::Invalid("synthetic config needs at least one site".into()));
        }
        if self.n_regions == 0 || self.kinds.is_empty() {
            return Err(Error::Invalid("need at least one region and one kind".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Invalid("noise_std must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.equicorrelation) {
            return Err(Error::Invalid("equicorrelation must lie in [0, 1)".into()));
        }
        for site in &self.sites {
            if site.n_subjects == 0 {
                return Err(Error::Invalid(format!("site '{}' has no subjects", site.name)));
            }
            if !(0.0..=1.0).contains(&site.mdd_fraction) {
                return Err(Error::Invalid(format!(
                    "site '{}' mdd_fraction outside [0, 1]",
                    site.name
                )));
            }
            if !(site.scale > 0.0 && site.scale.is_finite()) {
                return Err(Error::Invalid(format!(
                    "site '{}' scale must be positive",
                    site.name
                )));
            }
            if !site.shift.is_finite() {
                return Err(Error::Invalid(format!("site '{}' shift not finite", site.name)));
            }
        }
        let d = self.n_features();
        for p in &self.planted {
            if p.index >= d {
                return Err(Error::Invalid(format!(
                    "planted feature index {} outside the {d} features",
                    p.index
                )));
            }
            if !p.effect_size.is_finite() {
                return Err(Error::Invalid("planted effect size not finite".into()));
            }
        }
        Ok(())
    }
}

/// Ground-truth sidecar written next to generated tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    pub planted: Vec<PlantedTruth>,
    pub sites: Vec<SiteSpec>,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub index: usize,
    pub name: String,
    pub effect_size: f64,
}

/// Generates the table and its ground truth. Same config (and seed) in,
/// byte-identical table out.
pub fn generate(cfg: &SynthConfig) -> Result<(FeatureTable, SynthTruth)> {
    cfg.validate()?;
    let d = cfg.n_features();
    let names = cfg.feature_names();
    let mut beta = vec![0.0f64; d];
    for p in &cfg.planted {
        beta[p.index] = p.effect_size;
    }

    let n_total: usize = cfg.sites.iter().map(|s| s.n_subjects).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;

    let mut subject_ids = Vec::with_capacity(n_total);
    let mut site_ids = Vec::with_capacity(n_total);
    let mut labels = Vec::with_capacity(n_total);
    let mut values = Array2::<f64>::zeros((n_total, d));

    let rho = cfg.equicorrelation;
    let shared_w = rho.sqrt();
    let indiv_w = (1.0 - rho).sqrt();

    let mut row = 0usize;
    for site in &cfg.sites {
        let n_mdd = (site.n_subjects as f64 * site.mdd_fraction).round() as usize;
        let mut mdd_left = n_mdd;
        let mut nc_left = site.n_subjects - n_mdd;
        for k in 0..site.n_subjects {
            // interleave labels until one quota runs out
            let is_mdd = if mdd_left > 0 && (k % 2 == 0 || nc_left == 0) {
                mdd_left -= 1;
                true
            } else if nc_left > 0 {
                nc_left -= 1;
                false
            } else {
                mdd_left -= 1;
                true
            };
            subject_ids.push(format!("{}-{:04}", site.name, k + 1));
            site_ids.push(site.name.clone());
            labels.push(if is_mdd { Label::Mdd } else { Label::Nc });
            let shared: f64 = normal.sample(&mut rng);
            for j in 0..d {
                let e: f64 = normal.sample(&mut rng);
                let eps = shared_w * shared + indiv_w * e;
                values[(row, j)] = beta[j] * if is_mdd { 1.0 } else { 0.0 }
                    + site.shift
                    + site.scale * cfg.noise_std * eps;
            }
            row += 1;
        }
    }

    let table = FeatureTable::new(subject_ids, site_ids, labels, names.clone(), values)?;
    let truth = SynthTruth {
        seed: cfg.seed,
        planted: cfg
            .planted
            .iter()
            .map(|p| PlantedTruth {
                index: p.index,
                name: names[p.index].clone(),
                effect_size: p.effect_size,
            })
            .collect(),
        sites: cfg.sites.clone(),
        n_features: d,
    };
    Ok((table, truth))
}
