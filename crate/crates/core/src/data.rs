//! Tabular ingestion, stratified train/test split, ratio-based partitioning
//! across clients and a synthetic generator.
//!
//! Numeric features are kept raw by [`load_csv`]; [`Standardizer`] fits
//! z-score statistics on the training split and applies them to both splits.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{AttributeInfo, GroupDomain};
use crate::model::Sample;
use crate::numeric::RngState;

/// Bucket name appended to every categorical domain in lenient mode.
pub const OTHER_CATEGORY: &str = "__other__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureColumn {
    Numeric { name: String },
    Categorical { name: String, categories: Vec<String> },
}

impl FeatureColumn {
    pub fn name(&self) -> &str {
        match self {
            FeatureColumn::Numeric { name } | FeatureColumn::Categorical { name, .. } => name,
        }
    }
}

/// One value of a sensitive attribute defined by a set of raw strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub name: String,
    pub values: Vec<String>,
}

/// Inclusive numeric range; a bin without bounds catches everything left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub name: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

impl Bin {
    fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|lo| v >= lo) && self.max.is_none_or(|hi| v <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SensitiveRule {
    Categories { groups: Vec<CategoryGroup> },
    Bins { bins: Vec<Bin> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveAttribute {
    pub name: String,
    pub column: String,
    #[serde(flatten)]
    pub rule: SensitiveRule,
    /// Allow the same column to also appear among the features.
    #[serde(default)]
    pub duplicate_as_feature: bool,
}

impl SensitiveAttribute {
    pub fn value_names(&self) -> Vec<String> {
        match &self.rule {
            SensitiveRule::Categories { groups } => groups.iter().map(|g| g.name.clone()).collect(),
            SensitiveRule::Bins { bins } => bins.iter().map(|b| b.name.clone()).collect(),
        }
    }

    fn classify(&self, raw: &str) -> Result<usize> {
        let idx = match &self.rule {
            SensitiveRule::Categories { groups } => {
                groups.iter().position(|g| g.values.iter().any(|v| v == raw))
            }
            SensitiveRule::Bins { bins } => {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Data(format!("column {:?}: {raw:?} is not numeric", self.column))
                })?;
                bins.iter().position(|b| b.contains(v))
            }
        };
        idx.ok_or_else(|| {
            Error::Data(format!(
                "column {:?}: value {raw:?} matches no group of {:?}",
                self.column, self.name
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub column: String,
    pub positive: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Raw tokens treated as missing.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
    pub features: Vec<FeatureColumn>,
    pub sensitive: Vec<SensitiveAttribute>,
    pub label: LabelRule,
}

fn default_delimiter() -> char {
    ','
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

impl DatasetSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let schema: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Data("schema has no feature columns".into()));
        }
        if self.sensitive.is_empty() {
            return Err(Error::Data("schema has no sensitive attribute".into()));
        }
        for attr in &self.sensitive {
            if attr.value_names().is_empty() {
                return Err(Error::Data(format!("sensitive attribute {:?} has no values", attr.name)));
            }
            let dup = self.features.iter().any(|f| f.name() == attr.column);
            if dup && !attr.duplicate_as_feature {
                return Err(Error::Data(format!(
                    "sensitive column {:?} is also a feature; set duplicate_as_feature to allow it",
                    attr.column
                )));
            }
        }
        if self.features.iter().any(|f| f.name() == self.label.column) {
            return Err(Error::Data("label column listed as a feature".into()));
        }
        if !self.delimiter.is_ascii() {
            return Err(Error::Data("delimiter must be ASCII".into()));
        }
        Ok(())
    }

    pub fn attributes(&self) -> Vec<AttributeInfo> {
        self.sensitive
            .iter()
            .map(|a| AttributeInfo {
                name: a.name.clone(),
                values: a.value_names(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CategoryMode {
    Strict,
    #[default]
    Lenient,
}

/// Samples plus the metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    /// Positions of numeric (standardizable) features.
    pub numeric_features: Vec<usize>,
    pub attributes: Vec<AttributeInfo>,
    pub samples: Vec<Sample>,
    /// Identity of each sample in the originally loaded table.
    pub row_ids: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn domain(&self) -> GroupDomain {
        GroupDomain::new(self.attributes.iter().map(|a| a.values.len()).collect())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            numeric_features: self.numeric_features.clone(),
            attributes: self.attributes.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped_missing: usize,
    pub unknown_categories: usize,
}

/// Reads a headered CSV. Columns are looked up by header name.
pub fn load_csv(path: &Path, schema: &DatasetSchema, mode: CategoryMode) -> Result<(Dataset, LoadReport)> {
    let file = std::fs::File::open(path)?;
    load_reader(file, schema, mode)
}

pub fn load_reader<R: std::io::Read>(
    reader: R,
    schema: &DatasetSchema,
    mode: CategoryMode,
) -> Result<(Dataset, LoadReport)> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Data("empty file".into()));
    }
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("header lacks column {name:?}")))
    };
    let feature_cols: Vec<usize> = schema.features.iter().map(|f| col(f.name())).collect::<Result<_>>()?;
    let sensitive_cols: Vec<usize> = schema.sensitive.iter().map(|a| col(&a.column)).collect::<Result<_>>()?;
    let label_col = col(&schema.label.column)?;

    let mut feature_names = Vec::new();
    let mut numeric_features = Vec::new();
    for f in &schema.features {
        match f {
            FeatureColumn::Numeric { name } => {
                numeric_features.push(feature_names.len());
                feature_names.push(name.clone());
            }
            FeatureColumn::Categorical { name, categories } => {
                feature_names.extend(categories.iter().map(|c| format!("{name}={c}")));
                if mode == CategoryMode::Lenient {
                    feature_names.push(format!("{name}={OTHER_CATEGORY}"));
                }
            }
        }
    }

    let is_missing = |v: &str| schema.missing.iter().any(|m| m == v);
    let mut report = LoadReport {
        rows_read: 0,
        rows_dropped_missing: 0,
        unknown_categories: 0,
    };
    let mut samples = Vec::new();
    let mut row_ids = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        report.rows_read += 1;
        let used = feature_cols.iter().chain(&sensitive_cols).chain([&label_col]);
        if used.clone().any(|&c| record.get(c).is_none_or(is_missing)) {
            report.rows_dropped_missing += 1;
            continue;
        }
        let mut x = Vec::with_capacity(feature_names.len());
        for (f, &c) in schema.features.iter().zip(&feature_cols) {
            let raw = &record[c];
            match f {
                FeatureColumn::Numeric { name } => {
                    let v: f64 = raw.parse().map_err(|_| {
                        Error::Data(format!("row {row}: column {name:?} value {raw:?} is not numeric"))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data(format!("row {row}: column {name:?} is not finite")));
                    }
                    x.push(v);
                }
                FeatureColumn::Categorical { name, categories } => {
                    let hit = categories.iter().position(|cat| cat == raw);
                    if hit.is_none() {
                        if mode == CategoryMode::Strict {
                            return Err(Error::Data(format!(
                                "row {row}: unknown category {raw:?} in column {name:?}"
                            )));
                        }
                        report.unknown_categories += 1;
                    }
                    let width = categories.len() + usize::from(mode == CategoryMode::Lenient);
                    let slot = hit.unwrap_or(categories.len());
                    x.extend((0..width).map(|i| if i == slot { 1.0 } else { 0.0 }));
                }
            }
        }
        let s = schema
            .sensitive
            .iter()
            .zip(&sensitive_cols)
            .map(|(a, &c)| a.classify(&record[c]))
            .collect::<Result<Vec<_>>>()?;
        let y = u8::from(schema.label.positive.iter().any(|p| p == &record[label_col]));
        samples.push(Sample { x, s, y });
        row_ids.push(row);
    }
    if report.rows_read == 0 {
        return Err(Error::Data("file has no data rows".into()));
    }
    if samples.is_empty() {
        return Err(Error::Data("every row was dropped for missing values".into()));
    }
    if report.rows_dropped_missing > 0 {
        info!(
            "{}: dropped {} of {} rows with missing values",
            schema.name, report.rows_dropped_missing, report.rows_read
        );
    }
    Ok((
        Dataset {
            name: schema.name.clone(),
            feature_names,
            numeric_features,
            attributes: schema.attributes(),
            samples,
            row_ids,
        },
        report,
    ))
}

/// Reverses the one-hot block of a categorical column for one sample.
pub fn decode_category<'a>(dataset: &'a Dataset, sample: &Sample, column: &str) -> Option<&'a str> {
    let prefix = format!("{column}=");
    dataset
        .feature_names
        .iter()
        .zip(&sample.x)
        .find(|(n, &v)| n.starts_with(&prefix) && v == 1.0)
        .map(|(n, _)| &n[prefix.len()..])
}

/// Per-feature z-score statistics fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub features: Vec<usize>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("standardizer fit on empty data".into()));
        }
        let n = train.len() as f64;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for &f in &train.numeric_features {
            let mean = train.samples.iter().map(|s| s.x[f]).sum::<f64>() / n;
            let var = train.samples.iter().map(|s| (s.x[f] - mean).powi(2)).sum::<f64>() / n;
            means.push(mean);
            // Constant columns are centered but left unscaled.
            stds.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Ok(Self {
            features: train.numeric_features.clone(),
            means,
            stds,
        })
    }

    pub fn apply(&self, data: &mut Dataset) {
        for s in &mut data.samples {
            for ((&f, m), sd) in self.features.iter().zip(&self.means).zip(&self.stds) {
                s.x[f] = (s.x[f] - m) / sd;
            }
        }
    }
}

/// Seeded split, stratified by (sensitive values, label).
pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: RngState) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut strata: BTreeMap<(Vec<usize>, u8), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        strata.entry((s.s.clone(), s.y)).or_default().push(i);
    }
    let mut rng = seed.derive("split").rng();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ((s, y), mut idx) in strata {
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "stratum (groups {s:?}, label {y}) has {} sample(s); cannot appear in both splits",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Per-group client fractions for one sensitive attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(default)]
    pub attribute: usize,
    /// Group value -> one fraction per client.
    pub fractions: BTreeMap<usize, Vec<f64>>,
}

impl PartitionSpec {
    pub fn uniform(n_groups: usize, k: usize) -> Self {
        Self {
            attribute: 0,
            fractions: (0..n_groups).map(|g| (g, vec![1.0 / k as f64; k])).collect(),
        }
    }

    /// Two-group spec from per-client fractions of group 0 and group 1.
    pub fn two_groups(g0: &[f64], g1: &[f64]) -> Self {
        Self {
            attribute: 0,
            fractions: BTreeMap::from([(0, g0.to_vec()), (1, g1.to_vec())]),
        }
    }

    pub fn clients(&self) -> usize {
        self.fractions.values().next().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients();
        if k == 0 {
            return Err(Error::InvalidArgument("partition spec has no clients".into()));
        }
        for (g, f) in &self.fractions {
            if f.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "group {g} lists {} fractions, expected {k}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!("group {g} has a fraction outside [0, 1]")));
            }
            let total: f64 = f.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "group {g} fractions sum to {total}, not 1"
                )));
            }
        }
        Ok(())
    }
}

/// Splits `n` into counts proportional to `fractions`, exactly conserving `n`.
/// Leftover units go to the largest fractional parts, lower index first on ties.
pub fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // 0.57 * 100 is 56.99999999999999 in floating point; snap such quotas to
    // the integer they denote.
    let floors: Vec<f64> = quotas.iter().map(|q| (q + 1e-9).floor()).collect();
    // Remainders are compared on a 1e-9 grid so that equal fractional parts
    // (0.11 * 10 and 0.01 * 10) tie and fall back to the index.
    let rem: Vec<i64> = quotas
        .iter()
        .zip(&floors)
        .map(|(q, f)| ((q - f).max(0.0) * 1e9).round() as i64)
        .collect();
    let mut counts: Vec<usize> = floors.iter().map(|&f| f as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub row_ids: Vec<usize>,
    /// Sample counts per attribute, per value.
    pub group_counts: Vec<Vec<usize>>,
}

impl Shard {
    pub fn new(client_id: usize, samples: Vec<Sample>, row_ids: Vec<usize>, domain: &GroupDomain) -> Self {
        let mut group_counts: Vec<Vec<usize>> =
            domain.values_per_attribute.iter().map(|&n| vec![0; n]).collect();
        for s in &samples {
            for (a, &v) in s.s.iter().enumerate() {
                if let Some(c) = group_counts.get_mut(a).and_then(|g| g.get_mut(v)) {
                    *c += 1;
                }
            }
        }
        Self {
            client_id,
            samples,
            row_ids,
            group_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Shard sizes per group without materializing samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPreview {
    /// Group value -> per-client counts.
    pub counts: BTreeMap<usize, Vec<usize>>,
}

fn group_members(train: &Dataset, spec: &PartitionSpec) -> Result<BTreeMap<usize, Vec<usize>>> {
    spec.validate()?;
    if spec.attribute >= train.attributes.len() {
        return Err(Error::InvalidArgument(format!(
            "partition attribute {} does not exist",
            spec.attribute
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.samples.iter().enumerate() {
        members.entry(s.s[spec.attribute]).or_default().push(i);
    }
    for g in spec.fractions.keys() {
        if !members.contains_key(g) {
            return Err(Error::Data(format!("partition group {g} has no samples in the data")));
        }
    }
    for g in members.keys() {
        if !spec.fractions.contains_key(g) {
            return Err(Error::Data(format!("group {g} present in data but missing from partition spec")));
        }
    }
    Ok(members)
}

pub fn preview_partition(train: &Dataset, spec: &PartitionSpec) -> Result<PartitionPreview> {
    let members = group_members(train, spec)?;
    Ok(PartitionPreview {
        counts: members
            .iter()
            .map(|(g, idx)| (*g, largest_remainder(idx.len(), &spec.fractions[g])))
            .collect(),
    })
}

/// Within each group: seeded shuffle, then consecutive slices per client.
pub fn partition(train: &Dataset, spec: &PartitionSpec, seed: RngState) -> Result<Vec<Shard>> {
    let members = group_members(train, spec)?;
    let k = spec.clients();
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (g, mut idx) in members {
        let counts = largest_remainder(idx.len(), &spec.fractions[&g]);
        idx.shuffle(&mut seed.derive_index("partition", g as u64).rng());
        let mut start = 0;
        for (c, n) in counts.into_iter().enumerate() {
            per_client[c].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    let domain = train.domain();
    Ok(per_client
        .into_iter()
        .enumerate()
        .map(|(c, mut idx)| {
            idx.sort_unstable();
            if idx.is_empty() {
                warn!("client {c} received an empty shard");
            }
            Shard::new(
                c,
                idx.iter().map(|&i| train.samples[i].clone()).collect(),
                idx.iter().map(|&i| train.row_ids[i]).collect(),
                &domain,
            )
        })
        .collect())
}

/// Union of shards as one pooled shard (client id 0).
pub fn pool(shards: &[Shard], domain: &GroupDomain) -> Shard {
    let mut pairs: Vec<(usize, &Sample)> = shards
        .iter()
        .flat_map(|s| s.row_ids.iter().copied().zip(&s.samples))
        .collect();
    pairs.sort_by_key(|(r, _)| *r);
    Shard::new(
        0,
        pairs.iter().map(|(_, s)| (*s).clone()).collect(),
        pairs.iter().map(|(r, _)| *r).collect(),
        domain,
    )
}

/// Two sensitive groups, each (group, label) cell a mixture of two Gaussian
/// clusters. The group is not a feature but shifts the feature means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    /// P(s = 1).
    pub group1_fraction: f64,
    /// P(y = 1 | s) for s = 0, 1.
    pub base_rates: [f64; 2],
    /// Distance between label means.
    pub label_separation: f64,
    /// Group-conditional mean shift.
    pub group_shift: f64,
    /// Offset of the two clusters inside a cell.
    pub cluster_spread: f64,
    pub noise: f64,
    /// Angle in radians between the two groups' label directions. Non-zero
    /// values make the groups disagree about which features predict the
    /// label.
    #[serde(default)]
    pub label_rotation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 4000,
            dim: 8,
            group1_fraction: 0.5,
            base_rates: [0.6, 0.2],
            label_separation: 3.0,
            group_shift: 1.0,
            cluster_spread: 1.0,
            noise: 1.0,
            label_rotation: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.dim < 2 {
            return Err(Error::InvalidArgument("synthetic data needs n >= 2 and dim >= 2".into()));
        }
        let probs = [self.group1_fraction, self.base_rates[0], self.base_rates[1]];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("synthetic probabilities outside [0, 1]".into()));
        }
        if !self.label_rotation.is_finite() {
            return Err(Error::InvalidArgument("label rotation must be finite".into()));
        }
        let scales = [self.label_separation, self.group_shift, self.cluster_spread, self.noise];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("synthetic scales must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn generate(&self, seed: RngState) -> Result<Dataset> {
        self.validate()?;
        let mut rng = seed.derive("synthetic").rng();
        let d = self.dim;
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a / n).collect()
        };
        let label_dir = unit(&mut rng);
        let group_dir = unit(&mut rng);
        let spread_dirs: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng)).collect();
        // Group 1's label direction is label_dir rotated towards a direction
        // orthogonal to it.
        let other = unit(&mut rng);
        let along: f64 = other.iter().zip(&label_dir).map(|(a, b)| a * b).sum();
        let mut orth: Vec<f64> = other.iter().zip(&label_dir).map(|(a, b)| a - along * b).collect();
        let on = orth.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        orth.iter_mut().for_each(|a| *a /= on);
        let (sin, cos) = self.label_rotation.sin_cos();
        let label_dirs = [
            label_dir.clone(),
            label_dir.iter().zip(&orth).map(|(l, o)| cos * l + sin * o).collect::<Vec<f64>>(),
        ];
        // Cluster centres per (group, label, cluster).
        let mut centres = [[[vec![0.0; d], vec![0.0; d]], [vec![0.0; d], vec![0.0; d]]],
            [[vec![0.0; d], vec![0.0; d]], [vec![0.0; d], vec![0.0; d]]]];
        for (g, by_label) in centres.iter_mut().enumerate() {
            for (y, clusters) in by_label.iter_mut().enumerate() {
                let spread_dir = &spread_dirs[2 * g + y];
                for (c, centre) in clusters.iter_mut().enumerate() {
                    let sign = if c == 0 { 1.0 } else { -1.0 };
                    for i in 0..d {
                        centre[i] = (y as f64 - 0.5) * self.label_separation * label_dirs[g][i]
                            + (g as f64 - 0.5) * self.group_shift * group_dir[i]
                            + sign * 0.5 * self.cluster_spread * spread_dir[i];
                    }
                }
            }
        }
        let mut samples = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let g = usize::from(rng.random_bool(self.group1_fraction));
            let y = u8::from(rng.random_bool(self.base_rates[g]));
            let c = usize::from(rng.random_bool(0.5));
            let centre = &centres[g][usize::from(y)][c];
            let x = centre
                .iter()
                .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample { x, s: vec![g], y });
        }
        Ok(Dataset {
            name: "synthetic".into(),
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            numeric_features: (0..d).collect(),
            attributes: vec![AttributeInfo {
                name: "group".into(),
                values: vec!["0".into(), "1".into()],
            }],
            samples,
            row_ids: (0..self.n).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> DatasetSchema {
        serde_json::from_str(
            r#"{
                "name": "toy",
                "features": [
                    {"kind": "numeric", "name": "age"},
                    {"kind": "categorical", "name": "job", "categories": ["a", "b"]}
                ],
                "sensitive": [
                    {"name": "sex", "column": "sex", "rule": "categories",
                     "groups": [{"name": "f", "values": ["F"]}, {"name": "m", "values": ["M"]}]}
                ],
                "label": {"column": "income", "positive": [">50K"]}
            }"#,
        )
        .unwrap()
    }

    const CSV: &str = "age,job,sex,income\n30,a,F,>50K\n40,b,M,<=50K\n50,c,F,<=50K\n";

    #[test]
    fn loads_fixture_exactly() {
        let (d, report) = load_reader(CSV.as_bytes(), &schema(), CategoryMode::Lenient).unwrap();
        assert_eq!(d.feature_names, ["age", "job=a", "job=b", "job=__other__"]);
        assert_eq!(
            d.samples,
            vec![
                Sample { x: vec![30.0, 1.0, 0.0, 0.0], s: vec![0], y: 1 },
                Sample { x: vec![40.0, 0.0, 1.0, 0.0], s: vec![1], y: 0 },
                Sample { x: vec![50.0, 0.0, 0.0, 1.0], s: vec![0], y: 0 },
            ]
        );
        assert_eq!(report.unknown_categories, 1);
        assert_eq!(decode_category(&d, &d.samples[1], "job"), Some("b"));
    }

    #[test]
    fn strict_mode_rejects_unknown_category() {
        let err = load_reader(CSV.as_bytes(), &schema(), CategoryMode::Strict).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn permuted_columns_give_identical_output() {
        let permuted = "income,sex,job,age\n>50K,F,a,30\n<=50K,M,b,40\n<=50K,F,c,50\n";
        let a = load_reader(CSV.as_bytes(), &schema(), CategoryMode::Lenient).unwrap();
        let b = load_reader(permuted.as_bytes(), &schema(), CategoryMode::Lenient).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_file_errors() {
        assert!(load_reader("".as_bytes(), &schema(), CategoryMode::Lenient).is_err());
        assert!(load_reader("age,job,sex,income\n".as_bytes(), &schema(), CategoryMode::Lenient).is_err());
    }

    #[test]
    fn missing_rows_are_dropped_and_counted() {
        let csv = "age,job,sex,income\n30,a,F,>50K\n?,b,M,<=50K\n";
        let (d, r) = load_reader(csv.as_bytes(), &schema(), CategoryMode::Lenient).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(r.rows_dropped_missing, 1);
        assert_eq!(d.row_ids, vec![0]);
    }

    #[test]
    fn sensitive_column_as_feature_needs_opt_in() {
        let mut s = schema();
        s.features.push(FeatureColumn::Categorical {
            name: "sex".into(),
            categories: vec!["F".into(), "M".into()],
        });
        assert!(s.validate().is_err());
        s.sensitive[0].duplicate_as_feature = true;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn age_bins_classify() {
        let attr = SensitiveAttribute {
            name: "age".into(),
            column: "age".into(),
            rule: SensitiveRule::Bins {
                bins: vec![
                    Bin { name: "20-40".into(), min: Some(20.0), max: Some(40.0) },
                    Bin { name: "41-60".into(), min: Some(41.0), max: Some(60.0) },
                    Bin { name: "other".into(), min: None, max: None },
                ],
            },
            duplicate_as_feature: true,
        };
        assert_eq!(attr.classify("20").unwrap(), 0);
        assert_eq!(attr.classify("40").unwrap(), 0);
        assert_eq!(attr.classify("41").unwrap(), 1);
        assert_eq!(attr.classify("61").unwrap(), 2);
        assert_eq!(attr.classify("19").unwrap(), 2);
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let (d, _) = load_reader(CSV.as_bytes(), &schema(), CategoryMode::Lenient).unwrap();
        let st = Standardizer::fit(&d).unwrap();
        assert_eq!(st.means, vec![40.0]);
        let mut t = d.clone();
        st.apply(&mut t);
        let sd = (200.0f64 / 3.0).sqrt();
        assert!((t.samples[0].x[0] + 10.0 / sd).abs() < 1e-12);
        assert_eq!(t.samples[0].x[1], 1.0);
    }

    fn balanced(n_per_cell: usize) -> Dataset {
        let mut samples = Vec::new();
        for g in 0..2 {
            for y in 0..2u8 {
                for i in 0..n_per_cell {
                    samples.push(Sample { x: vec![i as f64], s: vec![g], y });
                }
            }
        }
        let n = samples.len();
        Dataset {
            name: "t".into(),
            feature_names: vec!["x".into()],
            numeric_features: vec![0],
            attributes: vec![AttributeInfo { name: "g".into(), values: vec!["0".into(), "1".into()] }],
            samples,
            row_ids: (0..n).collect(),
        }
    }

    fn from_cells(cells: &[(usize, u8, usize)]) -> Dataset {
        let mut d = balanced(0);
        for &(g, y, n) in cells {
            d.samples.extend((0..n).map(|i| Sample { x: vec![i as f64], s: vec![g], y }));
        }
        d.row_ids = (0..d.samples.len()).collect();
        d
    }

    #[test]
    fn split_ten_rows_five_five() {
        let d = from_cells(&[(0, 0, 2), (0, 1, 2), (1, 0, 2), (1, 1, 4)]);
        let (tr, te) = split_train_test(&d, 0.5, RngState::new(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 5));
        for g in 0..2 {
            for y in 0..2 {
                let has = |ds: &Dataset| ds.samples.iter().any(|s| s.s[0] == g && s.y == y);
                assert!(has(&tr) && has(&te));
            }
        }
        let again = split_train_test(&d, 0.5, RngState::new(1)).unwrap();
        assert_eq!(again.1.row_ids, te.row_ids);
        let mut all: Vec<usize> = tr.row_ids.iter().chain(&te.row_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, d.row_ids);
    }

    #[test]
    fn split_seeds_differ() {
        let d = balanced(250);
        let a = split_train_test(&d, 0.2, RngState::new(1)).unwrap();
        let b = split_train_test(&d, 0.2, RngState::new(2)).unwrap();
        assert_ne!(a.1.row_ids, b.1.row_ids);
    }

    #[test]
    fn split_rejects_tiny_stratum_and_bad_fraction() {
        let d = from_cells(&[(0, 0, 3), (0, 1, 1)]);
        assert!(split_train_test(&d, 0.5, RngState::new(0)).is_err());
        assert!(split_train_test(&balanced(4), 0.0, RngState::new(0)).is_err());
        assert!(split_train_test(&balanced(4), 1.0, RngState::new(0)).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(100, &[0.5, 0.1, 0.1, 0.2, 0.1]), vec![50, 10, 10, 20, 10]);
        assert_eq!(largest_remainder(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(largest_remainder(0, &[0.5, 0.5]), vec![0, 0]);
        // 0.16 * 10 - 1 exceeds 0.6 by one ulp; the tie still goes to index 0.
        assert_eq!(largest_remainder(10, &[0.06, 0.16, 0.78]), vec![1, 1, 8]);
    }

    #[test]
    fn partition_high_heterogeneity_counts() {
        let mut d = balanced(50);
        let spec = PartitionSpec::two_groups(&[0.5, 0.1, 0.1, 0.2, 0.1], &[0.1, 0.4, 0.3, 0.1, 0.1]);
        let shards = partition(&d, &spec, RngState::new(4)).unwrap();
        let g0: Vec<usize> = shards.iter().map(|s| s.group_counts[0][0]).collect();
        assert_eq!(g0, vec![50, 10, 10, 20, 10]);
        d.samples.truncate(1);
        d.row_ids.truncate(1);
        assert!(partition(&d, &spec, RngState::new(4)).is_err());
    }

    #[test]
    fn partition_uniform_equal_sizes() {
        let d = balanced(30);
        let shards = partition(&d, &PartitionSpec::uniform(2, 3), RngState::new(0)).unwrap();
        assert!(shards.iter().all(|s| s.len() == 40));
    }

    #[test]
    fn partition_rejects_bad_sums() {
        let spec = PartitionSpec::two_groups(&[0.5, 0.4], &[0.5, 0.5]);
        assert!(partition(&balanced(5), &spec, RngState::new(0)).is_err());
    }

    #[test]
    fn pool_restores_train_order() {
        let d = balanced(10);
        let spec = PartitionSpec::two_groups(&[0.7, 0.3], &[0.2, 0.8]);
        let shards = partition(&d, &spec, RngState::new(9)).unwrap();
        let pooled = pool(&shards, &d.domain());
        assert_eq!(pooled.row_ids, d.row_ids);
        assert_eq!(pooled.samples, d.samples);
    }

    #[test]
    fn synthetic_is_deterministic_and_skewed() {
        let spec = SyntheticSpec { n: 20_000, ..SyntheticSpec::default() };
        let a = spec.generate(RngState::new(5)).unwrap();
        assert_eq!(a, spec.generate(RngState::new(5)).unwrap());
        let rate = |g: usize| {
            let cell: Vec<_> = a.samples.iter().filter(|s| s.s[0] == g).collect();
            cell.iter().filter(|s| s.y == 1).count() as f64 / cell.len() as f64
        };
        assert!((rate(0) - 0.6).abs() < 0.02);
        assert!((rate(1) - 0.2).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn partition_conserves_counts(
            seed in any::<u64>(),
            n0 in 1usize..200,
            n1 in 1usize..200,
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..7),
        ) {
            let norm = |v: Vec<f64>| {
                let t: f64 = v.iter().sum();
                if t == 0.0 { let k = v.len(); vec![1.0 / k as f64; k] } else { v.into_iter().map(|x| x / t).collect() }
            };
            let f0 = norm(raw.iter().map(|p| p.0).collect());
            let f1 = norm(raw.iter().map(|p| p.1).collect());
            let mut samples = Vec::new();
            samples.extend((0..n0).map(|i| Sample { x: vec![i as f64], s: vec![0], y: 0 }));
            samples.extend((0..n1).map(|i| Sample { x: vec![i as f64], s: vec![1], y: 1 }));
            let d = Dataset {
                name: "p".into(),
                feature_names: vec!["x".into()],
                numeric_features: vec![0],
                attributes: vec![AttributeInfo { name: "g".into(), values: vec!["0".into(), "1".into()] }],
                row_ids: (0..samples.len()).collect(),
                samples,
            };
            let spec = PartitionSpec::two_groups(&f0, &f1);
            let shards = partition(&d, &spec, RngState::new(seed)).unwrap();
            let c0: Vec<usize> = shards.iter().map(|s| s.group_counts[0][0]).collect();
            let c1: Vec<usize> = shards.iter().map(|s| s.group_counts[0][1]).collect();
            prop_assert_eq!(&c0, &largest_remainder(n0, &f0));
            prop_assert_eq!(&c1, &largest_remainder(n1, &f1));
            let mut ids: Vec<usize> = shards.iter().flat_map(|s| s.row_ids.clone()).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, d.row_ids.clone());
        }
    }
}
