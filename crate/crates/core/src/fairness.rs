//! Group-fairness scores for evaluation, differentiable constraint values
//! `h(w)` with their gradients for training, and the client-fairness score.
//!
//! Evaluation scores use hard predictions (`p >= 0.5`). Training uses smooth
//! surrogates: the predicted probability for demographic parity and equalized
//! odds, the per-sample loss for accuracy parity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bce, bce_dlogit, BatchForward, MlpSpec, Sample};
use crate::numeric::Vec64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FairnessNotion {
    #[default]
    DemographicParity,
    EqualizedOdds,
    AccuracyParity,
}

/// A sensitive group, optionally conditioned on the true label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct GroupKey {
    pub attribute: usize,
    pub value: usize,
    pub label: Option<u8>,
}

impl GroupKey {
    pub fn new(attribute: usize, value: usize) -> Self {
        Self {
            attribute,
            value,
            label: None,
        }
    }

    pub fn with_label(attribute: usize, value: usize, label: u8) -> Self {
        Self {
            attribute,
            value,
            label: Some(label),
        }
    }

    fn total_key(&self) -> TotalKey {
        TotalKey {
            attribute: self.attribute,
            label: self.label,
        }
    }

    pub(crate) fn contains(&self, s: &Sample) -> bool {
        s.s.get(self.attribute) == Some(&self.value) && self.label.is_none_or(|y| s.y == y)
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}={}", self.attribute, self.value)?;
        if let Some(y) = self.label {
            write!(f, "|y={y}")?;
        }
        Ok(())
    }
}

impl From<GroupKey> for String {
    fn from(k: GroupKey) -> Self {
        k.to_string()
    }
}

impl FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad group key {s:?}"));
        let (group, label) = match s.split_once("|y=") {
            Some((g, y)) => (g, Some(y.parse::<u8>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let (a, v) = group
            .strip_prefix('a')
            .and_then(|g| g.split_once('='))
            .ok_or_else(bad)?;
        Ok(Self {
            attribute: a.parse().map_err(|_| bad())?,
            value: v.parse().map_err(|_| bad())?,
            label,
        })
    }
}

impl TryFrom<String> for GroupKey {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Population a group is compared against: one attribute, optionally one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TotalKey {
    pub attribute: usize,
    pub label: Option<u8>,
}

/// Number of values per sensitive attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDomain {
    pub values_per_attribute: Vec<usize>,
}

impl GroupDomain {
    pub fn new(values_per_attribute: Vec<usize>) -> Self {
        Self {
            values_per_attribute,
        }
    }

    /// Constraint keys for a notion, in canonical order.
    pub fn keys(&self, notion: FairnessNotion) -> Vec<GroupKey> {
        let mut keys = Vec::new();
        for (a, &n) in self.values_per_attribute.iter().enumerate() {
            match notion {
                FairnessNotion::EqualizedOdds => {
                    for y in 0..=1u8 {
                        keys.extend((0..n).map(|v| GroupKey::with_label(a, v, y)));
                    }
                }
                _ => keys.extend((0..n).map(|v| GroupKey::new(a, v))),
            }
        }
        keys
    }
}

/// Raw sums `Σ f`, counts and `Σ ∇f` over one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSums {
    pub sum: f64,
    pub count: usize,
    pub grad_sum: Vec64,
}

impl GroupSums {
    fn zero(m: usize) -> Self {
        Self {
            sum: 0.0,
            count: 0,
            grad_sum: Vec64::zeros(m),
        }
    }

    fn accumulate(&mut self, other: &GroupSums) -> Result<()> {
        self.sum += other.sum;
        self.count += other.count;
        self.grad_sum.add_scaled_in_place(1.0, &other.grad_sum)
    }

    /// `F = sum / count`.
    pub fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Empty("group with zero count".into()));
        }
        Ok(self.sum / self.count as f64)
    }

    /// `∇F = grad_sum / count`.
    pub fn mean_grad(&self) -> Result<Vec64> {
        if self.count == 0 {
            return Err(Error::Empty("group with zero count".into()));
        }
        self.grad_sum.scale(1.0 / self.count as f64)
    }
}

/// Per-group surrogate sums and their gradients, plus per-attribute totals.
///
/// Totals are built by summing the group entries of the same attribute (and
/// label), so `total.sum == Σ group.sum` holds exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessStatistics {
    pub notion: FairnessNotion,
    pub groups: BTreeMap<GroupKey, GroupSums>,
    #[serde(with = "total_entries")]
    pub totals: BTreeMap<TotalKey, GroupSums>,
}

mod total_entries {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        attribute: usize,
        label: Option<u8>,
        #[serde(flatten)]
        sums: GroupSums,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<TotalKey, GroupSums>,
        ser: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let v: Vec<Entry> = map
            .iter()
            .map(|(k, s)| Entry {
                attribute: k.attribute,
                label: k.label,
                sums: s.clone(),
            })
            .collect();
        v.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> std::result::Result<BTreeMap<TotalKey, GroupSums>, D::Error> {
        let v = Vec::<Entry>::deserialize(de)?;
        Ok(v.into_iter()
            .map(|e| {
                (
                    TotalKey {
                        attribute: e.attribute,
                        label: e.label,
                    },
                    e.sums,
                )
            })
            .collect())
    }
}

/// Per-sample surrogate value and its derivative w.r.t. the logit.
pub(crate) fn surrogate(notion: FairnessNotion, p: f64, y: u8) -> (f64, f64) {
    match notion {
        FairnessNotion::DemographicParity | FairnessNotion::EqualizedOdds => (p, p * (1.0 - p)),
        FairnessNotion::AccuracyParity => (bce(p, y), bce_dlogit(p, y)),
    }
}

impl FairnessStatistics {
    /// Evaluates the surrogate sums and gradients on `samples` at `params`.
    pub fn compute(
        spec: &MlpSpec,
        params: &Vec64,
        samples: &[Sample],
        notion: FairnessNotion,
        domain: &GroupDomain,
    ) -> Result<Self> {
        let fwd = BatchForward::run(spec, params, samples)?;
        Self::from_forward(&fwd, samples, notion, domain)
    }

    pub(crate) fn from_forward(
        fwd: &BatchForward<'_>,
        samples: &[Sample],
        notion: FairnessNotion,
        domain: &GroupDomain,
    ) -> Result<Self> {
        let m = fwd.param_count();
        let vals: Vec<(f64, f64)> = fwd
            .probs
            .iter()
            .zip(samples)
            .map(|(&p, s)| surrogate(notion, p, s.y))
            .collect();
        let mut groups = BTreeMap::new();
        for key in domain.keys(notion) {
            let mut sum = 0.0;
            let mut count = 0;
            let mut weights = vec![0.0; samples.len()];
            for (i, s) in samples.iter().enumerate() {
                if key.contains(s) {
                    sum += vals[i].0;
                    count += 1;
                    weights[i] = vals[i].1;
                }
            }
            let grad_sum = if count == 0 {
                Vec64::zeros(m)
            } else {
                fwd.backward(&weights)?
            };
            groups.insert(
                key,
                GroupSums {
                    sum,
                    count,
                    grad_sum,
                },
            );
        }
        let stats = Self {
            notion,
            totals: totals_of(&groups, m)?,
            groups,
        };
        if !stats.is_finite() {
            return Err(Error::NonFinite("fairness statistics".into()));
        }
        Ok(stats)
    }

    fn is_finite(&self) -> bool {
        self.groups
            .values()
            .chain(self.totals.values())
            .all(|g| g.sum.is_finite() && g.grad_sum.is_finite())
    }

    /// Entry-wise sum of several clients' statistics.
    pub fn merge(parts: &[FairnessStatistics]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no statistics to merge".into()))?;
        let m = first
            .groups
            .values()
            .next()
            .map(|g| g.grad_sum.len())
            .unwrap_or(0);
        let mut groups: BTreeMap<GroupKey, GroupSums> = first
            .groups
            .keys()
            .map(|k| (*k, GroupSums::zero(m)))
            .collect();
        for part in parts {
            if part.notion != first.notion || part.groups.len() != groups.len() {
                return Err(Error::KeyMismatch("statistics with different key sets".into()));
            }
            for (k, g) in &part.groups {
                groups
                    .get_mut(k)
                    .ok_or_else(|| Error::KeyMismatch(format!("unexpected key {k}")))?
                    .accumulate(g)?;
            }
        }
        Ok(Self {
            notion: first.notion,
            totals: totals_of(&groups, m)?,
            groups,
        })
    }

    pub fn total_for(&self, key: &GroupKey) -> Result<&GroupSums> {
        self.totals
            .get(&key.total_key())
            .ok_or_else(|| Error::KeyMismatch(format!("no total for {key}")))
    }

    /// Signed gap `F(D) - F(D^s)` for one key.
    pub fn gap(&self, key: &GroupKey) -> Result<f64> {
        let g = self
            .groups
            .get(key)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown key {key}")))?;
        Ok(self.total_for(key)?.mean()? - g.mean()?)
    }

    /// Keys whose group and population both have support.
    pub fn supported_keys(&self) -> Vec<GroupKey> {
        self.groups
            .iter()
            .filter(|(k, g)| {
                g.count > 0 && self.total_for(k).map(|t| t.count > 0).unwrap_or(false)
            })
            .map(|(k, _)| *k)
            .collect()
    }
}

fn totals_of(
    groups: &BTreeMap<GroupKey, GroupSums>,
    m: usize,
) -> Result<BTreeMap<TotalKey, GroupSums>> {
    let mut totals: BTreeMap<TotalKey, GroupSums> = BTreeMap::new();
    for (k, g) in groups {
        totals
            .entry(k.total_key())
            .or_insert_with(|| GroupSums::zero(m))
            .accumulate(g)?;
    }
    Ok(totals)
}

/// `h_s = |F(D) - F(D^s)| - alpha` for every key.
pub fn constraint_values(
    stats: &FairnessStatistics,
    alpha: f64,
) -> Result<BTreeMap<GroupKey, f64>> {
    stats
        .groups
        .keys()
        .map(|k| Ok((*k, stats.gap(k)?.abs() - alpha)))
        .collect()
}

/// Subgradient of `h_s`: `sign(gap) · (∇F(D) - ∇F(D^s))`, with `sign(0) = 0`.
pub fn constraint_grads(stats: &FairnessStatistics) -> Result<BTreeMap<GroupKey, Vec64>> {
    stats
        .groups
        .keys()
        .map(|k| Ok((*k, constraint_grad(stats, k)?)))
        .collect()
}

pub(crate) fn constraint_grad(stats: &FairnessStatistics, key: &GroupKey) -> Result<Vec64> {
    let g = &stats.groups[key];
    let total = stats.total_for(key)?;
    let gap = total.mean()? - g.mean()?;
    let diff = total.mean_grad()?.sub(&g.mean_grad()?)?;
    if gap > 0.0 {
        Ok(diff)
    } else if gap < 0.0 {
        diff.scale(-1.0)
    } else {
        Ok(Vec64::zeros(diff.len()))
    }
}

fn check_groups(n: usize, groups: &[usize], n_groups: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("no samples".into()));
    }
    if groups.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: groups.len(),
        });
    }
    let mut counts = vec![0usize; n_groups];
    for &g in groups {
        *counts.get_mut(g).ok_or_else(|| {
            Error::InvalidArgument(format!("group value {g} outside domain of size {n_groups}"))
        })? += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Empty(format!("group {empty} has no samples")));
    }
    Ok(counts)
}

/// `max_s |P[Ŷ=1 | S=s] - P[Ŷ=1]|` over hard predictions.
pub fn dp_violation(preds: &[u8], groups: &[usize], n_groups: usize) -> Result<f64> {
    let counts = check_groups(preds.len(), groups, n_groups)?;
    let mut pos = vec![0usize; n_groups];
    for (&p, &g) in preds.iter().zip(groups) {
        pos[g] += usize::from(p);
    }
    let overall = pos.iter().sum::<usize>() as f64 / preds.len() as f64;
    Ok((0..n_groups)
        .map(|g| (pos[g] as f64 / counts[g] as f64 - overall).abs())
        .fold(0.0, f64::max))
}

/// `max_{s,y} |P[Ŷ=1 | S=s, Y=y] - P[Ŷ=1 | Y=y]|`. Cells without support
/// are skipped with a warning.
pub fn eo_violation(preds: &[u8], labels: &[u8], groups: &[usize], n_groups: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("no samples".into()));
    }
    if labels.len() != preds.len() || groups.len() != preds.len() {
        return Err(Error::LengthMismatch {
            expected: preds.len(),
            actual: labels.len().min(groups.len()),
        });
    }
    let mut worst: f64 = 0.0;
    for y in 0..=1u8 {
        let mut count = vec![0usize; n_groups];
        let mut pos = vec![0usize; n_groups];
        for ((&p, &l), &g) in preds.iter().zip(labels).zip(groups) {
            if l != y {
                continue;
            }
            if g >= n_groups {
                return Err(Error::InvalidArgument(format!("group value {g} outside domain")));
            }
            count[g] += 1;
            pos[g] += usize::from(p);
        }
        let total: usize = count.iter().sum();
        if total == 0 {
            return Err(Error::Empty(format!("no samples with label {y}")));
        }
        let pooled = pos.iter().sum::<usize>() as f64 / total as f64;
        for g in 0..n_groups {
            if count[g] == 0 {
                warn!("equalized odds: cell (s={g}, y={y}) has no samples, skipped");
                continue;
            }
            worst = worst.max((pos[g] as f64 / count[g] as f64 - pooled).abs());
        }
    }
    Ok(worst)
}

/// `max_s |mean loss in s - mean loss|`, losses capped at 1.
pub fn ap_violation(losses: &[f64], groups: &[usize], n_groups: usize) -> Result<f64> {
    let counts = check_groups(losses.len(), groups, n_groups)?;
    let mut sums = vec![0.0; n_groups];
    for (&l, &g) in losses.iter().zip(groups) {
        sums[g] += l.min(1.0);
    }
    let overall = sums.iter().sum::<f64>() / losses.len() as f64;
    Ok((0..n_groups)
        .map(|g| (sums[g] / counts[g] as f64 - overall).abs())
        .fold(0.0, f64::max))
}

/// `max_k |acc_k - mean(acc)|`.
pub fn client_fairness_violation(per_client_accuracy: &[f64]) -> Result<f64> {
    if per_client_accuracy.is_empty() {
        return Err(Error::Empty("no clients".into()));
    }
    let mean = per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len() as f64;
    Ok(per_client_accuracy
        .iter()
        .map(|a| (a - mean).abs())
        .fold(0.0, f64::max))
}

/// Hard prediction with the `p >= 0.5` tie rule.
pub fn threshold(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

pub fn accuracy(probs: &[f64], samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("accuracy of an empty set".into()));
    }
    let correct = probs
        .iter()
        .zip(samples)
        .filter(|(&p, s)| threshold(p) == s.y)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDetail {
    pub value: usize,
    pub name: String,
    pub count: usize,
    pub positive_rate: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub name: String,
    pub dp: f64,
    pub eo: f64,
    pub ap: f64,
    pub groups: Vec<GroupDetail>,
}

/// Accuracy plus every violation score of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub attributes: Vec<AttributeReport>,
    pub cf: f64,
    pub client_accuracy: Vec<f64>,
}

/// Name and value labels of one sensitive attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub values: Vec<String>,
}

impl FairnessReport {
    /// Scores `probs` (one per test sample) and the per-client accuracies.
    pub fn evaluate(
        probs: &[f64],
        samples: &[Sample],
        attributes: &[AttributeInfo],
        client_accuracy: Vec<f64>,
    ) -> Result<Self> {
        if probs.len() != samples.len() {
            return Err(Error::LengthMismatch {
                expected: samples.len(),
                actual: probs.len(),
            });
        }
        let preds: Vec<u8> = probs.iter().map(|&p| threshold(p)).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.y).collect();
        let losses: Vec<f64> = probs
            .iter()
            .zip(samples)
            .map(|(&p, s)| bce(p, s.y))
            .collect();
        let mut reports = Vec::new();
        for (a, info) in attributes.iter().enumerate() {
            let n_groups = info.values.len();
            let groups: Vec<usize> = samples.iter().map(|s| s.s[a]).collect();
            let mut details = Vec::new();
            for v in 0..n_groups {
                let idx: Vec<usize> = (0..samples.len()).filter(|&i| groups[i] == v).collect();
                let n = idx.len().max(1) as f64;
                details.push(GroupDetail {
                    value: v,
                    name: info.values[v].clone(),
                    count: idx.len(),
                    positive_rate: idx.iter().map(|&i| f64::from(preds[i])).sum::<f64>() / n,
                    accuracy: idx.iter().filter(|&&i| preds[i] == labels[i]).count() as f64 / n,
                    mean_loss: idx.iter().map(|&i| losses[i]).sum::<f64>() / n,
                });
            }
            reports.push(AttributeReport {
                name: info.name.clone(),
                dp: dp_violation(&preds, &groups, n_groups)?,
                eo: eo_violation(&preds, &labels, &groups, n_groups)?,
                ap: ap_violation(&losses, &groups, n_groups)?,
                groups: details,
            });
        }
        Ok(Self {
            accuracy: accuracy(probs, samples)?,
            attributes: reports,
            cf: client_fairness_violation(&client_accuracy)?,
            client_accuracy,
        })
    }
}
