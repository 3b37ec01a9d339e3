//! Client side of a round: the local Lagrangian objective, optional local
//! epochs, and the statistics upload.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessNotion, FairnessStatistics, GroupDomain, GroupKey};
use crate::model::{bce_dlogit, BatchForward, MlpSpec, Sample};
use crate::numeric::Vec64;

/// Nonnegative multipliers, one per constraint key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct LagrangeMultipliers {
    values: BTreeMap<GroupKey, f64>,
}

impl LagrangeMultipliers {
    pub fn zeros(keys: impl IntoIterator<Item = GroupKey>) -> Self {
        Self {
            values: keys.into_iter().map(|k| (k, 0.0)).collect(),
        }
    }

    pub fn from_map(values: BTreeMap<GroupKey, f64>) -> Result<Self> {
        if let Some((k, v)) = values.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("multiplier {k} = {v} must be finite and >= 0")));
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &GroupKey) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupKey, &f64)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<GroupKey, f64> {
        &self.values
    }

    /// Projected dual step `λ ← max(0, λ + γ h)`. Key sets must match.
    pub fn ascend(&self, h: &BTreeMap<GroupKey, f64>, gamma: f64) -> Result<Self> {
        if h.len() != self.values.len() || h.keys().zip(self.values.keys()).any(|(a, b)| a != b) {
            return Err(Error::KeyMismatch(format!(
                "multipliers {:?} vs constraints {:?}",
                self.values.keys().map(ToString::to_string).collect::<Vec<_>>(),
                h.keys().map(ToString::to_string).collect::<Vec<_>>()
            )));
        }
        let values = self
            .values
            .iter()
            .map(|(k, l)| {
                let v = (l + gamma * h[k]).max(0.0);
                if v.is_finite() {
                    Ok((*k, v))
                } else {
                    Err(Error::NonFinite(format!("multiplier {k}")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingMode {
    /// One gradient of the Lagrangian at the received parameters.
    SingleStep,
    /// `epochs` full-batch descent steps with rate `lr`, λ held fixed.
    LocalEpochs { epochs: usize, lr: f64 },
}

impl Default for TrainingMode {
    fn default() -> Self {
        TrainingMode::LocalEpochs { epochs: 20, lr: 0.1 }
    }
}

/// The upload of one client for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientStatistics {
    pub client_id: usize,
    /// Mean cross-entropy at the received parameters.
    pub loss: f64,
    /// `loss + Σ λ h` on the local data, used to order clients.
    pub lagrangian: f64,
    pub loss_grad: Vec64,
    pub fairness: FairnessStatistics,
    pub update_grad: Vec64,
    pub n_k: usize,
}

/// Everything a client needs to evaluate its local Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalObjective {
    pub spec: MlpSpec,
    pub notion: FairnessNotion,
    pub domain: GroupDomain,
    /// Fairness tolerance α.
    pub alpha: f64,
}

/// Value and gradient of the Lagrangian on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianEval {
    pub loss: f64,
    pub value: f64,
    pub grad: Vec64,
}

impl LocalObjective {
    /// Local constraint values `h_s = |gap_s| - α` over keys with local support.
    pub fn constraint_values(&self, stats: &FairnessStatistics) -> Result<BTreeMap<GroupKey, f64>> {
        stats
            .supported_keys()
            .into_iter()
            .map(|k| Ok((k, stats.gap(&k)?.abs() - self.alpha)))
            .collect()
    }

    /// `L + Σ λ_s h_s` and its gradient. Keys without local support, or with
    /// `λ_s = 0`, contribute nothing.
    pub fn lagrangian(&self, params: &Vec64, lambda: &LagrangeMultipliers, samples: &[Sample]) -> Result<LagrangianEval> {
        let fwd = BatchForward::run(&self.spec, params, samples)?;
        self.lagrangian_from(&fwd, lambda, samples)
    }

    fn lagrangian_from(
        &self,
        fwd: &BatchForward<'_>,
        lambda: &LagrangeMultipliers,
        samples: &[Sample],
    ) -> Result<LagrangianEval> {
        let n = samples.len() as f64;
        let loss = fwd.losses(samples).iter().sum::<f64>() / n;
        let mut weights: Vec<f64> = fwd
            .probs
            .iter()
            .zip(samples)
            .map(|(&p, s)| bce_dlogit(p, s.y) / n)
            .collect();
        let surr: Vec<(f64, f64)> = fwd
            .probs
            .iter()
            .zip(samples)
            .map(|(&p, s)| fairness::surrogate(self.notion, p, s.y))
            .collect();
        let mut value = loss;
        for (key, &lam) in lambda.iter() {
            if lam == 0.0 {
                continue;
            }
            let in_pop = |s: &Sample| key.label.is_none_or(|y| s.y == y);
            let (mut sg, mut ng, mut st, mut nt) = (0.0, 0usize, 0.0, 0usize);
            for (s, &(v, _)) in samples.iter().zip(&surr) {
                if in_pop(s) {
                    st += v;
                    nt += 1;
                    if key.contains(s) {
                        sg += v;
                        ng += 1;
                    }
                }
            }
            if ng == 0 {
                continue;
            }
            let gap = st / nt as f64 - sg / ng as f64;
            value += lam * (gap.abs() - self.alpha);
            let sign = if gap > 0.0 {
                1.0
            } else if gap < 0.0 {
                -1.0
            } else {
                0.0
            };
            if sign == 0.0 {
                continue;
            }
            for ((w, s), &(_, d)) in weights.iter_mut().zip(samples).zip(&surr) {
                if in_pop(s) {
                    let mut c = 1.0 / nt as f64;
                    if key.contains(s) {
                        c -= 1.0 / ng as f64;
                    }
                    *w += lam * sign * c * d;
                }
            }
        }
        let grad = fwd.backward(&weights)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("lagrangian value".into()));
        }
        Ok(LagrangianEval { loss, value, grad })
    }

    /// Builds the round upload. Loss and fairness statistics are always
    /// evaluated at the received parameters.
    pub fn compute_statistics(
        &self,
        params: &Vec64,
        lambda: &LagrangeMultipliers,
        shard: &Shard,
        mode: TrainingMode,
    ) -> Result<ClientStatistics> {
        if shard.is_empty() {
            return Err(Error::Empty(format!("client {} has an empty shard", shard.client_id)));
        }
        let samples = &shard.samples;
        let fwd = BatchForward::run(&self.spec, params, samples)?;
        let fairness = FairnessStatistics::from_forward(&fwd, samples, self.notion, &self.domain)?;
        let n = samples.len() as f64;
        let dlogit: Vec<f64> = fwd
            .probs
            .iter()
            .zip(samples)
            .map(|(&p, s)| bce_dlogit(p, s.y) / n)
            .collect();
        let loss_grad = fwd.backward(&dlogit)?;
        let first = self.lagrangian_from(&fwd, lambda, samples)?;
        let update_grad = match mode {
            TrainingMode::SingleStep => first.grad.clone(),
            TrainingMode::LocalEpochs { epochs, lr } => {
                if epochs == 0 || !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "local epochs need epochs >= 1 and lr > 0 (got {epochs}, {lr})"
                    )));
                }
                let mut acc = first.grad.clone();
                let mut w = params.axpy(-lr, &first.grad)?;
                for _ in 1..epochs {
                    let g = self.lagrangian(&w, lambda, samples)?.grad;
                    acc.add_scaled_in_place(1.0, &g)?;
                    w.add_scaled_in_place(-lr, &g)?;
                }
                acc
            }
        };
        Ok(ClientStatistics {
            client_id: shard.client_id,
            loss: first.loss,
            lagrangian: first.value,
            loss_grad,
            fairness,
            update_grad,
            n_k: samples.len(),
        })
    }
}

/// Accuracy of thresholded predictions on one shard.
pub fn local_accuracy(spec: &MlpSpec, params: &Vec64, shard: &Shard) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::Empty(format!("client {} has an empty shard", shard.client_id)));
    }
    let probs = BatchForward::run(spec, params, &shard.samples)?.probs;
    fairness::accuracy(&probs, &shard.samples)
}
