//! Training regimes: mFairFL and its order ablations, FedAvg, FedAvg-f,
//! IndFair and CenFair.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{server_round, AggregationConfig, OrderPolicy, RoundTrace, SimilarityState};
use crate::client::{ClientStatistics, LagrangeMultipliers, LocalObjective, TrainingMode};
use crate::data::{pool, Shard};
use crate::error::{Error, Result};
use crate::fairness::{FairnessNotion, GroupDomain, GroupKey};
use crate::model::{predict_probs, MlpSpec, Sample};
use crate::numeric::{RngState, Vec64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeId {
    Fedavg,
    FedavgF,
    Indfair,
    Cenfair,
    Mfairfl,
    MfairflRnd,
    MfairflRev,
}

impl RegimeId {
    pub const ALL: [RegimeId; 7] = [
        RegimeId::Fedavg,
        RegimeId::FedavgF,
        RegimeId::Indfair,
        RegimeId::Cenfair,
        RegimeId::Mfairfl,
        RegimeId::MfairflRnd,
        RegimeId::MfairflRev,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegimeId::Fedavg => "fedavg",
            RegimeId::FedavgF => "fedavg_f",
            RegimeId::Indfair => "indfair",
            RegimeId::Cenfair => "cenfair",
            RegimeId::Mfairfl => "mfairfl",
            RegimeId::MfairflRnd => "mfairfl_rnd",
            RegimeId::MfairflRev => "mfairfl_rev",
        }
    }
}

impl fmt::Display for RegimeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeId::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

/// How FedAvg weights client updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    SampleSize,
}

/// Step budget of centralized training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CenfairBudget {
    /// `rounds` rounds of `epochs` local steps, as in federated training.
    #[default]
    Matched,
    /// One multiplier update per full-batch step, for `epochs` steps.
    Epochs { epochs: usize },
}

/// Hyperparameters shared by every regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rounds: usize,
    pub mode: TrainingMode,
    /// Server step size η.
    pub eta: f64,
    /// Fairness tolerance α.
    pub alpha: f64,
    /// Projection rate β.
    pub beta: f64,
    /// Dual step γ.
    pub gamma: f64,
    /// EMA decay δ.
    pub delta: f64,
    pub notion: FairnessNotion,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub cenfair_budget: CenfairBudget,
    #[serde(default = "yes")]
    pub renormalize: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            mode: TrainingMode::default(),
            eta: 0.1,
            alpha: 0.01,
            beta: 1.0,
            gamma: 3.0,
            delta: 0.1,
            notion: FairnessNotion::DemographicParity,
            hidden: vec![32; 4],
            weighting: Weighting::Uniform,
            cenfair_budget: CenfairBudget::Matched,
            renormalize: true,
        }
    }
}

impl TrainConfig {
    fn aggregation(&self, policy: OrderPolicy) -> AggregationConfig {
        AggregationConfig {
            beta: self.beta,
            delta: self.delta,
            gamma: self.gamma,
            eta: self.eta,
            alpha: self.alpha,
            order_policy: policy,
            beta_selection: Default::default(),
            renormalize: self.renormalize,
        }
    }

    pub fn objective(&self, input_dim: usize, domain: &GroupDomain) -> Result<LocalObjective> {
        Ok(LocalObjective {
            spec: MlpSpec::new(input_dim, self.hidden.clone())?,
            notion: self.notion,
            domain: domain.clone(),
            alpha: self.alpha,
        })
    }
}

/// A trained global model, or one model per client evaluated as a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    Global { params: Vec64 },
    Mixture { params: Vec<Vec64> },
}

impl TrainedModel {
    /// Averaged probabilities for a mixture.
    pub fn predict(&self, spec: &MlpSpec, samples: &[Sample]) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Global { params } => predict_probs(spec, params, samples),
            TrainedModel::Mixture { params } => {
                let k = params.len() as f64;
                let mut acc = vec![0.0; samples.len()];
                for p in params {
                    for (a, q) in acc.iter_mut().zip(predict_probs(spec, p, samples)?) {
                        *a += q;
                    }
                }
                Ok(acc.into_iter().map(|a| a / k).collect())
            }
        }
    }

    /// The model client `k` is scored with: its own for a mixture.
    pub fn for_client(&self, k: usize) -> Result<&Vec64> {
        match self {
            TrainedModel::Global { params } => Ok(params),
            TrainedModel::Mixture { params } => params
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("no model for client {k}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub trace: Vec<RoundTrace>,
}

impl TrainOutcome {
    pub fn global_params(&self) -> Result<&Vec64> {
        match &self.model {
            TrainedModel::Global { params } => Ok(params),
            TrainedModel::Mixture { .. } => Err(Error::InvalidArgument("mixture has no single model".into())),
        }
    }
}

/// Keys whose group has at least one sample across the shards.
pub fn supported_keys(shards: &[Shard], notion: FairnessNotion, domain: &GroupDomain) -> Vec<GroupKey> {
    domain
        .keys(notion)
        .into_iter()
        .filter(|k| shards.iter().flat_map(|s| &s.samples).any(|s| k.contains(s)))
        .collect()
}

fn check_shards(shards: &[Shard]) -> Result<(usize, GroupDomain)> {
    let first = shards
        .iter()
        .find_map(|s| s.samples.first())
        .ok_or_else(|| Error::Empty("no training samples".into()))?;
    if let Some(s) = shards.iter().find(|s| s.is_empty()) {
        return Err(Error::Empty(format!("client {} has an empty shard", s.client_id)));
    }
    let domain = GroupDomain::new(
        shards[0].group_counts.iter().map(Vec::len).collect(),
    );
    Ok((first.x.len(), domain))
}

fn init(obj: &LocalObjective, seed: RngState) -> Vec64 {
    obj.spec.init(seed.derive("init"))
}

fn collect_stats(
    obj: &LocalObjective,
    params: &Vec64,
    lambdas: &[&LagrangeMultipliers],
    shards: &[Shard],
    mode: TrainingMode,
) -> Result<Vec<ClientStatistics>> {
    shards
        .par_iter()
        .zip(lambdas.par_iter())
        .map(|(sh, lam)| obj.compute_statistics(params, lam, sh, mode))
        .collect()
}

/// Full mFairFL with the given projection-order policy.
pub fn run_mfairfl(shards: &[Shard], cfg: &TrainConfig, policy: OrderPolicy, seed: RngState) -> Result<TrainOutcome> {
    let (input_dim, domain) = check_shards(shards)?;
    let obj = cfg.objective(input_dim, &domain)?;
    let agg = cfg.aggregation(policy);
    agg.validate()?;
    let mut params = init(&obj, seed);
    let mut lambda = LagrangeMultipliers::zeros(supported_keys(shards, cfg.notion, &domain));
    let mut state = SimilarityState::new(shards.len(), cfg.delta)?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let lams = vec![&lambda; shards.len()];
        let stats = collect_stats(&obj, &params, &lams, shards, cfg.mode)?;
        let out = server_round(t, &params, &lambda, &stats, &agg, &state, seed)?;
        params = out.params;
        lambda = out.lambda;
        state = out.state;
        trace.push(out.trace);
    }
    Ok(TrainOutcome {
        model: TrainedModel::Global { params },
        trace,
    })
}

fn plain_trace(round: usize, stats: &[ClientStatistics], lambda: LagrangeMultipliers, g: &Vec64) -> Result<RoundTrace> {
    let grads: Vec<Vec64> = stats.iter().map(|s| s.update_grad.clone()).collect();
    let mut negative = 0;
    for i in 0..grads.len() {
        for j in i + 1..grads.len() {
            if grads[i].dot(&grads[j])? < 0.0 {
                negative += 1;
            }
        }
    }
    Ok(RoundTrace {
        round,
        client_loss: stats.iter().map(|s| (s.client_id, s.loss, s.lagrangian)).collect(),
        lambda,
        order: stats.iter().map(|s| s.client_id).collect(),
        adjustments: 0,
        pre_conflicts: negative,
        post_conflicts: negative,
        g_global_norm: g.norm(),
    })
}

/// Plain federated averaging of local loss updates, no constraints.
pub fn run_fedavg(shards: &[Shard], cfg: &TrainConfig, seed: RngState) -> Result<TrainOutcome> {
    let (input_dim, domain) = check_shards(shards)?;
    let obj = cfg.objective(input_dim, &domain)?;
    if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta = {} must be > 0", cfg.eta)));
    }
    let mut params = init(&obj, seed);
    let none = LagrangeMultipliers::default();
    let weights: Vec<f64> = shards.iter().map(|s| s.len() as f64).collect();
    let mut trace = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let lams = vec![&none; shards.len()];
        let stats = collect_stats(&obj, &params, &lams, shards, cfg.mode)?;
        let grads: Vec<Vec64> = stats.iter().map(|s| s.update_grad.clone()).collect();
        let g = match cfg.weighting {
            Weighting::Uniform => Vec64::mean_of(&grads)?,
            Weighting::SampleSize => Vec64::weighted_mean_of(&grads, &weights)?,
        };
        params = params.axpy(-cfg.eta, &g)?;
        trace.push(plain_trace(t, &stats, none.clone(), &g)?);
    }
    Ok(TrainOutcome {
        model: TrainedModel::Global { params },
        trace,
    })
}

/// Each client runs its own dual ascent on local constraints; the server
/// averages the raw updates.
pub fn run_fedavg_f(shards: &[Shard], cfg: &TrainConfig, seed: RngState) -> Result<TrainOutcome> {
    let (input_dim, domain) = check_shards(shards)?;
    let obj = cfg.objective(input_dim, &domain)?;
    if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta = {} must be > 0", cfg.eta)));
    }
    let mut params = init(&obj, seed);
    let mut lambdas: Vec<LagrangeMultipliers> = shards
        .iter()
        .map(|s| LagrangeMultipliers::zeros(supported_keys(std::slice::from_ref(s), cfg.notion, &domain)))
        .collect();
    let mut trace = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let lams: Vec<&LagrangeMultipliers> = lambdas.iter().collect();
        let stats = collect_stats(&obj, &params, &lams, shards, cfg.mode)?;
        for (lam, st) in lambdas.iter_mut().zip(&stats) {
            *lam = lam.ascend(&obj.constraint_values(&st.fairness)?, cfg.gamma)?;
        }
        let grads: Vec<Vec64> = stats.iter().map(|s| s.update_grad.clone()).collect();
        let g = Vec64::mean_of(&grads)?;
        params = params.axpy(-cfg.eta, &g)?;
        trace.push(plain_trace(t, &stats, LagrangeMultipliers::default(), &g)?);
    }
    Ok(TrainOutcome {
        model: TrainedModel::Global { params },
        trace,
    })
}

/// One independent constrained model per client.
pub fn run_indfair(shards: &[Shard], cfg: &TrainConfig, seed: RngState) -> Result<TrainOutcome> {
    check_shards(shards)?;
    let outcomes: Vec<TrainOutcome> = shards
        .par_iter()
        .map(|s| run_mfairfl(std::slice::from_ref(s), cfg, OrderPolicy::LossAscending, seed))
        .collect::<Result<_>>()?;
    let mut params = Vec::with_capacity(outcomes.len());
    let mut trace: Vec<RoundTrace> = Vec::new();
    for o in outcomes {
        params.push(o.global_params()?.clone());
        trace.extend(o.trace);
    }
    Ok(TrainOutcome {
        model: TrainedModel::Mixture { params },
        trace,
    })
}

/// Constrained training on the union of all shards.
pub fn run_cenfair(shards: &[Shard], cfg: &TrainConfig, seed: RngState) -> Result<TrainOutcome> {
    let (_, domain) = check_shards(shards)?;
    let pooled = pool(shards, &domain);
    let cfg = match (cfg.cenfair_budget, cfg.mode) {
        (CenfairBudget::Matched, _) => cfg.clone(),
        (CenfairBudget::Epochs { epochs }, TrainingMode::LocalEpochs { lr, .. }) => TrainConfig {
            rounds: epochs,
            mode: TrainingMode::LocalEpochs { epochs: 1, lr },
            ..cfg.clone()
        },
        (CenfairBudget::Epochs { epochs }, TrainingMode::SingleStep) => TrainConfig {
            rounds: epochs,
            ..cfg.clone()
        },
    };
    run_mfairfl(&[pooled], &cfg, OrderPolicy::LossAscending, seed)
}

pub fn run_regime(regime: RegimeId, shards: &[Shard], cfg: &TrainConfig, seed: RngState) -> Result<TrainOutcome> {
    match regime {
        RegimeId::Fedavg => run_fedavg(shards, cfg, seed),
        RegimeId::FedavgF => run_fedavg_f(shards, cfg, seed),
        RegimeId::Indfair => run_indfair(shards, cfg, seed),
        RegimeId::Cenfair => run_cenfair(shards, cfg, seed),
        RegimeId::Mfairfl => run_mfairfl(shards, cfg, OrderPolicy::LossAscending, seed),
        RegimeId::MfairflRnd => run_mfairfl(shards, cfg, OrderPolicy::Random, seed),
        RegimeId::MfairflRev => run_mfairfl(shards, cfg, OrderPolicy::Reversed, seed),
    }
}
