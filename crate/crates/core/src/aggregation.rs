//! Server side of a round: dual ascent on λ, projection order, conflict
//! curation with EMA similarity goals, magnitude renormalization and the
//! parameter step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::{ClientStatistics, LagrangeMultipliers};
use crate::error::{Error, Result};
use crate::fairness::{FairnessStatistics, GroupKey};
use crate::numeric::{RngState, Vec64};

/// Pairwise similarity goals `φ̂_ij`, stored symmetrically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityState {
    pub delta: f64,
    goals: Vec<Vec<f64>>,
}

impl SimilarityState {
    /// All goals start at zero.
    pub fn new(k: usize, delta: f64) -> Result<Self> {
        Self::uniform(k, 0.0, delta)
    }

    pub fn uniform(k: usize, goal: f64, delta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidArgument(format!("EMA decay {delta} outside [0, 1]")));
        }
        if !(-1.0..=1.0).contains(&goal) {
            return Err(Error::InvalidArgument(format!("goal {goal} outside [-1, 1]")));
        }
        Ok(Self {
            delta,
            goals: vec![vec![goal; k]; k],
        })
    }

    pub fn clients(&self) -> usize {
        self.goals.len()
    }

    pub fn goal(&self, i: usize, j: usize) -> f64 {
        self.goals[i][j]
    }

    /// `φ̂ ← δ φ̂ + (1 - δ) φ`, written to both `(i, j)` and `(j, i)`.
    pub fn ema_update(&mut self, i: usize, j: usize, phi: f64) -> Result<f64> {
        let base = self.goals.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0);
        self.ema_from(base, i, j, phi)
    }

    /// Same recursion, blending from an explicit previous goal.
    fn ema_from(&mut self, base: f64, i: usize, j: usize, phi: f64) -> Result<f64> {
        if !(-1.0..=1.0).contains(&phi) {
            return Err(Error::InvalidArgument(format!("observed cosine {phi} outside [-1, 1]")));
        }
        let k = self.clients();
        if i >= k || j >= k {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) outside {k} clients")));
        }
        let g = self.delta * base + (1.0 - self.delta) * phi;
        self.goals[i][j] = g;
        self.goals[j][i] = g;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    #[default]
    LossAscending,
    Random,
    Reversed,
}

/// Which clients have their gradients curated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSelection {
    /// The first `⌈βK⌉` clients of the order.
    #[default]
    FirstInOrder,
    /// All but the last `⌈βK⌉` clients of the order keep being adjusted.
    KeepLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Fairness tolerance used for the global constraint values.
    pub alpha: f64,
    #[serde(default)]
    pub order_policy: OrderPolicy,
    #[serde(default)]
    pub beta_selection: BetaSelection,
    /// Rescale the curated gradient to the norm of the plain mean.
    #[serde(default = "yes")]
    pub renormalize: bool,
}

fn yes() -> bool {
    true
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("delta", self.delta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma = {} must be >= 0", self.gamma)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta = {} must be > 0", self.eta)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be finite".into()));
        }
        Ok(())
    }

    /// Number of curated clients, `⌈βK⌉`, robust to rounding in `βK`.
    pub fn selected_count(&self, k: usize) -> usize {
        let raw = self.beta * k as f64;
        let n = (raw - 1e-9).ceil().max(0.0) as usize;
        n.min(k)
    }
}

/// A permutation of client positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProjectionOrder(Vec<usize>);

impl ProjectionOrder {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::InvalidArgument(format!("{order:?} is not a permutation"))),
            }
        }
        Ok(Self(order))
    }

    pub fn identity(k: usize) -> Self {
        Self((0..k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Orders positions by `losses` under `policy`; ties go to the lower client id.
    pub fn build(losses: &[f64], ids: &[usize], policy: OrderPolicy, rng: RngState) -> Result<Self> {
        if losses.len() != ids.len() {
            return Err(Error::LengthMismatch {
                expected: ids.len(),
                actual: losses.len(),
            });
        }
        let mut order: Vec<usize> = (0..losses.len()).collect();
        match policy {
            OrderPolicy::LossAscending | OrderPolicy::Reversed => {
                order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(ids[a].cmp(&ids[b])));
                if policy == OrderPolicy::Reversed {
                    order.reverse();
                }
            }
            OrderPolicy::Random => order.shuffle(&mut rng.rng()),
        }
        Ok(Self(order))
    }
}

/// `λ' = max(0, λ + γ h)`.
pub fn update_lambda(
    lambda: &LagrangeMultipliers,
    h: &BTreeMap<GroupKey, f64>,
    gamma: f64,
) -> Result<LagrangeMultipliers> {
    lambda.ascend(h, gamma)
}

/// Coefficient `c` with `g_k' = g_k - c g_j`.
pub fn adjust_coefficient(norm_k: f64, norm_j: f64, phi: f64, goal: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&phi) {
        return Err(Error::InvalidArgument(format!("cosine {phi} outside [-1, 1]")));
    }
    if !(goal.abs() < 1.0) {
        return Err(Error::Degenerate(format!("goal {goal} has no finite adjustment")));
    }
    if norm_k == 0.0 || norm_j == 0.0 {
        return Err(Error::ZeroNorm("adjust_coefficient"));
    }
    let sg = (1.0 - goal * goal).sqrt();
    let sp = (1.0 - phi * phi).sqrt();
    Ok(norm_k * (phi * sg - goal * sp) / (norm_j * sg))
}

/// Moves `g_k` along `g_j` until `cos(g_k', g_j) = goal`.
pub fn adjust_gradient(g_k: &Vec64, g_j: &Vec64, phi: f64, goal: f64) -> Result<Vec64> {
    if phi > goal {
        return Err(Error::InvalidArgument(format!(
            "no conflict to resolve: cosine {phi} already above goal {goal}"
        )));
    }
    let c = adjust_coefficient(g_k.norm(), g_j.norm(), phi, goal)?;
    if phi == goal {
        return Ok(g_k.clone());
    }
    // An antiparallel pair maps to (numerically) zero, the limit of the
    // adjustment as phi -> -1. The sweep skips zero vectors afterwards.
    g_k.axpy(-c, g_j)
}

/// One pair test of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepStep {
    pub client: usize,
    pub target: usize,
    pub phi: f64,
    pub goal: f64,
    /// `c` of `g ← g - c g_target`, zero when no adjustment was made.
    pub coefficient: f64,
    pub adjusted: bool,
}

/// Counts and the step log of one curation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepReport {
    pub adjustments: usize,
    pub adjusted_clients: Vec<usize>,
    /// Unordered pairs of raw gradients with negative cosine.
    pub pre_conflicts: usize,
    /// Unordered pairs of curated gradients with negative cosine.
    pub post_conflicts: usize,
    /// Largest `|c| ‖g_target‖ / ‖g_client‖` over the adjustments.
    pub max_relative_step: f64,
    pub steps: Vec<SweepStep>,
}

fn negative_pairs(gs: &[Vec64]) -> Result<usize> {
    let mut n = 0;
    for i in 0..gs.len() {
        for j in i + 1..gs.len() {
            if gs[i].dot(&gs[j])? < 0.0 {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// The curation sweep over client gradients (indexed by position).
///
/// Goals read during the sweep, and the base of every EMA step, come from
/// `state`; updates go to the returned copy. Pairs involving a zero gradient
/// are skipped.
pub fn diminish_conflicts(
    grads: &[Vec64],
    order: &ProjectionOrder,
    config: &AggregationConfig,
    state: &SimilarityState,
) -> Result<(Vec64, SimilarityState, SweepReport)> {
    let k = grads.len();
    if k == 0 {
        return Err(Error::Empty("no client gradients".into()));
    }
    if order.len() != k || state.clients() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            actual: if order.len() != k { order.len() } else { state.clients() },
        });
    }
    let n_sel = config.selected_count(k);
    let po = order.as_slice();
    let selected: &[usize] = match config.beta_selection {
        BetaSelection::FirstInOrder => &po[..n_sel],
        BetaSelection::KeepLast => &po[..k - n_sel],
    };
    let mut working = grads.to_vec();
    let mut next = state.clone();
    let mut report = SweepReport {
        pre_conflicts: negative_pairs(grads)?,
        ..SweepReport::default()
    };
    for &c in selected {
        for &i in po {
            if i == c || working[c].norm() == 0.0 || grads[i].norm() == 0.0 {
                continue;
            }
            let phi = working[c].cosine(&grads[i])?;
            let goal = state.goal(c, i);
            let mut step = SweepStep {
                client: c,
                target: i,
                phi,
                goal,
                coefficient: 0.0,
                adjusted: false,
            };
            if phi < goal {
                let coef = adjust_coefficient(working[c].norm(), grads[i].norm(), phi, goal)?;
                let rel = coef.abs() * grads[i].norm() / working[c].norm();
                working[c] = adjust_gradient(&working[c], &grads[i], phi, goal)?;
                step.coefficient = coef;
                step.adjusted = true;
                report.adjustments += 1;
                report.max_relative_step = report.max_relative_step.max(rel);
                if report.adjusted_clients.last() != Some(&c) {
                    report.adjusted_clients.push(c);
                }
            }
            report.steps.push(step);
            next.ema_from(goal, c, i, phi)?;
        }
    }
    report.post_conflicts = negative_pairs(&working)?;
    Ok((Vec64::mean_of(&working)?, next, report))
}

/// Curation sweep followed by rescaling to the norm of the plain mean.
pub fn aggregate_gradients(
    grads: &[Vec64],
    order: &ProjectionOrder,
    config: &AggregationConfig,
    state: &SimilarityState,
) -> Result<(Vec64, SimilarityState, SweepReport)> {
    let (mut g, next, report) = diminish_conflicts(grads, order, config, state)?;
    // With no adjustment the curated mean is the plain mean; rescaling would
    // only add rounding.
    if config.renormalize && report.adjustments > 0 {
        let target = Vec64::mean_of(grads)?.norm();
        let norm = g.norm();
        if norm == 0.0 {
            if target > 0.0 {
                return Err(Error::Degenerate("curated gradients cancelled to zero".into()));
            }
        } else {
            g = g.scale(target / norm)?;
        }
    }
    Ok((g, next, report))
}

/// Global constraint values from the merged client statistics.
pub fn global_constraints(parts: &[FairnessStatistics], alpha: f64) -> Result<BTreeMap<GroupKey, f64>> {
    let merged = FairnessStatistics::merge(parts)?;
    merged
        .supported_keys()
        .into_iter()
        .map(|k| Ok((k, merged.gap(&k)?.abs() - alpha)))
        .collect()
}

/// Per-round audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// (client id, loss, lagrangian) per client.
    pub client_loss: Vec<(usize, f64, f64)>,
    pub lambda: LagrangeMultipliers,
    pub order: Vec<usize>,
    pub adjustments: usize,
    pub pre_conflicts: usize,
    pub post_conflicts: usize,
    pub g_global_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub params: Vec64,
    pub lambda: LagrangeMultipliers,
    pub state: SimilarityState,
    pub trace: RoundTrace,
}

/// One server step given the clients' uploads.
pub fn server_round(
    round: usize,
    params: &Vec64,
    lambda: &LagrangeMultipliers,
    stats: &[ClientStatistics],
    config: &AggregationConfig,
    state: &SimilarityState,
    seed: RngState,
) -> Result<RoundOutcome> {
    config.validate()?;
    if stats.is_empty() {
        return Err(Error::Empty("no client statistics".into()));
    }
    let parts: Vec<FairnessStatistics> = stats.iter().map(|s| s.fairness.clone()).collect();
    let h = global_constraints(&parts, config.alpha)?;
    let lambda_next = update_lambda(lambda, &h, config.gamma)?;
    let losses: Vec<f64> = stats.iter().map(|s| s.lagrangian).collect();
    let ids: Vec<usize> = stats.iter().map(|s| s.client_id).collect();
    let order = ProjectionOrder::build(&losses, &ids, config.order_policy, seed.derive_index("order", round as u64))?;
    let grads: Vec<Vec64> = stats.iter().map(|s| s.update_grad.clone()).collect();
    if grads.iter().any(|g| g.len() != params.len()) {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: grads.iter().map(Vec64::len).find(|&l| l != params.len()).unwrap_or(0),
        });
    }
    let (g, next_state, report) = aggregate_gradients(&grads, &order, config, state)?;
    let params_next = params.axpy(-config.eta, &g)?;
    Ok(RoundOutcome {
        params: params_next,
        trace: RoundTrace {
            round,
            client_loss: stats.iter().map(|s| (s.client_id, s.loss, s.lagrangian)).collect(),
            lambda: lambda_next.clone(),
            order: order.as_slice().iter().map(|&p| ids[p]).collect(),
            adjustments: report.adjustments,
            pre_conflicts: report.pre_conflicts,
            post_conflicts: report.post_conflicts,
            g_global_norm: g.norm(),
        },
        lambda: lambda_next,
        state: next_state,
    })
}
