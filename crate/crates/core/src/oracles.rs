//! Independent checks of the closed forms and the two convergence results.
//!
//! Everything here is written to be dumb and obviously correct: central
//! differences, bisection, and direct replays of the sweep. The checkers run
//! the real aggregation code and compare against these.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_gradients, diminish_conflicts, AggregationConfig, BetaSelection, OrderPolicy,
    ProjectionOrder, SimilarityState, SweepReport,
};
use crate::error::{Error, Result};
use crate::numeric::{RngState, Vec64};

/// Central differences of `f` at `params`, one coordinate at a time.
pub fn finite_diff<F>(f: F, params: &Vec64, step: f64) -> Result<Vec64>
where
    F: Fn(&Vec64) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    let mut probe = params.clone().into_inner();
    let mut out = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&Vec64::from_vec_unchecked(probe.clone()));
        probe[i] = orig - step;
        let down = f(&Vec64::from_vec_unchecked(probe.clone()));
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((up - down) / (2.0 * step));
    }
    Vec64::new(out)
}

/// Solves `cos(g_k + c g_j, g_j) = goal` for `c` by bisection.
///
/// The cosine is monotone in `c`, so once a bracket is found the root is
/// unique. Adjusting with the closed form gives `g_k - c' g_j`, hence the
/// result should equal `-c'`.
pub fn c2_bisection(g_k: &Vec64, g_j: &Vec64, goal: f64) -> Result<f64> {
    if !(goal.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("goal {goal} must lie in (-1, 1)")));
    }
    let phi = g_k.cosine(g_j)?;
    if phi.abs() >= 1.0 - 1e-14 {
        return Err(Error::Degenerate("g_k is parallel to g_j".into()));
    }
    if phi > goal {
        return Err(Error::InvalidArgument(format!("no conflict: cosine {phi} above goal {goal}")));
    }
    if phi == goal {
        return Ok(0.0);
    }
    let f = |c: f64| -> Result<f64> { Ok(g_k.axpy(c, g_j)?.cosine(g_j)? - goal) };
    let mut lo = 0.0;
    let mut hi = g_k.norm() / g_j.norm();
    let mut expansions = 0;
    while f(hi)? < 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Degenerate("no sign change in bracket".into()));
        }
    }
    // Runs to machine resolution, well past the 1e-12 target.
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Conflict bound at 1-based position `k` for `k_total` clients.
///
/// `max_norm` is the largest raw gradient norm. This is the bare formula; use
/// [`position_bounds`] for hypothesis checking.
pub fn conflict_bound(k_total: usize, k: usize, max_norm: f64, eps1: f64, eps2: f64, goal: f64) -> f64 {
    let s = (1.0 - goal * goal).sqrt();
    let x = |e: f64| (e * s - goal * (1.0 - e * e).sqrt()) / s;
    let (xmax, xmin) = (x(eps2), x(eps1));
    let kk = k_total as f64;
    let tail = 1.0 - (1.0 - xmin).powi((k_total - k) as i32);
    (kk - 1.0) / kk * max_norm * max_norm * eps2 * xmax * (1.0 - xmin) * tail / xmin
}

/// A gradient set with the cosine envelope it is claimed to satisfy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInstance {
    pub grads: Vec<Vec64>,
    pub goal: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub order: ProjectionOrder,
}

/// One row per order position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    /// 1-based position in the projection order.
    pub position: usize,
    pub client: usize,
    /// `max(0, -g_global · g_k)`.
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k_total: usize,
    pub goal: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub max_norm: f64,
    pub rows: Vec<BoundRow>,
    /// Bounds never increase along the order.
    pub monotone: bool,
    /// Every pair test of the sweep found a conflict.
    pub all_conflicting: bool,
    /// Every cosine seen during the sweep lies within `[eps1, eps2]`.
    pub envelope_holds: bool,
    pub adjustments: usize,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.monotone && self.rows.iter().all(|r| r.pass)
    }
}

/// Absolute slack on the bound comparison, scaled by `max_norm²`.
pub const BOUND_SLACK: f64 = 1e-12;

fn check_hypothesis(eps1: f64, eps2: f64, goal: f64) -> Result<()> {
    if !(0.0 < eps1 && eps1 < goal && goal <= eps2 && eps2 <= 1.0) {
        return Err(Error::Hypothesis(format!(
            "need 0 < eps1 < goal <= eps2 <= 1, got eps1 = {eps1}, goal = {goal}, eps2 = {eps2}"
        )));
    }
    Ok(())
}

/// Per-position bounds after checking `0 < eps1 < goal <= eps2 <= 1`.
pub fn position_bounds(instance: &BoundInstance) -> Result<Vec<f64>> {
    check_hypothesis(instance.eps1, instance.eps2, instance.goal)?;
    let k = instance.grads.len();
    if k == 0 {
        return Err(Error::Empty("no gradients".into()));
    }
    let m = instance.grads.iter().map(Vec64::norm).fold(0.0, f64::max);
    Ok((1..=k)
        .map(|pos| conflict_bound(k, pos, m, instance.eps1, instance.eps2, instance.goal))
        .collect())
}

fn bound_config() -> AggregationConfig {
    AggregationConfig {
        beta: 1.0,
        delta: 1.0,
        gamma: 0.0,
        eta: 1.0,
        alpha: 0.0,
        order_policy: OrderPolicy::LossAscending,
        beta_selection: BetaSelection::FirstInOrder,
        renormalize: false,
    }
}

fn run_sweep(grads: &[Vec64], order: &ProjectionOrder, goal: f64) -> Result<(Vec64, SweepReport)> {
    let state = SimilarityState::uniform(grads.len(), goal, 1.0)?;
    let (g, _, report) = diminish_conflicts(grads, order, &bound_config(), &state)?;
    Ok((g, report))
}

/// Every version each client's gradient passed through during the sweep,
/// rebuilt from the step log.
fn histories(grads: &[Vec64], report: &SweepReport) -> Result<Vec<Vec<Vec64>>> {
    let mut hist: Vec<Vec<Vec64>> = grads.iter().map(|g| vec![g.clone()]).collect();
    for s in report.steps.iter().filter(|s| s.adjusted) {
        let last = hist[s.client].last().expect("history starts non-empty");
        let next = last.axpy(-s.coefficient, &grads[s.target])?;
        hist[s.client].push(next);
    }
    Ok(hist)
}

/// `(min, max)` of `|cos|` over the sweep: every tested pair and every pair
/// of versions belonging to different clients.
fn envelope(grads: &[Vec64], report: &SweepReport) -> Result<(f64, f64)> {
    let hist = histories(grads, report)?;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut see = |c: f64| {
        lo = lo.min(c.abs());
        hi = hi.max(c.abs());
    };
    for s in &report.steps {
        see(s.phi);
    }
    for i in 0..hist.len() {
        for j in 0..hist.len() {
            if i == j {
                continue;
            }
            for a in &hist[i] {
                for b in &hist[j] {
                    see(a.cosine(b)?);
                }
            }
        }
    }
    Ok((lo, hi))
}

impl BoundInstance {
    /// Rejection-samples Gaussian gradients (each scaled by U(0.5, 2)) with a
    /// goal drawn from U(0.05, 0.5) until every pair test conflicts and the
    /// observed envelope satisfies the hypothesis.
    pub fn generate(k: usize, dim: usize, rng: RngState, max_retries: usize) -> Result<Self> {
        if k < 2 || dim == 0 {
            return Err(Error::InvalidArgument("need k >= 2 and dim >= 1".into()));
        }
        let mut r = rng.rng();
        let order = ProjectionOrder::identity(k);
        for _ in 0..max_retries {
            let goal: f64 = r.random_range(0.05..0.5);
            let grads = (0..k)
                .map(|_| {
                    let scale: f64 = r.random_range(0.5..2.0);
                    let v: Vec<f64> = (0..dim)
                        .map(|_| { let z: f64 = StandardNormal.sample(&mut r); scale * z })
                        .collect();
                    Vec64::new(v)
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, report) = match run_sweep(&grads, &order, goal) {
                Ok(x) => x,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            if report.steps.iter().any(|s| !s.adjusted) {
                continue;
            }
            let (lo, hi) = envelope(&grads, &report)?;
            let (eps1, eps2) = (lo, hi.max(goal));
            if check_hypothesis(eps1, eps2, goal).is_err() {
                continue;
            }
            return Ok(Self {
                grads,
                goal,
                eps1,
                eps2,
                order,
            });
        }
        Err(Error::Hypothesis(format!(
            "no instance with k = {k}, dim = {dim} after {max_retries} attempts"
        )))
    }
}

/// Runs the real sweep on the instance and compares each position's conflict
/// with the aggregate against its bound.
pub fn bound_check(instance: &BoundInstance) -> Result<BoundReport> {
    let bounds = position_bounds(instance)?;
    let k = instance.grads.len();
    let (g, report) = run_sweep(&instance.grads, &instance.order, instance.goal)?;
    let (lo, hi) = envelope(&instance.grads, &report)?;
    let m = instance.grads.iter().map(Vec64::norm).fold(0.0, f64::max);
    let slack = BOUND_SLACK * (m * m).max(1.0);
    let rows = instance
        .order
        .as_slice()
        .iter()
        .enumerate()
        .map(|(p, &c)| {
            let observed = (-g.dot(&instance.grads[c])?).max(0.0);
            let bound = bounds[p];
            Ok(BoundRow {
                position: p + 1,
                client: c,
                observed,
                bound,
                pass: observed <= bound + slack,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let monotone = bounds.windows(2).all(|w| w[1] <= w[0]);
    Ok(BoundReport {
        k_total: k,
        goal: instance.goal,
        eps1: instance.eps1,
        eps2: instance.eps2,
        max_norm: m,
        rows,
        monotone,
        all_conflicting: report.steps.iter().all(|s| s.adjusted),
        envelope_holds: report.steps.is_empty() || (lo >= instance.eps1 && hi <= instance.eps2),
        adjustments: report.adjustments,
    })
}

/// Outcome of a batch of generated instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub requested: usize,
    /// Instances the generator could not produce within the retry cap.
    pub skipped: usize,
    pub reports: Vec<BoundReport>,
}

impl CampaignSummary {
    pub fn violations(&self) -> usize {
        self.reports.iter().flat_map(|r| &r.rows).filter(|r| !r.pass).count()
    }

    pub fn non_monotone(&self) -> usize {
        self.reports.iter().filter(|r| !r.monotone).count()
    }

    /// One CSV line per instance.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "instance", "k", "goal", "eps1", "eps2", "max_norm", "worst_margin", "monotone", "passed",
        ])?;
        for (i, r) in self.reports.iter().enumerate() {
            let margin = r
                .rows
                .iter()
                .map(|row| row.bound - row.observed)
                .fold(f64::INFINITY, f64::min);
            w.write_record([
                i.to_string(),
                r.k_total.to_string(),
                r.goal.to_string(),
                r.eps1.to_string(),
                r.eps2.to_string(),
                r.max_norm.to_string(),
                margin.to_string(),
                r.monotone.to_string(),
                r.passed().to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// Generates and checks `n` instances, cycling through `ks` and `dims`.
/// Instance `i` draws from its own stream, so results do not depend on
/// thread scheduling.
pub fn bound_campaign(
    n: usize,
    ks: &[usize],
    dims: &[usize],
    seed: RngState,
    max_retries: usize,
) -> Result<CampaignSummary> {
    if ks.is_empty() || dims.is_empty() {
        return Err(Error::Empty("campaign needs at least one k and one dim".into()));
    }
    let results: Vec<Result<Option<BoundReport>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let k = ks[i % ks.len()];
            let dim = dims[(i / ks.len()) % dims.len()];
            match BoundInstance::generate(k, dim, seed.derive_index("conflict-bound", i as u64), max_retries) {
                Ok(inst) => bound_check(&inst).map(Some),
                Err(Error::Hypothesis(msg)) => {
                    log::warn!("instance {i} skipped: {msg}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut reports = Vec::with_capacity(n);
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(rep) => reports.push(rep),
            None => skipped += 1,
        }
    }
    Ok(CampaignSummary {
        requested: n,
        skipped,
        reports,
    })
}

/// `J(w) = mean_i ½ (w - c_i)ᵀ A_i (w - c_i)` over the clients.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub hessians: Vec<DMatrix<f64>>,
    pub centers: Vec<DVector<f64>>,
    pub start: Vec64,
    /// Largest eigenvalue of the mean Hessian.
    pub smoothness: f64,
}

impl QuadraticProblem {
    pub fn new(hessians: Vec<DMatrix<f64>>, centers: Vec<DVector<f64>>, start: Vec64) -> Result<Self> {
        let k = hessians.len();
        if k == 0 || centers.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                actual: centers.len(),
            });
        }
        let d = start.len();
        if hessians.iter().any(|a| a.nrows() != d || a.ncols() != d) || centers.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidArgument("dimension mismatch in quadratic problem".into()));
        }
        let mean = hessians.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) / k as f64;
        let eig = SymmetricEigen::new(mean);
        let smoothness = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            hessians,
            centers,
            start,
            smoothness,
        })
    }

    /// Two clients with `A = QQᵀ/d + 0.1 I`, centers and start drawn from
    /// N(0, 3²).
    pub fn random_two_client(dim: usize, rng: RngState) -> Result<Self> {
        let mut r = rng.rng();
        let mut normal = |scale: f64, n: usize| -> Vec<f64> {
            (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut r); scale * z }).collect()
        };
        let mut hessians = Vec::new();
        let mut centers = Vec::new();
        for _ in 0..2 {
            let q = DMatrix::from_vec(dim, dim, normal(1.0, dim * dim));
            let a = &q * q.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.1;
            hessians.push(a);
            centers.push(DVector::from_vec(normal(3.0, dim)));
        }
        let start = Vec64::new(normal(3.0, dim))?;
        Self::new(hessians, centers, start)
    }

    fn diff(&self, i: usize, w: &Vec64) -> DVector<f64> {
        DVector::from_column_slice(w.as_slice()) - &self.centers[i]
    }

    pub fn client_value(&self, i: usize, w: &Vec64) -> f64 {
        let d = self.diff(i, w);
        0.5 * d.dot(&(&self.hessians[i] * &d))
    }

    pub fn client_grad(&self, i: usize, w: &Vec64) -> Result<Vec64> {
        let g = &self.hessians[i] * self.diff(i, w);
        Vec64::new(g.as_slice().to_vec())
    }

    pub fn value(&self, w: &Vec64) -> f64 {
        let k = self.hessians.len();
        (0..k).map(|i| self.client_value(i, w)).sum::<f64>() / k as f64
    }
}

/// Aggregation settings for the descent check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    pub rounds: usize,
    pub delta: f64,
    pub initial_goal: f64,
    pub renormalize: bool,
}

impl Default for DescentConfig {
    /// Frozen zero goals, no rescaling: the setting the step-size condition
    /// is stated for.
    fn default() -> Self {
        Self {
            rounds: 50,
            delta: 1.0,
            initial_goal: 0.0,
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    /// `J` before round 0 and after every round.
    pub values: Vec<f64>,
    /// Rounds whose objective rose by more than [`DESCENT_TOL`].
    pub increases: Vec<usize>,
    pub eta: f64,
    /// Largest `|c| ‖g_j‖ / ‖g_k‖` over all adjustments.
    pub c_max: f64,
    /// `2 / (L (1 + c_max²))`.
    pub eta_limit: f64,
    pub compliant: bool,
}

impl DescentTrace {
    pub fn passed(&self) -> bool {
        self.increases.is_empty()
    }
}

pub const DESCENT_TOL: f64 = 1e-10;

/// Step size that satisfies the condition whenever goals are zero, since then
/// every relative step is `|φ| ≤ 1`.
pub fn zero_goal_safe_eta(smoothness: f64) -> f64 {
    0.99 / smoothness
}

/// Runs curated gradient descent on the quadratic problem and records `J`.
pub fn descent_check(problem: &QuadraticProblem, eta: f64, cfg: &DescentConfig) -> Result<DescentTrace> {
    let k = problem.hessians.len();
    let agg = AggregationConfig {
        beta: 1.0,
        delta: cfg.delta,
        gamma: 0.0,
        eta,
        alpha: 0.0,
        order_policy: OrderPolicy::LossAscending,
        beta_selection: BetaSelection::FirstInOrder,
        renormalize: cfg.renormalize,
    };
    agg.validate()?;
    let ids: Vec<usize> = (0..k).collect();
    let mut state = SimilarityState::uniform(k, cfg.initial_goal, cfg.delta)?;
    let mut w = problem.start.clone();
    let mut values = vec![problem.value(&w)];
    let mut increases = Vec::new();
    let mut c_max: f64 = 0.0;
    for round in 0..cfg.rounds {
        let grads = (0..k).map(|i| problem.client_grad(i, &w)).collect::<Result<Vec<_>>>()?;
        let losses: Vec<f64> = (0..k).map(|i| problem.client_value(i, &w)).collect();
        let order = ProjectionOrder::build(&losses, &ids, OrderPolicy::LossAscending, RngState::new(0))?;
        let (g, next, report) = aggregate_gradients(&grads, &order, &agg, &state)?;
        c_max = c_max.max(report.max_relative_step);
        state = next;
        w = w.axpy(-eta, &g)?;
        let v = problem.value(&w);
        if v > values[values.len() - 1] + DESCENT_TOL {
            increases.push(round);
        }
        values.push(v);
    }
    let eta_limit = 2.0 / (problem.smoothness * (1.0 + c_max * c_max));
    Ok(DescentTrace {
        values,
        increases,
        eta,
        c_max,
        eta_limit,
        compliant: eta < eta_limit,
    })
}
