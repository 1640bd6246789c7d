//! Multifidelity expected improvement, per-budget incumbents, and candidate
//! proposal with the one-epoch fantasize step.
//!
//! A proposal round scores the union of fresh configurations (at budget 1)
//! and every partially evaluated configuration at its next budget, then takes
//! the argmax of `EI(μ, σ, y_j^max)` with deterministic tie-breaking: lower
//! budget first, then earlier insertion order.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{FmsError, Result};
use crate::exec;
use crate::space::HyperparameterConfig;
use crate::surrogate::{Posterior, FEATURE_DIM};

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the error function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Closed-form expected improvement over an incumbent:
/// `(μ − y*)·Φ(u) + σ·φ(u)` with `u = (μ − y*)/σ`, degenerating to
/// `max(μ − y*, 0)` at σ = 0.
pub fn expected_improvement(mu: f64, sigma: f64, y_star: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    let diff = mu - y_star;
    if sigma <= 0.0 {
        return diff.max(0.0);
    }
    let u = diff / sigma;
    (diff * normal_cdf(u) + sigma * normal_pdf(u)).max(0.0)
}

/// Best observed performance per budget level.
#[derive(Debug, Clone, Default)]
pub struct IncumbentTable {
    by_budget: BTreeMap<usize, f64>,
}

impl IncumbentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_observations(obs: impl IntoIterator<Item = (usize, f64)>) -> Self {
        let mut table = IncumbentTable::new();
        for (budget, y) in obs {
            table.observe(budget, y);
        }
        table
    }

    pub fn observe(&mut self, budget: usize, y: f64) {
        let entry = self.by_budget.entry(budget).or_insert(f64::NEG_INFINITY);
        if y > *entry {
            *entry = y;
        }
    }

    /// `y_j^max` at budget `j`; falls back to the best observation at any
    /// smaller budget, and to 0 when nothing smaller was observed.
    pub fn incumbent_for(&self, budget: usize) -> f64 {
        if let Some(&y) = self.by_budget.get(&budget) {
            return y;
        }
        self.by_budget
            .range(..budget)
            .next_back()
            .map(|(_, &y)| y)
            .unwrap_or(0.0)
    }
}

/// A proposed evaluation: configuration plus the budget to run it at.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub config_id: usize,
    pub config: HyperparameterConfig,
    /// Proposed budget: 1 for fresh configurations, last budget + 1 otherwise.
    pub budget: usize,
}

/// Progress of a started configuration.
#[derive(Debug, Clone, Copy)]
pub struct ConfigProgress {
    pub config_id: usize,
    pub last_budget: usize,
}

/// Build the candidate set for one proposal round: up to `pool_size` fresh
/// configurations sampled uniformly without replacement at budget 1, followed
/// by every partially evaluated configuration at its fantasize budget
/// (skipping those already at `b_max`). Order is the insertion order used for
/// tie-breaking.
pub fn candidate_budgets(
    unstarted: &[usize],
    in_progress: &[ConfigProgress],
    pool_size: usize,
    b_max: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let take = pool_size.min(unstarted.len());
    if take > 0 {
        // Partial Fisher-Yates: the first `take` entries are a uniform
        // without-replacement sample.
        let mut ids = unstarted.to_vec();
        for i in 0..take {
            let j = rng.random_range(i..ids.len());
            ids.swap(i, j);
        }
        out.extend(ids[..take].iter().map(|&id| (id, 1usize)));
    }
    for p in in_progress {
        let next = p.last_budget + 1;
        if next <= b_max {
            out.push((p.config_id, next));
        }
    }
    out
}

/// Score candidates and return the winning index.
///
/// `predict` maps a candidate index to `(μ, σ²)`. Ties on the EI score break
/// toward the lower proposed budget, then the earlier index. Scoring may run
/// in parallel; the reduction is sequential in index order.
pub fn select_by_ei<F>(
    n: usize,
    budgets: &[usize],
    incumbents: &IncumbentTable,
    predict: F,
) -> Result<usize>
where
    F: Fn(usize) -> (f64, f64) + Sync + Send,
{
    if n == 0 {
        return Err(FmsError::NoCandidates);
    }
    assert_eq!(budgets.len(), n);
    let scores = exec::map_indexed(n, |i| {
        let (mu, var) = predict(i);
        let sigma = var.max(0.0).sqrt();
        expected_improvement(mu, sigma, incumbents.incumbent_for(budgets[i]))
    });
    let mut best = 0usize;
    for i in 1..n {
        let better = scores[i] > scores[best]
            || (scores[i] == scores[best] && budgets[i] < budgets[best]);
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Convenience wrapper: score candidate feature rows against a posterior.
pub fn select_by_ei_features(
    posterior: &Posterior,
    z_candidates: &[f64],
    budgets: &[usize],
    incumbents: &IncumbentTable,
) -> Result<usize> {
    let n = budgets.len();
    assert_eq!(z_candidates.len(), n * FEATURE_DIM);
    select_by_ei(n, budgets, incumbents, |i| {
        posterior.predict(&z_candidates[i * FEATURE_DIM..(i + 1) * FEATURE_DIM])
    })
}
