//! Truncated posteriors: per-datapoint state sets, truncated expectations,
//! the truncated free energy and the set-update rule.

use std::cmp::Ordering;
use rustc_hash::FxHashSet as HashSet;

use rayon::prelude::*;

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::model::{GenerativeModel, LARGE_NEG};
use crate::state::BinaryState;

/// `log Σ exp(x)` with max-subtraction. The noisy-OR sentinel is left out
/// of the max when a finite value is present.
pub fn logsumexp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut any = f64::NEG_INFINITY;
    for &v in values {
        any = any.max(v);
        if v > LARGE_NEG {
            max = max.max(v);
        }
    }
    if max == f64::NEG_INFINITY {
        max = any;
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of log-pseudo-joints: the truncated posterior weights.
pub fn posterior_weights(lpj: &[f64]) -> Vec<f64> {
    let lse = logsumexp(lpj);
    lpj.iter().map(|&v| (v - lse).exp()).collect()
}

/// Set `K⁽ⁿ⁾` of unique states with cached log-pseudo-joints.
///
/// Membership lookups build a hash set over the states on demand; sets are
/// small (`S` entries), while keeping a persistent index for every datapoint
/// would double the memory of the state storage.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStateSet {
    states: Vec<BinaryState>,
    lpj: Vec<f64>,
}

impl LatentStateSet {
    /// Build from unique states; `lpj` must be parallel to `states`.
    pub fn new(states: Vec<BinaryState>, lpj: Vec<f64>) -> Result<Self> {
        if states.len() != lpj.len() {
            return Err(Error::Dimension(format!(
                "{} states but {} log-pseudo-joints",
                states.len(),
                lpj.len()
            )));
        }
        let unique: HashSet<&BinaryState> = states.iter().collect();
        if unique.len() != states.len() {
            return Err(Error::InvalidParam("state set contains duplicates".into()));
        }
        Ok(LatentStateSet { states, lpj })
    }

    /// States without evaluated log-pseudo-joints (cache set to zero).
    pub fn from_states(states: Vec<BinaryState>) -> Result<Self> {
        let n = states.len();
        Self::new(states, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[BinaryState] {
        &self.states
    }

    pub fn lpj(&self) -> &[f64] {
        &self.lpj
    }

    pub fn membership(&self) -> HashSet<&BinaryState> {
        self.states.iter().collect()
    }

    pub fn contains(&self, state: &BinaryState) -> bool {
        self.states.iter().any(|s| s == state)
    }

    pub fn log_sum_exp(&self) -> f64 {
        logsumexp(&self.lpj)
    }

    pub fn weights(&self) -> Vec<f64> {
        posterior_weights(&self.lpj)
    }

    /// Re-evaluate the cache under `model`.
    pub fn refresh<M: GenerativeModel>(&mut self, model: &M, row: crate::data::DataRow<'_>) -> Result<()> {
        self.lpj = model.log_pseudo_joints(&self.states, row)?;
        Ok(())
    }
}

/// `Σ_{s ∈ K} g(s) q(s)` with `q` the softmax of the cached log-pseudo-joints.
pub fn truncated_expectation<G>(set: &LatentStateSet, mut g: G) -> Result<Vec<f64>>
where
    G: FnMut(&BinaryState) -> Vec<f64>,
{
    if set.is_empty() {
        return Err(Error::EmptySelection("truncated expectation over an empty set".into()));
    }
    let weights = set.weights();
    let mut acc: Vec<f64> = Vec::new();
    for (state, &w) in set.states.iter().zip(&weights) {
        let v = g(state);
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    Ok(acc)
}

/// Total order used for the top-`S` selection: higher log-pseudo-joint
/// first, ties broken by lexicographic bit order (smaller first).
fn rank(a: (&BinaryState, f64), b: (&BinaryState, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Replace members of `set` by better candidates, keeping the size fixed.
///
/// Candidates that duplicate set members (or each other) are ignored. The
/// result is the top-`S` of the union by log-pseudo-joint.
pub fn update_set(set: &LatentStateSet, candidates: &[(BinaryState, f64)]) -> LatentStateSet {
    let s = set.len();
    let mut seen = set.membership();
    let mut pool: Vec<(&BinaryState, f64)> = set.states.iter().zip(set.lpj.iter().copied()).collect();
    for (state, lpj) in candidates {
        if seen.insert(state) {
            pool.push((state, *lpj));
        }
    }
    if pool.len() == s {
        return set.clone();
    }
    pool.sort_by(|a, b| rank(*a, *b));
    pool.truncate(s);
    LatentStateSet {
        states: pool.iter().map(|(st, _)| (*st).clone()).collect(),
        lpj: pool.iter().map(|(_, v)| *v).collect(),
    }
}

/// One state set per datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSetCollection {
    sets: Vec<LatentStateSet>,
}

impl StateSetCollection {
    pub fn new(sets: Vec<LatentStateSet>) -> Self {
        StateSetCollection { sets }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn sets(&self) -> &[LatentStateSet] {
        &self.sets
    }

    pub fn sets_mut(&mut self) -> &mut [LatentStateSet] {
        &mut self.sets
    }

    pub fn get(&self, n: usize) -> &LatentStateSet {
        &self.sets[n]
    }

    pub fn set_size(&self) -> usize {
        self.sets.first().map_or(0, |s| s.len())
    }

    /// Re-evaluate every cached log-pseudo-joint under `model`.
    pub fn refresh<M: GenerativeModel>(&mut self, model: &M, data: &DataSet) -> Result<()> {
        self.sets
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(n, set)| {
                set.refresh(model, data.row(n))
                    .map_err(|e| e.context(format!("datapoint {n}")))
            })
    }
}

/// Truncated free energy `Σ_n [logsumexp(lpj of K⁽ⁿ⁾) + C(Θ)]`.
pub fn free_energy<M: GenerativeModel>(sets: &StateSetCollection, model: &M, data: &DataSet) -> f64 {
    crate::learning::ordered_sum(sets.len(), |n| {
        sets.get(n).log_sum_exp() + model.log_constant(data.row(n).observed_count())
    })
}
