//! Slate construction: top-N selection and per-slot ε-greedy exploration.

use rand::Rng;

use crate::dataset::RatingMatrix;
use crate::error::{Error, Result};
use crate::recommender::FactorModel;
use crate::seed::rng_from;
use crate::stats::cmp_desc_then_index;

#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationSlate {
    pub user: usize,
    pub items: Vec<usize>,
    /// Model scores parallel to `items`; `NaN` for explored slots.
    pub scores: Vec<f64>,
    /// Slots filled by random exploration rather than by score.
    pub explored: Vec<bool>,
    /// Fewer candidates than requested were available.
    pub truncated: bool,
}

impl RecommendationSlate {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn empty(user: usize) -> Self {
        Self {
            user,
            items: Vec::new(),
            scores: Vec::new(),
            explored: Vec::new(),
            truncated: true,
        }
    }
}

/// The `n` highest-scoring eligible items, descending, ties to the lower index.
pub fn top_n_by(user: usize, n: usize, eligible: impl Iterator<Item = (usize, f64)>) -> RecommendationSlate {
    let mut scored: Vec<(usize, f64)> = eligible.collect();
    let truncated = scored.len() < n;
    if scored.len() > n && n > 0 {
        scored.select_nth_unstable_by(n - 1, |a, b| cmp_desc_then_index(*a, *b));
    }
    scored.truncate(n);
    scored.sort_by(|a, b| cmp_desc_then_index(*a, *b));
    RecommendationSlate {
        user,
        items: scored.iter().map(|s| s.0).collect(),
        scores: scored.iter().map(|s| s.1).collect(),
        explored: vec![false; scored.len()],
        truncated,
    }
}

/// Items `user` may be shown: not in their history and not cold in `model`.
pub fn eligible_items<'a>(
    model: &'a FactorModel,
    history: &'a RatingMatrix,
    user: usize,
) -> impl Iterator<Item = usize> + 'a {
    (0..model.n_items).filter(move |&i| !history.contains(user, i) && !model.is_cold_item(i))
}

/// The `n` unrated items with the highest predicted rating for `user`.
pub fn top_n(model: &FactorModel, history: &RatingMatrix, user: usize, n: usize) -> RecommendationSlate {
    top_n_by(
        user,
        n,
        eligible_items(model, history, user).map(|i| (i, model.predict(user, i))),
    )
}

/// Replaces each slot independently with probability `epsilon` by a uniform
/// draw from `candidates` not already in the slate. Slots keep their position;
/// when no unused candidate remains the original item stays.
pub fn mab_mix(
    base: &RecommendationSlate,
    candidates: &[usize],
    epsilon: f64,
    seed: u64,
) -> Result<RecommendationSlate> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut out = base.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_from(seed, &[]);
    let mut pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|c| !base.items.contains(c))
        .collect();
    for slot in 0..out.items.len() {
        if rng.random::<f64>() >= epsilon || pool.is_empty() {
            continue;
        }
        let pick = pool.swap_remove(rng.random_range(0..pool.len()));
        out.items[slot] = pick;
        out.scores[slot] = f64::NAN;
        out.explored[slot] = true;
    }
    Ok(out)
}
