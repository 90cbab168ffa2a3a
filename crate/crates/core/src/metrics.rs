//! Slate quality: expected novelty (EPC), expected diversity (EPD) and hit rate.
//!
//! Relevance is binary against the complete matrix, ranks are discounted by
//! `disc(k) = base^(k−1)`, and both expectation metrics are normalized so
//! that their maximum is 1.

use crate::dataset::CompleteMatrix;
use crate::error::{Error, Result};
use crate::exposure::ExposureMatrix;
use crate::policy::RecommendationSlate;

pub const DEFAULT_DISCOUNT_BASE: f64 = 0.85;

/// Cosine distance assigned to pairs involving a zero-norm factor.
pub const DEGENERATE_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct MetricContext<'a> {
    pub complete: &'a CompleteMatrix,
    pub exposure: &'a ExposureMatrix,
    item_factors: &'a [f64],
    k: usize,
    item_norms: Vec<f64>,
    pub discount_base: f64,
    pub relevance_threshold: f64,
}

impl<'a> MetricContext<'a> {
    pub fn new(
        complete: &'a CompleteMatrix,
        exposure: &'a ExposureMatrix,
        item_factors: &'a [f64],
        k: usize,
        discount_base: f64,
        relevance_threshold: f64,
    ) -> Result<Self> {
        if !(discount_base > 0.0 && discount_base < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount base {discount_base} outside (0, 1)"
            )));
        }
        if exposure.n_users() != complete.n_users() || exposure.n_items() != complete.n_items() {
            return Err(Error::InvalidArgument("exposure and complete matrix shapes differ".into()));
        }
        if k == 0 || item_factors.len() != complete.n_items() * k {
            return Err(Error::LengthMismatch {
                left: item_factors.len(),
                right: complete.n_items() * k,
            });
        }
        let item_norms = item_factors
            .chunks_exact(k)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            complete,
            exposure,
            item_factors,
            k,
            item_norms,
            discount_base,
            relevance_threshold,
        })
    }

    fn relevant(&self, u: usize, i: usize) -> f64 {
        if self.complete.get(u, i) >= self.relevance_threshold {
            1.0
        } else {
            0.0
        }
    }

    fn discounts(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        (0..n).map(|rank| self.discount_base.powi(rank as i32))
    }

    /// `½ (1 − cos(Q_i, Q_j))`, or `None` when either factor has zero norm.
    pub fn distance(&self, i: usize, j: usize) -> Option<f64> {
        let (ni, nj) = (self.item_norms[i], self.item_norms[j]);
        if ni == 0.0 || nj == 0.0 {
            return None;
        }
        let (a, b) = (
            &self.item_factors[i * self.k..(i + 1) * self.k],
            &self.item_factors[j * self.k..(j + 1) * self.k],
        );
        let cos: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (ni * nj);
        Some((0.5 * (1.0 - cos)).clamp(0.0, 1.0))
    }
}

fn require_nonempty(slate: &RecommendationSlate) -> Result<()> {
    if slate.is_empty() {
        return Err(Error::InvalidArgument(format!("empty slate for user {}", slate.user)));
    }
    Ok(())
}

/// Expected novelty: `C Σ_k disc(k) · rel(i_k) · (1 − E_{u,i_k})`, `C = 1 / Σ_k disc(k)`.
pub fn epc(slate: &RecommendationSlate, ctx: &MetricContext<'_>, u: usize) -> Result<f64> {
    require_nonempty(slate)?;
    let mut total = 0.0;
    let mut norm = 0.0;
    for (&item, d) in slate.items.iter().zip(ctx.discounts(slate.len())) {
        total += d * ctx.relevant(u, item) * (1.0 - ctx.exposure.get(u, item));
        norm += d;
    }
    Ok((total / norm).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epd {
    pub value: f64,
    /// Pairs scored with [`DEGENERATE_DISTANCE`] because a factor had zero norm.
    pub degenerate_pairs: usize,
}

/// Expected diversity of the slate against the user's history:
/// `C′ Σ_{k, j} disc(k) · rel(i_k) · rel(j) · d(i_k, j)`, with
/// `C′ = 1 / (Σ_k disc(k) · |history|)`. An empty history yields 0.
pub fn epd_detailed(
    slate: &RecommendationSlate,
    ctx: &MetricContext<'_>,
    u: usize,
    history: &[usize],
) -> Result<Epd> {
    require_nonempty(slate)?;
    if history.is_empty() {
        return Ok(Epd {
            value: 0.0,
            degenerate_pairs: 0,
        });
    }
    let history_rel: Vec<f64> = history.iter().map(|&j| ctx.relevant(u, j)).collect();
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut degenerate = 0;
    for (&item, d) in slate.items.iter().zip(ctx.discounts(slate.len())) {
        norm += d;
        let rel = ctx.relevant(u, item);
        if rel == 0.0 {
            continue;
        }
        for (&j, &rj) in history.iter().zip(&history_rel) {
            if rj == 0.0 {
                continue;
            }
            let dist = ctx.distance(item, j).unwrap_or_else(|| {
                degenerate += 1;
                DEGENERATE_DISTANCE
            });
            total += d * dist;
        }
    }
    Ok(Epd {
        value: (total / (norm * history.len() as f64)).clamp(0.0, 1.0),
        degenerate_pairs: degenerate,
    })
}

pub fn epd(slate: &RecommendationSlate, ctx: &MetricContext<'_>, u: usize, history: &[usize]) -> Result<f64> {
    epd_detailed(slate, ctx, u, history).map(|e| e.value)
}

/// Fraction of slate items whose ground-truth rating reaches the threshold.
pub fn hit_rate(slate: &RecommendationSlate, ctx: &MetricContext<'_>, u: usize) -> Result<f64> {
    require_nonempty(slate)?;
    let hits: f64 = slate.items.iter().map(|&i| ctx.relevant(u, i)).sum();
    Ok(hits / slate.len() as f64)
}
