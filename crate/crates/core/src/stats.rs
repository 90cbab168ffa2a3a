//! Statistical primitives: divergences, Gini, AUC and replicate aggregation.
//!
//! Divergences use base-2 logarithms so that Jensen–Shannon lies in `[0, 1]`.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A discrete probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    mass: Vec<f64>,
}

impl Distribution {
    /// L1-normalizes non-negative weights. A constant vector maps exactly onto
    /// [`Distribution::uniform`].
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty distribution".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "distribution weight {w} is not a finite non-negative number"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("distribution has zero mass".into()));
        }
        if weights.iter().all(|&w| w == weights[0]) {
            return Ok(Self::uniform(weights.len()));
        }
        let mass = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { mass })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over zero outcomes");
        Self {
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

/// `Σ p(x) log2(p(x) / q(x))`, with `0 · log(0/q) = 0` and `+∞` where `q`
/// vanishes under positive `p`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    Ok(kl_slices(p.mass(), q.mass()))
}

fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        total += pi * (pi / qi).log2();
    }
    total.max(0.0)
}

/// Jensen–Shannon divergence against the midpoint mixture `M = (p + q) / 2`.
pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    check_lengths(p.len(), q.len())?;
    let mid: Vec<f64> = p
        .mass()
        .iter()
        .zip(q.mass())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    let value = 0.5 * kl_slices(p.mass(), &mid) + 0.5 * kl_slices(q.mass(), &mid);
    Ok(value.clamp(0.0, 1.0))
}

/// Gini coefficient in mean-absolute-difference form,
/// `Σ_i Σ_j |x_i − x_j| / (2 n Σ_k x_k)`, evaluated in `O(n log n)`.
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidArgument(
            "gini expects finite non-negative values".into(),
        ));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "gini of an all-zero vector is undefined".into(),
        ));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i as f64 + 1.0) - n - 1.0) * x)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Fractional (average) ranks, 1-based, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Area under the ROC curve in Mann–Whitney form; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score passed to auc".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidArgument(
            "auc needs both positive and negative labels".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn mean_and_variance(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Sample mean and the normal-approximation 95% half-width `1.96 s / √n`.
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "mean_ci95 needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (mean, var) = mean_and_variance(samples);
    Ok((mean, 1.96 * var.sqrt() / (samples.len() as f64).sqrt()))
}

/// Welch's two-sample t statistic. `NaN` when both samples have zero variance.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(
            "welch_t needs at least 2 samples per group".into(),
        ));
    }
    let (ma, va) = mean_and_variance(a);
    let (mb, vb) = mean_and_variance(b);
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    if se == 0.0 {
        return Ok(f64::NAN);
    }
    Ok((ma - mb) / se)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "spearman needs at least 2 points".into(),
        ));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

pub(crate) fn cmp_desc_then_index(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
