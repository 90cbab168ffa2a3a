//! Exposure estimation: the probability `E_ui` that user `u` has seen item `i`.
//!
//! Three estimators are provided: uniform ("fair") exposure, item popularity,
//! and a Gamma–Poisson factorization of the binarized interaction matrix fit
//! by coordinate-ascent variational inference.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dataset::{RatingMatrix, TemporalSplit};
use crate::dense;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};
use crate::stats::{auc, mean_ci95};

/// Dense user × item exposure probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMatrix {
    n_users: usize,
    n_items: usize,
    values: Vec<f64>,
}

impl ExposureMatrix {
    pub fn from_values(n_users: usize, n_items: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_users * n_items {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: n_users * n_items,
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("exposure {v} outside [0, 1]")));
        }
        Ok(Self {
            n_users,
            n_items,
            values,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn get(&self, u: usize, i: usize) -> f64 {
        self.values[u * self.n_items + i]
    }

    pub fn row(&self, u: usize) -> &[f64] {
        &self.values[u * self.n_items..(u + 1) * self.n_items]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Exports in the dense `LSIM` format (values narrowed to `f32`).
    pub fn save(&self, path: &Path) -> Result<()> {
        dense::save_dense(path, self.n_users, self.n_items, self.values.iter().map(|&v| v as f32))
    }
}

/// Every cell equals `1 / n_items`.
pub fn uniform_exposure(n_users: usize, n_items: usize) -> Result<ExposureMatrix> {
    if n_items == 0 {
        return Err(Error::InvalidArgument("uniform exposure over zero items".into()));
    }
    ExposureMatrix::from_values(n_users, n_items, vec![1.0 / n_items as f64; n_users * n_items])
}

/// Share of users who rated each item; identical across users.
pub fn popularity_exposure(m: &RatingMatrix) -> Result<ExposureMatrix> {
    if m.is_empty() {
        return Err(Error::NoEntries);
    }
    let share: Vec<f64> = m
        .item_counts()
        .into_iter()
        .map(|c| c / m.n_users() as f64)
        .collect();
    let values = (0..m.n_users()).flat_map(|_| share.iter().copied()).collect();
    ExposureMatrix::from_values(m.n_users(), m.n_items(), values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonConfig {
    pub k: usize,
    /// Gamma prior shape `a` on both factor matrices.
    pub shape: f64,
    /// Gamma prior rate `b` on both factor matrices.
    pub rate: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self {
            k: 10,
            shape: 0.3,
            rate: 0.3,
            sweeps: 100,
            seed: 0,
        }
    }
}

/// Variational Gamma posteriors over user activity `θ` and item popularity `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonFactors {
    pub n_users: usize,
    pub n_items: usize,
    pub k: usize,
    pub prior: (f64, f64),
    pub user_shape: Vec<f64>,
    pub user_rate: Vec<f64>,
    pub item_shape: Vec<f64>,
    pub item_rate: Vec<f64>,
    /// Evidence lower bound after each sweep.
    pub elbo: Vec<f64>,
}

impl PoissonFactors {
    /// Posterior mean of `θ_u`.
    pub fn user_activity(&self, u: usize) -> Vec<f64> {
        posterior_means(&self.user_shape, &self.user_rate, u, self.k)
    }

    /// Posterior mean of `β_i`.
    pub fn item_popularity(&self, i: usize) -> Vec<f64> {
        posterior_means(&self.item_shape, &self.item_rate, i, self.k)
    }

    /// Expected Poisson rate `E[θ_u] · E[β_i]`.
    pub fn rate(&self, u: usize, i: usize) -> f64 {
        let (ur, ir) = (u * self.k..(u + 1) * self.k, i * self.k..(i + 1) * self.k);
        self.user_shape[ur.clone()]
            .iter()
            .zip(&self.user_rate[ur])
            .zip(self.item_shape[ir.clone()].iter().zip(&self.item_rate[ir]))
            .map(|((us, urt), (is, irt))| (us / urt) * (is / irt))
            .sum()
    }

    pub fn exposure_matrix(&self) -> ExposureMatrix {
        let user_means: Vec<f64> = self.user_shape.iter().zip(&self.user_rate).map(|(s, r)| s / r).collect();
        let item_means: Vec<f64> = self.item_shape.iter().zip(&self.item_rate).map(|(s, r)| s / r).collect();
        let k = self.k;
        let mut values = Vec::with_capacity(self.n_users * self.n_items);
        for u in 0..self.n_users {
            let theta = &user_means[u * k..(u + 1) * k];
            for i in 0..self.n_items {
                let beta = &item_means[i * k..(i + 1) * k];
                let rate: f64 = theta.iter().zip(beta).map(|(a, b)| a * b).sum();
                values.push(rate_to_probability(rate));
            }
        }
        ExposureMatrix {
            n_users: self.n_users,
            n_items: self.n_items,
            values,
        }
    }
}

fn posterior_means(shape: &[f64], rate: &[f64], row: usize, k: usize) -> Vec<f64> {
    (row * k..(row + 1) * k).map(|j| shape[j] / rate[j]).collect()
}

/// `P(Poisson(rate) ≥ 1) = 1 − e^{−rate}`.
pub fn rate_to_probability(rate: f64) -> f64 {
    (-(-rate).exp_m1()).clamp(0.0, 1.0)
}

pub fn poisson_exposure_prob(f: &PoissonFactors, u: usize, i: usize) -> f64 {
    rate_to_probability(f.rate(u, i))
}

/// `E_q[log p(x)] − E_q[log q(x)]` for prior `Gamma(a, b)` and variational
/// `Gamma(s, r)`.
fn gamma_kl_term(a: f64, b: f64, s: f64, r: f64, ln_gamma_a: f64) -> f64 {
    let e_log = digamma(s) - r.ln();
    let e_x = s / r;
    let log_prior = a * b.ln() - ln_gamma_a + (a - 1.0) * e_log - b * e_x;
    let log_q = s * r.ln() - ln_gamma(s) + (s - 1.0) * e_log - s;
    log_prior - log_q
}

/// Fits `Y_ui ~ Poisson(θ_u · β_i)` on the binarized ratings `Y = 1{R ≠ 0}`.
///
/// Each sweep sets the multinomial auxiliaries, then the user posteriors,
/// then the item posteriors. The recorded ELBO uses the optimal auxiliaries
/// for the current posteriors, so the sequence is non-decreasing.
pub fn fit_poisson_exposure(m: &RatingMatrix, cfg: &PoissonConfig) -> Result<PoissonFactors> {
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("poisson factorization needs k >= 1".into()));
    }
    if !(cfg.shape > 0.0 && cfg.rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma prior ({}, {}) must be positive",
            cfg.shape, cfg.rate
        )));
    }
    let (n_users, n_items, k) = (m.n_users(), m.n_items(), cfg.k);
    let (a, b) = (cfg.shape, cfg.rate);
    let pairs: Vec<(usize, usize)> = m.entries().iter().map(|e| (e.user, e.item)).collect();

    let mut rng = rng_from(cfg.seed, &[]);
    let mut init = |n: usize, base: f64| -> Vec<f64> { (0..n).map(|_| base + 0.01 * rng.random::<f64>()).collect() };
    let mut f = PoissonFactors {
        n_users,
        n_items,
        k,
        prior: (a, b),
        user_shape: init(n_users * k, a),
        user_rate: init(n_users * k, b),
        item_shape: init(n_items * k, a),
        item_rate: init(n_items * k, b),
        elbo: Vec::with_capacity(cfg.sweeps),
    };

    let geo = |shape: &[f64], rate: &[f64]| -> Vec<f64> {
        shape.iter().zip(rate).map(|(s, r)| (digamma(*s) - r.ln()).exp()).collect()
    };
    let column_means = |shape: &[f64], rate: &[f64]| -> Vec<f64> {
        let mut sums = vec![0.0; k];
        for (j, (s, r)) in shape.iter().zip(rate).enumerate() {
            sums[j % k] += s / r;
        }
        sums
    };
    let ln_gamma_a = ln_gamma(a);
    let mut phi = vec![0.0; k];

    for sweep in 0..cfg.sweeps {
        let user_geo = geo(&f.user_shape, &f.user_rate);
        let item_geo = geo(&f.item_shape, &f.item_rate);
        let mut user_shape = vec![a; n_users * k];
        let mut item_shape = vec![a; n_items * k];
        for &(u, i) in &pairs {
            let (tu, bi) = (&user_geo[u * k..(u + 1) * k], &item_geo[i * k..(i + 1) * k]);
            let mut total = 0.0;
            for f_ in 0..k {
                phi[f_] = tu[f_] * bi[f_];
                total += phi[f_];
            }
            for f_ in 0..k {
                let share = phi[f_] / total;
                user_shape[u * k + f_] += share;
                item_shape[i * k + f_] += share;
            }
        }

        let item_totals = column_means(&f.item_shape, &f.item_rate);
        f.user_shape = user_shape;
        f.user_rate = (0..n_users * k).map(|j| b + item_totals[j % k]).collect();
        let user_totals = column_means(&f.user_shape, &f.user_rate);
        f.item_shape = item_shape;
        f.item_rate = (0..n_items * k).map(|j| b + user_totals[j % k]).collect();

        let value = elbo(&f, &pairs, ln_gamma_a);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "poisson ELBO at sweep {} (k={}, prior=({a}, {b}))",
                sweep + 1,
                k
            )));
        }
        f.elbo.push(value);
    }
    Ok(f)
}

fn elbo(f: &PoissonFactors, pairs: &[(usize, usize)], ln_gamma_a: f64) -> f64 {
    let k = f.k;
    let (a, b) = f.prior;
    let log_geo = |shape: &[f64], rate: &[f64]| -> Vec<f64> {
        shape.iter().zip(rate).map(|(s, r)| digamma(*s) - r.ln()).collect()
    };
    let ut = log_geo(&f.user_shape, &f.user_rate);
    let ib = log_geo(&f.item_shape, &f.item_rate);

    let mut data = 0.0;
    let mut terms = vec![0.0; k];
    for &(u, i) in pairs {
        for f_ in 0..k {
            terms[f_] = ut[u * k + f_] + ib[i * k + f_];
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        data += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    }

    let mut user_tot = vec![0.0; k];
    let mut item_tot = vec![0.0; k];
    for (j, (s, r)) in f.user_shape.iter().zip(&f.user_rate).enumerate() {
        user_tot[j % k] += s / r;
    }
    for (j, (s, r)) in f.item_shape.iter().zip(&f.item_rate).enumerate() {
        item_tot[j % k] += s / r;
    }
    let expected_rate: f64 = user_tot.iter().zip(&item_tot).map(|(x, y)| x * y).sum();

    let priors: f64 = f
        .user_shape
        .iter()
        .zip(&f.user_rate)
        .chain(f.item_shape.iter().zip(&f.item_rate))
        .map(|(s, r)| gamma_kl_term(a, b, *s, *r, ln_gamma_a))
        .sum();
    data - expected_rate + priors
}

/// Which exposure estimator to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExposureModel {
    Uniform,
    Popularity,
    Poisson(PoissonConfig),
    /// Independent uniform scores per pair; a chance-level control.
    Random,
}

impl ExposureModel {
    pub fn name(&self) -> &'static str {
        match self {
            ExposureModel::Uniform => "uniform",
            ExposureModel::Popularity => "popularity",
            ExposureModel::Poisson(_) => "poisson",
            ExposureModel::Random => "random",
        }
    }

    /// Fits the estimator on `train`; `seed` drives any randomness.
    pub fn fit(&self, train: &RatingMatrix, seed: u64) -> Result<FittedExposure> {
        Ok(match self {
            ExposureModel::Uniform => FittedExposure::Uniform(train.n_items()),
            ExposureModel::Popularity => {
                if train.is_empty() {
                    return Err(Error::NoEntries);
                }
                let n = train.n_users() as f64;
                FittedExposure::Popularity(train.item_counts().into_iter().map(|c| c / n).collect())
            }
            ExposureModel::Poisson(cfg) => {
                FittedExposure::Poisson(fit_poisson_exposure(train, &PoissonConfig { seed, ..*cfg })?)
            }
            ExposureModel::Random => FittedExposure::Random(seed),
        })
    }
}

impl fmt::Display for ExposureModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExposureModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ExposureModel::Uniform),
            "popularity" => Ok(ExposureModel::Popularity),
            "poisson" => Ok(ExposureModel::Poisson(PoissonConfig::default())),
            "random" => Ok(ExposureModel::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown exposure model {other:?} (expected uniform, popularity, poisson or random)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FittedExposure {
    Uniform(usize),
    Popularity(Vec<f64>),
    Poisson(PoissonFactors),
    Random(u64),
}

impl FittedExposure {
    pub fn probability(&self, u: usize, i: usize) -> f64 {
        match self {
            FittedExposure::Uniform(n) => 1.0 / *n as f64,
            FittedExposure::Popularity(share) => share[i],
            FittedExposure::Poisson(f) => poisson_exposure_prob(f, u, i),
            FittedExposure::Random(seed) => {
                (derive_seed(*seed, &[u as u64, i as u64]) >> 11) as f64 / (1u64 << 53) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowAuc {
    pub repetition: usize,
    /// Index of the last training batch; the test batch is `window + 1`.
    pub window: usize,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub windows: Vec<WindowAuc>,
    pub mean: f64,
    /// 95% half-width; `NaN` with a single window.
    pub ci95: f64,
}

/// Sliding-window exposure AUC.
///
/// For each window `k`, the model is fit on batches `0..=k` and asked to
/// separate the pairs of batch `k + 1` (positives) from `neg_ratio` times as
/// many pairs drawn uniformly over the user × item grid among those absent
/// from both the training prefix and the test batch. AUC is global over all
/// scored pairs.
pub fn evaluate_exposure_auc(
    model: &ExposureModel,
    split: &TemporalSplit,
    neg_ratio: usize,
    repetitions: usize,
    seed: u64,
) -> Result<AucReport> {
    if split.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "exposure evaluation needs at least 2 batches, got {}",
            split.len()
        )));
    }
    if neg_ratio == 0 || repetitions == 0 {
        return Err(Error::InvalidArgument("neg_ratio and repetitions must be at least 1".into()));
    }
    let mut windows = Vec::new();
    for window in 0..split.len() - 1 {
        let train = split.prefix(window);
        let test = &split.batches[window + 1];
        if test.is_empty() {
            continue;
        }
        let grid = train.n_users() * train.n_items();
        let free = grid - train.len() - test.len();
        for repetition in 0..repetitions {
            let rep_seed = derive_seed(seed, &[repetition as u64, window as u64]);
            let fitted = model.fit(&train, derive_seed(rep_seed, &[1]))?;
            let wanted = (test.len() * neg_ratio).min(free);
            if wanted == 0 {
                return Err(Error::InvalidArgument("no unobserved pairs left for negatives".into()));
            }
            let mut rng = rng_from(rep_seed, &[2]);
            let mut pairs: Vec<(usize, usize)> = test.entries().iter().map(|e| (e.user, e.item)).collect();
            let positives = pairs.len();
            let mut chosen = std::collections::HashSet::with_capacity(wanted);
            while chosen.len() < wanted {
                let u = rng.random_range(0..train.n_users());
                let i = rng.random_range(0..train.n_items());
                if !train.contains(u, i) && !test.contains(u, i) && chosen.insert((u, i)) {
                    pairs.push((u, i));
                }
            }
            let scores: Vec<f64> = pairs.iter().map(|&(u, i)| fitted.probability(u, i)).collect();
            let labels: Vec<bool> = (0..pairs.len()).map(|j| j < positives).collect();
            windows.push(WindowAuc {
                repetition,
                window,
                auc: auc(&scores, &labels)?,
                positives,
                negatives: wanted,
            });
        }
    }
    if windows.is_empty() {
        return Err(Error::NoEntries);
    }
    let values: Vec<f64> = windows.iter().map(|w| w.auc).collect();
    let (mean, ci95) = match mean_ci95(&values) {
        Ok(v) => v,
        Err(_) => (values[0], f64::NAN),
    };
    Ok(AucReport { windows, mean, ci95 })
}
