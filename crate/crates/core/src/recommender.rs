//! Rating predictors trained by alternating stochastic gradient sweeps.
//!
//! All three variants minimize a sum over observed ratings of
//!
//! ```text
//! w_ui · [ (R_ui − P_u·Q_i)² + c_u · (‖P_u‖² + ‖Q_i‖²) ]
//! ```
//!
//! | variant         | `w_ui`                         | `c_u`              |
//! | --------------- | ------------------------------ | ------------------ |
//! | `Mf`            | 1                              | β                  |
//! | `PearMf`        | 1                              | β + λ·JSD(E_u ‖ U) |
//! | `PropensityMf`  | 1 / max(E_ui, floor)           | β                  |
//!
//! where `JSD(E_u ‖ U)` compares the user's L1-normalized exposure row with
//! the uniform distribution over items.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::RatingMatrix;
use crate::dense::{dim_u32, read_f32s, read_u32, write_f32s, write_u32};
use crate::error::{Error, Result};
use crate::exposure::ExposureMatrix;
use crate::seed::rng_from;
use crate::stats::{jsd, Distribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mf,
    PearMf,
    PropensityMf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mf, Variant::PearMf, Variant::PropensityMf];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mf => "mf",
            Variant::PearMf => "pear_mf",
            Variant::PropensityMf => "propensity_mf",
        }
    }

    pub fn needs_exposure(self) -> bool {
        !matches!(self, Variant::Mf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown recommender variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub propensity_floor: f64,
    /// Training stops early once the objective moves less than this between
    /// epochs. Zero disables early stopping.
    pub tolerance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.01,
            lambda: 1.0,
            k: 10,
            epochs: 50,
            seed: 0,
            init_scale: 0.1,
            propensity_floor: 0.05,
            tolerance: 1e-6,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} ({})", self.describe())));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta >= 0.0 && self.lambda >= 0.0) {
            return bad("beta and lambda must be non-negative");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be positive");
        }
        if !(self.propensity_floor > 0.0 && self.propensity_floor <= 1.0) {
            return bad("propensity_floor must lie in (0, 1]");
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance must be non-negative");
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "alpha={} beta={} lambda={} k={} epochs={} seed={}",
            self.alpha, self.beta, self.lambda, self.k, self.epochs, self.seed
        )
    }
}

/// User factors `P` (`n_users × k`) and item factors `Q` (`n_items × k`),
/// row-major, plus the cached per-user exposure divergence.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub n_users: usize,
    pub n_items: usize,
    pub k: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub user_jsd: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(n_users: usize, n_items: usize, k: usize) -> Self {
        Self {
            n_users,
            n_items,
            k,
            p: vec![0.0; n_users * k],
            q: vec![0.0; n_items * k],
            user_jsd: vec![0.0; n_users],
        }
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.p[u * self.k..(u + 1) * self.k]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.q[i * self.k..(i + 1) * self.k]
    }

    /// `P_u · Q_i`, unclamped.
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i))
    }

    /// Cold rows were absent from training and hold zero vectors.
    pub fn is_cold_user(&self, u: usize) -> bool {
        self.user(u).iter().all(|&x| x == 0.0)
    }

    pub fn is_cold_item(&self, i: usize) -> bool {
        self.item(i).iter().all(|&x| x == 0.0)
    }

    pub fn squared_norm(&self) -> f64 {
        self.p.iter().chain(&self.q).map(|x| x * x).sum()
    }

    const MAGIC: &'static [u8; 4] = b"PEAR";
    const VERSION: u32 = 1;

    /// Checkpoint layout: magic `PEAR`, `version`, `n_users`, `n_items`, `k`
    /// as `u32` LE, then `P`, `Q` and `user_jsd` as `f32` LE.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let dims = [
            Self::VERSION,
            dim_u32(self.n_users, "n_users")?,
            dim_u32(self.n_items, "n_items")?,
            dim_u32(self.k, "k")?,
        ];
        let io = |e| Error::io("<checkpoint writer>", e);
        w.write_all(Self::MAGIC).map_err(io)?;
        for d in dims {
            write_u32(w, d).map_err(io)?;
        }
        let values = self.p.iter().chain(&self.q).chain(&self.user_jsd).map(|&x| x as f32);
        write_f32s(w, values).map_err(io)
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let fmt_err = |e: std::io::Error| Error::Format(format!("checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r).map_err(fmt_err)?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_users = read_u32(r).map_err(fmt_err)? as usize;
        let n_items = read_u32(r).map_err(fmt_err)? as usize;
        let k = read_u32(r).map_err(fmt_err)? as usize;
        let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
        let p = widen(read_f32s(r, n_users * k).map_err(fmt_err)?);
        let q = widen(read_f32s(r, n_items * k).map_err(fmt_err)?);
        let user_jsd = widen(read_f32s(r, n_users).map_err(fmt_err)?);
        Ok(Self {
            n_users,
            n_items,
            k,
            p,
            q,
            user_jsd,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut BufReader::new(file))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `JSD(E_u ‖ uniform)` for every user row of `exposure`.
pub fn user_exposure_jsd(exposure: &ExposureMatrix) -> Result<Vec<f64>> {
    let uniform = Distribution::uniform(exposure.n_items());
    (0..exposure.n_users())
        .map(|u| {
            let row = Distribution::new(exposure.row(u).to_vec())
                .map_err(|e| Error::InvalidArgument(format!("exposure row of user {u}: {e}")))?;
            jsd(&row, &uniform)
        })
        .collect()
}

struct Observation {
    user: usize,
    item: usize,
    rating: f64,
    weight: f64,
}

/// Observed ratings with their loss weights and per-user penalty `c_u`.
struct Problem {
    obs: Vec<Observation>,
    penalty: Vec<f64>,
}

impl Problem {
    fn build(
        m: &RatingMatrix,
        exposure: Option<&ExposureMatrix>,
        variant: Variant,
        cfg: &TrainingConfig,
        user_jsd: &[f64],
    ) -> Result<Self> {
        let penalty = match variant {
            Variant::PearMf => user_jsd.iter().map(|j| cfg.beta + cfg.lambda * j).collect(),
            _ => vec![cfg.beta; m.n_users()],
        };
        let obs = m
            .entries()
            .iter()
            .map(|e| {
                let weight = match (variant, exposure) {
                    (Variant::PropensityMf, Some(ex)) => 1.0 / ex.get(e.user, e.item).max(cfg.propensity_floor),
                    _ => 1.0,
                };
                Observation {
                    user: e.user,
                    item: e.item,
                    rating: e.value,
                    weight,
                }
            })
            .collect();
        Ok(Self { obs, penalty })
    }

    fn objective(&self, model: &FactorModel) -> f64 {
        self.obs
            .iter()
            .map(|o| {
                let (pu, qi) = (model.user(o.user), model.item(o.item));
                let err = o.rating - dot(pu, qi);
                let norms = dot(pu, pu) + dot(qi, qi);
                o.weight * (err * err + self.penalty[o.user] * norms)
            })
            .sum()
    }
}

/// The per-pair loss gradient with respect to one factor row:
/// `w · (−2 e · other + 2 c · own)`. Shared by the SGD sweeps and the
/// analytic full gradient so the gradient check covers the update rule.
#[inline]
fn pair_gradient(weight: f64, err: f64, penalty: f64, own: f64, other: f64) -> f64 {
    weight * (-2.0 * err * other + 2.0 * penalty * own)
}

fn check_inputs(m: &RatingMatrix, exposure: Option<&ExposureMatrix>, variant: Variant, cfg: &TrainingConfig) -> Result<()> {
    cfg.validate()?;
    match exposure {
        Some(ex) if ex.n_users() != m.n_users() || ex.n_items() != m.n_items() => Err(Error::InvalidArgument(format!(
            "exposure is {}x{} but ratings are {}x{}",
            ex.n_users(),
            ex.n_items(),
            m.n_users(),
            m.n_items()
        ))),
        None if variant.needs_exposure() => Err(Error::InvalidArgument(format!(
            "{variant} requires an exposure matrix"
        ))),
        _ => Ok(()),
    }
}

fn cached_jsd(m: &RatingMatrix, exposure: Option<&ExposureMatrix>) -> Result<Vec<f64>> {
    match exposure {
        Some(ex) => user_exposure_jsd(ex),
        None => Ok(vec![0.0; m.n_users()]),
    }
}

/// Variant objective evaluated at `model`, using `model.user_jsd` for the
/// exposure penalty.
pub fn objective(
    variant: Variant,
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    model: &FactorModel,
    cfg: &TrainingConfig,
) -> Result<f64> {
    check_inputs(m, exposure, variant, cfg)?;
    let value = Problem::build(m, exposure, variant, cfg, &model.user_jsd)?.objective(model);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{variant} objective with {}", cfg.describe())));
    }
    Ok(value)
}

/// The exposure-regularized objective summed over observed ratings.
pub fn pear_objective(m: &RatingMatrix, model: &FactorModel, cfg: &TrainingConfig) -> Result<f64> {
    let value = Problem::build(m, None, Variant::PearMf, cfg, &model.user_jsd)?.objective(model);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("pear objective with {}", cfg.describe())));
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Analytic gradient of [`objective`] with respect to every entry of `P` and `Q`.
pub fn gradient(
    variant: Variant,
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    model: &FactorModel,
    cfg: &TrainingConfig,
) -> Result<Gradient> {
    check_inputs(m, exposure, variant, cfg)?;
    let problem = Problem::build(m, exposure, variant, cfg, &model.user_jsd)?;
    let k = model.k;
    let mut grad = Gradient {
        p: vec![0.0; model.p.len()],
        q: vec![0.0; model.q.len()],
    };
    for o in &problem.obs {
        let (pu, qi) = (model.user(o.user), model.item(o.item));
        let err = o.rating - dot(pu, qi);
        let c = problem.penalty[o.user];
        for f in 0..k {
            grad.p[o.user * k + f] += pair_gradient(o.weight, err, c, pu[f], qi[f]);
            grad.q[o.item * k + f] += pair_gradient(o.weight, err, c, qi[f], pu[f]);
        }
    }
    Ok(grad)
}

/// Largest relative disagreement between [`gradient`] and central finite
/// differences of [`objective`] at `model`.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps entries
/// whose true gradient is near zero from amplifying rounding noise.
pub fn gradient_check_at(
    variant: Variant,
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    model: &FactorModel,
    cfg: &TrainingConfig,
    h: f64,
) -> Result<f64> {
    let analytic = gradient(variant, m, exposure, model, cfg)?;
    let problem = Problem::build(m, exposure, variant, cfg, &model.user_jsd)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut compare = |a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        worst = worst.max(rel);
    };
    for idx in 0..model.p.len() {
        let x = probe.p[idx];
        probe.p[idx] = x + h;
        let up = problem.objective(&probe);
        probe.p[idx] = x - h;
        let down = problem.objective(&probe);
        probe.p[idx] = x;
        compare(analytic.p[idx], (up - down) / (2.0 * h));
    }
    for idx in 0..model.q.len() {
        let x = probe.q[idx];
        probe.q[idx] = x + h;
        let up = problem.objective(&probe);
        probe.q[idx] = x - h;
        let down = problem.objective(&probe);
        probe.q[idx] = x;
        compare(analytic.q[idx], (up - down) / (2.0 * h));
    }
    Ok(worst)
}

/// Gradient check at a random point drawn from `cfg.seed`: every factor entry
/// uniform in `±init_scale · 10`, `user_jsd` from `exposure` when given.
pub fn gradient_check(
    variant: Variant,
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    cfg: &TrainingConfig,
) -> Result<f64> {
    check_inputs(m, exposure, variant, cfg)?;
    let mut rng = rng_from(cfg.seed, &[0x6772_6164]);
    let mut model = FactorModel::zeros(m.n_users(), m.n_items(), cfg.k);
    let spread = cfg.init_scale * 10.0;
    for x in model.p.iter_mut().chain(model.q.iter_mut()) {
        *x = rng.random_range(-spread..spread);
    }
    model.user_jsd = cached_jsd(m, exposure)?;
    gradient_check_at(variant, m, exposure, &model, cfg, 1e-5)
}

/// Trains `variant` on the observed ratings of `m`.
///
/// Factors of users and items present in `m` start uniform in
/// `±init_scale`; absent (cold) rows stay zero. Each epoch runs one shuffled
/// SGD sweep over the observed ratings updating `P` with `Q` fixed, then one
/// updating `Q` with `P` fixed.
pub fn train(
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    variant: Variant,
    cfg: &TrainingConfig,
) -> Result<FactorModel> {
    train_traced(m, exposure, variant, cfg).map(|(model, _)| model)
}

/// [`train`], also returning the objective after every epoch.
pub fn train_traced(
    m: &RatingMatrix,
    exposure: Option<&ExposureMatrix>,
    variant: Variant,
    cfg: &TrainingConfig,
) -> Result<(FactorModel, Vec<f64>)> {
    check_inputs(m, exposure, variant, cfg)?;
    let k = cfg.k;
    let mut model = FactorModel::zeros(m.n_users(), m.n_items(), k);
    model.user_jsd = cached_jsd(m, exposure)?;
    let problem = Problem::build(m, exposure, variant, cfg, &model.user_jsd)?;

    let mut rng = rng_from(cfg.seed, &[]);
    let mut warm_users = vec![false; m.n_users()];
    let mut warm_items = vec![false; m.n_items()];
    for o in &problem.obs {
        warm_users[o.user] = true;
        warm_items[o.item] = true;
    }
    for (rows, warm) in [(&mut model.p, &warm_users), (&mut model.q, &warm_items)] {
        for (row, &is_warm) in rows.chunks_exact_mut(k).zip(warm.iter()) {
            for x in row.iter_mut() {
                let draw = rng.random_range(-cfg.init_scale..cfg.init_scale);
                *x = if is_warm { draw } else { 0.0 };
            }
        }
    }

    let mut order: Vec<usize> = (0..problem.obs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut previous = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let o = &problem.obs[idx];
            let c = problem.penalty[o.user];
            let (pu, qi) = (&mut model.p[o.user * k..(o.user + 1) * k], &model.q[o.item * k..(o.item + 1) * k]);
            let err = o.rating - dot(pu, qi);
            for f in 0..k {
                pu[f] -= cfg.alpha * pair_gradient(o.weight, err, c, pu[f], qi[f]);
            }
        }
        order.shuffle(&mut rng);
        for &idx in &order {
            let o = &problem.obs[idx];
            let c = problem.penalty[o.user];
            let (pu, qi) = (&model.p[o.user * k..(o.user + 1) * k], &mut model.q[o.item * k..(o.item + 1) * k]);
            let err = o.rating - dot(pu, qi);
            for f in 0..k {
                qi[f] -= cfg.alpha * pair_gradient(o.weight, err, c, qi[f], pu[f]);
            }
        }
        let value = problem.objective(&model);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{variant} training diverged at epoch {} ({})",
                epoch + 1,
                cfg.describe()
            )));
        }
        trace.push(value);
        if cfg.tolerance > 0.0 && (previous - value).abs() < cfg.tolerance {
            break;
        }
        previous = value;
    }
    Ok((model, trace))
}
