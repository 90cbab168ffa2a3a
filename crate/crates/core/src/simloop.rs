//! The closed feedback loop: refit exposure, train, recommend, measure,
//! accept relevant items into the training set, repeat.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::dataset::{CompleteMatrix, RatingMatrix, DEFAULT_RELEVANCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::exposure::{fit_poisson_exposure, ExposureMatrix, PoissonConfig};
use crate::metrics::{epc, epd_detailed, hit_rate, MetricContext, DEFAULT_DISCOUNT_BASE};
use crate::policy::{mab_mix, top_n, RecommendationSlate};
use crate::recommender::{train, FactorModel, TrainingConfig, Variant};
use crate::seed::{derive_seed, rng_from};
use crate::stats::{gini, mean_ci95, welch_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SimVariant {
    Mf,
    PearMf,
    PropensityMf,
    MabMf,
    MabPearMf,
}

impl SimVariant {
    pub const ALL: [SimVariant; 5] = [
        SimVariant::Mf,
        SimVariant::PearMf,
        SimVariant::PropensityMf,
        SimVariant::MabMf,
        SimVariant::MabPearMf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SimVariant::Mf => "mf",
            SimVariant::PearMf => "pear_mf",
            SimVariant::PropensityMf => "propensity_mf",
            SimVariant::MabMf => "mab_mf",
            SimVariant::MabPearMf => "mab_pear_mf",
        }
    }

    /// The recommender trained underneath the slate policy.
    pub fn recommender(self) -> Variant {
        match self {
            SimVariant::Mf | SimVariant::MabMf => Variant::Mf,
            SimVariant::PearMf | SimVariant::MabPearMf => Variant::PearMf,
            SimVariant::PropensityMf => Variant::PropensityMf,
        }
    }

    pub fn explores(self) -> bool {
        matches!(self, SimVariant::MabMf | SimVariant::MabPearMf)
    }
}

impl fmt::Display for SimVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::InvalidArgument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub variant: SimVariant,
    pub iterations: usize,
    pub slate_size: usize,
    pub replicas: usize,
    /// Per-slot exploration probability for the `mab_*` variants.
    pub epsilon: f64,
    /// Share of the observed ratings used as the initial training set.
    pub initial_fraction: f64,
    pub relevance_threshold: f64,
    pub discount_base: f64,
    pub training: TrainingConfig,
    pub poisson: PoissonConfig,
    pub master_seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            variant: SimVariant::Mf,
            iterations: 10,
            slate_size: 10,
            replicas: 10,
            epsilon: 0.1,
            initial_fraction: 0.2,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            discount_base: DEFAULT_DISCOUNT_BASE,
            training: TrainingConfig::default(),
            poisson: PoissonConfig::default(),
            master_seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.replicas == 0 || self.slate_size == 0 {
            return Err(Error::InvalidArgument(
                "iterations, replicas and slate_size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.initial_fraction > 0.0 && self.initial_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "initial_fraction {} outside (0, 1]",
                self.initial_fraction
            )));
        }
        self.training.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub variant: SimVariant,
    pub replica: usize,
    /// 1-based.
    pub iteration: usize,
    pub epc: f64,
    pub epd: f64,
    pub gini: f64,
    pub hit_rate: f64,
    /// Training-set size the iteration's model was fit on.
    pub train_size: usize,
    /// Users that received a nonempty slate.
    pub users: usize,
    pub accepted: usize,
    /// EPD pairs that fell back to the degenerate distance.
    pub degenerate_pairs: usize,
}

impl TraceRow {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Epc => self.epc,
            Metric::Epd => self.epd,
            Metric::Gini => self.gini,
            Metric::HitRate => self.hit_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Epc,
    Epd,
    Gini,
    HitRate,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Epc, Metric::Epd, Metric::Gini, Metric::HitRate];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Epc => "epc",
            Metric::Epd => "epd",
            Metric::Gini => "gini",
            Metric::HitRate => "hit_rate",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What one iteration looked like, handed to observers before acceptance is
/// applied to `train`.
pub struct IterationView<'a> {
    pub variant: SimVariant,
    pub replica: usize,
    pub iteration: usize,
    pub train: &'a RatingMatrix,
    pub slates: &'a [RecommendationSlate],
    /// `(user, item, rating)` triples about to be appended.
    pub accepted: &'a [(usize, usize, f64)],
}

/// Slate items whose ground-truth rating reaches the relevance threshold.
pub fn accept(slate: &RecommendationSlate, complete: &CompleteMatrix, u: usize) -> Vec<(usize, f64)> {
    slate
        .items
        .iter()
        .filter(|&&i| complete.is_relevant(u, i))
        .map(|&i| (i, complete.get(u, i)))
        .collect()
}

/// A uniformly sampled `fraction` of `observed`, without timestamps.
pub fn initial_training(observed: &RatingMatrix, fraction: f64, seed: u64) -> Result<RatingMatrix> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = observed.len();
    let take = ((n as f64 * fraction).round() as usize).clamp(1, n.max(1));
    let mut picked = index::sample(&mut rng_from(seed, &[]), n, take).into_vec();
    picked.sort_unstable();
    let mut out = observed.empty_like();
    for idx in picked {
        let r = &observed.entries()[idx];
        out.insert(r.user, r.item, r.value, None)?;
    }
    Ok(out)
}

struct UserOutcome {
    slate: RecommendationSlate,
    epc: f64,
    epd: f64,
    degenerate: usize,
    hit_rate: f64,
}

fn build_slate(
    cfg: &SimulationConfig,
    model: &FactorModel,
    train: &RatingMatrix,
    u: usize,
    seed: u64,
) -> Result<RecommendationSlate> {
    let base = top_n(model, train, u, cfg.slate_size);
    if !cfg.variant.explores() {
        return Ok(base);
    }
    let candidates: Vec<usize> = (0..train.n_items()).filter(|&i| !train.contains(u, i)).collect();
    mab_mix(&base, &candidates, cfg.epsilon, derive_seed(seed, &[u as u64]))
}

fn user_outcome(
    cfg: &SimulationConfig,
    ctx: &MetricContext<'_>,
    model: &FactorModel,
    train: &RatingMatrix,
    u: usize,
    seed: u64,
) -> Result<Option<UserOutcome>> {
    if model.is_cold_user(u) {
        return Ok(None);
    }
    let slate = build_slate(cfg, model, train, u, seed)?;
    if slate.is_empty() {
        return Ok(None);
    }
    let e = epd_detailed(&slate, ctx, u, train.user_items(u))?;
    Ok(Some(UserOutcome {
        epc: epc(&slate, ctx, u)?,
        epd: e.value,
        degenerate: e.degenerate_pairs,
        hit_rate: hit_rate(&slate, ctx, u)?,
        slate,
    }))
}

/// Runs one replica of the loop starting from `initial`.
pub fn run_replica(
    initial: &RatingMatrix,
    complete: &CompleteMatrix,
    cfg: &SimulationConfig,
    replica: usize,
    replica_seed: u64,
) -> Result<Vec<TraceRow>> {
    run_replica_observed(initial, complete, cfg, replica, replica_seed, &mut |_| {})
}

/// [`run_replica`], calling `observer` once per iteration.
pub fn run_replica_observed(
    initial: &RatingMatrix,
    complete: &CompleteMatrix,
    cfg: &SimulationConfig,
    replica: usize,
    replica_seed: u64,
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if initial.n_users() != complete.n_users() || initial.n_items() != complete.n_items() {
        return Err(Error::InvalidArgument("initial and complete matrix shapes differ".into()));
    }
    let mut complete = complete.clone();
    complete.relevance_threshold = cfg.relevance_threshold;
    let complete = &complete;

    let mut train_set = initial.clone();
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let it = iteration as u64;
        let poisson = PoissonConfig {
            seed: derive_seed(replica_seed, &[it, 0]),
            ..cfg.poisson
        };
        let exposure: ExposureMatrix = fit_poisson_exposure(&train_set, &poisson)?.exposure_matrix();
        let training = TrainingConfig {
            seed: derive_seed(replica_seed, &[it, 1]),
            ..cfg.training
        };
        let model = train(&train_set, Some(&exposure), cfg.variant.recommender(), &training)?;
        let ctx = MetricContext::new(
            complete,
            &exposure,
            &model.q,
            model.k,
            cfg.discount_base,
            cfg.relevance_threshold,
        )?;

        let slate_seed = derive_seed(replica_seed, &[it, 2]);
        let outcomes: Vec<Option<UserOutcome>> = (0..train_set.n_users())
            .into_par_iter()
            .map(|u| user_outcome(cfg, &ctx, &model, &train_set, u, slate_seed))
            .collect::<Result<_>>()?;
        let outcomes: Vec<UserOutcome> = outcomes.into_iter().flatten().collect();
        if outcomes.is_empty() {
            return Err(Error::Validation(format!(
                "{} replica {replica} iteration {iteration}: no user received a slate",
                cfg.variant
            )));
        }

        let n = outcomes.len() as f64;
        let mean = |f: fn(&UserOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
        let (epc_mean, epd_mean, hr_mean) = (mean(|o| o.epc), mean(|o| o.epd), mean(|o| o.hit_rate));
        let degenerate = outcomes.iter().map(|o| o.degenerate).sum();

        let accepted: Vec<(usize, usize, f64)> = outcomes
            .iter()
            .flat_map(|o| {
                accept(&o.slate, complete, o.slate.user)
                    .into_iter()
                    .map(move |(i, r)| (o.slate.user, i, r))
            })
            .collect();
        let slates: Vec<RecommendationSlate> = outcomes.into_iter().map(|o| o.slate).collect();
        observer(&IterationView {
            variant: cfg.variant,
            replica,
            iteration,
            train: &train_set,
            slates: &slates,
            accepted: &accepted,
        });

        let train_size = train_set.len();
        for &(u, i, r) in &accepted {
            train_set.insert(u, i, r, None)?;
        }
        rows.push(TraceRow {
            variant: cfg.variant,
            replica,
            iteration,
            epc: epc_mean,
            epd: epd_mean,
            gini: gini(&train_set.item_counts())?,
            hit_rate: hr_mean,
            train_size,
            users: slates.len(),
            accepted: accepted.len(),
            degenerate_pairs: degenerate,
        });
    }
    Ok(rows)
}

/// The seed of replica `r`; shared by every variant so replicas are paired.
pub fn replica_seed(master_seed: u64, replica: usize) -> u64 {
    derive_seed(master_seed, &[replica as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub variant: SimVariant,
    pub iteration: usize,
    pub metric: Metric,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseT {
    pub variant_a: SimVariant,
    pub variant_b: SimVariant,
    pub iteration: usize,
    pub metric: Metric,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct ReplicaFailure {
    pub variant: SimVariant,
    pub replica: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// Ordered by configuration, then replica, then iteration.
    pub rows: Vec<TraceRow>,
    pub aggregates: Vec<Aggregate>,
    pub t_tests: Vec<PairwiseT>,
    pub failures: Vec<ReplicaFailure>,
}

impl ExperimentResult {
    pub fn aggregate(&self, variant: SimVariant, iteration: usize, metric: Metric) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.iteration == iteration && a.metric == metric)
    }

    pub fn t_test(&self, a: SimVariant, b: SimVariant, iteration: usize, metric: Metric) -> Option<f64> {
        self.t_tests.iter().find_map(|t| {
            if t.iteration != iteration || t.metric != metric {
                None
            } else if t.variant_a == a && t.variant_b == b {
                Some(t.t)
            } else if t.variant_a == b && t.variant_b == a {
                Some(-t.t)
            } else {
                None
            }
        })
    }

    /// Per-replica values of `metric` at `iteration` for `variant`.
    pub fn samples(&self, variant: SimVariant, iteration: usize, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.iteration == iteration)
            .map(|r| r.metric(metric))
            .collect()
    }
}

/// Everything an experiment reads besides its configurations.
pub struct ExperimentData<'a> {
    /// Ratings the initial training sets are sampled from.
    pub observed: &'a RatingMatrix,
    pub complete: &'a CompleteMatrix,
}

/// Runs every (configuration, replica) pair in parallel and aggregates.
pub fn run_experiment(configs: &[SimulationConfig], data: &ExperimentData<'_>) -> Result<ExperimentResult> {
    run_experiment_observed(configs, data, &|_| {})
}

/// [`run_experiment`], calling `observer` from worker threads once per
/// replica-iteration.
pub fn run_experiment_observed(
    configs: &[SimulationConfig],
    data: &ExperimentData<'_>,
    observer: &(dyn Fn(&IterationView<'_>) + Sync),
) -> Result<ExperimentResult> {
    if configs.is_empty() {
        return Err(Error::InvalidArgument("no simulation configurations".into()));
    }
    for cfg in configs {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, usize)> = configs
        .iter()
        .enumerate()
        .flat_map(|(c, cfg)| (0..cfg.replicas).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<Result<Vec<TraceRow>>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let cfg = &configs[c];
            let seed = replica_seed(cfg.master_seed, r);
            let initial = initial_training(data.observed, cfg.initial_fraction, derive_seed(seed, &[0]))?;
            run_replica_observed(&initial, data.complete, cfg, r, seed, &mut |view| observer(view))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(c, r), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(mut trace) => rows.append(&mut trace),
            Err(e) => failures.push(ReplicaFailure {
                variant: configs[c].variant,
                replica: r,
                error: e.to_string(),
            }),
        }
    }
    for cfg in configs {
        if !rows.iter().any(|row| row.variant == cfg.variant) {
            let reasons: Vec<String> = failures
                .iter()
                .filter(|f| f.variant == cfg.variant)
                .map(|f| format!("replica {}: {}", f.replica, f.error))
                .collect();
            return Err(Error::Validation(format!(
                "every replica of {} failed: {}",
                cfg.variant,
                reasons.join("; ")
            )));
        }
    }

    let mut samples: BTreeMap<(SimVariant, usize, Metric), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        for metric in Metric::ALL {
            samples
                .entry((row.variant, row.iteration, metric))
                .or_default()
                .push(row.metric(metric));
        }
    }
    let order: Vec<SimVariant> = {
        let mut seen = Vec::new();
        for cfg in configs {
            if !seen.contains(&cfg.variant) {
                seen.push(cfg.variant);
            }
        }
        seen
    };
    let max_iter = configs.iter().map(|c| c.iterations).max().unwrap_or(0);

    let mut aggregates = Vec::new();
    for &variant in &order {
        for iteration in 1..=max_iter {
            for metric in Metric::ALL {
                if let Some(values) = samples.get(&(variant, iteration, metric)) {
                    let (mean, ci95) = if values.len() >= 2 {
                        mean_ci95(values)?
                    } else {
                        (values[0], f64::NAN)
                    };
                    aggregates.push(Aggregate {
                        variant,
                        iteration,
                        metric,
                        mean,
                        ci95,
                    });
                }
            }
        }
    }

    let mut t_tests = Vec::new();
    for (a_idx, &a) in order.iter().enumerate() {
        for &b in &order[a_idx + 1..] {
            for iteration in 1..=max_iter {
                for metric in Metric::ALL {
                    if let (Some(xa), Some(xb)) = (
                        samples.get(&(a, iteration, metric)),
                        samples.get(&(b, iteration, metric)),
                    ) {
                        let t = if xa.len() >= 2 && xb.len() >= 2 {
                            welch_t(xa, xb)?
                        } else {
                            f64::NAN
                        };
                        t_tests.push(PairwiseT {
                            variant_a: a,
                            variant_b: b,
                            iteration,
                            metric,
                            t,
                        });
                    }
                }
            }
        }
    }

    Ok(ExperimentResult {
        rows,
        aggregates,
        t_tests,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Mutex;

    fn complete_from(n_users: usize, n_items: usize, f: impl Fn(usize, usize) -> f32) -> CompleteMatrix {
        let values = (0..n_users)
            .flat_map(|u| (0..n_items).map(move |i| (u, i)))
            .map(|(u, i)| f(u, i))
            .collect();
        CompleteMatrix::from_values(n_users, n_items, values).unwrap()
    }

    fn synthetic() -> (RatingMatrix, CompleteMatrix) {
        let (nu, ni) = (30, 40);
        let complete = complete_from(nu, ni, |u, i| 1.0 + ((u * 7 + i * 3) % 5) as f32);
        let mut observed = RatingMatrix::new(nu, ni);
        for u in 0..nu {
            for i in 0..ni {
                if (u + 2 * i) % 3 == 0 {
                    observed.insert(u, i, complete.get(u, i), None).unwrap();
                }
            }
        }
        (observed, complete)
    }

    fn small_config(variant: SimVariant) -> SimulationConfig {
        SimulationConfig {
            variant,
            iterations: 4,
            slate_size: 5,
            replicas: 3,
            initial_fraction: 0.5,
            training: TrainingConfig {
                alpha: 0.01,
                epochs: 10,
                k: 4,
                ..TrainingConfig::default()
            },
            poisson: PoissonConfig {
                k: 3,
                sweeps: 10,
                ..PoissonConfig::default()
            },
            master_seed: 11,
            ..SimulationConfig::default()
        }
    }

    fn slate_of(items: &[usize]) -> RecommendationSlate {
        RecommendationSlate {
            user: 0,
            items: items.to_vec(),
            scores: vec![0.0; items.len()],
            explored: vec![false; items.len()],
            truncated: false,
        }
    }

    #[test]
    fn acceptance_filters_on_threshold() {
        let complete = complete_from(1, 3, |_, i| [5.0, 3.0, 4.0][i]);
        assert_eq!(accept(&slate_of(&[0, 1, 2]), &complete, 0), vec![(0, 5.0), (2, 4.0)]);
        assert!(accept(&slate_of(&[1]), &complete, 0).is_empty());
        let fives = complete_from(1, 3, |_, _| 5.0);
        assert_eq!(accept(&slate_of(&[2, 0]), &fives, 0), vec![(2, 5.0), (0, 5.0)]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in SimVariant::ALL {
            assert_eq!(v.name().parse::<SimVariant>().unwrap(), v);
        }
        let err = "bandit".parse::<SimVariant>().unwrap_err().to_string();
        assert!(err.contains("mab_pear_mf"), "{err}");
    }

    #[test]
    fn initial_training_samples_the_requested_share() {
        let (observed, _) = synthetic();
        let init = initial_training(&observed, 0.25, 3).unwrap();
        assert_eq!(init.len(), (observed.len() as f64 * 0.25).round() as usize);
        assert!(init.entries().iter().all(|r| observed.get(r.user, r.item) == r.value));
        assert_eq!(init, initial_training(&observed, 0.25, 3).unwrap());
    }

    #[test]
    fn single_iteration_gives_one_row() {
        let (observed, complete) = synthetic();
        let cfg = SimulationConfig {
            iterations: 1,
            ..small_config(SimVariant::PearMf)
        };
        let init = initial_training(&observed, 0.5, 1).unwrap();
        let rows = run_replica(&init, &complete, &cfg, 0, 5).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].train_size, init.len());
    }

    #[test]
    fn loop_invariants_hold_for_every_variant() {
        let (observed, complete) = synthetic();
        for variant in SimVariant::ALL {
            let cfg = small_config(variant);
            let init = initial_training(&observed, 0.5, 2).unwrap();
            let mut accepted_before: HashSet<(usize, usize)> = HashSet::new();
            let mut sizes = Vec::new();
            let rows = run_replica_observed(&init, &complete, &cfg, 0, 9, &mut |view| {
                sizes.push((view.train.len(), view.accepted.len()));
                for slate in view.slates {
                    for &i in &slate.items {
                        assert!(!view.train.contains(slate.user, i));
                        assert!(!accepted_before.contains(&(slate.user, i)));
                    }
                }
                for &(u, i, r) in view.accepted {
                    assert!(r >= 4.0);
                    accepted_before.insert((u, i));
                }
            })
            .unwrap();
            assert_eq!(rows.len(), cfg.iterations);
            for w in sizes.windows(2) {
                assert_eq!(w[1].0, w[0].0 + w[0].1);
            }
            for row in &rows {
                for v in [row.epc, row.epd, row.gini, row.hit_rate] {
                    assert!((0.0..=1.0).contains(&v), "{variant}: {row:?}");
                }
            }
        }
    }

    #[test]
    fn experiment_is_deterministic_and_aggregates() {
        let (observed, complete) = synthetic();
        let data = ExperimentData {
            observed: &observed,
            complete: &complete,
        };
        let configs = [small_config(SimVariant::Mf), small_config(SimVariant::MabPearMf)];
        let a = run_experiment(&configs, &data).unwrap();
        let b = run_experiment(&configs, &data).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 2 * 3 * 4);
        assert_eq!(a.aggregates.len(), 2 * 4 * 4);
        assert_eq!(a.t_tests.len(), 4 * 4);
        let agg = a.aggregate(SimVariant::Mf, 2, Metric::Gini).unwrap();
        let (mean, ci) = mean_ci95(&a.samples(SimVariant::Mf, 2, Metric::Gini)).unwrap();
        assert_eq!((agg.mean, agg.ci95), (mean, ci));
        let t = a.t_test(SimVariant::MabPearMf, SimVariant::Mf, 3, Metric::Epc).unwrap();
        assert_eq!(t, -a.t_test(SimVariant::Mf, SimVariant::MabPearMf, 3, Metric::Epc).unwrap());
    }

    #[test]
    fn identical_replicas_have_zero_width_intervals() {
        let (observed, complete) = synthetic();
        let cfg = small_config(SimVariant::PearMf);
        let init = initial_training(&observed, 0.5, 4).unwrap();
        let rows: Vec<TraceRow> = (0..2)
            .flat_map(|r| run_replica(&init, &complete, &cfg, r, 77).unwrap())
            .collect();
        for it in 1..=cfg.iterations {
            for metric in Metric::ALL {
                let xs: Vec<f64> = rows.iter().filter(|r| r.iteration == it).map(|r| r.metric(metric)).collect();
                assert_eq!(mean_ci95(&xs).unwrap().1, 0.0);
            }
        }
    }

    #[test]
    fn observer_sees_every_replica_iteration() {
        let (observed, complete) = synthetic();
        let data = ExperimentData {
            observed: &observed,
            complete: &complete,
        };
        let seen = Mutex::new(Vec::new());
        run_experiment_observed(&[small_config(SimVariant::PropensityMf)], &data, &|v| {
            seen.lock().unwrap().push((v.replica, v.iteration));
        })
        .unwrap();
        let mut seen = seen.into_inner().unwrap();
        seen.sort();
        let expected: Vec<(usize, usize)> = (0..3).flat_map(|r| (1..=4).map(move |i| (r, i))).collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn failing_variant_fails_the_experiment() {
        let (observed, complete) = synthetic();
        let data = ExperimentData {
            observed: &observed,
            complete: &complete,
        };
        let mut bad = small_config(SimVariant::Mf);
        bad.training.alpha = 1e6;
        let err = run_experiment(&[bad], &data).unwrap_err().to_string();
        assert!(err.contains("every replica of mf failed"), "{err}");
    }
}
