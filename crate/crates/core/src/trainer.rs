//! Training loops: model-based PGPE, importance-weighted PGPE over a sampling
//! schedule, and REINFORCE; plus policy evaluation and learning curves.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::env::{self, EnvConfig, EnvKind, Trajectory, TransitionSample};
use crate::error::{Error, Result};
use crate::estimators::{self, PgpeSample};
use crate::io::{self as tio, fmt_f64};
use crate::model::{FitReport, FittedModel, ModelSpec, TransitionModel};
use crate::policy::{GaussianPolicy, LinearPolicy, PriorHyper, TAU_FLOOR};
use crate::rng::{derive_seed, Purpose, Rng, Streams};

/// Redraws allowed per synthetic trajectory before the slot is given up.
const MAX_REDRAWS_PER_SLOT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    MpgpeLscde,
    MpgpeGp,
    Iwpgpe,
    Reinforce,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::MpgpeLscde => "mpgpe-lscde",
            Algo::MpgpeGp => "mpgpe-gp",
            Algo::Iwpgpe => "iwpgpe",
            Algo::Reinforce => "reinforce",
        }
    }

    pub fn is_model_based(self) -> bool {
        matches!(self, Algo::MpgpeLscde | Algo::MpgpeGp)
    }

    pub fn model_spec(self) -> Option<ModelSpec> {
        match self {
            Algo::MpgpeLscde => Some(ModelSpec::lscde()),
            Algo::MpgpeGp => Some(ModelSpec::gp()),
            _ => None,
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('_', "-").as_str() {
            "mpgpe-lscde" => Ok(Algo::MpgpeLscde),
            "mpgpe-gp" => Ok(Algo::MpgpeGp),
            "iwpgpe" | "iw-pgpe" => Ok(Algo::Iwpgpe),
            "reinforce" => Ok(Algo::Reinforce),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm `{other}` (expected mpgpe-lscde, mpgpe-gp, iwpgpe or reinforce)"
            ))),
        }
    }
}

/// A sampling schedule: `repeats` batches of `batch` real episodes each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Schedule {
    pub batch: usize,
    pub repeats: usize,
}

impl Schedule {
    pub fn new(batch: usize, repeats: usize) -> Self {
        Self { batch, repeats }
    }

    pub fn total(&self) -> usize {
        self.batch * self.repeats
    }

    pub fn check_budget(&self, budget: usize) -> Result<()> {
        if self.batch == 0 || self.repeats == 0 || self.total() != budget {
            return Err(Error::BudgetMismatch { batch: self.batch, repeats: self.repeats, budget });
        }
        Ok(())
    }

    /// Every `k x (budget/k)` schedule for divisors `k` of `budget`, smallest batch first.
    pub fn divisors_of(budget: usize) -> Vec<Schedule> {
        (1..=budget).filter(|k| budget % k == 0).map(|k| Schedule::new(k, budget / k)).collect()
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.batch, self.repeats)
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("malformed schedule `{s}` (expected e.g. 5x4)"));
        let (k, r) = s.trim().split_once(['x', 'X', '*', '×']).ok_or_else(bad)?;
        let k: usize = k.trim().parse().map_err(|_| bad())?;
        let r: usize = r.trim().parse().map_err(|_| bad())?;
        if k == 0 || r == 0 {
            return Err(bad());
        }
        Ok(Schedule::new(k, r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algo: Algo,
    pub budget_episodes: usize,
    pub iterations: usize,
    /// Synthetic roll-outs per M-PGPE update; half estimate the baseline and
    /// the other half the gradient.
    pub synthetic_per_update: usize,
    pub learning_rate: f64,
    /// Use `learning_rate / ||grad||` as the step size.
    pub normalize_step: bool,
    pub schedule: Schedule,
    pub updates_per_batch: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub init_eta: f64,
    pub init_tau: f64,
    /// Lower bound on every prior std (and the REINFORCE exploration std)
    /// after each update.
    pub tau_floor: f64,
    /// Stop early once `||delta rho||` falls below this value.
    pub stop_tolerance: Option<f64>,
    pub max_centers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::MpgpeLscde,
            budget_episodes: 20,
            iterations: 20,
            synthetic_per_update: 2000,
            learning_rate: 0.1,
            normalize_step: false,
            schedule: Schedule::new(20, 1),
            updates_per_batch: 100,
            eval_episodes: 100,
            seed: 0,
            init_eta: 0.0,
            init_tau: 1.0,
            tau_floor: 0.05,
            stop_tolerance: None,
            max_centers: 500,
        }
    }
}

impl TrainConfig {
    pub fn new(algo: Algo) -> Self {
        Self { algo, ..Self::default() }
    }

    /// Defaults tuned to the environment. The arm works in degrees, so it
    /// takes normalized steps from a narrow prior around the holding policy
    /// and a 50-episode budget.
    pub fn for_env(algo: Algo, env: &EnvConfig) -> Self {
        match env.kind {
            EnvKind::Arm2 => Self {
                algo,
                budget_episodes: 50,
                schedule: Schedule::new(5, 10),
                normalize_step: true,
                init_tau: 0.01,
                tau_floor: 0.001,
                ..Self::default()
            },
            _ => Self::new(algo),
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.budget_episodes == 0 {
            out.push("budget must be >= 1".to_string());
        }
        if self.algo.is_model_based() {
            if self.synthetic_per_update < 2 || self.synthetic_per_update % 2 != 0 {
                out.push(format!(
                    "synthetic samples per update must be even and >= 2, got {}",
                    self.synthetic_per_update
                ));
            }
        } else if self.schedule.check_budget(self.budget_episodes).is_err() {
            out.push(format!(
                "schedule {} does not exhaust the budget of {} episodes",
                self.schedule, self.budget_episodes
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.eval_episodes == 0 {
            out.push("evaluation episodes must be >= 1".to_string());
        }
        if !self.init_eta.is_finite() {
            out.push("initial prior mean must be finite".to_string());
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite()) {
            out.push(format!("initial prior std must be positive, got {}", self.init_tau));
        }
        if !(self.tau_floor >= TAU_FLOOR && self.tau_floor.is_finite()) {
            out.push(format!("tau floor must be finite and >= {TAU_FLOOR}, got {}", self.tau_floor));
        }
        if let Some(tol) = self.stop_tolerance {
            if !(tol >= 0.0) {
                out.push(format!("stop tolerance must be >= 0, got {tol}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// `eta` is the environment's resting parameters shifted by `init_eta`.
    pub fn initial_prior(&self, env: &EnvConfig) -> Result<PriorHyper> {
        let eta: Vec<f64> = env.resting_policy_params().iter().map(|t| t + self.init_eta).collect();
        let tau = vec![self.init_tau; eta.len()];
        PriorHyper::new(eta, tau)
    }

    fn step_size(&self, grad_norm: f64) -> f64 {
        if !self.normalize_step {
            self.learning_rate
        } else if grad_norm > 0.0 {
            self.learning_rate / grad_norm
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub cumulative_real_samples: usize,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

pub const CURVE_HEADER: &str = "iteration,cumulative_real_samples,mean_return,std_error";

impl LearningCurve {
    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.mean_return)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CURVE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                r.cumulative_real_samples,
                fmt_f64(r.mean_return),
                fmt_f64(r.std_error)
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let lines = tio::read_lines(reader)?;
        let (hno, header) = lines.first().ok_or_else(|| tio::missing(1, "curve header"))?;
        tio::expect_header(*hno, header, CURVE_HEADER)?;
        let mut rows = Vec::with_capacity(lines.len() - 1);
        for (no, line) in &lines[1..] {
            let v = tio::parse_row(*no, line, Some(4))?;
            rows.push(CurveRow {
                iteration: tio::parse_usize(*no, v[0], "iteration")?,
                cumulative_real_samples: tio::parse_usize(*no, v[1], "cumulative_real_samples")?,
                mean_return: v[2],
                std_error: v[3],
            });
        }
        Ok(Self { rows })
    }
}

/// Bookkeeping collected during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub real_episodes: usize,
    pub evaluation_episodes: usize,
    pub synthetic_rollouts: usize,
    pub degenerate_rollouts: usize,
    pub tau_floored: usize,
    pub dropped_weights: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub prior: PriorHyper,
    pub curve: LearningCurve,
    pub stats: TrainStats,
    pub fit_report: Option<FitReport>,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error over runs or episodes.
pub fn summarize(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("values to summarize"));
    }
    Ok(mean_and_se(xs))
}

/// Rolls out the deterministic policy `theta = eta` in the real environment
/// and returns the mean discounted return and its standard error.
pub fn evaluate_policy(env: &EnvConfig, rho: &PriorHyper, n_episodes: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be >= 1".into()));
    }
    let policy = rho.mean_policy(env.default_basis(), env.action_dim())?;
    evaluate_linear(env, &policy, n_episodes, rng)
}

/// Like [`evaluate_policy`] but draws a fresh `theta ~ p(theta | rho)` for
/// every episode, so the exploration spread counts towards the score.
pub fn evaluate_prior_sampled(
    env: &EnvConfig,
    rho: &PriorHyper,
    n_episodes: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be >= 1".into()));
    }
    let basis = env.default_basis();
    let returns = (0..n_episodes)
        .map(|_| {
            let policy = LinearPolicy::new(basis.clone(), env.action_dim(), rho.draw(rng))?;
            env::rollout(env, &policy, rng).map(|t| t.discounted_return(env.gamma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&returns))
}

pub fn evaluate_linear(env: &EnvConfig, policy: &LinearPolicy, n_episodes: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let returns = (0..n_episodes)
        .map(|_| env::rollout(env, policy, rng).map(|t| t.discounted_return(env.gamma)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_and_se(&returns))
}

fn eval_row(env: &EnvConfig, rho: &PriorHyper, cfg: &TrainConfig, iteration: usize, real: usize) -> Result<CurveRow> {
    // Every row replays the same evaluation episodes, so curve differences
    // come from the prior and not from evaluation noise.
    let mut rng = Streams::new(cfg.seed).stream(Purpose::Evaluation, 0);
    let (mean_return, std_error) = evaluate_policy(env, rho, cfg.eval_episodes, &mut rng)?;
    Ok(CurveRow { iteration, cumulative_real_samples: real, mean_return, std_error })
}

/// Simulated roll-out of `policy` against a learned model; rewards come from
/// the known reward function and states are projected onto the state domain.
pub fn model_rollout<M: TransitionModel + ?Sized>(
    env: &EnvConfig,
    model: &M,
    policy: &LinearPolicy,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        states: Vec::with_capacity(env.horizon + 1),
        actions: Vec::with_capacity(env.horizon),
        rewards: Vec::with_capacity(env.horizon),
    };
    traj.states.push(env.initial_state(rng));
    for t in 0..env.horizon {
        let s = &traj.states[t];
        let mut a = policy.act(s)?;
        env.clip_action(&mut a);
        let mut s_next = model.sample_next(s, &a, rng)?;
        env.project_state(&mut s_next);
        let r = env.reward(s, &a, &s_next);
        traj.actions.push(a);
        traj.rewards.push(r);
        traj.states.push(s_next);
    }
    Ok(traj)
}

struct SyntheticSlot {
    sample: Option<PgpeSample>,
    degenerate: usize,
}

fn synthetic_slot<M: TransitionModel + ?Sized>(
    env: &EnvConfig,
    model: &M,
    rho: &PriorHyper,
    mut rng: Rng,
) -> Result<SyntheticSlot> {
    let basis = env.default_basis();
    let mut degenerate = 0;
    while degenerate < MAX_REDRAWS_PER_SLOT {
        let theta = rho.draw(&mut rng);
        let policy = LinearPolicy::new(basis.clone(), env.action_dim(), theta.clone())?;
        match model_rollout(env, model, &policy, &mut rng) {
            Ok(traj) => {
                let ret = traj.discounted_return(env.gamma);
                return Ok(SyntheticSlot {
                    sample: Some(PgpeSample { theta, ret, behavior: rho.clone() }),
                    degenerate,
                });
            }
            Err(Error::DegenerateDensity { .. }) => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(SyntheticSlot { sample: None, degenerate })
}

/// Policy optimization against an already fitted transition model.
/// `real_episodes` is the number of real episodes the model was fitted on.
pub fn train_mpgpe_with_model<M: TransitionModel + ?Sized>(
    env: &EnvConfig,
    model: &M,
    real_episodes: usize,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    env.validate()?;
    if cfg.synthetic_per_update < 2 || cfg.synthetic_per_update % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "synthetic samples per update must be even and >= 2, got {}",
            cfg.synthetic_per_update
        )));
    }
    let mut rho = cfg.initial_prior(env)?;
    let mut curve = LearningCurve::default();
    let mut stats = TrainStats { real_episodes, ..TrainStats::default() };
    let half = cfg.synthetic_per_update / 2;

    for it in 1..=cfg.iterations {
        let streams = Streams::new(derive_seed(cfg.seed, it as u64));
        let slots = (0..cfg.synthetic_per_update)
            .into_par_iter()
            .map(|j| synthetic_slot(env, model, &rho, streams.stream(Purpose::ModelSample, j as u32)))
            .collect::<Result<Vec<_>>>()?;
        let degenerate: usize = slots.iter().map(|s| s.degenerate).sum();
        let attempted = degenerate + slots.iter().filter(|s| s.sample.is_some()).count();
        stats.degenerate_rollouts += degenerate;
        stats.synthetic_rollouts += attempted;
        if 2 * degenerate > attempted || slots.iter().any(|s| s.sample.is_none()) {
            return Err(Error::TooManyDegenerate { degenerate, attempted });
        }
        let samples: Vec<PgpeSample> = slots.into_iter().filter_map(|s| s.sample).collect();
        let (base_half, grad_half) = samples.split_at(half);
        let g = estimators::pgpe_gradient_split(base_half, grad_half, &rho)?;
        let step = cfg.step_size(g.norm());
        let before = rho.clone();
        stats.tau_floored += rho.ascend_floored(&g.grad_eta, &g.grad_tau, step, cfg.tau_floor);
        curve.rows.push(eval_row(env, &rho, cfg, it, real_episodes)?);
        stats.evaluation_episodes += cfg.eval_episodes;
        if let Some(tol) = cfg.stop_tolerance {
            if delta_norm(&before, &rho) < tol {
                stats.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainResult { prior: rho, curve, stats, fit_report: None })
}

fn delta_norm(a: &PriorHyper, b: &PriorHyper) -> f64 {
    let de = a.eta.iter().zip(&b.eta).map(|(x, y)| (x - y).powi(2));
    let dt = a.tau.iter().zip(&b.tau).map(|(x, y)| (x - y).powi(2));
    de.chain(dt).sum::<f64>().sqrt()
}

/// Collects the uniform exploration dataset used by M-PGPE.
pub fn collect_for_model(env: &EnvConfig, cfg: &TrainConfig) -> Result<Vec<TransitionSample>> {
    let mut rng = Streams::new(cfg.seed).stream(Purpose::Dataset, 0);
    env::collect_uniform_dataset(env, cfg.budget_episodes, &mut rng)
}

/// Fits the transition model that `cfg.algo` calls for.
pub fn fit_for_config(data: &[TransitionSample], cfg: &TrainConfig) -> Result<(FittedModel, FitReport)> {
    let mut spec = cfg
        .algo
        .model_spec()
        .ok_or_else(|| Error::InvalidConfig(format!("{} does not use a transition model", cfg.algo)))?;
    if let ModelSpec::Lscde { max_centers, .. } = &mut spec {
        *max_centers = cfg.max_centers;
    }
    let mut rng = Streams::new(cfg.seed).stream(Purpose::ModelFit, 0);
    FittedModel::fit(data, &spec, &mut rng)
}

/// Full M-PGPE: collect `budget_episodes` uniform episodes, fit the model
/// once, then run `iterations` PGPE updates on simulated roll-outs.
pub fn train_mpgpe(env: &EnvConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    env.validate()?;
    let data = collect_for_model(env, cfg)?;
    let (model, report) = fit_for_config(&data, cfg)?;
    let mut result = train_mpgpe_with_model(env, &model, cfg.budget_episodes, cfg)?;
    result.fit_report = Some(report);
    Ok(result)
}

/// IW-PGPE under a fixed sampling schedule: each batch draws `k` parameter
/// vectors from the current prior, rolls them out in the real environment,
/// then performs `updates_per_batch` importance-weighted updates on the
/// whole buffer.
pub fn train_iwpgpe(env: &EnvConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    env.validate()?;
    cfg.schedule.check_budget(cfg.budget_episodes)?;
    let streams = Streams::new(cfg.seed);
    let mut draw_rng = streams.stream(Purpose::PriorDraw, 0);
    let mut env_rng = streams.stream(Purpose::EnvNoise, 0);
    let basis = env.default_basis();
    let mut rho = cfg.initial_prior(env)?;
    let mut buffer: Vec<PgpeSample> = Vec::with_capacity(cfg.budget_episodes);
    let mut curve = LearningCurve::default();
    let mut stats = TrainStats::default();

    for batch in 1..=cfg.schedule.repeats {
        for _ in 0..cfg.schedule.batch {
            let theta = rho.draw(&mut draw_rng);
            let policy = LinearPolicy::new(basis.clone(), env.action_dim(), theta.clone())?;
            let ret = env::rollout(env, &policy, &mut env_rng)?.discounted_return(env.gamma);
            buffer.push(PgpeSample { theta, ret, behavior: rho.clone() });
        }
        stats.real_episodes += cfg.schedule.batch;
        for _ in 0..cfg.updates_per_batch {
            let g = estimators::iw_pgpe_gradient(&buffer, &rho)?;
            stats.dropped_weights += g.n_dropped;
            let step = cfg.step_size(g.norm());
            stats.tau_floored += rho.ascend_floored(&g.grad_eta, &g.grad_tau, step, cfg.tau_floor);
        }
        curve.rows.push(eval_row(env, &rho, cfg, batch, stats.real_episodes)?);
        stats.evaluation_episodes += cfg.eval_episodes;
    }
    Ok(TrainResult { prior: rho, curve, stats, fit_report: None })
}

/// REINFORCE with a Gaussian policy under the same schedule bookkeeping as
/// IW-PGPE: one on-policy update per batch. The returned prior carries the
/// policy mean in `eta` and the exploration std in every entry of `tau`.
pub fn train_reinforce(env: &EnvConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    env.validate()?;
    cfg.schedule.check_budget(cfg.budget_episodes)?;
    if env.action_dim() != 1 {
        return Err(Error::InvalidConfig("REINFORCE supports one-dimensional actions only".into()));
    }
    let streams = Streams::new(cfg.seed);
    let mut env_rng = streams.stream(Purpose::EnvNoise, 0);
    let mut act_rng = streams.stream(Purpose::PriorDraw, 0);
    let basis = env.default_basis();
    let mut policy = GaussianPolicy::new(basis.clone(), vec![cfg.init_eta; basis.len()], cfg.init_tau)?;
    let mut curve = LearningCurve::default();
    let mut stats = TrainStats::default();

    for batch in 1..=cfg.schedule.repeats {
        let trajs = (0..cfg.schedule.batch)
            .map(|_| gaussian_rollout(env, &policy, &mut env_rng, &mut act_rng))
            .collect::<Result<Vec<_>>>()?;
        stats.real_episodes += cfg.schedule.batch;
        let g = estimators::reinforce_gradient(&trajs, &policy, env.gamma)?;
        let norm = g.grad_mu.iter().map(|x| x * x).sum::<f64>() + g.grad_sigma * g.grad_sigma;
        let step = cfg.step_size(norm.sqrt());
        for (m, d) in policy.mu.iter_mut().zip(&g.grad_mu) {
            *m += step * d;
        }
        policy.sigma += step * g.grad_sigma;
        if !(policy.sigma >= cfg.tau_floor) {
            policy.sigma = cfg.tau_floor;
            stats.tau_floored += 1;
        }
        let rho = PriorHyper::new(policy.mu.clone(), vec![policy.sigma; basis.len()])?;
        curve.rows.push(eval_row(env, &rho, cfg, batch, stats.real_episodes)?);
        stats.evaluation_episodes += cfg.eval_episodes;
    }
    let prior = PriorHyper::new(policy.mu.clone(), vec![policy.sigma; basis.len()])?;
    Ok(TrainResult { prior, curve, stats, fit_report: None })
}

/// One episode of the stochastic Gaussian policy; the recorded actions are the
/// sampled (unclipped) ones.
pub fn gaussian_rollout(
    env: &EnvConfig,
    policy: &GaussianPolicy,
    env_rng: &mut Rng,
    act_rng: &mut Rng,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        states: vec![env.initial_state(env_rng)],
        actions: Vec::with_capacity(env.horizon),
        rewards: Vec::with_capacity(env.horizon),
    };
    for t in 0..env.horizon {
        let a = vec![policy.sample_action(&traj.states[t], act_rng)?];
        let (s_next, r) = env.step(&traj.states[t], &a, env_rng)?;
        traj.actions.push(a);
        traj.rewards.push(r);
        traj.states.push(s_next);
    }
    Ok(traj)
}

/// Dispatches on `cfg.algo`.
pub fn train(env: &EnvConfig, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    match cfg.algo {
        Algo::MpgpeLscde | Algo::MpgpeGp => train_mpgpe(env, cfg),
        Algo::Iwpgpe => train_iwpgpe(env, cfg),
        Algo::Reinforce => train_reinforce(env, cfg),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub schedule: Schedule,
    pub mean_return: f64,
    pub std_error: f64,
    pub final_returns: Vec<f64>,
}

pub const SWEEP_HEADER: &str = "schedule,batch,repeats,runs,mean_return,std_error";

/// Runs IW-PGPE `n_runs` times per schedule and summarizes final returns.
/// Run `r` uses seed `derive_seed(cfg.seed, r)` under every schedule.
pub fn schedule_sweep(
    env: &EnvConfig,
    cfg: &TrainConfig,
    schedules: &[Schedule],
    n_runs: usize,
) -> Result<Vec<SweepRow>> {
    if schedules.is_empty() {
        return Err(Error::EmptyInput("schedules"));
    }
    if n_runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    for s in schedules {
        s.check_budget(cfg.budget_episodes)?;
    }
    let jobs: Vec<(usize, usize)> = (0..schedules.len()).flat_map(|i| (0..n_runs).map(move |r| (i, r))).collect();
    let finals = jobs
        .par_iter()
        .map(|&(i, r)| {
            let run_cfg = TrainConfig {
                algo: Algo::Iwpgpe,
                schedule: schedules[i],
                seed: derive_seed(cfg.seed, r as u64),
                ..cfg.clone()
            };
            let res = train_iwpgpe(env, &run_cfg)?;
            res.curve.final_return().ok_or(Error::EmptyInput("learning curve"))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(schedules
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let runs = finals[i * n_runs..(i + 1) * n_runs].to_vec();
            let (mean_return, std_error) = mean_and_se(&runs);
            SweepRow { schedule: *s, mean_return, std_error, final_returns: runs }
        })
        .collect())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.schedule,
            r.schedule.batch,
            r.schedule.repeats,
            r.final_returns.len(),
            fmt_f64(r.mean_return),
            fmt_f64(r.std_error)
        )?;
    }
    Ok(())
}

pub const PRIOR_HEADER: &str = "eta,tau";

pub fn write_prior<W: Write>(mut w: W, rho: &PriorHyper) -> Result<()> {
    writeln!(w, "{PRIOR_HEADER}")?;
    for (e, t) in rho.eta.iter().zip(&rho.tau) {
        writeln!(w, "{},{}", fmt_f64(*e), fmt_f64(*t))?;
    }
    Ok(())
}

pub fn read_prior<R: BufRead>(reader: R) -> Result<PriorHyper> {
    let lines = tio::read_lines(reader)?;
    let (hno, header) = lines.first().ok_or_else(|| tio::missing(1, "prior header"))?;
    tio::expect_header(*hno, header, PRIOR_HEADER)?;
    let mut eta = Vec::new();
    let mut tau = Vec::new();
    for (no, line) in &lines[1..] {
        let v = tio::parse_row(*no, line, Some(2))?;
        if !(v[1] > 0.0) || !v[0].is_finite() || !v[1].is_finite() {
            return Err(Error::Parse { line: *no, msg: "prior entries must be finite with tau > 0".into() });
        }
        eta.push(v[0]);
        tau.push(v[1]);
    }
    PriorHyper::new(eta, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(algo: Algo) -> TrainConfig {
        TrainConfig {
            algo,
            iterations: 3,
            synthetic_per_update: 40,
            eval_episodes: 5,
            updates_per_batch: 5,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!("5x4".parse::<Schedule>().unwrap(), Schedule::new(5, 4));
        assert_eq!(" 20X1 ".parse::<Schedule>().unwrap(), Schedule::new(20, 1));
        assert!("5x".parse::<Schedule>().is_err());
        assert!("0x4".parse::<Schedule>().is_err());
        assert_eq!(Schedule::new(2, 10).to_string(), "2x10");
        assert_eq!(Schedule::divisors_of(20).len(), 6);
        assert!(Schedule::new(3, 6).check_budget(20).is_err());
    }

    #[test]
    fn config_problems_are_listed_together() {
        let cfg = TrainConfig {
            algo: Algo::Iwpgpe,
            schedule: Schedule::new(3, 3),
            learning_rate: -1.0,
            eval_episodes: 0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        let cfg = TrainConfig { synthetic_per_update: 7, ..TrainConfig::default() };
        assert_eq!(cfg.problems().len(), 1);
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn evaluation_is_bounded_and_deterministic_without_noise() {
        let env = EnvConfig::chainwalk_gaussian();
        let rho = PriorHyper::constant(6, 0.0, 1.0).unwrap();
        let mut rng = Streams::new(1).stream(Purpose::Evaluation, 0);
        let (m, se) = evaluate_policy(&env, &rho, 100, &mut rng).unwrap();
        assert!((0.0..=env.max_return() + 1e-12).contains(&m));
        assert!(se >= 0.0);

        // Zero noise and zero actions: every start outside (4, 6) earns nothing
        // and every start inside earns the maximum; fixing the start pins the
        // return exactly.
        let env = EnvConfig::chainwalk_gaussian().with_noise(0.0);
        let pol = rho.mean_policy(env.default_basis(), 1).unwrap();
        let mut rng = Streams::new(1).stream(Purpose::Evaluation, 0);
        let rets: Vec<f64> = (0..10)
            .map(|_| env::rollout_from(&env, &pol, vec![5.0], &mut rng).unwrap().discounted_return(env.gamma))
            .collect();
        assert_eq!(mean_and_se(&rets).1, 0.0);
        assert!(evaluate_policy(&env, &rho, 0, &mut rng).is_err());
    }

    #[test]
    fn mpgpe_bookkeeping() {
        let env = EnvConfig::chainwalk_gaussian();
        let cfg = quick(Algo::MpgpeLscde);
        let res = train_mpgpe(&env, &cfg).unwrap();
        assert_eq!(res.curve.rows.len(), 3);
        assert!(res.curve.rows.iter().all(|r| r.cumulative_real_samples == 20));
        assert!(res.curve.rows.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(res.stats.real_episodes, 20);
        assert_eq!(res.stats.synthetic_rollouts, 120);

        let again = train_mpgpe(&env, &cfg).unwrap();
        assert_eq!(again.curve, res.curve);
        assert_eq!(again.prior, res.prior);
    }

    #[test]
    fn zero_learning_rate_keeps_prior() {
        let env = EnvConfig::chainwalk_bimodal();
        let cfg = TrainConfig { learning_rate: 0.0, ..quick(Algo::MpgpeGp) };
        let res = train_mpgpe(&env, &cfg).unwrap();
        assert_eq!(res.prior, PriorHyper::constant(6, 0.0, 1.0).unwrap());
        // Same policy and same evaluation streams per row differ only through
        // the per-iteration stream index.
        assert_eq!(res.curve.rows.len(), 3);

        let cfg = TrainConfig { updates_per_batch: 0, ..quick(Algo::Iwpgpe) };
        let res = train_iwpgpe(&env, &cfg).unwrap();
        assert_eq!(res.prior, PriorHyper::constant(6, 0.0, 1.0).unwrap());
    }

    #[test]
    fn iwpgpe_schedule_bookkeeping() {
        let env = EnvConfig::chainwalk_gaussian();
        for (k, r) in [(20, 1), (5, 4), (1, 20)] {
            let cfg = TrainConfig { schedule: Schedule::new(k, r), ..quick(Algo::Iwpgpe) };
            let res = train_iwpgpe(&env, &cfg).unwrap();
            assert_eq!(res.curve.rows.len(), r);
            assert_eq!(res.stats.real_episodes, 20);
            let cum: Vec<usize> = res.curve.rows.iter().map(|x| x.cumulative_real_samples).collect();
            assert_eq!(cum, (1..=r).map(|b| b * k).collect::<Vec<_>>());
        }
        let cfg = TrainConfig { schedule: Schedule::new(3, 6), ..quick(Algo::Iwpgpe) };
        assert!(matches!(train_iwpgpe(&env, &cfg), Err(Error::BudgetMismatch { .. })));
    }

    #[test]
    fn reinforce_runs_and_spends_the_budget() {
        let env = EnvConfig::chainwalk_gaussian();
        let cfg = TrainConfig { schedule: Schedule::new(5, 4), ..quick(Algo::Reinforce) };
        let res = train(&env, &cfg).unwrap();
        assert_eq!(res.curve.rows.len(), 4);
        assert_eq!(res.stats.real_episodes, 20);
        assert!(train_reinforce(&EnvConfig::arm2(), &cfg).is_err());
    }

    #[test]
    fn sweep_rows_and_single_run_equivalence() {
        let env = EnvConfig::chainwalk_gaussian();
        let cfg = quick(Algo::Iwpgpe);
        let rows = schedule_sweep(&env, &cfg, &Schedule::divisors_of(20), 2).unwrap();
        assert_eq!(rows.len(), 6);

        let one = schedule_sweep(&env, &cfg, &[Schedule::new(5, 4)], 1).unwrap();
        let direct = train_iwpgpe(
            &env,
            &TrainConfig { schedule: Schedule::new(5, 4), seed: derive_seed(cfg.seed, 0), ..cfg.clone() },
        )
        .unwrap();
        assert_eq!(one[0].mean_return, direct.curve.final_return().unwrap());
        assert!(schedule_sweep(&env, &cfg, &[Schedule::new(3, 3)], 1).is_err());
    }

    #[test]
    fn curve_and_prior_roundtrip() {
        let curve = LearningCurve {
            rows: vec![
                CurveRow { iteration: 1, cumulative_real_samples: 20, mean_return: 1.0 / 3.0, std_error: 0.1 },
                CurveRow { iteration: 2, cumulative_real_samples: 20, mean_return: 2.5, std_error: 0.0 },
            ],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        assert_eq!(LearningCurve::read_csv(&buf[..]).unwrap(), curve);

        let rho = PriorHyper::new(vec![0.1, -2.0 / 7.0], vec![1.0, 1e-6]).unwrap();
        let mut buf = Vec::new();
        write_prior(&mut buf, &rho).unwrap();
        assert_eq!(read_prior(&buf[..]).unwrap(), rho);
        assert!(read_prior("eta,tau\n1,0\n".as_bytes()).is_err());
    }
}
