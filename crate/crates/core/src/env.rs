//! Episodic environments: the continuous chain walk (Gaussian and bimodal
//! dynamics) and a small planar two-link arm.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::policy::{Basis, LinearPolicy};
use crate::rng::Rng;

pub const CHAIN_MIN: f64 = 0.0;
pub const CHAIN_MAX: f64 = 10.0;
pub const CHAIN_ACTION_MAX: f64 = 5.0;
pub const CHAIN_REWARD_LOW: f64 = 4.0;
pub const CHAIN_REWARD_HIGH: f64 = 6.0;

/// Upper arm and forearm lengths in metres.
const ARM_LINK: [f64; 2] = [0.1, 0.1];
/// Shoulder and elbow angles of the arms-down resting posture.
const ARM_REST_DEG: [f64; 2] = [-90.0, 0.0];
const ARM_TARGET_DEG: [f64; 2] = [30.0, 45.0];
const ARM_ANGLE_LIMIT: f64 = 180.0;
const ARM_INIT_SPREAD: f64 = 90.0;
const ARM_TRACKING_GAIN: f64 = 0.2;
const ARM_EXPLORE_HALF_WIDTH: f64 = 5.0;
const ARM_NOISE_SHIFT: f64 = -5.0;
const ARM_NOISE_SHIFT_PROB: f64 = 0.4;

/// One `(s, a, s')` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSample {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub s_next: Vec<f64>,
}

/// A history `[s_1, a_1, ..., s_T, a_T, s_{T+1}]` with its per-step rewards.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1
            && self.rewards.len() == self.actions.len()
            && self.rewards.iter().all(|r| r.is_finite())
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_return(&self.rewards, gamma)
    }

    pub fn transitions(&self) -> impl Iterator<Item = TransitionSample> + '_ {
        self.actions.iter().enumerate().map(move |(t, a)| TransitionSample {
            s: self.states[t].clone(),
            a: a.clone(),
            s_next: self.states[t + 1].clone(),
        })
    }
}

/// `sum_t gamma^(t-1) r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        acc += disc * r;
        disc *= gamma;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvKind {
    ChainwalkGaussian,
    ChainwalkBimodal,
    Arm2,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::ChainwalkGaussian => "chainwalk-gaussian",
            EnvKind::ChainwalkBimodal => "chainwalk-bimodal",
            EnvKind::Arm2 => "arm2",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "chainwalk-gaussian" => Ok(EnvKind::ChainwalkGaussian),
            "chainwalk-bimodal" => Ok(EnvKind::ChainwalkBimodal),
            "arm2" => Ok(EnvKind::Arm2),
            other => Err(Error::InvalidConfig(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Episode length `T`.
    pub horizon: usize,
    pub gamma: f64,
    /// Chain walk: std of the additive Gaussian noise. Arm: std of each noise
    /// mode; zero disables the perturbation entirely.
    pub noise_std: f64,
}

impl EnvConfig {
    pub fn new(kind: EnvKind) -> Self {
        match kind {
            EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal => {
                Self { kind, horizon: 10, gamma: 0.99, noise_std: 0.3 }
            }
            EnvKind::Arm2 => Self { kind, horizon: 20, gamma: 0.9, noise_std: 3.0 },
        }
    }

    pub fn chainwalk_gaussian() -> Self {
        Self::new(EnvKind::ChainwalkGaussian)
    }

    pub fn chainwalk_bimodal() -> Self {
        Self::new(EnvKind::ChainwalkBimodal)
    }

    pub fn arm2() -> Self {
        Self::new(EnvKind::Arm2)
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }

    pub fn is_chainwalk(&self) -> bool {
        matches!(self.kind, EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal)
    }

    pub fn state_dim(&self) -> usize {
        if self.is_chainwalk() {
            1
        } else {
            4
        }
    }

    pub fn action_dim(&self) -> usize {
        if self.is_chainwalk() {
            1
        } else {
            2
        }
    }

    /// Policy features used by default for this environment.
    pub fn default_basis(&self) -> Basis {
        if self.is_chainwalk() {
            Basis::chainwalk()
        } else {
            Basis::Identity { dim: self.state_dim() }
        }
    }

    /// Policy parameters of the untrained controller, laid out row-major per
    /// action. Zero for the chain walk; the arm holds its current joint angles.
    pub fn resting_policy_params(&self) -> Vec<f64> {
        let b = self.default_basis().len();
        let mut theta = vec![0.0; b * self.action_dim()];
        if self.kind == EnvKind::Arm2 {
            for j in 0..self.action_dim() {
                theta[j * b + j] = 1.0;
            }
        }
        theta
    }

    /// Upper bound on the discounted return.
    pub fn max_return(&self) -> f64 {
        let ones = vec![1.0; self.horizon];
        discounted_return(&ones, self.gamma)
    }

    /// Initial state for policy rollouts.
    pub fn initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal => {
                vec![rng.random_range(CHAIN_MIN..CHAIN_MAX)]
            }
            EnvKind::Arm2 => vec![ARM_REST_DEG[0], ARM_REST_DEG[1], 0.0, 0.0],
        }
    }

    /// Initial state for uniform exploration datasets.
    pub fn exploration_initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal => self.initial_state(rng),
            EnvKind::Arm2 => vec![
                rng.random_range(-ARM_INIT_SPREAD..ARM_INIT_SPREAD),
                rng.random_range(-ARM_INIT_SPREAD..ARM_INIT_SPREAD),
                0.0,
                0.0,
            ],
        }
    }

    /// Uniformly random exploratory action for state `s`.
    pub fn exploration_action(&self, s: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal => {
                vec![rng.random_range(-CHAIN_ACTION_MAX..CHAIN_ACTION_MAX)]
            }
            EnvKind::Arm2 => {
                let mut a: Vec<f64> = s[..2]
                    .iter()
                    .map(|&x| rng.random_range(x - ARM_EXPLORE_HALF_WIDTH..x + ARM_EXPLORE_HALF_WIDTH))
                    .collect();
                self.clip_action(&mut a);
                a
            }
        }
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        let bound = if self.is_chainwalk() { CHAIN_ACTION_MAX } else { ARM_ANGLE_LIMIT };
        for x in a.iter_mut() {
            *x = x.clamp(-bound, bound);
        }
    }

    /// Projects a state onto the state domain.
    pub fn project_state(&self, s: &mut [f64]) {
        if self.is_chainwalk() {
            for x in s.iter_mut() {
                *x = x.clamp(CHAIN_MIN, CHAIN_MAX);
            }
        } else {
            for x in s.iter_mut() {
                *x = x.clamp(-2.0 * ARM_ANGLE_LIMIT, 2.0 * ARM_ANGLE_LIMIT);
            }
            s[0] = s[0].clamp(-ARM_ANGLE_LIMIT, ARM_ANGLE_LIMIT);
            s[1] = s[1].clamp(-ARM_ANGLE_LIMIT, ARM_ANGLE_LIMIT);
        }
    }

    /// The known immediate reward for the transition `s --a--> s_next`.
    pub fn reward(&self, _s: &[f64], a: &[f64], s_next: &[f64]) -> f64 {
        match self.kind {
            EnvKind::ChainwalkGaussian | EnvKind::ChainwalkBimodal => {
                let x = s_next[0];
                if x > CHAIN_REWARD_LOW && x < CHAIN_REWARD_HIGH {
                    1.0
                } else {
                    0.0
                }
            }
            EnvKind::Arm2 => {
                let d = arm_target_distance(s_next);
                let cost: f64 = a.iter().map(|x| x * x).sum();
                (-10.0 * d).exp() - 0.000005 * cost.min(1.0e6)
            }
        }
    }

    /// Advances the true dynamics by one step.
    pub fn step(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
        check_dim("state", self.state_dim(), s.len())?;
        check_dim("action", self.action_dim(), a.len())?;
        let mut a = a.to_vec();
        self.clip_action(&mut a);
        let s_next = match self.kind {
            EnvKind::ChainwalkGaussian => {
                let eps = self.noise_std * rng.sample::<f64, _>(StandardNormal);
                vec![s[0] + a[0] + eps]
            }
            EnvKind::ChainwalkBimodal => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let eps = self.noise_std * rng.sample::<f64, _>(StandardNormal);
                vec![s[0] + sign * a[0] + eps]
            }
            EnvKind::Arm2 => {
                let mut next = vec![0.0; 4];
                for j in 0..2 {
                    let noisy_target = a[j] + self.arm_noise(rng);
                    next[j] = s[j] + ARM_TRACKING_GAIN * (noisy_target - s[j]);
                }
                next[0] = next[0].clamp(-ARM_ANGLE_LIMIT, ARM_ANGLE_LIMIT);
                next[1] = next[1].clamp(-ARM_ANGLE_LIMIT, ARM_ANGLE_LIMIT);
                next[2] = next[0] - s[0];
                next[3] = next[1] - s[1];
                next
            }
        };
        let mut s_next = s_next;
        self.project_state(&mut s_next);
        let r = self.reward(s, &a, &s_next);
        Ok((s_next, r))
    }

    fn arm_noise(&self, rng: &mut Rng) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        let shift = if rng.random_bool(ARM_NOISE_SHIFT_PROB) { ARM_NOISE_SHIFT } else { 0.0 };
        shift + self.noise_std * z
    }
}

/// End-effector distance to the fixed reaching target.
pub fn arm_target_distance(s: &[f64]) -> f64 {
    let (x, y) = arm_end_effector(s[0], s[1]);
    let (tx, ty) = arm_end_effector(ARM_TARGET_DEG[0], ARM_TARGET_DEG[1]);
    ((x - tx).powi(2) + (y - ty).powi(2)).sqrt()
}

fn arm_end_effector(shoulder_deg: f64, elbow_deg: f64) -> (f64, f64) {
    let q1 = shoulder_deg.to_radians();
    let q12 = q1 + elbow_deg.to_radians();
    (ARM_LINK[0] * q1.cos() + ARM_LINK[1] * q12.cos(), ARM_LINK[0] * q1.sin() + ARM_LINK[1] * q12.sin())
}

/// Collects `n_episodes` episodes with uniformly random initial states and actions.
pub fn collect_uniform_dataset(env: &EnvConfig, n_episodes: usize, rng: &mut Rng) -> Result<Vec<TransitionSample>> {
    env.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n_episodes * env.horizon);
    for _ in 0..n_episodes {
        let mut s = env.exploration_initial_state(rng);
        for _ in 0..env.horizon {
            let a = env.exploration_action(&s, rng);
            let (s_next, _) = env.step(&s, &a, rng)?;
            out.push(TransitionSample { s: std::mem::replace(&mut s, s_next.clone()), a, s_next });
        }
    }
    Ok(out)
}

/// Rolls out a deterministic linear policy in the real environment.
pub fn rollout(env: &EnvConfig, policy: &LinearPolicy, rng: &mut Rng) -> Result<Trajectory> {
    let s1 = env.initial_state(rng);
    rollout_from(env, policy, s1, rng)
}

pub fn rollout_from(env: &EnvConfig, policy: &LinearPolicy, s1: Vec<f64>, rng: &mut Rng) -> Result<Trajectory> {
    check_dim("policy action", env.action_dim(), policy.action_dim())?;
    let mut traj = Trajectory {
        states: Vec::with_capacity(env.horizon + 1),
        actions: Vec::with_capacity(env.horizon),
        rewards: Vec::with_capacity(env.horizon),
    };
    traj.states.push(s1);
    for t in 0..env.horizon {
        let mut a = policy.act(&traj.states[t])?;
        env.clip_action(&mut a);
        let (s_next, r) = env.step(&traj.states[t], &a, rng)?;
        traj.actions.push(a);
        traj.rewards.push(r);
        traj.states.push(s_next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn rng(seed: u64) -> Rng {
        Streams::new(seed).stream(Purpose::EnvNoise, 0)
    }

    #[test]
    fn zero_noise_gaussian_step() {
        let env = EnvConfig::chainwalk_gaussian().with_noise(0.0);
        let (s, r) = env.step(&[2.0], &[3.0], &mut rng(1)).unwrap();
        assert_eq!(s, vec![5.0]);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn reward_boundary_is_strict() {
        let env = EnvConfig::chainwalk_gaussian();
        assert_eq!(env.reward(&[0.0], &[0.0], &[4.0]), 0.0);
        assert_eq!(env.reward(&[0.0], &[0.0], &[6.0]), 0.0);
        assert_eq!(env.reward(&[0.0], &[0.0], &[4.0 + 1e-12]), 1.0);
        let env = env.with_noise(0.0);
        let (s, r) = env.step(&[1.0], &[3.0], &mut rng(0)).unwrap();
        assert_eq!((s[0], r), (4.0, 0.0));
    }

    #[test]
    fn bimodal_sign_frequencies() {
        let env = EnvConfig::chainwalk_bimodal().with_noise(0.0);
        let mut r = rng(3);
        let n = 10_000;
        let mut up = 0;
        for _ in 0..n {
            let (s, _) = env.step(&[5.0], &[2.0], &mut r).unwrap();
            assert!(s[0] == 7.0 || s[0] == 3.0);
            if s[0] == 7.0 {
                up += 1;
            }
        }
        let f = up as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "frequency {f}");
    }

    #[test]
    fn states_are_clamped() {
        let env = EnvConfig::chainwalk_gaussian().with_noise(0.0);
        assert_eq!(env.step(&[9.0], &[5.0], &mut rng(0)).unwrap().0, vec![10.0]);
        assert_eq!(env.step(&[1.0], &[-5.0], &mut rng(0)).unwrap().0, vec![0.0]);
        // Out-of-range actions are clipped to [-5, 5].
        assert_eq!(env.step(&[0.0], &[7.0], &mut rng(0)).unwrap().0, vec![5.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let env = EnvConfig::chainwalk_gaussian();
        assert!(matches!(env.step(&[1.0, 2.0], &[0.0], &mut rng(0)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn dataset_sizes() {
        let env = EnvConfig::chainwalk_gaussian();
        let data = collect_uniform_dataset(&env, 20, &mut rng(5)).unwrap();
        assert_eq!(data.len(), 200);
        let one = collect_uniform_dataset(&env, 1, &mut rng(6)).unwrap();
        assert_eq!(one.len(), 10);
        for t in &one {
            assert!((0.0..=10.0).contains(&t.s[0]));
            assert!((0.0..=10.0).contains(&t.s_next[0]));
            assert!((-5.0..=5.0).contains(&t.a[0]));
        }
        for w in one.windows(2) {
            assert_eq!(w[0].s_next, w[1].s);
        }
        assert!(collect_uniform_dataset(&env, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn rollout_lengths_and_zero_policy_return() {
        let env = EnvConfig::chainwalk_gaussian().with_noise(0.0);
        let policy = LinearPolicy::zeros(env.default_basis(), 1);
        let traj = rollout_from(&env, &policy, vec![5.0], &mut rng(0)).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.actions.len(), 10);
        assert_eq!(traj.rewards.len(), 10);
        assert!(traj.is_consistent());
        assert!(traj.states.iter().all(|s| s[0] == 5.0));
        let expected = (1.0 - 0.99f64.powi(10)) / 0.01;
        assert!((traj.discounted_return(0.99) - expected).abs() < 1e-12);
        assert!((expected - 9.56179).abs() < 1e-5);
    }

    #[test]
    fn rollout_is_seed_deterministic() {
        let env = EnvConfig::chainwalk_bimodal();
        let policy = LinearPolicy::new(env.default_basis(), 1, vec![1.0, 0.5, -0.2, 0.3, -1.0, 2.0]).unwrap();
        let a = rollout(&env, &policy, &mut rng(11)).unwrap();
        let b = rollout(&env, &policy, &mut rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[1.0, 2.0, 3.0], 1.0), 6.0);
        assert_eq!(discounted_return(&[0.0; 10], 0.99), 0.0);
    }

    #[test]
    fn arm_step_and_dataset() {
        let env = EnvConfig::arm2().with_noise(0.0);
        let (s, r) = env.step(&[0.0, 0.0, 0.0, 0.0], &[10.0, -10.0], &mut rng(0)).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] + 2.0).abs() < 1e-12);
        assert!((s[2] - 2.0).abs() < 1e-12 && (s[3] + 2.0).abs() < 1e-12);
        assert!(r.is_finite());
        assert!(arm_target_distance(&[30.0, 45.0, 0.0, 0.0]) < 1e-12);

        let env = EnvConfig::arm2();
        let data = collect_uniform_dataset(&env, 3, &mut rng(2)).unwrap();
        assert_eq!(data.len(), 3 * env.horizon);
        for t in &data {
            assert!((t.a[0] - t.s[0]).abs() <= 5.0 + 1e-12);
            assert!((t.a[1] - t.s[1]).abs() <= 5.0 + 1e-12);
        }
    }
}
