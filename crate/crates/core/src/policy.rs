//! Linear policies, the Gaussian exploration policy and the Gaussian parameter prior.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

/// Lower bound applied to prior standard deviations after every learning update.
pub const TAU_FLOOR: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// State features `phi(s)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// `phi_i(s) = exp(-||s - c_i||^2 / (2 width^2))`.
    GaussianRbf {
        centers: Vec<Vec<f64>>,
        width: f64,
    },
    Identity {
        dim: usize,
    },
}

impl Basis {
    /// Six unit-width RBFs at 0, 2, ..., 10.
    pub fn chainwalk() -> Self {
        Basis::GaussianRbf { centers: (0..6).map(|i| vec![2.0 * i as f64]).collect(), width: 1.0 }
    }

    pub fn len(&self) -> usize {
        match self {
            Basis::GaussianRbf { centers, .. } => centers.len(),
            Basis::Identity { dim } => *dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Basis::GaussianRbf { centers, .. } => centers.first().map_or(0, Vec::len),
            Basis::Identity { dim } => *dim,
        }
    }

    pub fn features(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_dim("basis input", self.input_dim(), s.len())?;
        Ok(match self {
            Basis::GaussianRbf { centers, width } => {
                let denom = 2.0 * width * width;
                centers
                    .iter()
                    .map(|c| {
                        let d2: f64 = c.iter().zip(s).map(|(c, x)| (x - c) * (x - c)).sum();
                        (-d2 / denom).exp()
                    })
                    .collect()
            }
            Basis::Identity { .. } => s.to_vec(),
        })
    }
}

/// Deterministic policy `a = theta^T phi(s)`; for vector actions `theta` holds
/// one row of `B` weights per action dimension (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    theta: Vec<f64>,
    basis: Basis,
    action_dim: usize,
}

impl LinearPolicy {
    pub fn new(basis: Basis, action_dim: usize, theta: Vec<f64>) -> Result<Self> {
        check_dim("policy parameters", basis.len() * action_dim, theta.len())?;
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("policy parameters must be finite".into()));
        }
        Ok(Self { theta, basis, action_dim })
    }

    pub fn zeros(basis: Basis, action_dim: usize) -> Self {
        let theta = vec![0.0; basis.len() * action_dim];
        Self { theta, basis, action_dim }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    /// Replaces the parameters in place, keeping basis and shape.
    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        check_dim("policy parameters", self.theta.len(), theta.len())?;
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    pub fn act(&self, s: &[f64]) -> Result<Vec<f64>> {
        let phi = self.basis.features(s)?;
        Ok(self.theta.chunks_exact(phi.len()).map(|row| row.iter().zip(&phi).map(|(w, f)| w * f).sum()).collect())
    }
}

/// Scalar-action Gaussian policy `a ~ N(mu^T phi(s), sigma^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub basis: Basis,
}

impl GaussianPolicy {
    pub fn new(basis: Basis, mu: Vec<f64>, sigma: f64) -> Result<Self> {
        check_dim("policy mean weights", basis.len(), mu.len())?;
        if !(sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma {sigma} must be > 0")));
        }
        Ok(Self { mu, sigma, basis })
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<f64> {
        let phi = self.basis.features(s)?;
        Ok(dot(&self.mu, &phi))
    }

    pub fn sample_action(&self, s: &[f64], rng: &mut Rng) -> Result<f64> {
        let z: f64 = StandardNormal.sample(rng);
        Ok(self.mean_action(s)? + self.sigma * z)
    }

    pub fn log_prob(&self, s: &[f64], a: f64) -> Result<f64> {
        let r = a - self.mean_action(s)?;
        Ok(-0.5 * r * r / (self.sigma * self.sigma) - self.sigma.ln() - LN_SQRT_2PI)
    }

    /// Gradient of `log pi(a|s)` with respect to `(mu, sigma)`.
    pub fn logp_grad(&self, s: &[f64], a: f64) -> Result<(Vec<f64>, f64)> {
        let phi = self.basis.features(s)?;
        let r = a - dot(&self.mu, &phi);
        let s2 = self.sigma * self.sigma;
        let grad_mu = phi.iter().map(|f| r / s2 * f).collect();
        let grad_sigma = (r * r - s2) / (s2 * self.sigma);
        Ok((grad_mu, grad_sigma))
    }
}

/// Hyper-parameters `rho = (eta, tau)` of the independent Gaussian prior over
/// policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHyper {
    pub eta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl PriorHyper {
    pub fn new(eta: Vec<f64>, tau: Vec<f64>) -> Result<Self> {
        check_dim("prior std vector", eta.len(), tau.len())?;
        if tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidConfig("prior stds must be positive and finite".into()));
        }
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidConfig("prior means must be finite".into()));
        }
        Ok(Self { eta, tau })
    }

    pub fn constant(len: usize, eta: f64, tau: f64) -> Result<Self> {
        Self::new(vec![eta; len], vec![tau; len])
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Draws `theta_i ~ N(eta_i, tau_i^2)` independently.
    pub fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        self.eta
            .iter()
            .zip(&self.tau)
            .map(|(e, t)| {
                let z: f64 = StandardNormal.sample(rng);
                e + t * z
            })
            .collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(self.eta.iter().zip(&self.tau))
            .map(|(x, (e, t))| {
                let z = (x - e) / t;
                -0.5 * z * z - t.ln() - LN_SQRT_2PI
            })
            .sum()
    }

    /// Element-wise gradient of `log p(theta | rho)` with respect to `eta` and `tau`.
    pub fn logp_grad(&self, theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("policy parameters", self.len(), theta.len())?;
        let mut ge = Vec::with_capacity(theta.len());
        let mut gt = Vec::with_capacity(theta.len());
        for (x, (e, t)) in theta.iter().zip(self.eta.iter().zip(&self.tau)) {
            let d = x - e;
            let t2 = t * t;
            ge.push(d / t2);
            gt.push((d * d - t2) / (t2 * t));
        }
        Ok((ge, gt))
    }

    /// `rho += step * grad`, then floors every `tau_i` at [`TAU_FLOOR`].
    /// Returns how many entries were floored.
    pub fn ascend(&mut self, grad_eta: &[f64], grad_tau: &[f64], step: f64) -> usize {
        self.ascend_floored(grad_eta, grad_tau, step, TAU_FLOOR)
    }

    /// As [`PriorHyper::ascend`] with a caller-chosen floor (at least [`TAU_FLOOR`]).
    pub fn ascend_floored(&mut self, grad_eta: &[f64], grad_tau: &[f64], step: f64, floor: f64) -> usize {
        let floor = floor.max(TAU_FLOOR);
        for (e, g) in self.eta.iter_mut().zip(grad_eta) {
            *e += step * g;
        }
        let mut floored = 0;
        for (t, g) in self.tau.iter_mut().zip(grad_tau) {
            *t += step * g;
            if !(*t >= floor) {
                *t = floor;
                floored += 1;
            }
        }
        floored
    }

    pub fn mean_policy(&self, basis: Basis, action_dim: usize) -> Result<LinearPolicy> {
        LinearPolicy::new(basis, action_dim, self.eta.clone())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
