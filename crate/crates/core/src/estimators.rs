//! Likelihood-ratio gradient estimators: PGPE, importance-weighted PGPE and
//! REINFORCE, each with its variance-minimizing constant baseline.

use crate::env::Trajectory;
use crate::error::{check_dim, Error, Result};
use crate::policy::{GaussianPolicy, PriorHyper};

/// Samples whose log importance weight exceeds this are dropped.
pub const MAX_LOG_WEIGHT: f64 = 700.0;

/// One PGPE roll-out: the drawn parameters, the return they earned and the
/// prior they were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PgpeSample {
    pub theta: Vec<f64>,
    pub ret: f64,
    pub behavior: PriorHyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineSource {
    /// Baseline estimated on the same samples as the gradient (slightly biased).
    SameSample,
    /// Baseline estimated on an independent sample set.
    Independent,
    /// Baseline supplied by the caller.
    Provided,
    /// Every score vanished; the plain mean return was used instead.
    MeanReturnFallback,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub value: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub grad_eta: Vec<f64>,
    pub grad_tau: Vec<f64>,
    pub baseline: f64,
    pub baseline_source: BaselineSource,
    pub n_used: usize,
    pub n_dropped: usize,
}

impl GradientReport {
    pub fn norm(&self) -> f64 {
        self.grad_eta.iter().chain(&self.grad_tau).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.baseline.is_finite() && self.grad_eta.iter().chain(&self.grad_tau).all(|g| g.is_finite())
    }
}

fn squared_score_norm(ge: &[f64], gt: &[f64]) -> f64 {
    ge.iter().chain(gt).map(|g| g * g).sum()
}

fn mean_return(samples: &[PgpeSample]) -> f64 {
    samples.iter().map(|s| s.ret).sum::<f64>() / samples.len() as f64
}

/// `b = sum_n R_n ||∇ log p(θ_n|ρ)||² / sum_n ||∇ log p(θ_n|ρ)||²`.
pub fn pgpe_baseline(samples: &[PgpeSample], rho: &PriorHyper) -> Result<Baseline> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("PGPE baseline samples"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in samples {
        let (ge, gt) = rho.logp_grad(&s.theta)?;
        let sq = squared_score_norm(&ge, &gt);
        num += s.ret * sq;
        den += sq;
    }
    if den > 0.0 && den.is_finite() {
        Ok(Baseline { value: num / den, fallback: false })
    } else {
        Ok(Baseline { value: mean_return(samples), fallback: true })
    }
}

/// `(1/N) sum_n (R_n - b) ∇_ρ log p(θ_n|ρ)` with a caller-provided baseline.
pub fn pgpe_gradient(samples: &[PgpeSample], rho: &PriorHyper, b: f64) -> Result<GradientReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("PGPE gradient samples"));
    }
    let n_par = rho.len();
    let mut grad_eta = vec![0.0; n_par];
    let mut grad_tau = vec![0.0; n_par];
    for s in samples {
        let (ge, gt) = rho.logp_grad(&s.theta)?;
        let c = s.ret - b;
        for i in 0..n_par {
            grad_eta[i] += c * ge[i];
            grad_tau[i] += c * gt[i];
        }
    }
    let n = samples.len() as f64;
    grad_eta.iter_mut().chain(grad_tau.iter_mut()).for_each(|g| *g /= n);
    Ok(GradientReport {
        grad_eta,
        grad_tau,
        baseline: b,
        baseline_source: BaselineSource::Provided,
        n_used: samples.len(),
        n_dropped: 0,
    })
}

/// Baseline and gradient from the same sample set.
pub fn pgpe_gradient_same_sample(samples: &[PgpeSample], rho: &PriorHyper) -> Result<GradientReport> {
    let b = pgpe_baseline(samples, rho)?;
    let mut report = pgpe_gradient(samples, rho, b.value)?;
    report.baseline_source = if b.fallback { BaselineSource::MeanReturnFallback } else { BaselineSource::SameSample };
    Ok(report)
}

/// Baseline from `baseline_samples`, gradient from the disjoint `gradient_samples`.
pub fn pgpe_gradient_split(
    baseline_samples: &[PgpeSample],
    gradient_samples: &[PgpeSample],
    rho: &PriorHyper,
) -> Result<GradientReport> {
    let b = pgpe_baseline(baseline_samples, rho)?;
    let mut report = pgpe_gradient(gradient_samples, rho, b.value)?;
    report.baseline_source = if b.fallback { BaselineSource::MeanReturnFallback } else { BaselineSource::Independent };
    Ok(report)
}

/// `log p(θ|target) - log p(θ|behavior)`.
pub fn log_importance_weight(theta: &[f64], target: &PriorHyper, behavior: &PriorHyper) -> f64 {
    target.log_density(theta) - behavior.log_density(theta)
}

/// Importance-weighted PGPE gradient over samples drawn from arbitrary
/// behavior priors, with the `w²`-weighted baseline.
pub fn iw_pgpe_gradient(samples: &[PgpeSample], rho: &PriorHyper) -> Result<GradientReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("IW-PGPE samples"));
    }
    struct Term {
        w: f64,
        ret: f64,
        ge: Vec<f64>,
        gt: Vec<f64>,
        sq: f64,
    }
    let mut terms = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for s in samples {
        check_dim("behavior prior", rho.len(), s.behavior.len())?;
        let lw = log_importance_weight(&s.theta, rho, &s.behavior);
        if !(lw <= MAX_LOG_WEIGHT) {
            dropped += 1;
            continue;
        }
        let w = lw.exp();
        let (ge, gt) = rho.logp_grad(&s.theta)?;
        let sq = squared_score_norm(&ge, &gt);
        terms.push(Term { w, ret: s.ret, ge, gt, sq });
    }
    let n_par = rho.len();
    if terms.is_empty() {
        return Ok(GradientReport {
            grad_eta: vec![0.0; n_par],
            grad_tau: vec![0.0; n_par],
            baseline: 0.0,
            baseline_source: BaselineSource::MeanReturnFallback,
            n_used: 0,
            n_dropped: dropped,
        });
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for t in &terms {
        let w2 = t.w * t.w;
        num += t.ret * w2 * t.sq;
        den += w2 * t.sq;
    }
    let (b, source) = if den > 0.0 && den.is_finite() && num.is_finite() {
        (num / den, BaselineSource::SameSample)
    } else {
        let mean = terms.iter().map(|t| t.ret).sum::<f64>() / terms.len() as f64;
        (mean, BaselineSource::MeanReturnFallback)
    };

    let mut grad_eta = vec![0.0; n_par];
    let mut grad_tau = vec![0.0; n_par];
    for t in &terms {
        let c = t.w * (t.ret - b);
        for i in 0..n_par {
            grad_eta[i] += c * t.ge[i];
            grad_tau[i] += c * t.gt[i];
        }
    }
    let n = terms.len() as f64;
    grad_eta.iter_mut().chain(grad_tau.iter_mut()).for_each(|g| *g /= n);
    Ok(GradientReport {
        grad_eta,
        grad_tau,
        baseline: b,
        baseline_source: source,
        n_used: terms.len(),
        n_dropped: dropped,
    })
}

/// `sum_t ∇_(μ,σ) log π(a_t|s_t)` for one trajectory; the last entry is the σ
/// component.
pub fn reinforce_score(traj: &Trajectory, policy: &GaussianPolicy) -> Result<Vec<f64>> {
    let mut score = vec![0.0; policy.mu.len() + 1];
    for (s, a) in traj.states.iter().zip(&traj.actions) {
        check_dim("REINFORCE action", 1, a.len())?;
        let (gm, gs) = policy.logp_grad(s, a[0])?;
        for (acc, g) in score.iter_mut().zip(gm) {
            *acc += g;
        }
        *score.last_mut().expect("non-empty") += gs;
    }
    Ok(score)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReinforceGradient {
    pub grad_mu: Vec<f64>,
    pub grad_sigma: f64,
    pub baseline: f64,
    pub baseline_source: BaselineSource,
}

/// Baseline-subtracted REINFORCE estimate over trajectories generated by `policy`.
pub fn reinforce_gradient(trajs: &[Trajectory], policy: &GaussianPolicy, gamma: f64) -> Result<ReinforceGradient> {
    if trajs.is_empty() {
        return Err(Error::EmptyInput("REINFORCE trajectories"));
    }
    let mut scores = Vec::with_capacity(trajs.len());
    let mut rets = Vec::with_capacity(trajs.len());
    let mut num = 0.0;
    let mut den = 0.0;
    for t in trajs {
        let sc = reinforce_score(t, policy)?;
        let r = t.discounted_return(gamma);
        let sq: f64 = sc.iter().map(|g| g * g).sum();
        num += r * sq;
        den += sq;
        scores.push(sc);
        rets.push(r);
    }
    let n = trajs.len() as f64;
    let (b, source) = if den > 0.0 && den.is_finite() {
        (num / den, BaselineSource::SameSample)
    } else {
        (rets.iter().sum::<f64>() / n, BaselineSource::MeanReturnFallback)
    };
    let mut grad = vec![0.0; policy.mu.len() + 1];
    for (sc, r) in scores.iter().zip(&rets) {
        for (g, x) in grad.iter_mut().zip(sc) {
            *g += (r - b) * x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    let grad_sigma = grad.pop().expect("non-empty");
    Ok(ReinforceGradient { grad_mu: grad, grad_sigma, baseline: b, baseline_source: source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Basis;
    use crate::rng::{Purpose, Streams};

    fn bandit_samples(rho: &PriorHyper, n: usize, seed: u64) -> Vec<PgpeSample> {
        let mut rng = Streams::new(seed).stream(Purpose::PriorDraw, 0);
        (0..n)
            .map(|_| {
                let theta = rho.draw(&mut rng);
                PgpeSample { ret: -theta[0] * theta[0], theta, behavior: rho.clone() }
            })
            .collect()
    }

    #[test]
    fn constant_returns_give_constant_baseline_and_zero_gradient() {
        let rho = PriorHyper::constant(3, 0.2, 0.8).unwrap();
        let mut samples = bandit_samples(&PriorHyper::constant(1, 0.0, 1.0).unwrap(), 10, 1);
        for s in &mut samples {
            s.theta = vec![s.theta[0], 0.5, -0.1];
            s.ret = 2.5;
            s.behavior = rho.clone();
        }
        let b = pgpe_baseline(&samples, &rho).unwrap();
        assert!((b.value - 2.5).abs() < 1e-12);
        let g = pgpe_gradient(&samples, &rho, 2.5).unwrap();
        assert!(g.grad_eta.iter().chain(&g.grad_tau).all(|x| *x == 0.0));
    }

    #[test]
    fn single_sample_cases() {
        let rho = PriorHyper::new(vec![0.3, -0.2], vec![1.0, 0.5]).unwrap();
        let s = PgpeSample { theta: vec![1.0, 0.0], ret: 4.0, behavior: rho.clone() };
        assert_eq!(pgpe_baseline(&[s.clone()], &rho).unwrap().value, 4.0);
        let at_mean = PgpeSample { theta: rho.eta.clone(), ret: 17.0, behavior: rho.clone() };
        let g = pgpe_gradient(&[at_mean], &rho, 3.0).unwrap();
        assert_eq!(g.grad_eta, vec![0.0, 0.0]);
        assert!(pgpe_gradient(&[], &rho, 0.0).is_err());
    }

    #[test]
    fn zero_score_falls_back_to_mean_return() {
        // (theta - eta)^2 == tau^2 and theta == eta cannot both hold, so build
        // a sample whose score vanishes: |theta - eta| = tau gives zero tau
        // gradient but nonzero eta gradient. Use an empty-parameter prior.
        let rho = PriorHyper::new(vec![], vec![]).unwrap();
        let samples = vec![
            PgpeSample { theta: vec![], ret: 1.0, behavior: rho.clone() },
            PgpeSample { theta: vec![], ret: 3.0, behavior: rho.clone() },
        ];
        let b = pgpe_baseline(&samples, &rho).unwrap();
        assert!(b.fallback);
        assert_eq!(b.value, 2.0);
    }

    #[test]
    fn iw_matches_pgpe_when_priors_coincide() {
        let rho = PriorHyper::new(vec![0.4, -1.0], vec![0.7, 1.3]).unwrap();
        let mut rng = Streams::new(5).stream(Purpose::PriorDraw, 0);
        let samples: Vec<PgpeSample> = (0..200)
            .map(|_| {
                let theta = rho.draw(&mut rng);
                PgpeSample { ret: theta[0] - theta[1] * theta[1], theta, behavior: rho.clone() }
            })
            .collect();
        let iw = iw_pgpe_gradient(&samples, &rho).unwrap();
        let plain = pgpe_gradient_same_sample(&samples, &rho).unwrap();
        assert!((iw.baseline - plain.baseline).abs() <= 1e-12 * plain.baseline.abs().max(1.0));
        for (a, b) in iw.grad_eta.iter().chain(&iw.grad_tau).zip(plain.grad_eta.iter().chain(&plain.grad_tau)) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert_eq!(iw.n_used, 200);
    }

    #[test]
    fn importance_weights_are_reciprocal() {
        let p = PriorHyper::new(vec![0.1, 2.0], vec![0.5, 1.5]).unwrap();
        let q = PriorHyper::new(vec![-0.3, 1.0], vec![1.1, 0.4]).unwrap();
        let mut rng = Streams::new(6).stream(Purpose::PriorDraw, 0);
        for _ in 0..50 {
            let th = q.draw(&mut rng);
            let w = log_importance_weight(&th, &p, &q).exp();
            let w_inv = log_importance_weight(&th, &q, &p).exp();
            assert!((w * w_inv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overflowing_weights_are_dropped() {
        let rho = PriorHyper::new(vec![0.0], vec![1.0]).unwrap();
        let behavior = PriorHyper::new(vec![100.0], vec![1e-3]).unwrap();
        let samples = vec![
            PgpeSample { theta: vec![0.0], ret: 1.0, behavior: behavior.clone() },
            PgpeSample { theta: vec![0.5], ret: 2.0, behavior: rho.clone() },
        ];
        let g = iw_pgpe_gradient(&samples, &rho).unwrap();
        assert_eq!((g.n_used, g.n_dropped), (1, 1));
        assert!(g.is_finite());
    }

    #[test]
    fn reinforce_zero_cases() {
        let pol = GaussianPolicy::new(Basis::chainwalk(), vec![0.5, -0.3, 0.2, 0.1, 0.0, -0.4], 0.8).unwrap();
        let states = vec![vec![1.0], vec![4.0], vec![7.5]];
        let on_mean = |s: &Vec<f64>| vec![pol.mean_action(s).unwrap()];
        let traj = Trajectory {
            actions: states[..2].iter().map(on_mean).collect(),
            states: states.clone(),
            rewards: vec![1.0, 0.0],
        };
        let g = reinforce_gradient(&[traj.clone(), traj.clone()], &pol, 0.99).unwrap();
        assert!(g.grad_mu.iter().all(|x| x.abs() < 1e-15));

        let mut rng = Streams::new(8).stream(Purpose::EnvNoise, 0);
        let trajs: Vec<Trajectory> = (0..5)
            .map(|_| Trajectory {
                states: states.clone(),
                actions: states[..2].iter().map(|s| vec![pol.sample_action(s, &mut rng).unwrap()]).collect(),
                rewards: vec![1.0, 1.0],
            })
            .collect();
        let g = reinforce_gradient(&trajs, &pol, 0.9).unwrap();
        assert!((g.baseline - 1.9).abs() < 1e-12);
        assert!(g.grad_mu.iter().all(|x| x.abs() < 1e-12));
        assert!(g.grad_sigma.abs() < 1e-12);
        assert!(reinforce_gradient(&[], &pol, 0.9).is_err());
    }
}
