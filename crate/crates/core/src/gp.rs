//! Gaussian-process regression transition model.
//!
//! Each next-state dimension gets an independent GP over the joint input
//! `[s, a]`; all dimensions share the covariance hyper-parameters
//!
//! ```text
//! k(x, x') = amplitude * exp(-sum_i (x_i - x'_i)^2 / l_i^2)
//! ```
//!
//! which are chosen by maximizing the summed log marginal likelihood over a
//! fixed grid. Targets are centred on their empirical mean before fitting.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::env::TransitionSample;
use crate::error::{check_dim, Error, Result};
use crate::io::{expect_header, join_f64, missing, parse_row, parse_usize, read_lines};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub amplitude: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn isotropic(amplitude: f64, lengthscale: f64, noise_var: f64, d_in: usize) -> Self {
        Self { amplitude, lengthscales: vec![lengthscale; d_in], noise_var }
    }

    fn validate(&self, d_in: usize) -> Result<()> {
        check_dim("GP lengthscales", d_in, self.lengthscales.len())?;
        let ok =
            self.amplitude > 0.0 && self.noise_var > 0.0 && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid GP hyper-parameters {self:?}")));
        }
        Ok(())
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let z = (a - b) / l;
                z * z
            })
            .sum();
        self.amplitude * (-d2).exp()
    }
}

/// Evidence-maximization grid. `ard_ratio`, when non-empty, multiplies the
/// common lengthscale per input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperGrid {
    pub amplitudes: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub noise_vars: Vec<f64>,
    pub ard_ratio: Vec<f64>,
}

impl Default for GpHyperGrid {
    fn default() -> Self {
        Self {
            amplitudes: vec![0.1, 1.0, 10.0],
            lengthscales: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            noise_vars: vec![1e-4, 1e-2, 1e-1, 1.0],
            ard_ratio: Vec::new(),
        }
    }
}

impl GpHyperGrid {
    pub fn candidates(&self, d_in: usize) -> Result<Vec<GpHyper>> {
        if self.amplitudes.is_empty() || self.lengthscales.is_empty() || self.noise_vars.is_empty() {
            return Err(Error::EmptyInput("GP hyper-parameter grid"));
        }
        let ratio = if self.ard_ratio.is_empty() {
            vec![1.0; d_in]
        } else {
            check_dim("ARD ratio", d_in, self.ard_ratio.len())?;
            self.ard_ratio.clone()
        };
        let mut out = Vec::new();
        for &amplitude in &self.amplitudes {
            for &l in &self.lengthscales {
                for &noise_var in &self.noise_vars {
                    out.push(GpHyper { amplitude, lengthscales: ratio.iter().map(|r| r * l).collect(), noise_var });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: DMatrix<f64>,
    target_mean: Vec<f64>,
    hyper: GpHyper,
    /// Lower Cholesky factor of `K + noise_var I`.
    chol_l: DMatrix<f64>,
    /// `(K + noise_var I)^{-1} (y - mean)`, one column per output.
    weights: DMatrix<f64>,
    d_s: usize,
    d_a: usize,
    log_evidence: f64,
}

fn split_samples(samples: &[TransitionSample]) -> Result<(Vec<Vec<f64>>, DMatrix<f64>, usize, usize)> {
    let first = samples.first().ok_or(Error::EmptyInput("GP training samples"))?;
    let (d_s, d_a, d_out) = (first.s.len(), first.a.len(), first.s_next.len());
    let mut inputs = Vec::with_capacity(samples.len());
    let mut y = DMatrix::zeros(samples.len(), d_out);
    for (i, t) in samples.iter().enumerate() {
        check_dim("sample state", d_s, t.s.len())?;
        check_dim("sample action", d_a, t.a.len())?;
        check_dim("sample next state", d_out, t.s_next.len())?;
        inputs.push(t.s.iter().chain(&t.a).copied().collect());
        for (j, v) in t.s_next.iter().enumerate() {
            y[(i, j)] = *v;
        }
    }
    Ok((inputs, y, d_s, d_a))
}

fn column_means(y: &DMatrix<f64>) -> Vec<f64> {
    (0..y.ncols()).map(|j| y.column(j).mean()).collect()
}

fn gram(inputs: &[Vec<f64>], hyper: &GpHyper) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = hyper.kernel(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += hyper.noise_var;
    }
    k
}

struct Factorized {
    chol_l: DMatrix<f64>,
    weights: DMatrix<f64>,
    log_evidence: f64,
}

fn factorize(inputs: &[Vec<f64>], centred: &DMatrix<f64>, hyper: &GpHyper) -> Result<Factorized> {
    let n = inputs.len();
    let k = gram(inputs, hyper);
    let chol = k.cholesky().ok_or_else(|| {
        Error::Factorization(format!("K + noise_var I is not positive definite (n = {n}, hyper = {hyper:?})"))
    })?;
    let weights = chol.solve(centred);
    let chol_l = chol.unpack();
    let log_det_half: f64 = chol_l.diagonal().iter().map(|d| d.ln()).sum();
    let mut log_evidence = 0.0;
    for j in 0..centred.ncols() {
        let fit = centred.column(j).dot(&weights.column(j));
        log_evidence += -0.5 * fit - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();
    }
    Ok(Factorized { chol_l, weights, log_evidence })
}

/// Summed log marginal likelihood of the mean-centred targets under `hyper`.
pub fn log_evidence(samples: &[TransitionSample], hyper: &GpHyper) -> Result<f64> {
    let (inputs, y, d_s, d_a) = split_samples(samples)?;
    hyper.validate(d_s + d_a)?;
    let mean = column_means(&y);
    let centred = centre(&y, &mean);
    Ok(factorize(&inputs, &centred, hyper)?.log_evidence)
}

fn centre(y: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
    let mut c = y.clone();
    for (j, m) in mean.iter().enumerate() {
        c.column_mut(j).add_scalar_mut(-m);
    }
    c
}

/// One grid point of the evidence search.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidencePoint {
    pub hyper: GpHyper,
    pub log_evidence: f64,
}

impl GpModel {
    /// Fits with fixed hyper-parameters.
    pub fn with_hyper(samples: &[TransitionSample], hyper: GpHyper) -> Result<Self> {
        let (inputs, targets, d_s, d_a) = split_samples(samples)?;
        hyper.validate(d_s + d_a)?;
        let target_mean = column_means(&targets);
        let f = factorize(&inputs, &centre(&targets, &target_mean), &hyper)?;
        Ok(Self {
            inputs,
            targets,
            target_mean,
            hyper,
            chol_l: f.chol_l,
            weights: f.weights,
            d_s,
            d_a,
            log_evidence: f.log_evidence,
        })
    }

    /// Evidence maximization over `grid`; returns the model and the full table.
    pub fn fit(samples: &[TransitionSample], grid: &GpHyperGrid) -> Result<(Self, Vec<EvidencePoint>)> {
        let (inputs, targets, d_s, d_a) = split_samples(samples)?;
        let candidates = grid.candidates(d_s + d_a)?;
        let mean = column_means(&targets);
        let centred = centre(&targets, &mean);
        let table: Vec<EvidencePoint> = candidates
            .into_par_iter()
            .map(|hyper| {
                hyper.validate(d_s + d_a)?;
                let f = factorize(&inputs, &centred, &hyper)?;
                Ok(EvidencePoint { hyper, log_evidence: f.log_evidence })
            })
            .collect::<Result<_>>()?;
        let best = table
            .iter()
            .filter(|p| p.log_evidence.is_finite())
            .fold(None::<&EvidencePoint>, |best, p| match best {
                Some(b) if b.log_evidence >= p.log_evidence => Some(b),
                _ => Some(p),
            })
            .ok_or_else(|| Error::Factorization("no finite evidence on the grid".into()))?;
        let model = Self::with_hyper(samples, best.hyper.clone())?;
        Ok((model, table))
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.d_s
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Same inputs and hyper-parameters with targets multiplied by `c`.
    pub fn with_scaled_targets(&self, c: f64) -> Result<Self> {
        let samples: Vec<TransitionSample> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, x)| TransitionSample {
                s: x[..self.d_s].to_vec(),
                a: x[self.d_s..].to_vec(),
                s_next: self.targets.row(i).iter().map(|v| c * v).collect(),
            })
            .collect();
        Self::with_hyper(&samples, self.hyper.clone())
    }

    fn cross_kernel(&self, x: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|xi| self.hyper.kernel(xi, x)).collect()
    }

    /// Posterior mean and latent variance per output dimension.
    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("state", self.d_s, s.len())?;
        check_dim("action", self.d_a, a.len())?;
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        let k = self.cross_kernel(&x);
        let mean = (0..self.output_dim())
            .map(|j| self.target_mean[j] + k.iter().zip(self.weights.column(j).iter()).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        // v = L^{-1} k by forward substitution.
        let mut v = DVector::from_vec(k);
        self.chol_l.solve_lower_triangular_mut(&mut v);
        let explained = v.norm_squared();
        let var = (self.hyper.amplitude - explained).max(0.0);
        Ok((mean, vec![var; self.output_dim()]))
    }

    /// Draws `s'_i ~ N(mean_i, var_i + noise_var)` independently per dimension.
    pub fn sample(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let (mean, var) = self.predict(s, a)?;
        Ok(mean
            .iter()
            .zip(&var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + (v + self.hyper.noise_var).sqrt() * z
            })
            .collect())
    }

    /// Predictive density of `s_next` including observation noise.
    pub fn density(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        let (mean, var) = self.predict(s, a)?;
        check_dim("next state", mean.len(), s_next.len())?;
        Ok(mean
            .iter()
            .zip(&var)
            .zip(s_next)
            .map(|((m, v), x)| {
                let t = v + self.hyper.noise_var;
                (-(x - m) * (x - m) / (2.0 * t)).exp() / (2.0 * PI * t).sqrt()
            })
            .product())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let d_in = self.d_s + self.d_a;
        let ls: Vec<String> = (0..d_in).map(|i| format!("lengthscale{i}")).collect();
        writeln!(w, "M,d_s,d_a,d_out,amplitude,noise_var,{}", ls.join(","))?;
        writeln!(
            w,
            "{},{},{},{},{}",
            self.n_train(),
            self.d_s,
            self.d_a,
            self.output_dim(),
            join_f64(
                [self.hyper.amplitude, self.hyper.noise_var].into_iter().chain(self.hyper.lengthscales.iter().copied())
            )
        )?;
        writeln!(w, "{}", crate::io::transition_columns(self.d_s, self.d_a, self.output_dim()))?;
        for (i, x) in self.inputs.iter().enumerate() {
            writeln!(w, "{}", join_f64(x.iter().copied().chain(self.targets.row(i).iter().copied())))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let lines = read_lines(reader)?;
        let mut it = lines.iter();
        let (no, head) = it.next().ok_or_else(|| missing(1, "GP header"))?;
        if !head.starts_with("M,d_s,d_a,d_out,amplitude,noise_var") {
            return Err(Error::Parse { line: *no, msg: format!("not a GP model header: `{head}`") });
        }
        let (no, vals) = it.next().ok_or_else(|| missing(no + 1, "GP header values"))?;
        let v = parse_row(*no, vals, None)?;
        if v.len() < 6 {
            return Err(Error::Parse { line: *no, msg: "truncated GP header".into() });
        }
        let m = parse_usize(*no, v[0], "M")?;
        let d_s = parse_usize(*no, v[1], "d_s")?;
        let d_a = parse_usize(*no, v[2], "d_a")?;
        let d_out = parse_usize(*no, v[3], "d_out")?;
        if v.len() != 6 + d_s + d_a {
            return Err(Error::Parse { line: *no, msg: "wrong number of lengthscales".into() });
        }
        let hyper = GpHyper { amplitude: v[4], noise_var: v[5], lengthscales: v[6..].to_vec() };
        let (no, cols) = it.next().ok_or_else(|| missing(no + 1, "column header"))?;
        expect_header(*no, cols, &crate::io::transition_columns(d_s, d_a, d_out))?;
        let mut samples = Vec::with_capacity(m);
        let mut last = *no;
        for (no, line) in it {
            last = *no;
            let row = parse_row(*no, line, Some(d_s + d_a + d_out))?;
            samples.push(TransitionSample {
                s: row[..d_s].to_vec(),
                a: row[d_s..d_s + d_a].to_vec(),
                s_next: row[d_s + d_a..].to_vec(),
            });
        }
        if samples.len() != m {
            return Err(Error::Parse { line: last, msg: format!("header declares {m} rows, found {}", samples.len()) });
        }
        Self::with_hyper(&samples, hyper)
    }
}

/// Direct evaluation of the mean-centred log evidence via an explicit inverse
/// and determinant. Only meant for small cross-checks.
pub fn log_evidence_direct(samples: &[TransitionSample], hyper: &GpHyper) -> Result<f64> {
    let (inputs, y, _, _) = split_samples(samples)?;
    let centred = centre(&y, &column_means(&y));
    let k = gram(&inputs, hyper);
    let det = k.clone().determinant();
    let inv = k.try_inverse().ok_or_else(|| Error::SingularSystem("Gram matrix".into()))?;
    let n = inputs.len() as f64;
    let mut total = 0.0;
    for j in 0..centred.ncols() {
        let c: DVector<f64> = centred.column(j).into_owned();
        total += -0.5 * c.dot(&(&inv * &c)) - 0.5 * det.ln() - 0.5 * n * (2.0 * PI).ln();
    }
    Ok(total)
}
