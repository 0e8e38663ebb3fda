//! Least-squares conditional density estimation of `p(s'|s, a)`.
//!
//! The density is modelled as `alpha^T phi(s, a, s')` where each basis function
//! is a product of isotropic Gaussians centred on one stored transition. The
//! weights solve the ridge system `(H + lambda I) alpha = h`; negative weights
//! are clipped to zero and the model is renormalized over `s'` at query time.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::env::TransitionSample;
use crate::error::{check_dim, Error, Result};
use crate::io::{expect_header, join_f64, missing, parse_row, parse_usize, read_lines, transition_columns};
use crate::rng::Rng;

/// Normalizers at or below this value are treated as degenerate.
pub const DEGENERATE_NORMALIZER: f64 = 1e-300;

/// Gaussian widths for the state, action and next-state blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub state: f64,
    pub action: f64,
    pub next_state: f64,
}

impl Bandwidth {
    pub fn shared(kappa: f64) -> Self {
        Self { state: kappa, action: kappa, next_state: kappa }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { state: self.state * factor, action: self.action * factor, next_state: self.next_state * factor }
    }

    fn validate(&self) -> Result<()> {
        for k in [self.state, self.action, self.next_state] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::InvalidConfig(format!("bandwidth {k} must be > 0")));
            }
        }
        Ok(())
    }
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// A fitted LSCDE model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct LscdeModel {
    centers: Vec<TransitionSample>,
    bandwidth: Bandwidth,
    lambda: f64,
    alpha: Vec<f64>,
    d_s: usize,
    d_a: usize,
    d_out: usize,
    active: Vec<usize>,
}

impl LscdeModel {
    /// Builds a model from explicit centers and non-negative weights.
    pub fn from_parts(
        centers: Vec<TransitionSample>,
        bandwidth: Bandwidth,
        lambda: f64,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        bandwidth.validate()?;
        let first = centers.first().ok_or(Error::EmptyInput("LSCDE centers"))?;
        let (d_s, d_a, d_out) = (first.s.len(), first.a.len(), first.s_next.len());
        check_dim("LSCDE weights", centers.len(), alpha.len())?;
        for c in &centers {
            check_dim("center state", d_s, c.s.len())?;
            check_dim("center action", d_a, c.a.len())?;
            check_dim("center next state", d_out, c.s_next.len())?;
        }
        if alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidConfig("LSCDE weights must be finite and >= 0".into()));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {lambda} must be >= 0")));
        }
        let active = alpha.iter().enumerate().filter(|(_, a)| **a > 0.0).map(|(i, _)| i).collect();
        Ok(Self { centers, bandwidth, lambda, alpha, d_s, d_a, d_out, active })
    }

    pub fn centers(&self) -> &[TransitionSample] {
        &self.centers
    }

    pub fn n_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn state_dim(&self) -> usize {
        self.d_s
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    pub fn output_dim(&self) -> usize {
        self.d_out
    }

    /// Same centers and bandwidth with new weights.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.centers.clone(), self.bandwidth, self.lambda, alpha)
    }

    fn check_input(&self, s: &[f64], a: &[f64]) -> Result<()> {
        check_dim("state", self.d_s, s.len())?;
        check_dim("action", self.d_a, a.len())
    }

    fn input_kernel(&self, c: &TransitionSample, s: &[f64], a: &[f64]) -> f64 {
        let bw = &self.bandwidth;
        (-sq_dist(s, &c.s) / (2.0 * bw.state * bw.state) - sq_dist(a, &c.a) / (2.0 * bw.action * bw.action)).exp()
    }

    /// `phi(s, a, s')`, one entry per center.
    pub fn basis_eval(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<Vec<f64>> {
        self.check_input(s, a)?;
        check_dim("next state", self.d_out, s_next.len())?;
        let ko = self.bandwidth.next_state;
        Ok(self
            .centers
            .iter()
            .map(|c| self.input_kernel(c, s, a) * (-sq_dist(s_next, &c.s_next) / (2.0 * ko * ko)).exp())
            .collect())
    }

    /// `∫ phi_m(s, a, s') phi_m2(s, a, s') ds'` in closed form.
    pub fn phi_bar_element(&self, m: usize, m2: usize, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check_input(s, a)?;
        let len = self.centers.len();
        let cm = self.centers.get(m).ok_or(Error::IndexOutOfRange { index: m, len })?;
        let cn = self.centers.get(m2).ok_or(Error::IndexOutOfRange { index: m2, len })?;
        let ko = self.bandwidth.next_state;
        let scale = (PI.sqrt() * ko).powi(self.d_out as i32);
        // Product grouped so that swapping m and m2 is bit-identical.
        Ok(scale
            * (self.input_kernel(cm, s, a) * self.input_kernel(cn, s, a))
            * (-sq_dist(&cm.s_next, &cn.s_next) / (4.0 * ko * ko)).exp())
    }

    /// `∫ alpha^T phi(s, a, s') ds'`.
    pub fn normalizer(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check_input(s, a)?;
        Ok(self.output_volume() * self.weighted_input_sum(s, a))
    }

    fn output_volume(&self) -> f64 {
        ((2.0 * PI).sqrt() * self.bandwidth.next_state).powi(self.d_out as i32)
    }

    fn weighted_input_sum(&self, s: &[f64], a: &[f64]) -> f64 {
        self.active.iter().map(|&m| self.alpha[m] * self.input_kernel(&self.centers[m], s, a)).sum()
    }

    /// Renormalized conditional density `p̂(s'|s, a)`.
    pub fn density(&self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<f64> {
        let z = self.normalizer(s, a)?;
        if z <= DEGENERATE_NORMALIZER {
            return Err(Error::DegenerateDensity { normalizer: z });
        }
        let phi = self.basis_eval(s, a, s_next)?;
        let num: f64 = self.active.iter().map(|&m| self.alpha[m] * phi[m]).sum();
        Ok(num / z)
    }

    /// Mixture weights over active centers, normalized to sum to one.
    fn mixture(&self, s: &[f64], a: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_input(s, a)?;
        let w: Vec<(usize, f64)> =
            self.active.iter().map(|&m| (m, self.alpha[m] * self.input_kernel(&self.centers[m], s, a))).collect();
        let total: f64 = w.iter().map(|(_, x)| x).sum();
        if self.output_volume() * total <= DEGENERATE_NORMALIZER {
            return Err(Error::DegenerateDensity { normalizer: self.output_volume() * total });
        }
        Ok(w.into_iter().map(|(m, x)| (m, x / total)).collect())
    }

    /// Conditional mean `E[s' | s, a]` under the renormalized model.
    pub fn conditional_mean(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let mut mean = vec![0.0; self.d_out];
        for (m, w) in self.mixture(s, a)? {
            for (o, x) in mean.iter_mut().zip(&self.centers[m].s_next) {
                *o += w * x;
            }
        }
        Ok(mean)
    }

    /// Exact draw from the renormalized mixture: pick a center with probability
    /// proportional to `alpha_m k_m(s, a)`, then add isotropic Gaussian noise.
    pub fn sample(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_input(s, a)?;
        let mut total = 0.0;
        let mut weights = Vec::with_capacity(self.active.len());
        for &m in &self.active {
            let w = self.alpha[m] * self.input_kernel(&self.centers[m], s, a);
            total += w;
            weights.push(total);
        }
        let z = self.output_volume() * total;
        if z <= DEGENERATE_NORMALIZER {
            return Err(Error::DegenerateDensity { normalizer: z });
        }
        let u = rng.random::<f64>() * total;
        let pos = weights.partition_point(|&c| c <= u).min(weights.len() - 1);
        let center = &self.centers[self.active[pos]].s_next;
        let ko = self.bandwidth.next_state;
        Ok(center
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + ko * e
            })
            .collect())
    }

    /// Empirical objective `½ alpha^T H alpha - h^T alpha` of the current
    /// weights, with `H` and `h` averaged over `samples`.
    pub fn objective(&self, samples: &[TransitionSample]) -> Result<f64> {
        let sys = assemble_system(&self.centers, samples, self.bandwidth)?;
        let alpha = DVector::from_column_slice(&self.alpha);
        Ok(sys.objective(&alpha))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "M,d_s,d_a,d_out,kappa_s,kappa_a,kappa_out,lambda")?;
        writeln!(
            w,
            "{},{},{},{},{}",
            self.centers.len(),
            self.d_s,
            self.d_a,
            self.d_out,
            join_f64([self.bandwidth.state, self.bandwidth.action, self.bandwidth.next_state, self.lambda])
        )?;
        writeln!(w, "{},alpha", transition_columns(self.d_s, self.d_a, self.d_out))?;
        for (c, a) in self.centers.iter().zip(&self.alpha) {
            let row = c.s.iter().chain(&c.a).chain(&c.s_next).chain(std::iter::once(a)).copied();
            writeln!(w, "{}", join_f64(row))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let lines = read_lines(reader)?;
        let mut it = lines.iter();
        let (no, head) = it.next().ok_or_else(|| missing(1, "LSCDE header"))?;
        expect_header(*no, head, "M,d_s,d_a,d_out,kappa_s,kappa_a,kappa_out,lambda")?;
        let (no, vals) = it.next().ok_or_else(|| missing(no + 1, "LSCDE header values"))?;
        let v = parse_row(*no, vals, Some(8))?;
        let m = parse_usize(*no, v[0], "M")?;
        let d_s = parse_usize(*no, v[1], "d_s")?;
        let d_a = parse_usize(*no, v[2], "d_a")?;
        let d_out = parse_usize(*no, v[3], "d_out")?;
        let bandwidth = Bandwidth { state: v[4], action: v[5], next_state: v[6] };
        let lambda = v[7];
        let (no, _cols) = it.next().ok_or_else(|| missing(no + 1, "column header"))?;
        let mut last = *no;
        let mut centers = Vec::with_capacity(m);
        let mut alpha = Vec::with_capacity(m);
        for (no, line) in it {
            last = *no;
            let row = parse_row(*no, line, Some(d_s + d_a + d_out + 1))?;
            centers.push(TransitionSample {
                s: row[..d_s].to_vec(),
                a: row[d_s..d_s + d_a].to_vec(),
                s_next: row[d_s + d_a..d_s + d_a + d_out].to_vec(),
            });
            alpha.push(row[d_s + d_a + d_out]);
        }
        if centers.len() != m {
            return Err(Error::Parse {
                line: last,
                msg: format!("header declares {m} centers, found {}", centers.len()),
            });
        }
        Self::from_parts(centers, bandwidth, lambda, alpha)
    }
}

/// Sample-averaged `H` and `h` for a fixed set of centers.
#[derive(Debug, Clone)]
pub struct LscdeSystem {
    pub h_mat: DMatrix<f64>,
    pub h_vec: DVector<f64>,
}

impl LscdeSystem {
    /// `½ alpha^T H alpha - h^T alpha`.
    pub fn objective(&self, alpha: &DVector<f64>) -> f64 {
        0.5 * alpha.dot(&(&self.h_mat * alpha)) - self.h_vec.dot(alpha)
    }

    /// `max_i |((H + lambda I) alpha - h)_i|`.
    pub fn residual_inf(&self, alpha: &DVector<f64>, lambda: f64) -> f64 {
        let r = &self.h_mat * alpha + alpha * lambda - &self.h_vec;
        r.amax()
    }
}

/// Builds `H = mean_i Phi_bar(s_i, a_i)` and `h = mean_i phi(s_i, a_i, s'_i)`.
///
/// Uses the factorization `Phi_bar(s, a) = c · (g gᵀ) ∘ E` where `g` holds the
/// input kernels and `E` the pairwise next-state overlaps, so `H` is a single
/// Gram product.
pub fn assemble_system(
    centers: &[TransitionSample],
    samples: &[TransitionSample],
    bw: Bandwidth,
) -> Result<LscdeSystem> {
    if centers.is_empty() {
        return Err(Error::EmptyInput("LSCDE centers"));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("LSCDE samples"));
    }
    let m = centers.len();
    let n = samples.len();
    let d_out = centers[0].s_next.len();
    let (ks2, ka2, ko2) = (2.0 * bw.state * bw.state, 2.0 * bw.action * bw.action, 2.0 * bw.next_state * bw.next_state);
    let mut g = DMatrix::<f64>::zeros(n, m);
    let mut h_vec = DVector::<f64>::zeros(m);
    for (i, x) in samples.iter().enumerate() {
        for (j, c) in centers.iter().enumerate() {
            let gij = (-sq_dist(&x.s, &c.s) / ks2 - sq_dist(&x.a, &c.a) / ka2).exp();
            g[(i, j)] = gij;
            h_vec[j] += gij * (-sq_dist(&x.s_next, &c.s_next) / ko2).exp();
        }
    }
    h_vec /= n as f64;
    let scale = (PI.sqrt() * bw.next_state).powi(d_out as i32) / n as f64;
    let mut h_mat = g.tr_mul(&g);
    for j in 0..m {
        for k in 0..=j {
            let e = (-sq_dist(&centers[j].s_next, &centers[k].s_next) / (2.0 * ko2)).exp();
            let v = h_mat[(j, k)] * e * scale;
            h_mat[(j, k)] = v;
            h_mat[(k, j)] = v;
        }
    }
    Ok(LscdeSystem { h_mat, h_vec })
}

/// Solves `(H + lambda I) alpha = h`.
///
/// Uses a Cholesky factorization with one step of iterative refinement. When
/// the factorization fails and `lambda > 0` a pseudo-inverse solve is used; with
/// `lambda == 0` the failure is reported as [`Error::SingularSystem`].
pub fn solve_system(sys: &LscdeSystem, lambda: f64) -> Result<DVector<f64>> {
    let m = sys.h_vec.len();
    let a = &sys.h_mat + DMatrix::<f64>::identity(m, m) * lambda;
    if let Some(chol) = a.clone().cholesky().filter(well_conditioned) {
        let mut x = chol.solve(&sys.h_vec);
        let r = &sys.h_vec - &a * &x;
        x += chol.solve(&r);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    if lambda == 0.0 {
        return Err(Error::SingularSystem("H is not positive definite; use lambda > 0".into()));
    }
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.max() * 1e-14;
    let mut x = svd.solve(&sys.h_vec, eps).map_err(|e| Error::SingularSystem(e.to_string()))?;
    let r = &sys.h_vec - &a * &x;
    x += svd.solve(&r, eps).map_err(|e| Error::SingularSystem(e.to_string()))?;
    Ok(x)
}

/// Rejects factorizations whose pivots span more than ~13 orders of magnitude.
fn well_conditioned(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> bool {
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = (d.min(), d.max());
    lo > 0.0 && (lo / hi).powi(2) > 1e-13
}

/// Picks all samples as centers, or a uniformly random subset of `max_centers`.
pub fn select_centers(samples: &[TransitionSample], max_centers: usize, rng: &mut Rng) -> Vec<TransitionSample> {
    if max_centers == 0 || samples.len() <= max_centers {
        return samples.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, samples.len(), max_centers).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// A fitted model plus the unclipped solution and the linear system it solved.
#[derive(Debug, Clone)]
pub struct LscdeFit {
    pub model: LscdeModel,
    pub alpha_raw: DVector<f64>,
    pub system: LscdeSystem,
}

impl LscdeFit {
    pub fn residual_inf(&self) -> f64 {
        self.system.residual_inf(&self.alpha_raw, self.model.lambda)
    }
}

pub fn fit(
    samples: &[TransitionSample],
    bandwidth: Bandwidth,
    lambda: f64,
    max_centers: usize,
    rng: &mut Rng,
) -> Result<LscdeModel> {
    fit_detailed(samples, bandwidth, lambda, max_centers, rng).map(|f| f.model)
}

pub fn fit_detailed(
    samples: &[TransitionSample],
    bandwidth: Bandwidth,
    lambda: f64,
    max_centers: usize,
    rng: &mut Rng,
) -> Result<LscdeFit> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("LSCDE training samples"));
    }
    bandwidth.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be >= 0")));
    }
    let centers = select_centers(samples, max_centers, rng);
    fit_with_centers(centers, samples, bandwidth, lambda)
}

fn fit_with_centers(
    centers: Vec<TransitionSample>,
    samples: &[TransitionSample],
    bandwidth: Bandwidth,
    lambda: f64,
) -> Result<LscdeFit> {
    let system = assemble_system(&centers, samples, bandwidth)?;
    let alpha_raw = solve_system(&system, lambda)?;
    let alpha = alpha_raw.iter().map(|a| a.max(0.0)).collect();
    let model = LscdeModel::from_parts(centers, bandwidth, lambda, alpha)?;
    Ok(LscdeFit { model, alpha_raw, system })
}

/// Cross-validation grid over a bandwidth multiplier and the ridge strength.
///
/// Candidate bandwidths are `kappa * block_ratio`; the default ratio shares one
/// width across the state, action and next-state blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CvGrid {
    pub kappas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub block_ratio: Bandwidth,
}

impl Default for CvGrid {
    fn default() -> Self {
        Self {
            kappas: vec![0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            folds: 5,
            block_ratio: Bandwidth::shared(1.0),
        }
    }
}

impl CvGrid {
    pub fn single(kappa: f64, lambda: f64) -> Self {
        Self { kappas: vec![kappa], lambdas: vec![lambda], ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvScore {
    pub kappa: f64,
    pub lambda: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub kappa: f64,
    pub lambda: f64,
    pub bandwidth: Bandwidth,
    pub score: f64,
    pub scores: Vec<CvScore>,
}

/// K-fold selection of `(kappa, lambda)` minimizing the held-out objective
/// `½ αᵀ H_te α - h_teᵀ α` of the clipped weights. Ties go to the larger
/// lambda, then the larger kappa.
pub fn cross_validate(
    samples: &[TransitionSample],
    grid: &CvGrid,
    max_centers: usize,
    rng: &mut Rng,
) -> Result<CvResult> {
    if grid.kappas.is_empty() || grid.lambdas.is_empty() {
        return Err(Error::EmptyInput("cross-validation grid"));
    }
    if grid.folds < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
    }
    if grid.folds > samples.len() {
        return Err(Error::InvalidConfig(format!("{} folds requested for {} samples", grid.folds, samples.len())));
    }
    grid.block_ratio.validate()?;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut folds: Vec<(Vec<TransitionSample>, Vec<TransitionSample>, Vec<TransitionSample>)> =
        Vec::with_capacity(grid.folds);
    for k in 0..grid.folds {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if pos % grid.folds == k {
                test.push(samples[i].clone());
            } else {
                train.push(samples[i].clone());
            }
        }
        let centers = select_centers(&train, max_centers, rng);
        folds.push((train, test, centers));
    }

    let jobs: Vec<(usize, usize)> =
        (0..grid.kappas.len()).flat_map(|ki| (0..grid.folds).map(move |f| (ki, f))).collect();
    // scores[ki][li] summed over folds.
    let per_job: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(ki, f)| {
            let bw = grid.block_ratio.scaled(grid.kappas[ki]);
            bw.validate()?;
            let (train, test, centers) = &folds[f];
            let train_sys = assemble_system(centers, train, bw)?;
            let test_sys = assemble_system(centers, test, bw)?;
            grid.lambdas
                .iter()
                .map(|&lambda| {
                    let alpha = solve_system(&train_sys, lambda)?.map(|a| a.max(0.0));
                    Ok(test_sys.objective(&alpha))
                })
                .collect()
        })
        .collect();

    let mut totals = vec![vec![0.0; grid.lambdas.len()]; grid.kappas.len()];
    for (&(ki, _), res) in jobs.iter().zip(per_job) {
        for (t, v) in totals[ki].iter_mut().zip(res?) {
            *t += v;
        }
    }

    let mut scores = Vec::with_capacity(grid.kappas.len() * grid.lambdas.len());
    for (ki, &kappa) in grid.kappas.iter().enumerate() {
        for (li, &lambda) in grid.lambdas.iter().enumerate() {
            scores.push(CvScore { kappa, lambda, score: totals[ki][li] / grid.folds as f64 });
        }
    }
    let best = *scores.iter().reduce(|best, c| if better(c, best) { c } else { best }).expect("non-empty grid");
    Ok(CvResult {
        kappa: best.kappa,
        lambda: best.lambda,
        bandwidth: grid.block_ratio.scaled(best.kappa),
        score: best.score,
        scores,
    })
}

fn better(c: &CvScore, best: &CvScore) -> bool {
    if c.score.is_nan() {
        return false;
    }
    if best.score.is_nan() || c.score < best.score {
        return true;
    }
    c.score == best.score && (c.lambda > best.lambda || (c.lambda == best.lambda && c.kappa > best.kappa))
}

/// Cross-validates and refits on the full sample set.
pub fn fit_cv(
    samples: &[TransitionSample],
    grid: &CvGrid,
    max_centers: usize,
    rng: &mut Rng,
) -> Result<(LscdeModel, CvResult)> {
    let cv = if grid.kappas.len() * grid.lambdas.len() == 1 {
        let (kappa, lambda) = (grid.kappas[0], grid.lambdas[0]);
        CvResult { kappa, lambda, bandwidth: grid.block_ratio.scaled(kappa), score: f64::NAN, scores: Vec::new() }
    } else {
        cross_validate(samples, grid, max_centers, rng)?
    };
    let model = fit(samples, cv.bandwidth, cv.lambda, max_centers, rng)?;
    Ok((model, cv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn rng(i: u32) -> Rng {
        Streams::new(2024).stream(Purpose::ModelFit, i)
    }

    fn gaussian_chain_data(n: usize, rng: &mut Rng) -> Vec<TransitionSample> {
        (0..n)
            .map(|_| {
                let s = rng.random_range(0.0..10.0);
                let a = rng.random_range(-5.0..5.0);
                let e: f64 = StandardNormal.sample(rng);
                TransitionSample { s: vec![s], a: vec![a], s_next: vec![s + a + 0.3 * e] }
            })
            .collect()
    }

    fn single_center(kappa: f64) -> LscdeModel {
        let c = TransitionSample { s: vec![1.0], a: vec![0.5], s_next: vec![2.0] };
        LscdeModel::from_parts(vec![c], Bandwidth::shared(kappa), 0.1, vec![1.0]).unwrap()
    }

    #[test]
    fn basis_at_center_and_at_distance_kappa() {
        let mut r = rng(0);
        let data = gaussian_chain_data(5, &mut r);
        let model = LscdeModel::from_parts(data.clone(), Bandwidth::shared(0.7), 0.1, vec![1.0; 5]).unwrap();
        let c = &data[2];
        assert_eq!(model.basis_eval(&c.s, &c.a, &c.s_next).unwrap()[2], 1.0);
        let shifted = vec![c.s_next[0] + 0.7];
        let v = model.basis_eval(&c.s, &c.a, &shifted).unwrap()[2];
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.60653).abs() < 1e-5);

        let wide = LscdeModel::from_parts(data.clone(), Bandwidth::shared(1e9), 0.1, vec![1.0; 5]).unwrap();
        for v in wide.basis_eval(&[3.0], &[1.0], &[4.0]).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(model.basis_eval(&[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn phi_bar_diagonal_and_symmetry() {
        let mut r = rng(1);
        let data = gaussian_chain_data(6, &mut r);
        let kappa = 0.8;
        let model = LscdeModel::from_parts(data.clone(), Bandwidth::shared(kappa), 0.1, vec![1.0; 6]).unwrap();
        let c = &data[3];
        let v = model.phi_bar_element(3, 3, &c.s, &c.a).unwrap();
        assert!((v - PI.sqrt() * kappa).abs() < 1e-14);
        for _ in 0..20 {
            let s = [r.random_range(0.0..10.0)];
            let a = [r.random_range(-5.0..5.0)];
            let (m, n) = (r.random_range(0..6), r.random_range(0..6));
            assert_eq!(model.phi_bar_element(m, n, &s, &a).unwrap(), model.phi_bar_element(n, m, &s, &a).unwrap());
        }
        assert!(matches!(model.phi_bar_element(6, 0, &c.s, &c.a), Err(Error::IndexOutOfRange { index: 6, len: 6 })));
    }

    #[test]
    fn assembled_system_matches_naive_sums() {
        let mut r = rng(2);
        let data = gaussian_chain_data(30, &mut r);
        let centers = data[..12].to_vec();
        let bw = Bandwidth { state: 0.9, action: 1.3, next_state: 0.6 };
        let sys = assemble_system(&centers, &data, bw).unwrap();
        let model = LscdeModel::from_parts(centers.clone(), bw, 0.0, vec![1.0; 12]).unwrap();
        let n = data.len() as f64;
        for m in 0..12 {
            let mut h = 0.0;
            for x in &data {
                h += model.basis_eval(&x.s, &x.a, &x.s_next).unwrap()[m];
            }
            assert!((sys.h_vec[m] - h / n).abs() < 1e-14);
            for k in 0..12 {
                let naive: f64 = data.iter().map(|x| model.phi_bar_element(m, k, &x.s, &x.a).unwrap()).sum::<f64>() / n;
                assert!((sys.h_mat[(m, k)] - naive).abs() < 1e-13, "{m},{k}");
            }
        }
    }

    #[test]
    fn fit_residual_and_nonnegativity() {
        let mut r = rng(3);
        let data = gaussian_chain_data(200, &mut r);
        for lambda in [1e-4, 1e-2, 1.0] {
            let fit = fit_detailed(&data, Bandwidth::shared(0.5), lambda, 0, &mut r).unwrap();
            assert!(fit.residual_inf() < 1e-10, "residual {}", fit.residual_inf());
            assert!(fit.model.alpha().iter().all(|a| *a >= 0.0));
            assert_eq!(fit.model.n_centers(), 200);
        }
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let mut r = rng(4);
        let data = gaussian_chain_data(50, &mut r);
        let fit = fit_detailed(&data, Bandwidth::shared(0.5), 1e9, 0, &mut r).unwrap();
        let max = fit.alpha_raw.amax();
        assert!(max < 1e-8, "max weight {max}");
        for (a, h) in fit.alpha_raw.iter().zip(fit.system.h_vec.iter()) {
            assert!((a - h / 1e9).abs() <= 1e-6 * (h / 1e9).abs());
        }
    }

    #[test]
    fn center_subsampling() {
        let mut r = rng(5);
        let data = gaussian_chain_data(100, &mut r);
        let model = fit(&data, Bandwidth::shared(0.5), 0.01, 30, &mut r).unwrap();
        assert_eq!(model.n_centers(), 30);
        for c in model.centers() {
            assert!(data.contains(c));
        }
    }

    #[test]
    fn singular_unregularized_system_is_an_error() {
        let c = TransitionSample { s: vec![1.0], a: vec![0.0], s_next: vec![1.0] };
        let data = vec![c.clone(), c.clone(), c];
        let mut r = rng(6);
        assert!(matches!(fit(&data, Bandwidth::shared(0.5), 0.0, 0, &mut r), Err(Error::SingularSystem(_))));
        assert!(fit(&data, Bandwidth::shared(0.5), 1e-3, 0, &mut r).is_ok());
    }

    #[test]
    fn normalizer_single_term_and_linearity() {
        let mut r = rng(7);
        let data = gaussian_chain_data(8, &mut r);
        let kappa = 0.6;
        let mut alpha = vec![0.0; 8];
        alpha[4] = 1.0;
        let model = LscdeModel::from_parts(data.clone(), Bandwidth::shared(kappa), 0.1, alpha).unwrap();
        let z = model.normalizer(&data[4].s, &data[4].a).unwrap();
        assert!((z - (2.0 * PI).sqrt() * kappa).abs() < 1e-14);

        let alpha: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let m1 = model.with_alpha(alpha.clone()).unwrap();
        let m3 = model.with_alpha(alpha.iter().map(|a| 3.0 * a).collect()).unwrap();
        let (s, a) = ([4.2], [0.3]);
        let z1 = m1.normalizer(&s, &a).unwrap();
        let z3 = m3.normalizer(&s, &a).unwrap();
        assert!((z3 - 3.0 * z1).abs() < 1e-14 * z3.abs());
    }

    #[test]
    fn single_center_density_is_normal() {
        let kappa = 0.4;
        let model = single_center(kappa);
        for x in [1.0, 1.7, 2.0, 2.9] {
            let d = model.density(&[1.3], &[0.2], &[x]).unwrap();
            let expected = (-(x - 2.0f64).powi(2) / (2.0 * kappa * kappa)).exp() / ((2.0 * PI).sqrt() * kappa);
            assert!((d - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_queries_are_reported() {
        let model = single_center(0.1);
        assert!(matches!(model.density(&[500.0], &[0.0], &[2.0]), Err(Error::DegenerateDensity { .. })));
        assert!(matches!(model.sample(&[500.0], &[0.0], &mut rng(0)), Err(Error::DegenerateDensity { .. })));
    }

    #[test]
    fn single_center_sample_moments() {
        let kappa = 0.5;
        let model = single_center(kappa);
        let mut r = rng(8);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| model.sample(&[1.0], &[0.5], &mut r).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - 2.0).abs() < 0.01 * kappa, "mean {mean}");
        assert!((sd - kappa).abs() < 0.02 * kappa, "sd {sd}");
    }

    #[test]
    fn two_center_frequencies() {
        let c0 = TransitionSample { s: vec![0.0], a: vec![0.0], s_next: vec![-10.0] };
        let c1 = TransitionSample { s: vec![2.0], a: vec![0.0], s_next: vec![10.0] };
        let model = LscdeModel::from_parts(vec![c0, c1], Bandwidth::shared(1.0), 0.1, vec![0.5, 0.5]).unwrap();
        let mut r = rng(9);
        let n = 10_000;
        let hi = (0..n).filter(|_| model.sample(&[1.0], &[0.0], &mut r).unwrap()[0] > 0.0).count();
        let f = hi as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn cv_single_pair_and_argmin() {
        let mut r = rng(10);
        let data = gaussian_chain_data(60, &mut r);
        let res = cross_validate(&data, &CvGrid::single(0.7, 0.05), 0, &mut r).unwrap();
        assert_eq!((res.kappa, res.lambda), (0.7, 0.05));

        let res = cross_validate(&data, &CvGrid::default(), 0, &mut r).unwrap();
        assert_eq!(res.scores.len(), 30);
        for s in &res.scores {
            assert!(res.score <= s.score);
        }
        assert!(cross_validate(&data, &CvGrid { kappas: vec![], ..CvGrid::default() }, 0, &mut r).is_err());
        let tiny = &data[..3];
        assert!(cross_validate(tiny, &CvGrid::default(), 0, &mut r).is_err());
    }

    #[test]
    fn cv_ties_prefer_larger_lambda_then_kappa() {
        let a = CvScore { kappa: 1.0, lambda: 0.1, score: -1.0 };
        let b = CvScore { kappa: 0.5, lambda: 1.0, score: -1.0 };
        let c = CvScore { kappa: 2.0, lambda: 1.0, score: -1.0 };
        assert!(better(&b, &a));
        assert!(better(&c, &b));
        assert!(!better(&a, &c));
    }

    #[test]
    fn mean_prediction_tracks_linear_dynamics() {
        let mut r = rng(11);
        let data = gaussian_chain_data(1500, &mut r);
        let model = fit(&data, Bandwidth::shared(1.0), 0.1, 0, &mut r).unwrap();
        // Root-mean-square error over a held-out grid.
        let mut sq = 0.0;
        let mut count = 0.0;
        for s in [3.0, 4.0, 5.0, 6.0, 7.0] {
            for a in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                let m = model.conditional_mean(&[s], &[a]).unwrap()[0];
                sq += (m - (s + a)).powi(2);
                count += 1.0;
            }
        }
        let rmse = (sq / count).sqrt();
        assert!(rmse < 0.15, "rmse {rmse}");
    }

    #[test]
    fn text_roundtrip_preserves_density() {
        let mut r = rng(12);
        let data = gaussian_chain_data(40, &mut r);
        let model = fit(&data, Bandwidth::shared(0.5), 0.01, 0, &mut r).unwrap();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = LscdeModel::read_from(&buf[..]).unwrap();
        assert_eq!(back, model);
        let d0 = model.density(&[5.0], &[1.0], &[6.1]).unwrap();
        let d1 = back.density(&[5.0], &[1.0], &[6.1]).unwrap();
        assert!((d0 - d1).abs() <= 1e-12 * d0.abs());
    }
}
