//! Learned transition models behind one interface.

use std::io::{BufRead, Write};

use crate::env::TransitionSample;
use crate::error::{Error, Result};
use crate::gp::{EvidencePoint, GpHyperGrid, GpModel};
use crate::lscde::{self, CvGrid, CvResult, LscdeModel};
use crate::rng::Rng;

/// A sampler for `s' ~ p̂(s'|s, a)`.
pub trait TransitionModel: Sync {
    fn sample_next(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

impl TransitionModel for LscdeModel {
    fn sample_next(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.sample(s, a, rng)
    }
}

impl TransitionModel for GpModel {
    fn sample_next(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.sample(s, a, rng)
    }
}

/// How to estimate the transition model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Lscde { grid: CvGrid, max_centers: usize },
    Gp { grid: GpHyperGrid },
}

impl ModelSpec {
    pub fn lscde() -> Self {
        ModelSpec::Lscde { grid: CvGrid::default(), max_centers: 500 }
    }

    pub fn gp() -> Self {
        ModelSpec::Gp { grid: GpHyperGrid::default() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Lscde { .. } => "lscde",
            ModelSpec::Gp { .. } => "gp",
        }
    }
}

/// Model-selection summary produced alongside a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub enum FitReport {
    Lscde(CvResult),
    Gp { best_log_evidence: f64, table: Vec<EvidencePoint> },
}

#[derive(Debug, Clone)]
pub enum FittedModel {
    Lscde(LscdeModel),
    Gp(GpModel),
}

impl TransitionModel for FittedModel {
    fn sample_next(&self, s: &[f64], a: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        match self {
            FittedModel::Lscde(m) => m.sample(s, a, rng),
            FittedModel::Gp(m) => m.sample(s, a, rng),
        }
    }
}

const LSCDE_TAG: &str = "# model: lscde";
const GP_TAG: &str = "# model: gp";

impl FittedModel {
    pub fn fit(samples: &[TransitionSample], spec: &ModelSpec, rng: &mut Rng) -> Result<(Self, FitReport)> {
        match spec {
            ModelSpec::Lscde { grid, max_centers } => {
                // Fall back to fewer folds for tiny datasets.
                let mut grid = grid.clone();
                grid.folds = grid.folds.min(samples.len()).max(2);
                if samples.len() < 2 {
                    let kappa = grid.kappas.iter().copied().fold(f64::NAN, f64::max);
                    let lambda = grid.lambdas.iter().copied().fold(f64::NAN, f64::max);
                    grid = CvGrid { kappas: vec![kappa], lambdas: vec![lambda], ..grid };
                }
                let (model, cv) = lscde::fit_cv(samples, &grid, *max_centers, rng)?;
                Ok((FittedModel::Lscde(model), FitReport::Lscde(cv)))
            }
            ModelSpec::Gp { grid } => {
                let (model, table) = GpModel::fit(samples, grid)?;
                let best = model.log_evidence();
                Ok((FittedModel::Gp(model), FitReport::Gp { best_log_evidence: best, table }))
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FittedModel::Lscde(_) => "lscde",
            FittedModel::Gp(_) => "gp",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            FittedModel::Lscde(m) => m.state_dim(),
            FittedModel::Gp(m) => m.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            FittedModel::Lscde(m) => m.action_dim(),
            FittedModel::Gp(m) => m.action_dim(),
        }
    }

    /// Writes a one-line tag comment followed by the model's own format.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        match self {
            FittedModel::Lscde(m) => {
                writeln!(w, "{LSCDE_TAG}")?;
                m.write_to(w)
            }
            FittedModel::Gp(m) => {
                writeln!(w, "{GP_TAG}")?;
                m.write_to(w)
            }
        }
    }

    pub fn read_from<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut tag = String::new();
        reader.read_line(&mut tag)?;
        match tag.trim() {
            LSCDE_TAG => Ok(FittedModel::Lscde(LscdeModel::read_from(LineOffset::new(reader))?)),
            GP_TAG => Ok(FittedModel::Gp(GpModel::read_from(LineOffset::new(reader))?)),
            other => Err(Error::Parse { line: 1, msg: format!("unknown model tag `{other}`") }),
        }
    }
}

/// Prepends an empty line so that parse errors keep file line numbers after
/// the tag line has been consumed.
struct LineOffset<R> {
    pending: bool,
    inner: R,
}

impl<R> LineOffset<R> {
    fn new(inner: R) -> Self {
        Self { pending: true, inner }
    }
}

impl<R: BufRead> std::io::Read for LineOffset<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = {
            let avail = self.fill_buf()?;
            let n = avail.len().min(buf.len());
            buf[..n].copy_from_slice(&avail[..n]);
            n
        };
        self.consume(n);
        Ok(n)
    }
}

impl<R: BufRead> BufRead for LineOffset<R> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        if self.pending {
            return Ok(b"\n");
        }
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        if self.pending {
            if amt > 0 {
                self.pending = false;
            }
            return;
        }
        self.inner.consume(amt);
    }
}
