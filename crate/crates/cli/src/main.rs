//! `mpgpe`: dataset collection, model fitting, training, evaluation and
//! schedule sweeps from the command line.
//!
//! Every command takes `--seed`, `--out` and `--config`. A config file holds
//! flat `key = value` lines whose keys are the long flag names; flags given on
//! the command line win. Outputs are written atomically, and each one gets a
//! `<out>.manifest` sidecar with the resolved configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use mpgpe::env::{self, EnvConfig, EnvKind};
use mpgpe::io::{fmt_f64, read_dataset, write_dataset};
use mpgpe::lscde::CvGrid;
use mpgpe::model::{FitReport, FittedModel, ModelSpec};
use mpgpe::rng::{Purpose, Streams};
use mpgpe::trainer::{self, Algo, Schedule, TrainConfig};

#[derive(Parser)]
#[command(name = "mpgpe", version, about = "Model-based policy gradients with parameter-based exploration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect episodes with uniformly random actions into a transition CSV.
    Collect(CollectArgs),
    /// Fit an LSCDE or GP transition model to a transition CSV.
    Fit(FitArgs),
    /// Train a policy prior and write its learning curve.
    Train(TrainArgs),
    /// Evaluate the mean policy of a saved prior.
    Evaluate(EvaluateArgs),
    /// Run IW-PGPE under several sampling schedules.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// chainwalk-gaussian, chainwalk-bimodal or arm2
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat `key = value` file; keys are long flag names.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// lscde or gp
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_centers: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// mpgpe-lscde, mpgpe-gp, iwpgpe or reinforce
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sampling schedule such as 5x4 (batch size x repeats).
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Divide the learning rate by the gradient norm.
    #[arg(long)]
    normalize_step: bool,
    #[arg(long)]
    tau_floor: Option<f64>,
    #[arg(long)]
    init_eta: Option<f64>,
    #[arg(long)]
    init_tau: Option<f64>,
    #[arg(long)]
    max_centers: Option<usize>,
    /// Transition CSV to fit the model on instead of collecting fresh data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fitted model file to train against.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Where to write the final prior (default: `<out stem>.policy.csv`).
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated schedules (default: every divisor of the budget).
    #[arg(long)]
    schedules: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    tau_floor: Option<f64>,
    #[arg(long)]
    init_tau: Option<f64>,
    /// Divide the learning rate by the gradient norm.
    #[arg(long)]
    normalize_step: bool,
}

/// Merges flags over config-file values and collects every problem.
struct Settings {
    file: BTreeMap<String, (usize, String)>,
    resolved: BTreeMap<String, String>,
    errors: Vec<String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut file = BTreeMap::new();
        let mut errors = Vec::new();
        if let Some(path) = path {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                match line.split_once('=') {
                    Some((k, v)) if !k.trim().is_empty() => {
                        file.insert(normalize_key(k), (i + 1, v.trim().to_string()));
                    }
                    _ => errors.push(format!("{}:{}: expected `key = value`", path.display(), i + 1)),
                }
            }
        }
        Ok(Self { file, resolved: BTreeMap::new(), errors })
    }

    fn raw(&mut self, key: &str, flag: Option<String>) -> Option<String> {
        let v = flag.or_else(|| self.file.get(key).map(|(_, v)| v.clone()));
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.clone());
        }
        v
    }

    fn get<T: FromStr>(&mut self, key: &str, flag: Option<T>) -> Option<T>
    where
        T: ToString,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            self.resolved.insert(key.to_string(), v.to_string());
            return Some(v);
        }
        let (line, text) = self.file.get(key)?.clone();
        match text.parse::<T>() {
            Ok(v) => {
                self.resolved.insert(key.to_string(), text);
                Some(v)
            }
            Err(e) => {
                self.errors.push(format!("config line {line}: invalid value `{text}` for `{key}`: {e}"));
                None
            }
        }
    }

    fn or<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>, default: T) -> T
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key, flag) {
            Some(v) => v,
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                default
            }
        }
    }

    fn required<T: FromStr + ToString>(&mut self, key: &str, flag: Option<T>) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        let had_error = self.errors.len();
        let v = self.get(key, flag);
        if v.is_none() && self.errors.len() == had_error {
            self.errors.push(format!("missing required setting `--{key}`"));
        }
        v
    }

    fn flag(&mut self, key: &str, flag: bool, default: bool) -> bool {
        if flag {
            self.resolved.insert(key.to_string(), "true".into());
            return true;
        }
        self.or(key, None, default)
    }

    fn check(&mut self, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.errors.push(msg.into());
        }
    }

    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        self.raw(key, flag.map(|p| p.display().to_string())).map(PathBuf::from)
    }

    /// Fails with every collected problem, including unknown config keys.
    fn finish(&mut self, allowed: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.file {
            if !allowed.contains(&key.as_str()) {
                self.errors.push(format!("config line {line}: unknown key `{key}`"));
            }
        }
        if self.errors.is_empty() {
            return Ok(());
        }
        Err(anyhow!(UsageError(std::mem::take(&mut self.errors))))
    }

    fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(format!("command={command}\n"));
        for (k, v) in &self.resolved {
            h.update(format!("{k}={v}\n"));
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('_', "-")
}

#[derive(Debug)]
struct UsageError(Vec<String>);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for UsageError {}

const COMMON_KEYS: [&str; 3] = ["env", "seed", "out"];

fn common(s: &mut Settings, c: &Common, need_env: bool) -> (Option<EnvConfig>, u64, Option<PathBuf>) {
    let env = if need_env {
        s.required::<String>("env", c.env.clone()).and_then(|name| match name.parse::<EnvKind>() {
            Ok(kind) => Some(EnvConfig::new(kind)),
            Err(e) => {
                s.errors.push(e.to_string());
                None
            }
        })
    } else {
        None
    };
    let seed = s.or("seed", c.seed, 0);
    let out = s.path("out", c.out.clone());
    (env, seed, out)
}

fn env_defaults(algo: Algo, env: Option<&EnvConfig>) -> TrainConfig {
    env.map_or_else(|| TrainConfig::new(algo), |e| TrainConfig::for_env(algo, e))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Output files rendered in memory and committed together at the end.
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    /// Writes every file into a temporary sibling first, then renames them
    /// into place, followed by the manifest.
    fn commit(self, manifest_for: Option<&Path>, manifest: Manifest) -> Result<Vec<PathBuf>> {
        let mut staged = Vec::with_capacity(self.files.len() + 1);
        let mut paths: Vec<PathBuf> = self.files.iter().map(|(p, _)| p.clone()).collect();
        for (path, bytes) in &self.files {
            staged.push((stage(path, bytes)?, path.clone()));
        }
        if let Some(primary) = manifest_for {
            let mpath = sidecar(primary, "manifest");
            paths.push(mpath.clone());
            let text = manifest.render(&paths, now_unix());
            staged.push((stage(&mpath, text.as_bytes())?, mpath));
        }
        for (tmp, path) in staged {
            tmp.persist(&path).map_err(|e| anyhow!("cannot write {}: {}", path.display(), e.error))?;
        }
        Ok(paths)
    }
}

fn stage(path: &Path, bytes: &[u8]) -> Result<tempfile::NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot write {} (directory not writable)", path.display()))?;
    tmp.write_all(bytes).with_context(|| format!("cannot write {}", path.display()))?;
    tmp.flush()?;
    Ok(tmp)
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

struct Manifest {
    command: &'static str,
    config_hash: String,
    seed: u64,
    start: u64,
    resolved: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: &'static str, settings: &Settings, seed: u64, start: u64) -> Self {
        Self { command, config_hash: settings.hash(command), seed, start, resolved: settings.resolved.clone() }
    }

    fn render(&self, outputs: &[PathBuf], end: u64) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "start_unix = {}", self.start);
        let _ = writeln!(s, "end_unix = {end}");
        for p in outputs {
            let _ = writeln!(s, "output = {}", p.display());
        }
        for (k, v) in &self.resolved {
            let _ = writeln!(s, "config.{k} = {v}");
        }
        s
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn render(f: impl FnOnce(&mut Vec<u8>) -> mpgpe::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn cmd_collect(a: CollectArgs) -> Result<()> {
    let start = now_unix();
    let mut s = Settings::load(a.common.config.as_deref())?;
    let (env, seed, out) = common(&mut s, &a.common, true);
    let episodes = s.required("episodes", a.episodes);
    s.check(episodes != Some(0), "`--episodes` must be >= 1");
    s.check(out.is_some(), "missing required setting `--out`");
    s.finish(&[&COMMON_KEYS[..], &["episodes"]].concat())?;
    let (env, episodes, out) = (env.expect("checked"), episodes.expect("checked"), out.expect("checked"));

    let mut rng = Streams::new(seed).stream(Purpose::Dataset, 0);
    let data = env::collect_uniform_dataset(&env, episodes, &mut rng)?;
    let mut outputs = Outputs::new();
    outputs.add(out.clone(), render(|w| write_dataset(w, &data))?);
    outputs.commit(Some(&out), Manifest::new("collect", &s, seed, start))?;
    println!("rows={}", data.len());
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let start = now_unix();
    let mut s = Settings::load(a.common.config.as_deref())?;
    let (_, seed, out) = common(&mut s, &a.common, false);
    let data_path = s.path("data", a.data.clone());
    s.check(data_path.is_some(), "missing required setting `--data`");
    let kind = s.required::<String>("model", a.model.clone());
    let max_centers = s.or("max-centers", a.max_centers, 500);
    let folds = s.or("folds", a.folds, CvGrid::default().folds);
    s.check(folds >= 2, "`--folds` must be >= 2");
    s.check(out.is_some(), "missing required setting `--out`");
    let spec = match kind.as_deref() {
        Some("lscde") => Some(ModelSpec::Lscde { grid: CvGrid { folds, ..CvGrid::default() }, max_centers }),
        Some("gp") => Some(ModelSpec::gp()),
        Some(other) => {
            s.errors.push(format!("unknown model `{other}` (expected lscde or gp)"));
            None
        }
        None => None,
    };
    s.finish(&[&COMMON_KEYS[..], &["data", "model", "max-centers", "folds"]].concat())?;
    let (spec, out, data_path) = (spec.expect("checked"), out.expect("checked"), data_path.expect("checked"));

    let data = read_dataset(open(&data_path)?).with_context(|| format!("reading {}", data_path.display()))?;
    let mut rng = Streams::new(seed).stream(Purpose::ModelFit, 0);
    let (model, report) = FittedModel::fit(&data, &spec, &mut rng)?;
    let report_path = sidecar(&out, "report.csv");
    let mut outputs = Outputs::new();
    outputs.add(out.clone(), render(|w| model.write_to(w))?);
    outputs.add(report_path, report_csv(&report).into_bytes());
    outputs.commit(Some(&out), Manifest::new("fit", &s, seed, start))?;
    match &report {
        FitReport::Lscde(cv) => println!(
            "model=lscde centers={} kappa={} lambda={} cv_score={}",
            match &model {
                FittedModel::Lscde(m) => m.n_centers(),
                FittedModel::Gp(_) => 0,
            },
            cv.kappa,
            cv.lambda,
            cv.score
        ),
        FitReport::Gp { best_log_evidence, .. } => {
            if let FittedModel::Gp(m) = &model {
                let h = m.hyper();
                println!(
                    "model=gp amplitude={} lengthscale={} noise_var={} log_evidence={}",
                    h.amplitude, h.lengthscales[0], h.noise_var, best_log_evidence
                );
            }
        }
    }
    Ok(())
}

fn report_csv(report: &FitReport) -> String {
    let mut s = String::new();
    match report {
        FitReport::Lscde(cv) => {
            s.push_str("kappa,lambda,cv_score,selected\n");
            for p in &cv.scores {
                let sel = p.kappa == cv.kappa && p.lambda == cv.lambda;
                let _ = writeln!(s, "{},{},{},{}", fmt_f64(p.kappa), fmt_f64(p.lambda), fmt_f64(p.score), sel as u8);
            }
            if cv.scores.is_empty() {
                let _ = writeln!(s, "{},{},{},1", fmt_f64(cv.kappa), fmt_f64(cv.lambda), fmt_f64(cv.score));
            }
        }
        FitReport::Gp { best_log_evidence, table } => {
            s.push_str("amplitude,lengthscale,noise_var,log_evidence,selected\n");
            let mut marked = false;
            for p in table {
                let sel = !marked && p.log_evidence == *best_log_evidence;
                marked |= sel;
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    fmt_f64(p.hyper.amplitude),
                    fmt_f64(p.hyper.lengthscales[0]),
                    fmt_f64(p.hyper.noise_var),
                    fmt_f64(p.log_evidence),
                    sel as u8
                );
            }
        }
    }
    s
}

fn parse_schedule(s: &mut Settings, flag: Option<String>, default: Schedule) -> Schedule {
    match s.raw("schedule", flag) {
        None => {
            s.resolved.insert("schedule".into(), default.to_string());
            default
        }
        Some(text) => text.parse().unwrap_or_else(|e: mpgpe::Error| {
            s.errors.push(e.to_string());
            default
        }),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let start = now_unix();
    let mut s = Settings::load(a.common.config.as_deref())?;
    let (env, seed, out) = common(&mut s, &a.common, true);
    let algo = s.required::<String>("algo", a.algo.clone()).and_then(|n| match n.parse::<Algo>() {
        Ok(a) => Some(a),
        Err(e) => {
            s.errors.push(e.to_string());
            None
        }
    });
    let d = env_defaults(algo.unwrap_or(Algo::MpgpeLscde), env.as_ref());
    let budget = s.or("budget", a.budget, d.budget_episodes);
    let default_schedule = if budget == d.budget_episodes { d.schedule } else { Schedule::new(budget.max(1), 1) };
    let cfg = TrainConfig {
        algo: algo.unwrap_or(d.algo),
        budget_episodes: budget,
        iterations: s.or("iters", a.iters, d.iterations),
        synthetic_per_update: s.or("synthetic", a.synthetic, d.synthetic_per_update),
        learning_rate: s.or("lr", a.lr, d.learning_rate),
        normalize_step: s.flag("normalize-step", a.normalize_step, d.normalize_step),
        schedule: parse_schedule(&mut s, a.schedule.clone(), default_schedule),
        updates_per_batch: s.or("updates", a.updates, d.updates_per_batch),
        eval_episodes: s.or("eval-episodes", a.eval_episodes, d.eval_episodes),
        seed,
        init_eta: s.or("init-eta", a.init_eta, d.init_eta),
        init_tau: s.or("init-tau", a.init_tau, d.init_tau),
        tau_floor: s.or("tau-floor", a.tau_floor, d.tau_floor),
        stop_tolerance: None,
        max_centers: s.or("max-centers", a.max_centers, d.max_centers),
    };
    let data = s.path("data", a.data.clone());
    let model_path = s.path("model", a.model.clone());
    let policy_out = s.path("policy-out", a.policy_out.clone());
    s.errors.extend(cfg.problems());
    if (data.is_some() || model_path.is_some()) && !cfg.algo.is_model_based() {
        s.errors.push(format!("`--data`/`--model` only apply to model-based algorithms, not {}", cfg.algo));
    }
    s.check(!(data.is_some() && model_path.is_some()), "give at most one of `--data` and `--model`");
    s.check(out.is_some(), "missing required setting `--out`");
    s.finish(
        &[
            &COMMON_KEYS[..],
            &[
                "algo",
                "budget",
                "iters",
                "synthetic",
                "lr",
                "normalize-step",
                "schedule",
                "updates",
                "eval-episodes",
                "init-eta",
                "init-tau",
                "tau-floor",
                "max-centers",
                "data",
                "model",
                "policy-out",
            ],
        ]
        .concat(),
    )?;
    let (env, out) = (env.expect("checked"), out.expect("checked"));

    let result = if let Some(path) = &model_path {
        let model = FittedModel::read_from(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        if model.state_dim() != env.state_dim() || model.action_dim() != env.action_dim() {
            bail!(
                "model {} has state/action dims {}/{} but {} needs {}/{}",
                path.display(),
                model.state_dim(),
                model.action_dim(),
                env.kind,
                env.state_dim(),
                env.action_dim()
            );
        }
        trainer::train_mpgpe_with_model(&env, &model, cfg.budget_episodes, &cfg)?
    } else if let Some(path) = &data {
        let samples = read_dataset(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        let (model, report) = trainer::fit_for_config(&samples, &cfg)?;
        let episodes = samples.len().div_ceil(env.horizon);
        let mut r = trainer::train_mpgpe_with_model(&env, &model, episodes, &cfg)?;
        r.fit_report = Some(report);
        r
    } else {
        trainer::train(&env, &cfg)?
    };

    let policy_path = policy_out.unwrap_or_else(|| out.with_extension("policy.csv"));
    let mut outputs = Outputs::new();
    outputs.add(out.clone(), render(|w| result.curve.write_csv(w))?);
    outputs.add(policy_path, render(|w| trainer::write_prior(w, &result.prior))?);
    outputs.commit(Some(&out), Manifest::new("train", &s, seed, start))?;
    let st = &result.stats;
    println!(
        "rows={} final_return={} real_episodes={} degenerate_rollouts={} tau_floored={}",
        result.curve.rows.len(),
        result.curve.final_return().map(fmt_f64).unwrap_or_default(),
        st.real_episodes,
        st.degenerate_rollouts,
        st.tau_floored
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let start = now_unix();
    let mut s = Settings::load(a.common.config.as_deref())?;
    let (env, seed, out) = common(&mut s, &a.common, true);
    let policy = s.path("policy", a.policy.clone());
    s.check(policy.is_some(), "missing required setting `--policy`");
    let episodes = s.or("episodes", a.episodes, 100);
    s.check(episodes >= 1, "`--episodes` must be >= 1");
    s.finish(&[&COMMON_KEYS[..], &["policy", "episodes"]].concat())?;
    let (env, policy) = (env.expect("checked"), policy.expect("checked"));

    let rho = trainer::read_prior(open(&policy)?).with_context(|| format!("reading {}", policy.display()))?;
    let expected = env.default_basis().len() * env.action_dim();
    if rho.len() != expected {
        bail!("policy {} has {} parameters but {} needs {}", policy.display(), rho.len(), env.kind, expected);
    }
    let mut rng = Streams::new(seed).stream(Purpose::Evaluation, 0);
    let (mean, se) = trainer::evaluate_policy(&env, &rho, episodes, &mut rng)?;
    let csv = format!("episodes,mean_return,std_error\n{episodes},{},{}\n", fmt_f64(mean), fmt_f64(se));
    if let Some(out) = &out {
        let mut outputs = Outputs::new();
        outputs.add(out.clone(), csv.clone().into_bytes());
        outputs.commit(Some(out), Manifest::new("evaluate", &s, seed, start))?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let start = now_unix();
    let mut s = Settings::load(a.common.config.as_deref())?;
    let (env, seed, out) = common(&mut s, &a.common, true);
    let d = env_defaults(Algo::Iwpgpe, env.as_ref());
    let budget = s.or("budget", a.budget, d.budget_episodes);
    let runs = s.or("runs", a.runs, 10);
    s.check(runs >= 1, "`--runs` must be >= 1");
    s.check(budget >= 1, "`--budget` must be >= 1");
    let schedules = match s.raw("schedules", a.schedules.clone()) {
        None => {
            let all = Schedule::divisors_of(budget);
            let text = all.iter().map(Schedule::to_string).collect::<Vec<_>>().join(",");
            s.resolved.insert("schedules".into(), text);
            all
        }
        Some(text) => {
            let mut parsed = Vec::new();
            for item in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                match item.parse::<Schedule>() {
                    Ok(sch) if sch.total() == budget => parsed.push(sch),
                    Ok(sch) => s.errors.push(format!(
                        "schedule {sch}: {} episodes does not match the budget of {budget}",
                        sch.total()
                    )),
                    Err(e) => s.errors.push(e.to_string()),
                }
            }
            s.check(!text.trim().is_empty(), "`--schedules` is empty");
            parsed
        }
    };
    let cfg = TrainConfig {
        algo: Algo::Iwpgpe,
        budget_episodes: budget,
        learning_rate: s.or("lr", a.lr, d.learning_rate),
        updates_per_batch: s.or("updates", a.updates, d.updates_per_batch),
        eval_episodes: s.or("eval-episodes", a.eval_episodes, d.eval_episodes),
        tau_floor: s.or("tau-floor", a.tau_floor, d.tau_floor),
        init_tau: s.or("init-tau", a.init_tau, d.init_tau),
        normalize_step: s.flag("normalize-step", a.normalize_step, d.normalize_step),
        seed,
        ..d
    };
    s.check(out.is_some(), "missing required setting `--out`");
    s.finish(
        &[
            &COMMON_KEYS[..],
            &[
                "schedules",
                "runs",
                "budget",
                "lr",
                "updates",
                "eval-episodes",
                "tau-floor",
                "init-tau",
                "normalize-step",
            ],
        ]
        .concat(),
    )?;
    let (env, out) = (env.expect("checked"), out.expect("checked"));
    cfg.validate()?;

    let rows = trainer::schedule_sweep(&env, &cfg, &schedules, runs)?;
    let mut outputs = Outputs::new();
    outputs.add(out.clone(), render(|w| trainer::write_sweep_csv(w, &rows))?);
    outputs.commit(Some(&out), Manifest::new("sweep", &s, seed, start))?;
    for r in &rows {
        println!("{} mean_return={} std_error={}", r.schedule, fmt_f64(r.mean_return), fmt_f64(r.std_error));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Collect(a) => cmd_collect(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprint!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
