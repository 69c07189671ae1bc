//! Command-line front end: instance generation, training, bounds, policy
//! simulation, self-checks and gap reports. Artifacts are written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{BasisLayout, BasisSpec, DualCoefficients, DualKind, NaVars};
use crate::dual_na::{pi_values, NaDual};
use crate::dual_sw::SwDual;
use crate::error::{Error, Result};
use crate::evalstat::{confidence_interval, ordering_report, BoundEstimate, GapReport, Side};
use crate::exec::Execution;
use crate::instance::{Knobs, MslotInstance};
use crate::master::{evaluate_all, DualOracle, MasterOptions, MasterState, TrainStatus, Trainer};
use crate::policy::{simulate_all, PolicyConfig, PolicyKind};
use crate::process::ScenarioPath;
use crate::solve::SolveOptions;
use crate::verify::{run_suite, SUITES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Everything a run depends on. Loaded from `--config` and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RunConfig {
    pub stages: usize,
    pub products: usize,
    pub rho: f64,
    pub rho_y: f64,
    pub mu_seed: u64,
    pub process_seed: u64,
    pub knobs: Knobs,
    pub dual: DualKind,
    pub basis: Option<u8>,
    pub na_vars: NaVars,
    pub train_scen: usize,
    pub eval_scen: usize,
    /// Seed of the training and evaluation samples.
    pub seed: u64,
    pub master: MasterOptions,
    pub lambda: f64,
    pub node_limit: Option<usize>,
    pub time_limit: Option<f64>,
    pub level: f64,
    /// NA-driven simulation is refused above this many stages.
    pub na_policy_max_stages: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            products: 3,
            rho: 0.6,
            rho_y: 0.2,
            mu_seed: 1,
            process_seed: 2,
            knobs: Knobs::default(),
            dual: DualKind::Sw,
            basis: None,
            na_vars: NaVars::X,
            train_scen: 200,
            eval_scen: 500,
            seed: 0,
            master: MasterOptions::default(),
            lambda: 0.25,
            node_limit: Some(10_000),
            time_limit: Some(60.0),
            level: 0.95,
            na_policy_max_stages: 6,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn basis_option(&self, kind: DualKind) -> u8 {
        self.basis.unwrap_or(match kind {
            DualKind::Sw => 1,
            DualKind::Na => 3,
        })
    }

    pub fn basis_spec(&self, kind: DualKind) -> BasisSpec {
        match kind {
            DualKind::Sw => BasisSpec::sw(self.basis_option(kind)),
            DualKind::Na => BasisSpec::na(self.basis_option(kind), self.na_vars),
        }
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        short_hash(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn train_paths(&self, inst: &MslotInstance) -> Result<Vec<ScenarioPath>> {
        inst.process.sample_paths(self.train_scen, &format!("train:{}", self.seed))
    }

    pub fn eval_paths(&self, inst: &MslotInstance) -> Result<Vec<ScenarioPath>> {
        inst.process.sample_paths(self.eval_scen, &format!("eval:{}", self.seed))
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

fn paths_hash(paths: &[ScenarioPath]) -> String {
    let d: Vec<&Vec<Vec<f64>>> = paths.iter().map(|p| &p.demands).collect();
    short_hash(&serde_json::to_vec(&d).expect("demands serialize"))
}

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResultRow {
    pub instance: String,
    pub method: String,
    pub side: Side,
    pub mean: f64,
    pub halfwidth: f64,
    pub n: usize,
    pub level: f64,
    /// Left empty unless timings were requested; wall time breaks byte-for-byte reproducibility.
    pub wall_time: Option<f64>,
    pub flags: String,
    pub config_hash: String,
    pub eval_hash: String,
    pub instance_hash: String,
    pub artifact_hash: String,
}

impl ResultRow {
    pub fn estimate(&self) -> BoundEstimate {
        BoundEstimate {
            method: self.method.clone(),
            side: self.side,
            mean: self.mean,
            halfwidth: self.halfwidth,
            n: self.n,
            level: self.level,
            flags: self.flags.split(';').filter(|f| !f.is_empty()).map(String::from).collect(),
        }
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Replaces any row with the same instance and method, keeping a stable order.
pub fn upsert_result(path: &Path, row: ResultRow) -> Result<()> {
    let mut rows = read_results(path)?;
    match rows
        .iter_mut()
        .find(|r| r.instance == row.instance && r.method == row.method)
    {
        Some(r) => *r = row,
        None => rows.push(row),
    }
    rows.sort_by(|a, b| (&a.instance, &a.method).cmp(&(&b.instance, &b.method)));
    write_atomic(path, &csv_bytes(&rows)?)
}

fn record_timing(out: &Path, key: &str, secs: f64) -> Result<()> {
    let path = out.join("timings.json");
    let mut map: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
    map.insert(key.to_string(), secs);
    write_json(&path, &map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DualArg {
    Sw,
    Na,
}

impl From<DualArg> for DualKind {
    fn from(d: DualArg) -> Self {
        match d {
            DualArg::Sw => DualKind::Sw,
            DualArg::Na => DualKind::Na,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NaVarsArg {
    X,
    State,
    All,
}

impl From<NaVarsArg> for NaVars {
    fn from(v: NaVarsArg) -> Self {
        match v {
            NaVarsArg::X => NaVars::X,
            NaVarsArg::State => NaVars::State,
            NaVarsArg::All => NaVars::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundMethod {
    Pi,
    Sw,
    Na,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Condexp,
    Sw,
    Na,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Condexp => PolicyKind::CondExp,
            PolicyArg::Sw => PolicyKind::SwDriven,
            PolicyArg::Na => PolicyKind::NaDriven,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lddr", version, about = "Dual decision-rule bounds and policies for stochastic lot sizing")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Instance JSON (defaults to <out>/instance.json).
    #[arg(long, global = true)]
    pub instance: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub train_scen: Option<usize>,
    #[arg(long, global = true)]
    pub eval_scen: Option<usize>,
    #[arg(long, global = true)]
    pub node_limit: Option<usize>,
    #[arg(long, global = true)]
    pub time_limit: Option<f64>,
    /// Run scenario loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Fill the wall-time columns of CSV outputs.
    #[arg(long, global = true)]
    pub record_time: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an instance file.
    Gen {
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        products: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        rho_y: Option<f64>,
        #[arg(long)]
        mu_seed: Option<u64>,
        #[arg(long)]
        process_seed: Option<u64>,
    },
    /// Train dual coefficients on the training sample.
    Train {
        #[arg(long, value_enum)]
        dual: Option<DualArg>,
        #[arg(long)]
        basis: Option<u8>,
        #[arg(long, value_enum)]
        na_vars: Option<NaVarsArg>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Box bound on the weights.
        #[arg(long = "box")]
        box_bound: Option<f64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Estimate a lower bound on the evaluation sample.
    Bound {
        #[arg(long, value_enum)]
        method: BoundMethod,
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
    /// Simulate a policy on the evaluation sample (upper bound).
    Simulate {
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
    /// Run self-check suites.
    Verify {
        /// oracle, lemma2, gradient, condexp, process, or all.
        suite: Option<String>,
        #[arg(long = "verify")]
        verify: Option<String>,
    },
    /// Gap report over the results table in the output directory.
    Report,
}

/// Resolved inputs shared by the subcommands.
pub struct Context {
    pub cfg: RunConfig,
    pub common: Common,
}

impl Context {
    pub fn new(common: Common) -> Result<Self> {
        let mut cfg: RunConfig = match &common.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &common.out {
            cfg.out = v.clone();
        }
        if let Some(v) = common.seed {
            cfg.seed = v;
        }
        if let Some(v) = common.train_scen {
            cfg.train_scen = v;
        }
        if let Some(v) = common.eval_scen {
            cfg.eval_scen = v;
        }
        if let Some(v) = common.node_limit {
            cfg.node_limit = Some(v);
        }
        if let Some(v) = common.time_limit {
            cfg.time_limit = Some(v);
        }
        Ok(Self { cfg, common })
    }

    fn exec(&self) -> Execution {
        if self.common.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn instance_path(&self) -> PathBuf {
        self.common
            .instance
            .clone()
            .unwrap_or_else(|| self.cfg.out.join("instance.json"))
    }

    fn load_instance(&self) -> Result<MslotInstance> {
        let inst: MslotInstance = read_json(&self.instance_path())?;
        inst.process.validate()?;
        Ok(inst)
    }

    fn row(&self, inst: &MslotInstance, est: BoundEstimate, eval_hash: String, artifact: String, secs: f64) -> ResultRow {
        ResultRow {
            instance: inst.id.clone(),
            method: est.method,
            side: est.side,
            mean: est.mean,
            halfwidth: est.halfwidth,
            n: est.n,
            level: est.level,
            wall_time: self.common.record_time.then_some(secs),
            flags: est.flags.join(";"),
            config_hash: self.cfg.hash(),
            eval_hash,
            instance_hash: inst.hash(),
            artifact_hash: artifact,
        }
    }

    fn load_coeffs(&self, path: Option<&PathBuf>, kind: DualKind, inst: &MslotInstance) -> Result<(DualCoefficients, String)> {
        let p = path
            .cloned()
            .unwrap_or_else(|| self.cfg.out.join(format!("coeffs-{kind}.json")));
        if !p.exists() {
            return Err(Error::Config(format!("missing coefficient file {}", p.display())));
        }
        let bytes = fs::read(&p)?;
        let c: DualCoefficients = serde_json::from_slice(&bytes)?;
        if c.kind != kind {
            return Err(Error::Config(format!("{} holds {} coefficients, expected {kind}", p.display(), c.kind)));
        }
        if c.instance_hash != inst.hash() {
            return Err(Error::Config(format!("{} was trained on a different instance", p.display())));
        }
        let expect = BasisLayout::resolve(&c.layout.spec, inst)?;
        if expect != c.layout || c.weights.len() != c.layout.dim {
            return Err(Error::Structure(format!("{} does not match its basis layout", p.display())));
        }
        Ok((c, short_hash(&bytes)))
    }
}

/// What a subcommand produced, for callers and tests.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Written(Vec<PathBuf>),
    Row(ResultRow),
    Verified { passed: bool, lines: Vec<String> },
    Report(Vec<GapReport>),
}

pub fn cmd_gen(ctx: &mut Context, cmd: &Command) -> Result<Outcome> {
    if let Command::Gen { stages, products, rho, rho_y, mu_seed, process_seed } = cmd {
        let c = &mut ctx.cfg;
        c.stages = stages.unwrap_or(c.stages);
        c.products = products.unwrap_or(c.products);
        c.rho = rho.unwrap_or(c.rho);
        c.rho_y = rho_y.unwrap_or(c.rho_y);
        c.mu_seed = mu_seed.unwrap_or(c.mu_seed);
        c.process_seed = process_seed.unwrap_or(c.process_seed);
    }
    let c = &ctx.cfg;
    let mut inst = MslotInstance::generate(c.stages, c.products, c.rho, c.rho_y, c.mu_seed, c.process_seed)?;
    if inst.knobs != c.knobs {
        inst = MslotInstance::build(inst.id.clone(), inst.process.clone(), c.knobs.clone())?;
        inst.mu_seed = Some(c.mu_seed);
    }
    let path = ctx.instance_path();
    write_json(&path, &inst)?;
    Ok(Outcome::Written(vec![path]))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct TrainLogRow {
    iter: usize,
    step: String,
    candidate_value: f64,
    incumbent_value: f64,
    model_value: Option<f64>,
    delta: f64,
    wall_time: Option<f64>,
}

fn train_log(state: &MasterState, with_time: bool) -> Result<Vec<u8>> {
    let rows: Vec<TrainLogRow> = state
        .log
        .iter()
        .map(|r| TrainLogRow {
            iter: r.iter,
            step: format!("{:?}", r.step).to_lowercase(),
            candidate_value: r.candidate_value,
            incumbent_value: r.incumbent_value,
            model_value: r.model_value,
            delta: r.delta,
            wall_time: with_time.then_some(r.wall_time),
        })
        .collect();
    csv_bytes(&rows)
}

pub fn cmd_train(ctx: &mut Context, cmd: &Command) -> Result<Outcome> {
    let Command::Train { dual, basis, na_vars, max_iter, tol, box_bound, resume } = cmd else {
        unreachable!("train arguments")
    };
    let c = &mut ctx.cfg;
    if let Some(d) = dual {
        c.dual = (*d).into();
    }
    c.basis = basis.or(c.basis);
    if let Some(v) = na_vars {
        c.na_vars = (*v).into();
    }
    if let Some(v) = max_iter {
        c.master.max_iter = *v;
    }
    if let Some(v) = tol {
        c.master.tol = *v;
    }
    if let Some(v) = box_bound {
        c.master.box_bound = *v;
    }
    if let Some(tl) = ctx.common.time_limit {
        c.master.time_limit = Some(tl);
    }
    let inst = ctx.load_instance()?;
    let kind = ctx.cfg.dual;
    let layout = BasisLayout::resolve(&ctx.cfg.basis_spec(kind), &inst)?;
    let out = ctx.cfg.out.clone();
    let coeff_path = out.join(format!("coeffs-{kind}.json"));
    let ckpt_path = out.join(format!("checkpoint-{kind}.json"));
    let log_path = out.join(format!("train-{kind}.csv"));
    let start = Instant::now();

    if ctx.cfg.master.max_iter == 0 && !*resume {
        write_json(&coeff_path, &DualCoefficients::zeros(layout, &inst))?;
        return Ok(Outcome::Written(vec![coeff_path]));
    }
    let paths = ctx.cfg.train_paths(&inst)?;
    let oracle: Box<dyn DualOracle + '_> = match kind {
        DualKind::Sw => Box::new(SwDual::new(&inst, &inst.process, &layout, &paths)?),
        DualKind::Na => Box::new(NaDual::new(&inst, &inst.process, &layout, &paths)?),
    };
    let trainer = Trainer::new(oracle.as_ref(), ctx.cfg.master, ctx.exec());
    let state = if *resume && ckpt_path.exists() {
        let mut s: MasterState = read_json(&ckpt_path)?;
        if s.dim != layout.dim {
            return Err(Error::Structure("checkpoint does not match the basis".into()));
        }
        if matches!(s.status, Some(TrainStatus::IterationLimit | TrainStatus::TimeLimit)) {
            s.status = None;
        }
        Some(s)
    } else {
        None
    };
    let state = match state {
        Some(s) => s,
        None => {
            let s = trainer.init(None)?;
            write_json(&ckpt_path, &s)?;
            s
        }
    };
    let state = trainer.run_with(Some(state), |s| write_json(&ckpt_path, s))?;
    write_json(&ckpt_path, &state)?;
    write_atomic(&log_path, &train_log(&state, ctx.common.record_time)?)?;
    let coeffs = DualCoefficients::new(layout.clone(), state.incumbent.clone(), &inst)?;
    write_json(&coeff_path, &coeffs)?;
    record_timing(&out, &format!("{}:train-{kind}", inst.id), start.elapsed().as_secs_f64())?;
    log::info!(
        "trained {kind}: value {:.4}, {} iterations, {:?}",
        state.incumbent_value,
        state.iter,
        state.status
    );
    Ok(Outcome::Written(vec![coeff_path, log_path, ckpt_path]))
}

pub fn cmd_bound(ctx: &mut Context, cmd: &Command) -> Result<Outcome> {
    let Command::Bound { method, coeffs } = cmd else { unreachable!("bound arguments") };
    let inst = ctx.load_instance()?;
    let paths = ctx.cfg.eval_paths(&inst)?;
    if paths.is_empty() {
        return Err(Error::Parameter("empty evaluation sample".into()));
    }
    let start = Instant::now();
    let level = ctx.cfg.level;
    let (est, artifact) = match method {
        BoundMethod::Pi => {
            let v = pi_values(&inst, &paths, &SolveOptions::default(), ctx.exec())?;
            (confidence_interval(&v, level, Side::Lower, "pi")?, inst.hash())
        }
        BoundMethod::Sw | BoundMethod::Na => {
            let kind = if *method == BoundMethod::Sw { DualKind::Sw } else { DualKind::Na };
            let (c, h) = ctx.load_coeffs(coeffs.as_ref(), kind, &inst)?;
            let oracle: Box<dyn DualOracle + '_> = match kind {
                DualKind::Sw => Box::new(SwDual::new(&inst, &inst.process, &c.layout, &paths)?),
                DualKind::Na => Box::new(NaDual::new(&inst, &inst.process, &c.layout, &paths)?),
            };
            let (_, res) = evaluate_all(oracle.as_ref(), &c.weights, ctx.exec())?;
            let v: Vec<f64> = res.into_iter().map(|r| r.0).collect();
            (confidence_interval(&v, level, Side::Lower, &format!("{kind}-lb"))?, h)
        }
    };
    let secs = start.elapsed().as_secs_f64();
    let row = ctx.row(&inst, est, paths_hash(&paths), artifact, secs);
    upsert_result(&ctx.cfg.out.join("results.csv"), row.clone())?;
    record_timing(&ctx.cfg.out, &format!("{}:{}", inst.id, row.method), secs)?;
    Ok(Outcome::Row(row))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SimLogRow {
    scenario: usize,
    stage: usize,
    stage_cost: f64,
    cumulative_cost: f64,
    status: String,
    nodes: Option<i64>,
    time: Option<f64>,
}

pub fn cmd_simulate(ctx: &mut Context, cmd: &Command) -> Result<Outcome> {
    let Command::Simulate { policy, lambda, coeffs } = cmd else { unreachable!("simulate arguments") };
    if let Some(l) = lambda {
        ctx.cfg.lambda = *l;
    }
    let inst = ctx.load_instance()?;
    let kind: PolicyKind = (*policy).into();
    if kind == PolicyKind::NaDriven && inst.stages > ctx.cfg.na_policy_max_stages {
        return Err(Error::Parameter(format!(
            "na-driven policy limited to T <= {} (raise naPolicyMaxStages to override)",
            ctx.cfg.na_policy_max_stages
        )));
    }
    let (dual, artifact) = match kind {
        PolicyKind::CondExp => (None, inst.hash()),
        PolicyKind::SwDriven => {
            let (c, h) = ctx.load_coeffs(coeffs.as_ref(), DualKind::Sw, &inst)?;
            (Some(c), h)
        }
        PolicyKind::NaDriven => {
            let (c, h) = ctx.load_coeffs(coeffs.as_ref(), DualKind::Na, &inst)?;
            (Some(c), h)
        }
    };
    let mut cfg = PolicyConfig::new(kind, dual);
    cfg.lambda = ctx.cfg.lambda;
    cfg.node_limit = ctx.cfg.node_limit;
    cfg.time_limit = ctx.cfg.time_limit;
    cfg.sample_tag = format!("policy:{}", ctx.cfg.seed);
    let paths = ctx.cfg.eval_paths(&inst)?;
    if paths.is_empty() {
        return Err(Error::Parameter("empty evaluation sample".into()));
    }
    let start = Instant::now();
    let runs = simulate_all(&cfg, &inst, &inst.process, &paths, ctx.exec())?;
    let secs = start.elapsed().as_secs_f64();
    let mut log_rows = Vec::new();
    for r in &runs {
        let mut cum = 0.0;
        for s in &r.stages {
            cum += s.cost;
            log_rows.push(SimLogRow {
                scenario: r.scenario,
                stage: s.stage,
                stage_cost: s.cost,
                cumulative_cost: cum,
                status: s.status.clone(),
                nodes: s.nodes,
                time: ctx.common.record_time.then_some(s.wall_time),
            });
        }
    }
    write_atomic(&ctx.cfg.out.join(format!("sim-{}.csv", kind.tag())), &csv_bytes(&log_rows)?)?;
    let totals: Vec<f64> = runs.iter().map(|r| r.total).collect();
    let mut est = confidence_interval(&totals, ctx.cfg.level, Side::Upper, &format!("{}-ub", kind.tag()))?;
    if kind == PolicyKind::SwDriven {
        est.flags.push(format!("lambda={}", cfg.lambda));
    }
    let row = ctx.row(&inst, est, paths_hash(&paths), artifact, secs);
    upsert_result(&ctx.cfg.out.join("results.csv"), row.clone())?;
    record_timing(&ctx.cfg.out, &format!("{}:{}", inst.id, row.method), secs)?;
    Ok(Outcome::Row(row))
}

pub fn cmd_verify(ctx: &Context, cmd: &Command) -> Result<Outcome> {
    let Command::Verify { suite, verify } = cmd else { unreachable!("verify arguments") };
    let name = verify.clone().or_else(|| suite.clone()).unwrap_or_else(|| "all".into());
    let names: Vec<&str> = if name == "all" { SUITES.to_vec() } else { vec![name.as_str()] };
    let mut lines = Vec::new();
    let mut passed = true;
    for n in names {
        let rep = run_suite(n, ctx.exec())?;
        passed &= rep.passed();
        lines.extend(rep.lines());
    }
    Ok(Outcome::Verified { passed, lines })
}

/// Gap reports per instance from the results table.
pub fn build_reports(rows: &[ResultRow]) -> Vec<GapReport> {
    let mut by_inst: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        by_inst.entry(r.instance.as_str()).or_default().push(r);
    }
    by_inst
        .into_iter()
        .map(|(id, rs)| {
            let est: Vec<BoundEstimate> = rs.iter().map(|r| r.estimate()).collect();
            let mut rep = ordering_report(id, &est);
            let first = &rs[0].eval_hash;
            if rs.iter().any(|r| &r.eval_hash != first) {
                rep.flags.push("eval-sample-mismatch".into());
            }
            rep
        })
        .collect()
}

fn fmt_est(e: &Option<BoundEstimate>) -> String {
    e.as_ref()
        .map_or("-".into(), |b| format!("{:.1}±{:.1}", b.mean, b.halfwidth))
}

pub fn report_table(reports: &[GapReport]) -> String {
    let mut s = format!(
        "{:<28} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16} {:>8} {:>8}\n",
        "instance", "PI", "SW LB", "NA LB", "CondExp UB", "SW UB", "NA UB", "gap%", "closed%"
    );
    for r in reports {
        let pct = |v: Option<f64>| v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x));
        s.push_str(&format!(
            "{:<28} {:>16} {:>16} {:>16} {:>16} {:>16} {:>16} {:>8} {:>8}\n",
            r.instance,
            fmt_est(&r.pi),
            fmt_est(&r.sw_lb),
            fmt_est(&r.na_lb),
            fmt_est(&r.condexp_ub),
            fmt_est(&r.sw_ub),
            fmt_est(&r.na_ub),
            pct(r.initial_gap),
            pct(r.gap_closure)
        ));
        for f in &r.flags {
            s.push_str(&format!("  flag: {f}\n"));
        }
    }
    s
}

pub fn cmd_report(ctx: &Context) -> Result<Outcome> {
    let rows = read_results(&ctx.cfg.out.join("results.csv"))?;
    let reports = build_reports(&rows);
    write_json(&ctx.cfg.out.join("gap-report.json"), &reports)?;
    Ok(Outcome::Report(reports))
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    let mut ctx = Context::new(cli.common)?;
    match &cli.command {
        c @ Command::Gen { .. } => cmd_gen(&mut ctx, c),
        c @ Command::Train { .. } => cmd_train(&mut ctx, c),
        c @ Command::Bound { .. } => cmd_bound(&mut ctx, c),
        c @ Command::Simulate { .. } => cmd_simulate(&mut ctx, c),
        c @ Command::Verify { .. } => cmd_verify(&ctx, c),
        Command::Report => cmd_report(&ctx),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Solver { .. } | Error::Environment(_) => EXIT_SOLVER,
        _ => EXIT_USAGE,
    }
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(Outcome::Written(paths)) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            EXIT_OK
        }
        Ok(Outcome::Row(r)) => {
            println!(
                "{} {} {}: {:.4} ± {:.4} (n={})",
                r.instance,
                r.method,
                if r.side == Side::Lower { "lower" } else { "upper" },
                r.mean,
                r.halfwidth,
                r.n
            );
            EXIT_OK
        }
        Ok(Outcome::Verified { passed, lines }) => {
            for l in lines {
                println!("{l}");
            }
            if passed {
                EXIT_OK
            } else {
                EXIT_VERIFY
            }
        }
        Ok(Outcome::Report(reps)) => {
            print!("{}", report_table(&reps));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(out: &Path, rest: &[&str]) -> Vec<String> {
        let mut v = vec!["lddr".to_string(), "--out".into(), out.display().to_string(), "--sequential".into()];
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    #[test]
    fn gen_is_reproducible() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(run(args(d.path(), &["gen", "--stages", "4", "--products", "3"])), 0);
        let a = fs::read(d.path().join("instance.json")).unwrap();
        assert_eq!(run(args(d.path(), &["gen", "--stages", "4", "--products", "3"])), 0);
        assert_eq!(a, fs::read(d.path().join("instance.json")).unwrap());
        let inst: MslotInstance = serde_json::from_slice(&a).unwrap();
        assert_eq!((inst.stages, inst.products), (4, 3));
        assert_eq!((inst.process.rho, inst.process.rho_y), (0.6, 0.2));
    }

    #[test]
    fn dry_run_bound_and_report() {
        let d = tempfile::tempdir().unwrap();
        let o = d.path();
        assert_eq!(run(args(o, &["gen", "--stages", "2", "--products", "1"])), 0);
        assert_eq!(run(args(o, &["train", "--dual", "na", "--max-iter", "0"])), 0);
        let c: DualCoefficients = read_json(&o.join("coeffs-na.json")).unwrap();
        assert!(c.weights.iter().all(|w| *w == 0.0));
        // missing sw coefficients
        assert_eq!(run(args(o, &["--eval-scen", "3", "bound", "--method", "sw"])), EXIT_USAGE);
        assert_eq!(run(args(o, &["--eval-scen", "1", "bound", "--method", "pi"])), 0);
        let rows = read_results(&o.join("results.csv")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].halfwidth, 0.0);
        assert!(rows[0].wall_time.is_none());
        assert_eq!(run(args(o, &["--eval-scen", "3", "bound", "--method", "pi"])), 0);
        assert_eq!(run(args(o, &["--eval-scen", "3", "bound", "--method", "na"])), 0);
        let rows = read_results(&o.join("results.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].eval_hash, rows[1].eval_hash);
        // zero weights give the perfect-information bound
        assert!((rows[0].mean - rows[1].mean).abs() < 1e-9 * rows[0].mean);
        assert_eq!(run(args(o, &["report"])), 0);
        let reps: Vec<GapReport> = read_json(&o.join("gap-report.json")).unwrap();
        assert_eq!(reps.len(), 1);
        assert!(reps[0].flags.iter().any(|f| f == "missing:condexp-ub"));
    }

    #[test]
    fn empty_report_and_bad_args() {
        let d = tempfile::tempdir().unwrap();
        assert_eq!(run(args(d.path(), &["report"])), 0);
        let reps: Vec<GapReport> = read_json(&d.path().join("gap-report.json")).unwrap();
        assert!(reps.is_empty());
        assert_eq!(run(args(d.path(), &["bound"])), EXIT_USAGE);
        assert_eq!(run(args(d.path(), &["verify", "bogus"])), EXIT_USAGE);
        assert_eq!(run(["lddr", "--help"]), EXIT_OK);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let d = tempfile::tempdir().unwrap();
        let o = d.path();
        let base = ["--train-scen", "4"];
        assert_eq!(run(args(o, &["gen", "--stages", "2", "--products", "2"])), 0);
        let mut full = base.to_vec();
        full.extend(["train", "--dual", "sw", "--max-iter", "8"]);
        assert_eq!(run(args(o, &full)), 0);
        let a: DualCoefficients = read_json(&o.join("coeffs-sw.json")).unwrap();
        fs::remove_file(o.join("checkpoint-sw.json")).unwrap();
        let mut part = base.to_vec();
        part.extend(["train", "--dual", "sw", "--max-iter", "3"]);
        assert_eq!(run(args(o, &part)), 0);
        let mut rest = base.to_vec();
        rest.extend(["train", "--dual", "sw", "--max-iter", "8", "--resume"]);
        assert_eq!(run(args(o, &rest)), 0);
        let b: DualCoefficients = read_json(&o.join("coeffs-sw.json")).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn simulate_lambda_zero_equals_condexp() {
        let d = tempfile::tempdir().unwrap();
        let o = d.path();
        let base = ["--eval-scen", "3", "--train-scen", "3"];
        assert_eq!(run(args(o, &["gen", "--stages", "2", "--products", "1"])), 0);
        let mut t = base.to_vec();
        t.extend(["train", "--dual", "sw", "--max-iter", "2"]);
        assert_eq!(run(args(o, &t)), 0);
        let mut s = base.to_vec();
        s.extend(["simulate", "--policy", "condexp"]);
        assert_eq!(run(args(o, &s)), 0);
        let ce = fs::read_to_string(o.join("sim-condexp.csv")).unwrap();
        let mut s = base.to_vec();
        s.extend(["simulate", "--policy", "sw", "--lambda", "0"]);
        assert_eq!(run(args(o, &s)), 0);
        let sw = fs::read_to_string(o.join("sim-sw.csv")).unwrap();
        assert_eq!(ce, sw);
        let rows = read_results(&o.join("results.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean, rows[1].mean);
    }
}
