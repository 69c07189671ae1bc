//! Rolling-horizon primal policies and their simulated costs.
//!
//! Every policy solves, at each stage, a lookahead model whose first block uses
//! the realized demand and the decisions already fixed, then keeps only that
//! block. Relatively complete recourse makes each lookahead feasible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affine::AffineObjective;
use crate::basis::{DualCoefficients, DualKind};
use crate::dual_sw::push_lookahead;
use crate::error::{Error, Result};
use crate::exec::{try_map_indices, Execution};
use crate::instance::{build_tree_model, MslotInstance, TreeModel, TreeNode};
use crate::process::{DemandProcess, FiniteSupportProcess, ScenarioPath, StreamKey};
use crate::solve::{solve_feasible, SolveOptions, SolveStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[serde(rename = "condexp")]
    CondExp,
    #[serde(rename = "sw")]
    SwDriven,
    #[serde(rename = "na")]
    NaDriven,
}

impl PolicyKind {
    pub fn tag(self) -> &'static str {
        match self {
            PolicyKind::CondExp => "condexp",
            PolicyKind::SwDriven => "sw",
            PolicyKind::NaDriven => "na",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub lambda: f64,
    pub raw_samples: usize,
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_iters: usize,
    pub coeffs: Option<DualCoefficients>,
    pub node_limit: Option<usize>,
    pub time_limit: Option<f64>,
    /// Stream tag for conditional samples drawn by the NA-driven policy.
    pub sample_tag: String,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, coeffs: Option<DualCoefficients>) -> Self {
        Self {
            kind,
            lambda: 0.25,
            raw_samples: 100,
            clusters: 24,
            kmeans_restarts: 50,
            kmeans_iters: 100,
            coeffs,
            node_limit: Some(10_000),
            time_limit: Some(60.0),
            sample_tag: "policy".into(),
        }
    }

    pub fn validate(&self, inst: &MslotInstance) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!("lambda {} not in [0,1]", self.lambda)));
        }
        let want = match self.kind {
            PolicyKind::CondExp => None,
            PolicyKind::SwDriven => Some(DualKind::Sw),
            PolicyKind::NaDriven => Some(DualKind::Na),
        };
        if let Some(k) = want {
            let c = self
                .coeffs
                .as_ref()
                .ok_or_else(|| Error::Parameter(format!("{} policy needs {k} coefficients", self.kind.tag())))?;
            if c.kind != k {
                return Err(Error::Parameter(format!(
                    "{} policy got {} coefficients",
                    self.kind.tag(),
                    c.kind
                )));
            }
            if c.stages != inst.stages || c.layout.products != inst.products {
                return Err(Error::Structure("coefficients do not match the instance".into()));
            }
        }
        if self.kind == PolicyKind::NaDriven && (self.clusters == 0 || self.clusters >= self.raw_samples) {
            return Err(Error::Parameter(format!(
                "{} clusters from {} samples",
                self.clusters, self.raw_samples
            )));
        }
        Ok(())
    }

    fn solve_opts(&self) -> SolveOptions {
        SolveOptions {
            node_limit: self.node_limit,
            time_limit: self.time_limit,
            ..SolveOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageRecord {
    pub stage: usize,
    pub decision: Vec<f64>,
    pub cost: f64,
    pub status: String,
    pub nodes: Option<i64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PolicyRun {
    pub scenario: usize,
    pub stages: Vec<StageRecord>,
    pub total: f64,
}

/// Chain of nodes from stage `t` to the horizon along `path`, with the given
/// per-stage unit costs and weights.
fn chain(path: &ScenarioPath, t: usize, nt: usize) -> Vec<TreeNode> {
    (t..nt)
        .map(|s| TreeNode {
            stage: s,
            parent: (s > t).then(|| s - t - 1),
            demand: path.demands[s].clone(),
            weight: 1.0,
            cost: None,
        })
        .collect()
}

fn check_prev(t: usize, prev: Option<&[f64]>) -> Result<Option<&[f64]>> {
    match (t, prev) {
        (0, _) => Ok(None),
        (_, Some(p)) => Ok(Some(p)),
        (_, None) => Err(Error::Structure(format!("stage {t} needs the previous decisions"))),
    }
}

/// Lookahead with realized stage-`t` demand and conditional means afterwards.
pub fn condexp_stage_model(
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    prev: Option<&[f64]>,
) -> Result<TreeModel> {
    if t >= inst.stages {
        return Err(Error::Range(format!("stage {t} with T={}", inst.stages)));
    }
    let forecast = process.conditional_mean_path(path, t);
    build_tree_model(inst, &chain(&forecast, t, inst.stages), check_prev(t, prev)?)
}

/// Conditional-expectation lookahead whose first-stage costs include `lambda`
/// times the expected next-stage state price, with later stages scaled by `1 - lambda`.
pub fn swdriven_stage_model(
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    prev: Option<&[f64]>,
    coeffs: &DualCoefficients,
    lambda: f64,
) -> Result<TreeModel> {
    if coeffs.kind != DualKind::Sw {
        return Err(Error::Parameter("sw-driven policy needs stagewise coefficients".into()));
    }
    if t >= inst.stages {
        return Err(Error::Range(format!("stage {t} with T={}", inst.stages)));
    }
    let forecast = process.conditional_mean_path(path, t);
    let mut nodes = chain(&forecast, t, inst.stages);
    let block = inst.stage_block(t, &path.demands[t])?;
    let next = if t + 1 < inst.stages {
        Some(inst.stage_block(t + 1, &forecast.demands[t + 1])?)
    } else {
        None
    };
    let mut obj = AffineObjective::new(block.cost.clone());
    push_lookahead(&mut obj, &coeffs.layout, next.as_ref(), process, path, t, lambda);
    nodes[0].cost = Some(obj.at(&coeffs.weights).0);
    for n in nodes.iter_mut().skip(1) {
        n.weight = 1.0 - lambda;
    }
    build_tree_model(inst, &nodes, check_prev(t, prev)?)
}

/// Weighted mean trajectories of `k` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means (Euclidean) with k-means++ seeding; keeps the lowest-inertia restart.
/// A restart that leaves a cluster empty is discarded.
pub fn cluster_scenarios(raw: &[Vec<f64>], k: usize, restarts: usize, iters: usize, key: &StreamKey) -> Result<Clusters> {
    let n = raw.len();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("{k} clusters from {n} points")));
    }
    let mut distinct: Vec<(Vec<f64>, usize)> = Vec::new();
    for p in raw {
        match distinct.iter_mut().find(|(q, _)| q == p) {
            Some(e) => e.1 += 1,
            None => distinct.push((p.clone(), 1)),
        }
    }
    if distinct.len() <= k {
        return Ok(Clusters {
            weights: distinct.iter().map(|(_, c)| *c as f64 / n as f64).collect(),
            means: distinct.into_iter().map(|(p, _)| p).collect(),
            inertia: 0.0,
        });
    }
    let mut best: Option<Clusters> = None;
    for r in 0..restarts.max(1) {
        let mut rng = key.rng(r as u64);
        let mut centers = vec![raw[rng.random_range(0..n)].clone()];
        while centers.len() < k {
            let d: Vec<f64> = raw
                .iter()
                .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            centers.push(raw[pick].clone());
        }
        let mut assign = vec![usize::MAX; n];
        let mut empty = false;
        for _ in 0..iters {
            let mut changed = false;
            for (i, p) in raw.iter().enumerate() {
                let mut a = 0;
                let mut bd = f64::INFINITY;
                for (c, ctr) in centers.iter().enumerate() {
                    let dd = sq_dist(p, ctr);
                    if dd < bd {
                        bd = dd;
                        a = c;
                    }
                }
                if assign[i] != a {
                    assign[i] = a;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; raw[0].len()]; k];
            let mut counts = vec![0usize; k];
            for (i, p) in raw.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                    *s += v;
                }
            }
            if counts.contains(&0) {
                empty = true;
                break;
            }
            for c in 0..k {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
            if !changed {
                break;
            }
        }
        if empty {
            log::debug!("k-means restart {r} left an empty cluster");
            continue;
        }
        let inertia: f64 = raw.iter().enumerate().map(|(i, p)| sq_dist(p, &centers[assign[i]])).sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            let mut counts = vec![0usize; k];
            for a in &assign {
                counts[*a] += 1;
            }
            best = Some(Clusters {
                means: centers,
                weights: counts.iter().map(|c| *c as f64 / n as f64).collect(),
                inertia,
            });
        }
    }
    best.ok_or_else(|| Error::Model("every k-means restart produced an empty cluster".into()))
}

/// First-stage decision of the two-stage problem over weighted continuations of
/// `path` after stage `t`. With NA coefficients, stage-`s` costs of each
/// continuation are shifted by the centered multipliers.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_decision(
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    prev: Option<&[f64]>,
    scenarios: &[(ScenarioPath, f64)],
    coeffs: Option<&DualCoefficients>,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveStatus, Option<i64>)> {
    if let Some(c) = coeffs {
        if c.kind != DualKind::Na {
            return Err(Error::Parameter("two-stage policy needs nonanticipative coefficients".into()));
        }
    }
    let nt = inst.stages;
    let mut nodes = vec![TreeNode {
        stage: t,
        parent: None,
        demand: path.demands[t].clone(),
        weight: 1.0,
        cost: None,
    }];
    for (sc, w) in scenarios {
        for s in t + 1..nt {
            let mut cost = inst.stage_block(s, &sc.demands[s])?.cost;
            if let Some(c) = coeffs {
                for row in c.layout.rows_at(s) {
                    let shift: f64 = row
                        .terms
                        .iter()
                        .zip(&c.weights[row.range()])
                        .map(|(term, a)| a * term.centered(process, sc, t))
                        .sum();
                    cost[row.index] += shift;
                }
            }
            nodes.push(TreeNode {
                stage: s,
                parent: Some(if s == t + 1 { 0 } else { nodes.len() - 1 }),
                demand: sc.demands[s].clone(),
                weight: *w,
                cost: Some(cost),
            });
        }
    }
    let tm = build_tree_model(inst, &nodes, check_prev(t, prev)?)?;
    let r = solve_feasible(&tm.model, opts, &format!("two-stage scenario {} stage {t}", path.id))?;
    if r.status == SolveStatus::LimitReached {
        log::info!("scenario {} stage {t}: limit reached, gap {:.2e}", path.id, r.gap);
    }
    Ok((tm.node_solution(&r.solution, 0).to_vec(), r.status, r.nodes))
}

/// Clustered conditional sample plus the conditional-mean trajectory.
pub fn nadriven_scenarios(
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    cfg: &PolicyConfig,
) -> Result<Vec<(ScenarioPath, f64)>> {
    let nt = process.stages();
    let raw = process.conditional_sample(path, t, cfg.raw_samples, &cfg.sample_tag)?;
    let flat: Vec<Vec<f64>> = raw
        .iter()
        .map(|p| p.demands[t + 1..nt].iter().flatten().copied().collect())
        .collect();
    let key = StreamKey::new(0, &format!("{}|kmeans:{}:{t}", cfg.sample_tag, path.id), 0);
    let cl = cluster_scenarios(&flat, cfg.clusters, cfg.kmeans_restarts, cfg.kmeans_iters, &key)?;
    let share = cl.means.len() as f64 / (cl.means.len() + 1) as f64;
    let j = process.products();
    let mut out: Vec<(ScenarioPath, f64)> = cl
        .means
        .iter()
        .zip(&cl.weights)
        .enumerate()
        .map(|(c, (m, w))| {
            let mut p = path.clone();
            p.id = c;
            for s in t + 1..nt {
                p.demands[s].copy_from_slice(&m[(s - t - 1) * j..(s - t) * j]);
            }
            (p, w * share)
        })
        .collect();
    let mut mean = process.conditional_mean_path(path, t);
    mean.id = out.len();
    out.push((mean, 1.0 - share));
    Ok(out)
}

/// NA-driven stage decision: two-stage problem over clustered continuations.
pub fn nadriven_stage_decision(
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    prev: Option<&[f64]>,
    cfg: &PolicyConfig,
) -> Result<(Vec<f64>, SolveStatus, Option<i64>)> {
    let coeffs = cfg
        .coeffs
        .as_ref()
        .filter(|c| c.kind == DualKind::Na)
        .ok_or_else(|| Error::Parameter("na-driven policy needs nonanticipative coefficients".into()))?;
    let opts = cfg.solve_opts();
    if t + 1 >= inst.stages {
        let tm = condexp_stage_model(inst, process, path, t, prev)?;
        let r = solve_feasible(&tm.model, &opts, &format!("scenario {} stage {t}", path.id))?;
        return Ok((tm.node_solution(&r.solution, 0).to_vec(), r.status, r.nodes));
    }
    let scenarios = nadriven_scenarios(process, path, t, cfg)?;
    two_stage_decision(inst, process, path, t, prev, &scenarios, Some(coeffs), &opts)
}

/// Runs the policy along `path`, fixing one stage at a time.
pub fn simulate(cfg: &PolicyConfig, inst: &MslotInstance, process: &dyn DemandProcess, path: &ScenarioPath) -> Result<PolicyRun> {
    cfg.validate(inst)?;
    if path.stages() != inst.stages {
        return Err(Error::Structure(format!("path has {} stages, instance {}", path.stages(), inst.stages)));
    }
    let opts = cfg.solve_opts();
    let mut stages: Vec<StageRecord> = Vec::with_capacity(inst.stages);
    for t in 0..inst.stages {
        let start = std::time::Instant::now();
        let prev = stages.last().map(|r| r.decision.as_slice());
        let ctx = format!("scenario {} stage {t}", path.id);
        let (x, status, nodes) = match cfg.kind {
            PolicyKind::CondExp | PolicyKind::SwDriven => {
                let tm = match (&cfg.kind, &cfg.coeffs) {
                    (PolicyKind::SwDriven, Some(c)) => swdriven_stage_model(inst, process, path, t, prev, c, cfg.lambda)?,
                    _ => condexp_stage_model(inst, process, path, t, prev)?,
                };
                let r = solve_feasible(&tm.model, &opts, &ctx)?;
                (tm.node_solution(&r.solution, 0).to_vec(), r.status, r.nodes)
            }
            PolicyKind::NaDriven => nadriven_stage_decision(inst, process, path, t, prev, cfg)
                .map_err(|e| e.with_context(&ctx))?,
        };
        let block = inst.stage_block(t, &path.demands[t])?;
        stages.push(StageRecord {
            stage: t,
            cost: block.cost_at(&x),
            decision: x,
            status: format!("{status:?}"),
            nodes,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(PolicyRun {
        scenario: path.id,
        total: stages.iter().map(|s| s.cost).sum(),
        stages,
    })
}

pub fn simulate_all(
    cfg: &PolicyConfig,
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    paths: &[ScenarioPath],
    exec: Execution,
) -> Result<Vec<PolicyRun>> {
    try_map_indices(exec, paths.len(), |s| simulate(cfg, inst, process, &paths[s]))
}

/// Probability-weighted policy cost over every path of a finite tree.
pub fn exact_policy_expectation(cfg: &PolicyConfig, inst: &MslotInstance, tree: &FiniteSupportProcess) -> Result<f64> {
    let paths = tree.enumerate_paths();
    let runs = simulate_all(cfg, inst, tree, &paths, Execution::Sequential)?;
    Ok(runs.iter().zip(&paths).map(|(r, p)| r.total * p.prob).sum())
}
