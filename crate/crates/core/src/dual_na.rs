//! Nonanticipative Lagrangian relaxation restricted to basis-function multipliers.
//!
//! Each sample path is solved as its own deterministic multi-stage problem.
//! A penalized variable `v` at stage `t` gets the extra cost
//! `sum_k alpha_k (psi_k - E[psi_k | history_t])`; with all weights zero this
//! is the perfect-information problem of the path.

use crate::affine::AffineObjective;
use crate::basis::{BasisLayout, DualKind};
use crate::error::{Error, Result};
use crate::evalstat::{confidence_interval, BoundEstimate, Side};
use crate::exec::{try_map_indices, Execution};
use crate::instance::{build_tree_model, MslotInstance, TreeModel, TreeNode};
use crate::master::{evaluate_all, Cut, DualOracle};
use crate::process::{DemandProcess, ScenarioPath};
use crate::solve::{solve_feasible, SolveOptions};

/// Single-path model with stages linked by the state equations.
pub fn path_model(inst: &MslotInstance, path: &ScenarioPath) -> Result<TreeModel> {
    let nodes: Vec<TreeNode> = (0..inst.stages)
        .map(|t| TreeNode {
            stage: t,
            parent: t.checked_sub(1),
            demand: path.demands[t].clone(),
            weight: 1.0,
            cost: None,
        })
        .collect();
    build_tree_model(inst, &nodes, None)
}

/// Path objective affine in the weights, over the variables of `model`.
pub fn na_affine_objective(
    layout: &BasisLayout,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    model: &TreeModel,
) -> Result<AffineObjective> {
    if layout.spec.kind != DualKind::Na {
        return Err(Error::Parameter("nonanticipative objective needs an NA basis".into()));
    }
    let mut obj = AffineObjective::new(model.model.vars.iter().map(|v| v.cost).collect());
    for row in &layout.rows {
        let var = model.offsets[row.stage] + row.index;
        for (k, term) in row.terms.iter().enumerate() {
            let c = term.centered(process, path, row.stage);
            obj.push(row.offset + k, vec![(var, c)], 0.0);
        }
    }
    Ok(obj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaEvaluation {
    pub value: f64,
    /// Per-stage solution blocks.
    pub solution: Vec<Vec<f64>>,
    pub gradient: Vec<f64>,
}

struct PathData {
    model: TreeModel,
    objective: AffineObjective,
}

/// Restricted nonanticipative dual on a fixed scenario set.
pub struct NaDual<'a> {
    pub inst: &'a MslotInstance,
    pub layout: &'a BasisLayout,
    pub paths: &'a [ScenarioPath],
    pub solve_opts: SolveOptions,
    data: Vec<PathData>,
}

impl<'a> NaDual<'a> {
    pub fn new(
        inst: &'a MslotInstance,
        process: &'a dyn DemandProcess,
        layout: &'a BasisLayout,
        paths: &'a [ScenarioPath],
    ) -> Result<Self> {
        if layout.spec.kind != DualKind::Na {
            return Err(Error::Parameter("nonanticipative dual needs an NA basis".into()));
        }
        let data = paths
            .iter()
            .map(|p| {
                let model = path_model(inst, p)?;
                let objective = na_affine_objective(layout, process, p, &model)?;
                Ok(PathData { model, objective })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inst,
            layout,
            paths,
            solve_opts: SolveOptions::default(),
            data,
        })
    }

    pub fn evaluate_na(&self, s: usize, w: &[f64]) -> Result<NaEvaluation> {
        let d = &self.data[s];
        let (cost, k) = d.objective.at(w);
        let mut m = d.model.model.clone();
        for (v, c) in m.vars.iter_mut().zip(&cost) {
            v.cost = *c;
        }
        let ctx = format!("na scenario {}", self.paths[s].id);
        let r = solve_feasible(&m, &self.solve_opts, &ctx)?;
        let mut gradient = vec![0.0; self.layout.dim];
        d.objective.accumulate_gradient(&r.solution, &mut gradient);
        let solution = (0..self.inst.stages)
            .map(|t| d.model.node_solution(&r.solution, t).to_vec())
            .collect();
        Ok(NaEvaluation {
            value: r.objective + k,
            solution,
            gradient,
        })
    }

    pub fn na_cut(&self, w: &[f64], exec: Execution) -> Result<Vec<Cut>> {
        let (_, res) = evaluate_all(self, w, exec)?;
        Ok(res
            .into_iter()
            .enumerate()
            .map(|(s, (v, g))| Cut::from_eval(s, 0, w, v, g))
            .collect())
    }
}

impl DualOracle for NaDual<'_> {
    fn dim(&self) -> usize {
        self.layout.dim
    }

    fn num_scenarios(&self) -> usize {
        self.paths.len()
    }

    fn prob(&self, s: usize) -> f64 {
        self.paths[s].prob
    }

    fn evaluate(&self, s: usize, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = self.evaluate_na(s, w)?;
        Ok((ev.value, ev.gradient))
    }
}

/// Perfect-information value of each path.
pub fn pi_values(
    inst: &MslotInstance,
    paths: &[ScenarioPath],
    opts: &SolveOptions,
    exec: Execution,
) -> Result<Vec<f64>> {
    try_map_indices(exec, paths.len(), |s| {
        let m = path_model(inst, &paths[s])?;
        let ctx = format!("pi scenario {}", paths[s].id);
        Ok(solve_feasible(&m.model, opts, &ctx)?.objective)
    })
}

pub fn pi_bound(
    inst: &MslotInstance,
    paths: &[ScenarioPath],
    level: f64,
    exec: Execution,
) -> Result<BoundEstimate> {
    if paths.is_empty() {
        return Err(Error::Parameter("no evaluation paths".into()));
    }
    let v = pi_values(inst, paths, &SolveOptions::default(), exec)?;
    confidence_interval(&v, level, Side::Lower, "pi")
}
