//! Stagewise Lagrangian relaxation restricted to basis-function multipliers.
//!
//! State equations `A_t x_t + B_t x_{t-1} = b_t` of stages after the first
//! are priced with `pi_t = sum_k beta_tk phi_k(history_t)`. The relaxation
//! separates into one problem per (scenario, stage):
//!
//! `min (c_t + A_t' pi_t + E[B_{t+1}' pi_{t+1} | history_t]) x_t - pi_t' b_t`
//!
//! over the stage's own bounds and recourse rows. First-stage state
//! equations stay in the first-stage problem.

use crate::affine::AffineObjective;
use crate::basis::{BasisLayout, DualCoefficients, DualKind};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::instance::{MslotInstance, StageBlock};
use crate::master::{evaluate_all, Cut, DualOracle};
use crate::process::{DemandProcess, ScenarioPath};
use crate::solve::{solve_feasible, MipModel, RowSense, Sense, SolveOptions};

/// Adds the conditional-expectation lookahead `E[B_{t+1}' pi_{t+1} | history_t]`
/// to `obj` (no-op at the last stage).
pub fn push_lookahead(
    obj: &mut AffineObjective,
    layout: &BasisLayout,
    next: Option<&StageBlock>,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
    scale: f64,
) {
    let Some(next) = next else { return };
    for row in layout.rows_at(t + 1) {
        let b = &next.state_b[row.index];
        for (k, term) in row.terms.iter().enumerate() {
            let e = term.conditional(process, path, t) * scale;
            obj.push(row.offset + k, b.iter().map(|&(v, a)| (v, a * e)).collect(), 0.0);
        }
    }
}

/// Stage-`t` block and its weight-affine relaxed objective on `path`.
pub fn sw_affine_objective(
    layout: &BasisLayout,
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
) -> Result<(StageBlock, AffineObjective)> {
    if layout.spec.kind != DualKind::Sw {
        return Err(Error::Parameter("stagewise objective needs a stagewise basis".into()));
    }
    let block = inst.stage_block(t, &path.demands[t])?;
    let mut obj = AffineObjective::new(block.cost.clone());
    for row in layout.rows_at(t) {
        let a = &block.state_a[row.index];
        let rhs = block.state_rhs[row.index];
        for (k, term) in row.terms.iter().enumerate() {
            let phi = term.value(path);
            obj.push(
                row.offset + k,
                a.iter().map(|&(v, c)| (v, c * phi)).collect(),
                -phi * rhs,
            );
        }
    }
    let next = if t + 1 < inst.stages {
        Some(inst.stage_block(t + 1, &path.demands[t + 1])?)
    } else {
        None
    };
    push_lookahead(&mut obj, layout, next.as_ref(), process, path, t, 1.0);
    Ok((block, obj))
}

/// Stage-`t` cost vector and constant at the given coefficients.
pub fn sw_stage_objective(
    coeffs: &DualCoefficients,
    inst: &MslotInstance,
    process: &dyn DemandProcess,
    path: &ScenarioPath,
    t: usize,
) -> Result<(Vec<f64>, f64)> {
    if coeffs.kind != DualKind::Sw {
        return Err(Error::Parameter("coefficients are not stagewise".into()));
    }
    let (_, obj) = sw_affine_objective(&coeffs.layout, inst, process, path, t)?;
    Ok(obj.at(&coeffs.weights))
}

fn stage_model(block: &StageBlock, keep_state: bool) -> MipModel {
    let mut m = MipModel::new(Sense::Minimize);
    block.add_local(&mut m, &block.cost, None);
    if keep_state {
        for (r, row) in block.state_a.iter().enumerate() {
            m.add_row(row.clone(), RowSense::Eq, block.state_rhs[r]);
        }
    }
    m
}

struct StageData {
    model: MipModel,
    objective: AffineObjective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwEvaluation {
    /// Folded stage values (including constants).
    pub stage_values: Vec<f64>,
    pub constants: Vec<f64>,
    pub solutions: Vec<Vec<f64>>,
    pub total: f64,
    pub gradient: Vec<f64>,
}

/// Restricted stagewise dual on a fixed scenario set.
pub struct SwDual<'a> {
    pub inst: &'a MslotInstance,
    pub layout: &'a BasisLayout,
    pub paths: &'a [ScenarioPath],
    pub solve_opts: SolveOptions,
    stages: Vec<Vec<StageData>>,
}

impl<'a> SwDual<'a> {
    pub fn new(
        inst: &'a MslotInstance,
        process: &'a dyn DemandProcess,
        layout: &'a BasisLayout,
        paths: &'a [ScenarioPath],
    ) -> Result<Self> {
        if layout.spec.kind != DualKind::Sw {
            return Err(Error::Parameter("stagewise dual needs a stagewise basis".into()));
        }
        let stages = paths
            .iter()
            .map(|p| {
                (0..inst.stages)
                    .map(|t| {
                        let (block, objective) = sw_affine_objective(layout, inst, process, p, t)?;
                        Ok(StageData {
                            model: stage_model(&block, t == 0),
                            objective,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inst,
            layout,
            paths,
            solve_opts: SolveOptions::default(),
            stages,
        })
    }

    pub fn evaluate_sw(&self, s: usize, w: &[f64]) -> Result<SwEvaluation> {
        let nt = self.inst.stages;
        let mut ev = SwEvaluation {
            stage_values: Vec::with_capacity(nt),
            constants: Vec::with_capacity(nt),
            solutions: Vec::with_capacity(nt),
            total: 0.0,
            gradient: vec![0.0; self.layout.dim],
        };
        for (t, data) in self.stages[s].iter().enumerate() {
            let (cost, k) = data.objective.at(w);
            let mut m = data.model.clone();
            for (v, c) in m.vars.iter_mut().zip(&cost) {
                v.cost = *c;
            }
            let ctx = format!("sw scenario {} stage {t}", self.paths[s].id);
            let r = solve_feasible(&m, &self.solve_opts, &ctx)?;
            data.objective.accumulate_gradient(&r.solution, &mut ev.gradient);
            ev.stage_values.push(r.objective + k);
            ev.constants.push(k);
            ev.total += r.objective + k;
            ev.solutions.push(r.solution);
        }
        Ok(ev)
    }

    /// One cut per scenario at `w`.
    pub fn sw_cut(&self, w: &[f64], exec: Execution) -> Result<Vec<Cut>> {
        let (_, res) = evaluate_all(self, w, exec)?;
        Ok(res
            .into_iter()
            .enumerate()
            .map(|(s, (v, g))| Cut::from_eval(s, 0, w, v, g))
            .collect())
    }
}

impl DualOracle for SwDual<'_> {
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
        let ev = self.evaluate_sw(s, w)?;
        Ok((ev.total, ev.gradient))
    }
}
