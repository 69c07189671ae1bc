//! Stage data for the multi-item lot-sizing model and prefix-tree model assembly.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::process::{ProcessParams, ScenarioPath};
use crate::solve::{Constraint, MipModel, RowSense, Sense};

/// Per-stage variable order: `x_j`, `i+_j`, `i-_j`, `y_j`, then `o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub products: usize,
}

impl VariableLayout {
    pub fn x(&self, j: usize) -> usize {
        j
    }
    pub fn inv(&self, j: usize) -> usize {
        self.products + j
    }
    pub fn backlog(&self, j: usize) -> usize {
        2 * self.products + j
    }
    pub fn setup(&self, j: usize) -> usize {
        3 * self.products + j
    }
    pub fn overtime(&self) -> usize {
        4 * self.products
    }
    pub fn len(&self) -> usize {
        4 * self.products + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, t: usize, v: usize) -> String {
        let j = self.products;
        match v / j.max(1) {
            _ if v == self.overtime() => format!("o_{t}"),
            0 => format!("x_{t}_{v}"),
            1 => format!("ip_{t}_{}", v - j),
            2 => format!("im_{t}_{}", v - 2 * j),
            _ => format!("y_{t}_{}", v - 3 * j),
        }
    }
}

/// Stage-`t` data for a realized history: costs, bounds, state equations
/// `A x_t + B x_{t-1} = b`, and recourse rows over stage variables only.
#[derive(Debug, Clone, PartialEq)]
pub struct StageBlock {
    pub stage: usize,
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub integer: Vec<bool>,
    pub state_a: Vec<Vec<(usize, f64)>>,
    /// Empty at the first stage.
    pub state_b: Vec<Vec<(usize, f64)>>,
    pub state_rhs: Vec<f64>,
    pub recourse: Vec<Constraint>,
}

impl StageBlock {
    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn num_state_rows(&self) -> usize {
        self.state_rhs.len()
    }

    pub fn cost_at(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Residual `A x + B prev - b` of each state row; `prev = None` means all zeros.
    pub fn state_residual(&self, x: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        (0..self.num_state_rows())
            .map(|r| {
                let ax: f64 = self.state_a[r].iter().map(|&(i, a)| a * x[i]).sum();
                let bx: f64 = match (prev, self.state_b.get(r)) {
                    (Some(p), Some(row)) => row.iter().map(|&(i, b)| b * p[i]).sum(),
                    _ => 0.0,
                };
                ax + bx - self.state_rhs[r]
            })
            .collect()
    }

    /// Largest violation of bounds and recourse rows.
    pub fn local_violation(&self, x: &[f64]) -> f64 {
        let b = (0..self.num_vars())
            .map(|i| (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0))
            .fold(0.0, f64::max);
        self.recourse
            .iter()
            .map(|r| r.violation(x))
            .fold(b, f64::max)
    }

    /// Adds this stage's variables and recourse rows to `m` with the given costs.
    pub fn add_local(&self, m: &mut MipModel, cost: &[f64], names: Option<&VariableLayout>) -> usize {
        let off = m.num_vars();
        for i in 0..self.num_vars() {
            let idx = m.add_var(cost[i], self.lower[i], self.upper[i], self.integer[i]);
            if let Some(l) = names {
                m.vars[idx].name = Some(l.name(self.stage, i));
            }
        }
        for row in &self.recourse {
            m.add_row(
                row.coefs.iter().map(|&(i, a)| (off + i, a)).collect(),
                row.sense,
                row.rhs,
            );
        }
        off
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct Knobs {
    pub backlog_factor: f64,
    pub ts_rel: f64,
    pub tbo: f64,
    pub setup_factor: f64,
    pub util: f64,
    pub inventory_factor: f64,
    pub overtime_factor: f64,
    pub holding_cost: f64,
    pub overtime_cost: f64,
    pub end_backlog_cost: f64,
    pub tb: f64,
    pub bigm_factor: f64,
    pub backlog_bound_factor: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Self {
            backlog_factor: 2.0,
            ts_rel: 0.25,
            tbo: 2.0,
            setup_factor: 1.2,
            util: 0.6,
            inventory_factor: 10.0,
            overtime_factor: 0.25,
            holding_cost: 15.0,
            overtime_cost: 100.0,
            end_backlog_cost: 150.0,
            tb: 1.0,
            bigm_factor: 6.0,
            backlog_bound_factor: 10.0,
        }
    }
}

impl Knobs {
    fn validate(&self) -> Result<()> {
        let all = [
            self.backlog_factor,
            self.ts_rel,
            self.tbo,
            self.setup_factor,
            self.util,
            self.inventory_factor,
            self.overtime_factor,
            self.holding_cost,
            self.overtime_cost,
            self.end_backlog_cost,
            self.tb,
            self.bigm_factor,
            self.backlog_bound_factor,
        ];
        if all.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("all knobs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MslotInstance {
    pub id: String,
    pub stages: usize,
    pub products: usize,
    pub process: ProcessParams,
    pub knobs: Knobs,
    /// Seed used to draw `process.mu` when it was generated.
    pub mu_seed: Option<u64>,
    pub holding: Vec<Vec<f64>>,
    pub backlog: Vec<Vec<f64>>,
    pub setup: Vec<Vec<f64>>,
    pub overtime_cost: Vec<f64>,
    pub setup_time: Vec<f64>,
    pub unit_time: Vec<f64>,
    pub capacity: Vec<f64>,
    pub inventory_cap: Vec<Vec<f64>>,
    pub overtime_cap: Vec<f64>,
    pub big_m: Vec<f64>,
    pub backlog_cap: Vec<f64>,
}

impl MslotInstance {
    pub fn build(id: impl Into<String>, process: ProcessParams, knobs: Knobs) -> Result<Self> {
        process.validate()?;
        knobs.validate()?;
        let (nt, nj) = (process.stages, process.products);
        let mu = &process.mu;
        let avg: Vec<f64> = (0..nj)
            .map(|j| (0..nt).map(|t| mu[t][j]).sum::<f64>() / nt as f64)
            .collect();
        let holding = vec![vec![knobs.holding_cost; nj]; nt];
        let backlog: Vec<Vec<f64>> = (0..nt)
            .map(|t| {
                (0..nj)
                    .map(|j| {
                        if t + 1 == nt {
                            knobs.end_backlog_cost
                        } else {
                            knobs.backlog_factor * holding[t][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let setup = (0..nt)
            .map(|t| {
                (0..nj)
                    .map(|j| knobs.setup_factor * avg[j] * knobs.tbo * knobs.tbo * holding[t][j])
                    .collect()
            })
            .collect();
        let capacity: Vec<f64> = (0..nt)
            .map(|t| 0.9 * mu[t].iter().sum::<f64>() / knobs.util)
            .collect();
        let inventory_cap: Vec<Vec<f64>> = (0..nt)
            .map(|_| avg.iter().map(|a| knobs.inventory_factor * a).collect())
            .collect();
        let backlog_cap = (0..nt)
            .map(|t| {
                (0..=t)
                    .map(|s| knobs.backlog_bound_factor * inventory_cap[s].iter().sum::<f64>())
                    .sum()
            })
            .collect();
        Ok(Self {
            id: id.into(),
            stages: nt,
            products: nj,
            knobs: knobs.clone(),
            mu_seed: None,
            holding,
            backlog,
            setup,
            overtime_cost: vec![knobs.overtime_cost; nt],
            setup_time: avg.iter().map(|a| knobs.ts_rel * a * knobs.tb).collect(),
            unit_time: vec![knobs.tb; nj],
            overtime_cap: capacity.iter().map(|c| knobs.overtime_factor * c).collect(),
            capacity,
            inventory_cap,
            big_m: avg.iter().map(|a| knobs.bigm_factor * a).collect(),
            backlog_cap,
            process,
        })
    }

    /// Draws `mu[t][j]` uniformly from `[40, 160]` and builds with default knobs.
    pub fn generate(
        stages: usize,
        products: usize,
        rho: f64,
        rho_y: f64,
        mu_seed: u64,
        process_seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(mu_seed);
        let mu: Vec<Vec<f64>> = (0..stages)
            .map(|_| (0..products).map(|_| rng.random_range(40.0..160.0)).collect())
            .collect();
        let process = ProcessParams::new(rho, rho_y, mu, process_seed)?;
        let id = format!("T{stages}-J{products}-r{rho}-ry{rho_y}-s{mu_seed}");
        let mut inst = Self::build(id, process, Knobs::default())?;
        inst.mu_seed = Some(mu_seed);
        Ok(inst)
    }

    pub fn layout(&self) -> VariableLayout {
        VariableLayout {
            products: self.products,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("instance serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_block(&self, t: usize, demand: &[f64]) -> Result<StageBlock> {
        if t >= self.stages {
            return Err(Error::Range(format!("stage {t} with T={}", self.stages)));
        }
        if demand.len() != self.products || demand.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Parameter(format!(
                "stage {t} demand must be {} nonnegative values",
                self.products
            )));
        }
        let l = self.layout();
        let nj = self.products;
        let n = l.len();
        let mut cost = vec![0.0; n];
        let lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut integer = vec![false; n];
        let next = (t + 1).min(self.stages - 1);
        for j in 0..nj {
            cost[l.inv(j)] = self.holding[t][j];
            cost[l.backlog(j)] = self.backlog[t][j];
            cost[l.setup(j)] = self.setup[t][j];
            upper[l.x(j)] = self.big_m[j];
            upper[l.inv(j)] = self.inventory_cap[t][j];
            upper[l.backlog(j)] = self.backlog_cap[t];
            upper[l.setup(j)] = 1.0;
            integer[l.setup(j)] = true;
        }
        cost[l.overtime()] = self.overtime_cost[t];
        upper[l.overtime()] = self.overtime_cap[t];

        let state_a = (0..nj)
            .map(|j| vec![(l.backlog(j), 1.0), (l.inv(j), -1.0)])
            .collect();
        let state_b = if t == 0 {
            Vec::new()
        } else {
            (0..nj)
                .map(|j| vec![(l.inv(j), 1.0), (l.backlog(j), -1.0), (l.x(j), 1.0)])
                .collect()
        };

        let mut recourse = Vec::with_capacity(1 + 2 * nj);
        let mut cap: Vec<(usize, f64)> = Vec::with_capacity(2 * nj + 1);
        for j in 0..nj {
            cap.push((l.setup(j), self.setup_time[j]));
            cap.push((l.x(j), self.unit_time[j]));
        }
        cap.push((l.overtime(), -1.0));
        recourse.push(Constraint {
            coefs: cap,
            sense: RowSense::Le,
            rhs: self.capacity[t],
        });
        for j in 0..nj {
            recourse.push(Constraint {
                coefs: vec![(l.setup(j), self.big_m[j]), (l.x(j), -1.0)],
                sense: RowSense::Ge,
                rhs: 0.0,
            });
            recourse.push(Constraint {
                coefs: vec![(l.inv(j), 1.0), (l.x(j), 1.0)],
                sense: RowSense::Le,
                rhs: self.inventory_cap[next][j],
            });
        }
        Ok(StageBlock {
            stage: t,
            cost,
            lower,
            upper,
            integer,
            state_a,
            state_b,
            state_rhs: demand.to_vec(),
            recourse,
        })
    }

    /// Stage decision with no production, setup, or overtime; demand goes to backlog.
    pub fn idle_decision(&self, demand: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        let l = self.layout();
        let mut x = vec![0.0; l.len()];
        for j in 0..self.products {
            let carried = prev.map_or(0.0, |p| p[l.inv(j)] - p[l.backlog(j)] + p[l.x(j)]);
            let r = demand[j] - carried;
            if r >= 0.0 {
                x[l.backlog(j)] = r;
            } else {
                x[l.inv(j)] = -r;
            }
        }
        x
    }
}

/// One node of a scenario prefix tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub stage: usize,
    pub parent: Option<usize>,
    pub demand: Vec<f64>,
    /// Probability mass on the node; scales its costs.
    pub weight: f64,
    /// Per-unit costs replacing the block's own costs.
    pub cost: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    pub model: MipModel,
    /// First variable index of each node.
    pub offsets: Vec<usize>,
    pub blocks: Vec<StageBlock>,
}

impl TreeModel {
    pub fn node_solution<'a>(&self, x: &'a [f64], node: usize) -> &'a [f64] {
        let n = self.blocks[node].num_vars();
        &x[self.offsets[node]..self.offsets[node] + n]
    }
}

/// Builds the linked MIP over a prefix tree. Roots sit at a common stage; when
/// that stage is past the first, `prev_state` fixes the preceding decisions.
pub fn build_tree_model(
    inst: &MslotInstance,
    nodes: &[TreeNode],
    prev_state: Option<&[f64]>,
) -> Result<TreeModel> {
    if nodes.is_empty() {
        return Err(Error::Structure("empty tree".into()));
    }
    let root_stage = nodes[0].stage;
    let layout = inst.layout();
    let mut m = MipModel::new(Sense::Minimize);
    let mut offsets = Vec::with_capacity(nodes.len());
    let mut blocks = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        match node.parent {
            None if node.stage != root_stage => {
                return Err(Error::Structure(format!("root {k} at stage {}", node.stage)))
            }
            Some(p) if p >= k || nodes[p].stage + 1 != node.stage => {
                return Err(Error::Structure(format!("node {k} has inconsistent parent {p}")))
            }
            _ => {}
        }
        let block = inst.stage_block(node.stage, &node.demand)?;
        let unit = node.cost.as_deref().unwrap_or(&block.cost);
        if unit.len() != block.num_vars() {
            return Err(Error::Structure(format!("node {k} cost length mismatch")));
        }
        let weighted: Vec<f64> = unit.iter().map(|c| c * node.weight).collect();
        let off = block.add_local(&mut m, &weighted, Some(&layout));
        for r in 0..block.num_state_rows() {
            let mut coefs: Vec<(usize, f64)> =
                block.state_a[r].iter().map(|&(i, a)| (off + i, a)).collect();
            let mut rhs = block.state_rhs[r];
            if let Some(brow) = block.state_b.get(r) {
                match node.parent {
                    Some(p) => coefs.extend(brow.iter().map(|&(i, b)| (offsets[p] + i, b))),
                    None => {
                        let prev = prev_state.ok_or_else(|| {
                            Error::Structure(format!(
                                "root at stage {} needs the previous stage decisions",
                                node.stage
                            ))
                        })?;
                        rhs -= brow.iter().map(|&(i, b)| b * prev[i]).sum::<f64>();
                    }
                }
            }
            m.add_row(coefs, RowSense::Eq, rhs);
        }
        offsets.push(off);
        blocks.push(block);
    }
    Ok(TreeModel {
        model: m,
        offsets,
        blocks,
    })
}

/// Prefix tree over stages `from..T` of `paths`; returns nodes and, per path,
/// the node visited at each of those stages.
pub fn prefix_tree(paths: &[ScenarioPath], from: usize) -> Result<(Vec<TreeNode>, Vec<Vec<usize>>)> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Structure("no paths".into()))?;
    let nt = first.stages();
    if from >= nt {
        return Err(Error::Range(format!("tree from stage {from} with T={nt}")));
    }
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut index: HashMap<(Option<usize>, Vec<u64>), usize> = HashMap::new();
    let mut visits = Vec::with_capacity(paths.len());
    for p in paths {
        if p.stages() != nt {
            return Err(Error::Structure(format!("path {} has {} stages", p.id, p.stages())));
        }
        let mut parent = None;
        let mut seq = Vec::with_capacity(nt - from);
        for t in from..nt {
            let key = (parent, p.demands[t].iter().map(|d| d.to_bits()).collect());
            let k = *index.entry(key).or_insert_with(|| {
                nodes.push(TreeNode {
                    stage: t,
                    parent,
                    demand: p.demands[t].clone(),
                    weight: 0.0,
                    cost: None,
                });
                nodes.len() - 1
            });
            nodes[k].weight += p.prob;
            seq.push(k);
            parent = Some(k);
        }
        visits.push(seq);
    }
    Ok((nodes, visits))
}

/// Extensive form over the given paths (probabilities are used as weights).
pub fn extensive_form(inst: &MslotInstance, paths: &[ScenarioPath]) -> Result<(TreeModel, Vec<Vec<usize>>)> {
    let (nodes, visits) = prefix_tree(paths, 0)?;
    Ok((build_tree_model(inst, &nodes, None)?, visits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solve::{solve, SolveOptions, SolveStatus};
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    pub(crate) fn flat(t: usize, j: usize, m: f64) -> MslotInstance {
        let p = ProcessParams::new(0.6, 0.2, vec![vec![m; j]; t], 5).unwrap();
        MslotInstance::build("flat", p, Knobs::default()).unwrap()
    }

    #[test]
    fn derived_parameters() {
        let inst = flat(4, 3, 100.0);
        assert!((inst.capacity[0] - 450.0).abs() < 1e-9);
        assert!((inst.overtime_cap[2] - 112.5).abs() < 1e-9);
        assert!((inst.inventory_cap[1][2] - 1000.0).abs() < 1e-9);
        assert!((inst.big_m[0] - 600.0).abs() < 1e-9);
        assert!((inst.setup[0][1] - 7200.0).abs() < 1e-9);
        assert!((inst.setup_time[1] - 25.0).abs() < 1e-9);
        assert_eq!(inst.holding[0][0], 15.0);
        assert_eq!(inst.backlog[2][0], 30.0);
        assert_eq!(inst.backlog[3][0], 150.0);
        assert!(inst.backlog[3][0] > inst.backlog[0][0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = ProcessParams::new(0.6, 0.2, vec![vec![100.0]; 2], 5).unwrap();
        let k = Knobs {
            util: 0.0,
            ..Knobs::default()
        };
        assert!(MslotInstance::build("bad", p, k).is_err());
        let inst = flat(2, 1, 100.0);
        assert!(inst.stage_block(2, &[1.0]).is_err());
        assert!(inst.stage_block(0, &[-1.0]).is_err());
    }

    #[test]
    fn first_stage_rows() {
        let inst = flat(3, 1, 100.0);
        let b = inst.stage_block(0, &[50.0]).unwrap();
        let l = inst.layout();
        assert!(b.state_b.is_empty());
        assert_eq!(b.state_a[0], vec![(l.backlog(0), 1.0), (l.inv(0), -1.0)]);
        assert_eq!(b.state_rhs, vec![50.0]);
        let setup = &b.recourse[1];
        assert_eq!(setup.coefs, vec![(l.setup(0), 600.0), (l.x(0), -1.0)]);
        assert_eq!(setup.sense, RowSense::Ge);
        let cap = &b.recourse[0];
        assert_eq!(cap.sense, RowSense::Le);
        assert!(cap.coefs.contains(&(l.overtime(), -1.0)));
        let b2 = inst.stage_block(1, &[50.0]).unwrap();
        assert_eq!(
            b2.state_b[0],
            vec![(l.inv(0), 1.0), (l.backlog(0), -1.0), (l.x(0), 1.0)]
        );
        assert_eq!(b2.num_vars(), l.len());
    }

    #[test]
    fn dimension_audit() {
        let inst = flat(4, 3, 80.0);
        for t in 0..4 {
            let b = inst.stage_block(t, &[10.0, 20.0, 30.0]).unwrap();
            let n = inst.layout().len();
            assert_eq!(b.cost.len(), n);
            assert_eq!(b.num_state_rows(), 3);
            for row in b.state_a.iter().chain(&b.state_b) {
                assert!(row.iter().all(|&(i, _)| i < n));
            }
            for row in &b.recourse {
                assert!(row.coefs.iter().all(|&(i, _)| i < n));
            }
            assert_eq!(b.integer.iter().filter(|&&f| f).count(), 3);
        }
    }

    #[test]
    fn single_stage_backlog_cost() {
        let inst = flat(2, 1, 100.0);
        let b = inst.stage_block(0, &[50.0]).unwrap();
        let node = TreeNode {
            stage: 0,
            parent: None,
            demand: vec![50.0],
            weight: 1.0,
            cost: None,
        };
        let tm = build_tree_model(&inst, &[node], None).unwrap();
        let r = solve(&tm.model, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.objective - 1500.0).abs() < 1e-6);
        // enumeration over the setup decision with the LP for each fixing
        let mut best = f64::INFINITY;
        for y in [0.0, 1.0] {
            let mut m = tm.model.clone();
            let l = inst.layout();
            m.vars[l.setup(0)].lower = y;
            m.vars[l.setup(0)].upper = y;
            m.vars[l.setup(0)].integer = false;
            best = best.min(solve(&m, &SolveOptions::default()).unwrap().objective);
        }
        assert!((best - r.objective).abs() < 1e-6);
        assert!(b.local_violation(&r.solution) < 1e-6);
    }

    #[test]
    fn two_leaf_extensive_form() {
        let inst = flat(2, 1, 100.0);
        let mk = |d2: f64, id| ScenarioPath {
            id,
            prob: 0.5,
            demands: vec![vec![80.0], vec![d2]],
            latent_y: vec![vec![1.0]; 2],
            latent_delta: vec![vec![0.0]; 2],
        };
        let paths = vec![mk(60.0, 0), mk(150.0, 1)];
        let (tm, visits) = extensive_form(&inst, &paths).unwrap();
        assert_eq!(tm.offsets.len(), 3);
        assert_eq!(visits[0][0], visits[1][0]);
        let r = solve(&tm.model, &SolveOptions::default()).unwrap();
        // hand expansion: fix the first-stage decision and price each leaf on its own
        let x1 = tm.node_solution(&r.solution, 0).to_vec();
        let first = tm.blocks[0].cost_at(&x1);
        let mut second = 0.0;
        for p in &paths {
            let node = TreeNode {
                stage: 1,
                parent: None,
                demand: p.demands[1].clone(),
                weight: 1.0,
                cost: None,
            };
            let sub = build_tree_model(&inst, &[node], Some(&x1)).unwrap();
            second += 0.5 * solve(&sub.model, &SolveOptions::default()).unwrap().objective;
        }
        assert!((r.objective - (first + second)).abs() < 1e-6 * r.objective.abs());
        let single = extensive_form(&inst, &paths[..1]).unwrap().0;
        assert_eq!(single.offsets.len(), 2);
    }

    #[test]
    fn tree_structure_errors() {
        let inst = flat(3, 1, 100.0);
        let n = TreeNode {
            stage: 1,
            parent: None,
            demand: vec![1.0],
            weight: 1.0,
            cost: None,
        };
        assert!(matches!(
            build_tree_model(&inst, &[n], None),
            Err(Error::Structure(_))
        ));
        let short = ScenarioPath {
            id: 0,
            prob: 1.0,
            demands: vec![vec![1.0]; 2],
            latent_y: vec![vec![1.0]; 2],
            latent_delta: vec![vec![1.0]; 2],
        };
        let full = ScenarioPath {
            demands: vec![vec![1.0]; 3],
            ..short.clone()
        };
        assert!(prefix_tree(&[full, short], 0).is_err());
    }

    #[test]
    fn instance_json_round_trip() {
        let a = MslotInstance::generate(3, 3, 0.6, 0.2, 9, 10).unwrap();
        let b = MslotInstance::generate(3, 3, 0.6, 0.2, 9, 10).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let back: MslotInstance = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(a.process.mu.iter().flatten().all(|&m| (40.0..160.0).contains(&m)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn relatively_complete_recourse(
            seed in any::<u64>(),
            demand in proptest::collection::vec(0.0..2000.0f64, 2),
            t in 1usize..4,
        ) {
            let inst = MslotInstance::generate(4, 2, 0.6, 0.2, seed, 1).unwrap();
            let l = inst.layout();
            // arbitrary feasible previous decision
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut prev = vec![0.0; l.len()];
            for j in 0..2 {
                let cap = inst.inventory_cap[t][j];
                let ip = rng.random_range(0.0..cap);
                prev[l.inv(j)] = ip;
                prev[l.x(j)] = rng.random_range(0.0..(cap - ip).min(inst.big_m[j]));
                prev[l.setup(j)] = 1.0;
                prev[l.backlog(j)] = rng.random_range(0.0..inst.backlog_cap[t - 1] / 4.0);
            }
            let b = inst.stage_block(t, &demand).unwrap();
            let x = inst.idle_decision(&demand, Some(&prev));
            prop_assert!(b.local_violation(&x) <= 1e-9);
            prop_assert!(b.state_residual(&x, Some(&prev)).iter().all(|r| r.abs() < 1e-9));
        }
    }
}
