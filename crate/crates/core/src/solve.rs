//! Narrow interface over the HiGHS LP/MIP backend.
//!
//! Every subproblem in the crate (stage relaxations, path problems, policy
//! look-aheads, oracle extensive forms and the cutting-plane master) is built
//! as a [`MipModel`] and handed to [`solve`]. Models are rebuilt per solve.

use std::fmt::Write as _;
use std::time::Instant;

use highs::{HighsModelStatus, HighsSolutionStatus, RowProblem};

use crate::error::{Error, Result};

/// Primal feasibility tolerance used when auditing returned solutions.
pub const FEAS_TOL: f64 = 1e-6;
/// Integrality tolerance used when auditing returned solutions.
pub const INT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub cost: f64,
    pub lower: f64,
    pub upper: f64,
    pub integer: bool,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coefs: Vec<(usize, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coefs.iter().map(|&(i, a)| a * x[i]).sum()
    }

    /// Amount by which `x` violates this row (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.activity(x);
        match self.sense {
            RowSense::Le => (lhs - self.rhs).max(0.0),
            RowSense::Ge => (self.rhs - lhs).max(0.0),
            RowSense::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// A linear model with optional integrality.
#[derive(Debug, Clone, PartialEq)]
pub struct MipModel {
    pub sense: Sense,
    pub vars: Vec<Variable>,
    pub rows: Vec<Constraint>,
    pub offset: f64,
}

impl MipModel {
    pub fn new(sense: Sense) -> Self {
        Self {
            sense,
            vars: Vec::new(),
            rows: Vec::new(),
            offset: 0.0,
        }
    }

    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64, integer: bool) -> usize {
        self.vars.push(Variable {
            cost,
            lower,
            upper,
            integer,
            name: None,
        });
        self.vars.len() - 1
    }

    pub fn add_named_var(
        &mut self,
        name: impl Into<String>,
        cost: f64,
        lower: f64,
        upper: f64,
        integer: bool,
    ) -> usize {
        let idx = self.add_var(cost, lower, upper, integer);
        self.vars[idx].name = Some(name.into());
        idx
    }

    pub fn add_row(&mut self, coefs: Vec<(usize, f64)>, sense: RowSense, rhs: f64) -> usize {
        self.rows.push(Constraint { coefs, sense, rhs });
        self.rows.len() - 1
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_mip(&self) -> bool {
        self.vars.iter().any(|v| v.integer)
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.offset
            + self
                .vars
                .iter()
                .zip(x)
                .map(|(v, xi)| v.cost * xi)
                .sum::<f64>()
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let bounds = self
            .vars
            .iter()
            .zip(x)
            .map(|(v, &xi)| (v.lower - xi).max(xi - v.upper).max(0.0))
            .fold(0.0, f64::max);
        let rows = self
            .rows
            .iter()
            .map(|r| r.violation(x))
            .fold(0.0, f64::max);
        bounds.max(rows)
    }

    pub fn max_integrality_violation(&self, x: &[f64]) -> f64 {
        self.vars
            .iter()
            .zip(x)
            .filter(|(v, _)| v.integer)
            .map(|(_, &xi)| (xi - xi.round()).abs())
            .fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        for (i, v) in self.vars.iter().enumerate() {
            if v.lower.is_nan() || v.upper.is_nan() || !v.cost.is_finite() {
                return Err(Error::Model(format!("variable {i} has non-finite data")));
            }
            if v.lower > v.upper {
                return Err(Error::Model(format!(
                    "variable {i} has lower {} > upper {}",
                    v.lower, v.upper
                )));
            }
            if v.integer && !(v.lower.is_finite() && v.upper.is_finite()) {
                return Err(Error::Model(format!("integer variable {i} is unbounded")));
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            if !row.rhs.is_finite() {
                return Err(Error::Model(format!("row {r} has non-finite rhs")));
            }
            for &(i, a) in &row.coefs {
                if i >= n {
                    return Err(Error::Model(format!("row {r} references variable {i} >= {n}")));
                }
                if !a.is_finite() {
                    return Err(Error::Model(format!("row {r} has non-finite coefficient")));
                }
            }
        }
        Ok(())
    }

    /// CPLEX-LP text for debugging.
    pub fn to_lp_string(&self) -> String {
        let name = |i: usize| -> String {
            self.vars[i]
                .name
                .clone()
                .unwrap_or_else(|| format!("v{i}"))
        };
        let term = |a: f64, v: String| -> String {
            if a < 0.0 {
                format!(" - {} {}", -a, v)
            } else {
                format!(" + {} {}", a, v)
            }
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}",
            match self.sense {
                Sense::Minimize => "Minimize",
                Sense::Maximize => "Maximize",
            }
        );
        let mut obj = String::from(" obj:");
        for (i, v) in self.vars.iter().enumerate() {
            if v.cost != 0.0 {
                obj.push_str(&term(v.cost, name(i)));
            }
        }
        let _ = writeln!(s, "{obj}");
        let _ = writeln!(s, "Subject To");
        for (r, row) in self.rows.iter().enumerate() {
            let mut line = format!(" r{r}:");
            for &(i, a) in &row.coefs {
                line.push_str(&term(a, name(i)));
            }
            let op = match row.sense {
                RowSense::Le => "<=",
                RowSense::Eq => "=",
                RowSense::Ge => ">=",
            };
            let _ = writeln!(s, "{line} {op} {}", row.rhs);
        }
        let _ = writeln!(s, "Bounds");
        for (i, v) in self.vars.iter().enumerate() {
            let lo = if v.lower.is_finite() {
                v.lower.to_string()
            } else {
                "-inf".into()
            };
            let hi = if v.upper.is_finite() {
                v.upper.to_string()
            } else {
                "+inf".into()
            };
            let _ = writeln!(s, " {lo} <= {} <= {hi}", name(i));
        }
        let ints: Vec<String> = (0..self.vars.len())
            .filter(|&i| self.vars[i].integer)
            .map(name)
            .collect();
        if !ints.is_empty() {
            let _ = writeln!(s, "General\n {}", ints.join(" "));
        }
        let _ = writeln!(s, "End");
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub rel_gap: f64,
    pub time_limit: Option<f64>,
    pub node_limit: Option<usize>,
    pub threads: u32,
    pub seed: i32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rel_gap: 1e-6,
            time_limit: None,
            node_limit: None,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    LimitReached,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub objective: f64,
    pub solution: Vec<f64>,
    pub gap: f64,
    /// Branch-and-bound nodes, when the backend reports them.
    pub nodes: Option<i64>,
    pub wall_time: f64,
}

impl SolveResult {
    pub fn has_solution(&self) -> bool {
        !self.solution.is_empty() || self.status == SolveStatus::Optimal
    }
}

/// Solves `model` with the configured backend.
pub fn solve(model: &MipModel, opts: &SolveOptions) -> Result<SolveResult> {
    model.validate()?;
    let start = Instant::now();

    if model.vars.is_empty() {
        let feasible = model.rows.iter().all(|r| r.violation(&[]) <= FEAS_TOL);
        return Ok(SolveResult {
            status: if feasible {
                SolveStatus::Optimal
            } else {
                SolveStatus::Infeasible
            },
            objective: model.offset,
            solution: Vec::new(),
            gap: 0.0,
            nodes: None,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }

    let mut pb = RowProblem::default();
    let cols: Vec<_> = model
        .vars
        .iter()
        .map(|v| pb.add_column_with_integrality(v.cost, v.lower..=v.upper, v.integer))
        .collect();
    for row in &model.rows {
        let coefs: Vec<_> = row.coefs.iter().map(|&(i, a)| (cols[i], a)).collect();
        match row.sense {
            RowSense::Le => pb.add_row(..=row.rhs, coefs),
            RowSense::Ge => pb.add_row(row.rhs.., coefs),
            RowSense::Eq => pb.add_row(row.rhs..=row.rhs, coefs),
        }
    }
    let sense = match model.sense {
        Sense::Minimize => highs::Sense::Minimise,
        Sense::Maximize => highs::Sense::Maximise,
    };
    let mut hm = pb
        .try_optimise(sense)
        .map_err(|s| Error::Environment(format!("HiGHS rejected model: {s:?}")))?;
    hm.make_quiet();
    let opt_err = |key: &str, e: highs::TrySetOptionError| {
        Error::Environment(format!("HiGHS option {key}: {e:?}"))
    };
    hm.try_set_option("threads", opts.threads.max(1) as i32)
        .map_err(|e| opt_err("threads", e))?;
    hm.try_set_option("random_seed", opts.seed)
        .map_err(|e| opt_err("random_seed", e))?;
    if model.is_mip() {
        hm.try_set_option("mip_rel_gap", opts.rel_gap)
            .map_err(|e| opt_err("mip_rel_gap", e))?;
        // The feasibility-jump heuristic dominates runtime on small stage models
        // and never changes the optimum.
        hm.try_set_option("mip_heuristic_run_feasibility_jump", false)
            .map_err(|e| opt_err("mip_heuristic_run_feasibility_jump", e))?;
        if let Some(nodes) = opts.node_limit {
            hm.try_set_option("mip_max_nodes", nodes.min(i32::MAX as usize) as i32)
                .map_err(|e| opt_err("mip_max_nodes", e))?;
        }
    }
    if let Some(tl) = opts.time_limit {
        hm.try_set_option("time_limit", tl)
            .map_err(|e| opt_err("time_limit", e))?;
    }

    let solved = hm
        .try_solve()
        .map_err(|s| Error::Environment(format!("HiGHS run failed: {s:?}")))?;
    let raw = solved.status();
    let status = match raw {
        HighsModelStatus::Optimal => SolveStatus::Optimal,
        HighsModelStatus::Infeasible => SolveStatus::Infeasible,
        HighsModelStatus::Unbounded | HighsModelStatus::UnboundedOrInfeasible => {
            SolveStatus::Unbounded
        }
        HighsModelStatus::ReachedTimeLimit
        | HighsModelStatus::ReachedIterationLimit
        | HighsModelStatus::ReachedSolutionLimit
        | HighsModelStatus::ReachedInterrupt
        | HighsModelStatus::ReachedMemoryLimit
        | HighsModelStatus::ObjectiveBound
        | HighsModelStatus::ObjectiveTarget => SolveStatus::LimitReached,
        other => {
            return Err(Error::Solver {
                context: "backend".into(),
                status: format!("{other:?}"),
            })
        }
    };

    let feasible_point = match status {
        SolveStatus::Optimal => true,
        SolveStatus::LimitReached => {
            solved.primal_solution_status() == HighsSolutionStatus::Feasible
        }
        _ => false,
    };
    let (solution, objective) = if feasible_point {
        let x = solved.get_solution().columns().to_vec();
        let obj = model.objective_at(&x);
        (x, obj)
    } else {
        (Vec::new(), f64::NAN)
    };
    let gap = if model.is_mip() && feasible_point {
        let g = solved.mip_gap();
        if g.is_finite() {
            g
        } else {
            0.0
        }
    } else {
        0.0
    };
    let nodes = if model.is_mip() {
        node_count(&solved)
    } else {
        None
    };
    Ok(SolveResult {
        status,
        objective,
        solution,
        gap,
        nodes,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn node_count(solved: &highs::SolvedModel) -> Option<i64> {
    let mut n: i64 = 0;
    // SAFETY: the handle is live for the borrow and the name is NUL terminated.
    let status = unsafe {
        highs_sys::Highs_getInt64InfoValue(solved.as_ptr() as *mut _, c"mip_node_count".as_ptr(), &mut n)
    };
    (status as i64 == highs_sys::STATUS_OK as i64).then_some(n)
}

/// Solves and insists on an optimal (or limit-with-incumbent) answer.
pub fn solve_feasible(model: &MipModel, opts: &SolveOptions, ctx: &str) -> Result<SolveResult> {
    let res = solve(model, opts).map_err(|e| e.with_context(ctx))?;
    match res.status {
        SolveStatus::Optimal => Ok(res),
        SolveStatus::LimitReached if !res.solution.is_empty() => {
            log::debug!("{ctx}: limit reached, using incumbent (gap {:.2e})", res.gap);
            Ok(res)
        }
        s => Err(Error::Solver {
            context: ctx.to_string(),
            status: format!("{s:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn integer_lower_bound() {
        let mut m = MipModel::new(Sense::Minimize);
        let x = m.add_var(1.0, 0.0, 10.0, true);
        m.add_row(vec![(x, 1.0)], RowSense::Ge, 2.5);
        let r = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.objective - 3.0).abs() < 1e-9);
        assert!((r.solution[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn x_at_least_three() {
        let mut m = MipModel::new(Sense::Minimize);
        let x = m.add_var(1.0, -100.0, 100.0, true);
        m.add_row(vec![(x, 1.0)], RowSense::Ge, 3.0);
        let r = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.objective - 3.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_bounds() {
        let mut m = MipModel::new(Sense::Minimize);
        let x = m.add_var(0.0, 0.0, f64::INFINITY, false);
        m.add_row(vec![(x, 1.0)], RowSense::Le, -1.0);
        let r = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(solve_feasible(&m, &SolveOptions::default(), "t").is_err());
    }

    #[test]
    fn unbounded_lp() {
        let mut m = MipModel::new(Sense::Maximize);
        let x = m.add_var(1.0, 0.0, f64::INFINITY, false);
        m.add_row(vec![(x, 1.0)], RowSense::Ge, 0.0);
        let r = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Unbounded);
    }

    #[test]
    fn malformed_model_rejected() {
        let mut m = MipModel::new(Sense::Minimize);
        m.add_var(0.0, 0.0, 1.0, false);
        m.add_row(vec![(5, 1.0)], RowSense::Le, 1.0);
        assert!(matches!(solve(&m, &SolveOptions::default()), Err(Error::Model(_))));
        let mut m = MipModel::new(Sense::Minimize);
        m.add_var(0.0, 0.0, f64::INFINITY, true);
        assert!(matches!(solve(&m, &SolveOptions::default()), Err(Error::Model(_))));
    }

    #[test]
    fn empty_model() {
        let mut m = MipModel::new(Sense::Minimize);
        m.offset = 4.0;
        let r = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.objective, 4.0);
    }

    #[test]
    fn knapsack_round_trip_and_determinism() {
        let mut m = MipModel::new(Sense::Maximize);
        let w = [3.0, 4.0, 5.0, 6.0, 2.5];
        let v = [4.0, 5.0, 7.0, 8.0, 3.0];
        let xs: Vec<_> = v.iter().map(|&c| m.add_var(c, 0.0, 1.0, true)).collect();
        m.add_row(xs.iter().zip(w).map(|(&i, a)| (i, a)).collect(), RowSense::Le, 10.0);
        let a = solve(&m, &SolveOptions::default()).unwrap();
        let b = solve(&m, &SolveOptions::default()).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.solution, b.solution);
        assert!(a.nodes.is_some());
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..32 {
            let (mut ww, mut vv) = (0.0, 0.0);
            for i in 0..5 {
                if mask & (1 << i) != 0 {
                    ww += w[i];
                    vv += v[i];
                }
            }
            if ww <= 10.0 {
                best = f64::max(best, vv);
            }
        }
        assert!((a.objective - best).abs() < 1e-9);
        assert!((m.objective_at(&a.solution) - a.objective).abs() <= 1e-6 * a.objective.abs());
        assert!(m.max_violation(&a.solution) <= FEAS_TOL);
        assert!(m.max_integrality_violation(&a.solution) <= INT_TOL);
    }

    #[test]
    fn lp_dump_mentions_rows() {
        let mut m = MipModel::new(Sense::Minimize);
        let x = m.add_named_var("x", 1.0, 0.0, 5.0, true);
        m.add_row(vec![(x, -2.0)], RowSense::Ge, -4.0);
        let s = m.to_lp_string();
        assert!(s.contains("Minimize"));
        assert!(s.contains("- 2 x >= -4"));
        assert!(s.contains("General"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn pure_integer_matches_enumeration(
            cost in prop::collection::vec(-5i32..5, 3),
            rows in prop::collection::vec((prop::collection::vec(-3i32..4, 3), 0i32..8), 1..4),
        ) {
            let mut m = MipModel::new(Sense::Minimize);
            for &c in &cost {
                m.add_var(c as f64, 0.0, 4.0, true);
            }
            for (a, b) in &rows {
                m.add_row(a.iter().enumerate().map(|(i, &v)| (i, v as f64)).collect(), RowSense::Le, *b as f64);
            }
            let r = solve(&m, &SolveOptions::default()).unwrap();
            prop_assert_eq!(r.status, SolveStatus::Optimal);
            prop_assert!((m.objective_at(&r.solution) - r.objective).abs() <= 1e-6 * (1.0 + r.objective.abs()));
            prop_assert!(m.max_violation(&r.solution) <= 1e-6);
            prop_assert!(m.max_integrality_violation(&r.solution) <= 1e-5);
            let mut best = f64::INFINITY;
            for p in 0..125 {
                let x = [(p % 5) as f64, ((p / 5) % 5) as f64, (p / 25) as f64];
                if m.max_violation(&x) <= 0.0 {
                    best = best.min(m.objective_at(&x));
                }
            }
            prop_assert!((r.objective - best).abs() <= 1e-6);
            let again = solve(&m, &SolveOptions::default()).unwrap();
            prop_assert_eq!(again.objective, r.objective);
            prop_assert_eq!(again.solution, r.solution);
        }
    }
}
