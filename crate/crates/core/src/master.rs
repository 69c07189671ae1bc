//! Multi-cut trust-region cutting-plane maximization of a sampled concave dual.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_indices, Execution};
use crate::solve::{solve, MipModel, RowSense, Sense, SolveOptions, SolveStatus};

/// A concave function given as a probability-weighted sum of scenario terms,
/// each evaluated together with a supergradient.
pub trait DualOracle: Sync {
    fn dim(&self) -> usize;
    fn num_scenarios(&self) -> usize;
    fn prob(&self, scenario: usize) -> f64;
    /// Scenario value and supergradient at `w`.
    fn evaluate(&self, scenario: usize, w: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Per-scenario outer cut `theta <= value + g.(w - point)`, stored as `intercept + g.w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Cut {
    pub scenario: usize,
    pub intercept: f64,
    pub gradient: Vec<f64>,
    /// Index into `MasterState::points` of the expansion point.
    pub point: usize,
    /// Scenario value at the expansion point.
    pub value: f64,
}

impl Cut {
    pub fn from_eval(scenario: usize, point_idx: usize, point: &[f64], value: f64, gradient: Vec<f64>) -> Self {
        let gw: f64 = gradient.iter().zip(point).map(|(g, w)| g * w).sum();
        Self {
            scenario,
            intercept: value - gw,
            gradient,
            point: point_idx,
            value,
        }
    }

    pub fn at(&self, w: &[f64]) -> f64 {
        self.intercept + self.gradient.iter().zip(w).map(|(g, x)| g * x).sum::<f64>()
    }

    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MasterOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub grow: f64,
    pub shrink: f64,
    pub serious_ratio: f64,
    pub box_bound: f64,
    pub time_limit: Option<f64>,
}

impl Default for MasterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 500,
            delta0: 10.0,
            delta_min: 1e-3,
            delta_max: 1e3,
            grow: 2.0,
            shrink: 0.5,
            serious_ratio: 0.1,
            box_bound: 1e3,
            time_limit: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Initial,
    Serious,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogRow {
    pub iter: usize,
    pub candidate_value: f64,
    pub incumbent_value: f64,
    pub model_value: Option<f64>,
    pub delta: f64,
    pub step: StepKind,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrainStatus {
    Converged,
    IterationLimit,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MasterState {
    pub dim: usize,
    pub incumbent: Vec<f64>,
    pub incumbent_value: f64,
    pub delta: f64,
    pub iter: usize,
    pub model_value: Option<f64>,
    pub points: Vec<Vec<f64>>,
    pub cuts: Vec<Cut>,
    pub log: Vec<LogRow>,
    pub status: Option<TrainStatus>,
}

impl MasterState {
    pub fn gap(&self) -> f64 {
        self.model_value.map_or(f64::INFINITY, |m| m - self.incumbent_value)
    }

    fn converged(&self, tol: f64) -> bool {
        self.gap() <= tol * (1.0 + self.incumbent_value.abs())
    }
}

/// Evaluates every scenario at `w`, returning `(weighted value, per-scenario results)`.
pub fn evaluate_all<O: DualOracle + ?Sized>(
    oracle: &O,
    w: &[f64],
    exec: Execution,
) -> Result<(f64, Vec<(f64, Vec<f64>)>)> {
    let res = try_map_indices(exec, oracle.num_scenarios(), |s| oracle.evaluate(s, w))?;
    let total = res
        .iter()
        .enumerate()
        .map(|(s, (v, _))| oracle.prob(s) * v)
        .sum();
    Ok((total, res))
}

/// Maximizes the model `sum_s p_s theta_s` over cuts, the box, and the trust region.
pub fn master_lp<O: DualOracle + ?Sized>(
    oracle: &O,
    state: &MasterState,
    opts: &MasterOptions,
) -> Result<(Vec<f64>, f64)> {
    let dim = state.dim;
    let ns = oracle.num_scenarios();
    let mut m = MipModel::new(Sense::Maximize);
    for i in 0..dim {
        let c = state.incumbent[i];
        let lo = (-opts.box_bound).max(c - state.delta);
        let hi = opts.box_bound.min(c + state.delta);
        m.add_var(0.0, lo.min(hi), hi.max(lo), false);
    }
    let mut has_cut = vec![false; ns];
    for s in 0..ns {
        m.add_var(oracle.prob(s), f64::NEG_INFINITY, f64::INFINITY, false);
    }
    for cut in &state.cuts {
        has_cut[cut.scenario] = true;
        let mut coefs: Vec<(usize, f64)> = Vec::with_capacity(dim + 1);
        coefs.push((dim + cut.scenario, 1.0));
        coefs.extend(
            cut.gradient
                .iter()
                .enumerate()
                .filter(|(_, g)| **g != 0.0)
                .map(|(i, g)| (i, -g)),
        );
        m.add_row(coefs, RowSense::Le, cut.intercept);
    }
    if let Some(s) = has_cut.iter().position(|h| !h) {
        return Err(Error::Config(format!("scenario {s} has no cut; the master is unbounded")));
    }
    let r = solve(&m, &SolveOptions::default())?;
    if r.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            context: "master".into(),
            status: format!("{:?}", r.status),
        });
    }
    let w = r.solution[..dim].to_vec();
    // the model at w from the cuts themselves (exact, independent of LP tolerances)
    let mut best = vec![f64::INFINITY; ns];
    for cut in &state.cuts {
        best[cut.scenario] = best[cut.scenario].min(cut.at(&w));
    }
    let model = (0..ns).map(|s| oracle.prob(s) * best[s]).sum();
    Ok((w, model))
}

pub struct Trainer<'a, O: DualOracle + ?Sized> {
    pub oracle: &'a O,
    pub opts: MasterOptions,
    pub exec: Execution,
}

impl<'a, O: DualOracle + ?Sized> Trainer<'a, O> {
    pub fn new(oracle: &'a O, opts: MasterOptions, exec: Execution) -> Self {
        Self { oracle, opts, exec }
    }

    fn add_cuts(&self, state: &mut MasterState, w: &[f64], res: Vec<(f64, Vec<f64>)>) {
        let idx = state.points.len();
        state.points.push(w.to_vec());
        for (s, (v, g)) in res.into_iter().enumerate() {
            state.cuts.push(Cut::from_eval(s, idx, w, v, g));
        }
    }

    /// Evaluates `start` (zeros by default) and seeds one cut per scenario.
    pub fn init(&self, start: Option<&[f64]>) -> Result<MasterState> {
        let dim = self.oracle.dim();
        let w: Vec<f64> = match start {
            Some(s) if s.len() == dim => s
                .iter()
                .map(|v| v.clamp(-self.opts.box_bound, self.opts.box_bound))
                .collect(),
            Some(s) => {
                return Err(Error::Structure(format!(
                    "start point has {} entries, expected {dim}",
                    s.len()
                )))
            }
            None => vec![0.0; dim],
        };
        let t0 = Instant::now();
        let (val, res) = evaluate_all(self.oracle, &w, self.exec)?;
        let mut state = MasterState {
            dim,
            incumbent: w.clone(),
            incumbent_value: val,
            delta: self.opts.delta0,
            iter: 0,
            model_value: None,
            points: Vec::new(),
            cuts: Vec::new(),
            log: Vec::new(),
            status: None,
        };
        self.add_cuts(&mut state, &w, res);
        if dim == 0 {
            state.model_value = Some(val);
            state.status = Some(TrainStatus::Converged);
        }
        state.log.push(LogRow {
            iter: 0,
            candidate_value: val,
            incumbent_value: val,
            model_value: state.model_value,
            delta: state.delta,
            step: StepKind::Initial,
            wall_time: t0.elapsed().as_secs_f64(),
        });
        Ok(state)
    }

    /// One master solve + evaluation. Returns false once training has stopped.
    pub fn step(&self, state: &mut MasterState) -> Result<bool> {
        if state.status.is_some() {
            return Ok(false);
        }
        let t0 = Instant::now();
        let (cand, model) = master_lp(self.oracle, state, &self.opts)?;
        state.model_value = Some(model);
        if state.converged(self.opts.tol) {
            state.status = Some(TrainStatus::Converged);
            return Ok(false);
        }
        let predicted = model - state.incumbent_value;
        let (val, res) = evaluate_all(self.oracle, &cand, self.exec)?;
        if val > model + 1e-6 * (1.0 + model.abs()) {
            log::warn!("outer approximation violated: f={val} > model={model}");
        }
        self.add_cuts(state, &cand, res);
        state.iter += 1;
        let step = if val - state.incumbent_value >= self.opts.serious_ratio * predicted {
            let reach = cand
                .iter()
                .zip(&state.incumbent)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if reach >= state.delta * (1.0 - 1e-9) {
                state.delta = (state.delta * self.opts.grow).min(self.opts.delta_max);
            }
            state.incumbent = cand;
            state.incumbent_value = val;
            StepKind::Serious
        } else {
            state.delta = (state.delta * self.opts.shrink).max(self.opts.delta_min);
            StepKind::Null
        };
        state.log.push(LogRow {
            iter: state.iter,
            candidate_value: val,
            incumbent_value: state.incumbent_value,
            model_value: Some(model),
            delta: state.delta,
            step,
            wall_time: t0.elapsed().as_secs_f64(),
        });
        Ok(true)
    }

    /// Runs until convergence or a limit; resumes from `state` when given.
    pub fn run(&self, state: Option<MasterState>) -> Result<MasterState> {
        self.run_with(state, |_| Ok(()))
    }

    /// Like [`Trainer::run`], calling `after_step` after every iteration (for checkpoints).
    pub fn run_with<F>(&self, state: Option<MasterState>, mut after_step: F) -> Result<MasterState>
    where
        F: FnMut(&MasterState) -> Result<()>,
    {
        let start = Instant::now();
        let mut state = match state {
            Some(s) => s,
            None => self.init(None)?,
        };
        if state.status.is_none() && state.iter >= self.opts.max_iter {
            state.status = Some(TrainStatus::IterationLimit);
        }
        while self.step(&mut state)? {
            if state.iter >= self.opts.max_iter {
                state.status = Some(TrainStatus::IterationLimit);
            } else if self
                .opts
                .time_limit
                .is_some_and(|tl| start.elapsed().as_secs_f64() >= tl)
            {
                state.status = Some(TrainStatus::TimeLimit);
            }
            after_step(&state)?;
        }
        Ok(state)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `f_s(w) = min_k (a_k . w + b_k)` with known data.
    #[derive(Debug)]
    pub struct PiecewiseOracle {
        pub pieces: Vec<Vec<(Vec<f64>, f64)>>,
        pub probs: Vec<f64>,
    }

    impl DualOracle for PiecewiseOracle {
        fn dim(&self) -> usize {
            self.pieces[0][0].0.len()
        }
        fn num_scenarios(&self) -> usize {
            self.pieces.len()
        }
        fn prob(&self, s: usize) -> f64 {
            self.probs[s]
        }
        fn evaluate(&self, s: usize, w: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (a, b) = self.pieces[s]
                .iter()
                .min_by(|x, y| {
                    let vx = x.0.iter().zip(w).map(|(p, q)| p * q).sum::<f64>() + x.1;
                    let vy = y.0.iter().zip(w).map(|(p, q)| p * q).sum::<f64>() + y.1;
                    vx.partial_cmp(&vy).unwrap()
                })
                .unwrap();
            let v = a.iter().zip(w).map(|(p, q)| p * q).sum::<f64>() + b;
            Ok((v, a.clone()))
        }
    }

    fn tent() -> PiecewiseOracle {
        // min(beta, 2 - beta)
        PiecewiseOracle {
            pieces: vec![vec![(vec![1.0], 0.0), (vec![-1.0], 2.0)]],
            probs: vec![1.0],
        }
    }

    #[test]
    fn one_dimensional_tent() {
        let o = tent();
        let t = Trainer::new(&o, MasterOptions::default(), Execution::Sequential);
        let s = t.run(None).unwrap();
        assert_eq!(s.status, Some(TrainStatus::Converged));
        assert!((s.incumbent[0] - 1.0).abs() < 1e-6);
        assert!((s.incumbent_value - 1.0).abs() < 1e-6);
        assert!(s.iter <= 5, "{} iterations", s.iter);
    }

    #[test]
    fn empty_dimension() {
        struct Const;
        impl DualOracle for Const {
            fn dim(&self) -> usize {
                0
            }
            fn num_scenarios(&self) -> usize {
                2
            }
            fn prob(&self, _: usize) -> f64 {
                0.5
            }
            fn evaluate(&self, s: usize, _: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((s as f64 + 1.0, vec![]))
            }
        }
        let s = Trainer::new(&Const, MasterOptions::default(), Execution::Sequential)
            .run(None)
            .unwrap();
        assert_eq!(s.iter, 0);
        assert_eq!(s.incumbent_value, 1.5);
    }

    #[test]
    fn zero_radius_returns_incumbent() {
        let o = tent();
        let mut opts = MasterOptions::default();
        opts.delta0 = 0.0;
        let t = Trainer::new(&o, opts, Execution::Sequential);
        let mut s = t.init(Some(&[0.3])).unwrap();
        let (w, m) = master_lp(&o, &s, &opts).unwrap();
        assert_eq!(w, vec![0.3]);
        assert!((m - 0.3).abs() < 1e-12);
        s.cuts.clear();
        assert!(matches!(master_lp(&o, &s, &opts), Err(Error::Config(_))));
    }

    #[test]
    fn box_clips_candidate() {
        let o = PiecewiseOracle {
            pieces: vec![vec![(vec![1.0, -1.0], 0.0)]],
            probs: vec![1.0],
        };
        let mut opts = MasterOptions::default();
        opts.box_bound = 5.0;
        opts.delta0 = 100.0;
        let t = Trainer::new(&o, opts, Execution::Sequential);
        let s = t.init(None).unwrap();
        let (w, _) = master_lp(&o, &s, &opts).unwrap();
        assert_eq!(w, vec![5.0, -5.0]);
    }

    #[test]
    fn model_monotone_and_outer() {
        let o = PiecewiseOracle {
            pieces: vec![
                vec![(vec![1.0, 0.5], 0.0), (vec![-1.0, 0.2], 3.0), (vec![0.0, -1.0], 2.0)],
                vec![(vec![0.5, 1.0], 1.0), (vec![-0.3, -1.0], 4.0)],
            ],
            probs: vec![0.4, 0.6],
        };
        let mut opts = MasterOptions::default();
        opts.tol = 1e-10;
        opts.delta0 = 1e3;
        opts.shrink = 1.0;
        let t = Trainer::new(&o, opts, Execution::Sequential);
        let mut s = t.init(None).unwrap();
        let mut last = f64::INFINITY;
        let mut inc = s.incumbent_value;
        while t.step(&mut s).unwrap() {
            let m = s.model_value.unwrap();
            assert!(m <= last + 1e-9);
            last = m;
            let row = s.log.last().unwrap();
            assert!(row.candidate_value <= row.model_value.unwrap() + 1e-9);
            assert!(s.incumbent_value >= inc);
            inc = s.incumbent_value;
            assert!(s.iter < 100);
        }
        // compare with a fine grid search
        let mut best = f64::NEG_INFINITY;
        for a in -200..=200 {
            for b in -200..=200 {
                let w = [a as f64 * 0.05, b as f64 * 0.05];
                let v = 0.4 * o.evaluate(0, &w).unwrap().0 + 0.6 * o.evaluate(1, &w).unwrap().0;
                best = best.max(v);
            }
        }
        assert!(s.incumbent_value >= best - 1e-6);
    }

    #[test]
    fn checkpoint_resume_matches() {
        let o = PiecewiseOracle {
            pieces: vec![vec![(vec![2.0], 0.0), (vec![-1.0], 9.0)], vec![(vec![1.0], 1.0), (vec![-3.0], 20.0)]],
            probs: vec![0.5, 0.5],
        };
        let t = Trainer::new(&o, MasterOptions::default(), Execution::Sequential);
        let full = t.run(None).unwrap();
        let mut part = t.init(None).unwrap();
        t.step(&mut part).unwrap();
        let json = serde_json::to_string(&part).unwrap();
        let back: MasterState = serde_json::from_str(&json).unwrap();
        let resumed = t.run(Some(back)).unwrap();
        assert_eq!(resumed.incumbent, full.incumbent);
        assert_eq!(resumed.incumbent_value, full.incumbent_value);
    }

    fn piecewise() -> impl Strategy<Value = PiecewiseOracle> {
        let piece = (prop::collection::vec(-3.0..3.0f64, 2), -5.0..5.0f64);
        let scenario = prop::collection::vec(piece, 1..5);
        (prop::collection::vec(scenario, 1..4), 0.1..1.0f64).prop_map(|(pieces, p0)| {
            let n = pieces.len();
            let mut probs = vec![(1.0 - p0) / (n.max(2) - 1) as f64; n];
            probs[0] = if n == 1 { 1.0 } else { p0 };
            PiecewiseOracle { pieces, probs }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outer_model_and_monotone_incumbent(o in piecewise()) {
            let opts = MasterOptions::default();
            let s = Trainer::new(&o, opts, Execution::Sequential).run(None).unwrap();
            prop_assert_eq!(s.status, Some(TrainStatus::Converged));
            let mut inc = f64::NEG_INFINITY;
            for row in &s.log {
                if let Some(m) = row.model_value {
                    prop_assert!(row.candidate_value <= m + 1e-7 * (1.0 + m.abs()));
                }
                prop_assert!(row.incumbent_value >= inc);
                inc = row.incumbent_value;
                prop_assert!(row.delta >= opts.delta_min && row.delta <= opts.delta_max);
            }
            prop_assert!(s.incumbent.iter().all(|w| w.abs() <= opts.box_bound + 1e-9));
        }
    }
}
