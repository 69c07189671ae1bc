//! Confidence intervals, gap reports, and exact checks on small finite problems.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::instance::{extensive_form, MslotInstance};
use crate::master::{evaluate_all, DualOracle, MasterOptions, Trainer};
use crate::process::FiniteSupportProcess;
use crate::solve::{solve, solve_feasible, MipModel, RowSense, Sense, SolveOptions, SolveStatus};

pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundEstimate {
    pub method: String,
    pub side: Side,
    pub mean: f64,
    pub halfwidth: f64,
    pub n: usize,
    pub level: f64,
    pub flags: Vec<String>,
}

impl BoundEstimate {
    /// Conservative end of the interval for this side.
    pub fn bound(&self) -> f64 {
        match self.side {
            Side::Lower => self.mean - self.halfwidth,
            Side::Upper => self.mean + self.halfwidth,
        }
    }
}

/// `mean +- t_{(1+level)/2, n-1} s / sqrt(n)`.
pub fn confidence_interval(values: &[f64], level: f64, side: Side, method: &str) -> Result<BoundEstimate> {
    if values.is_empty() {
        return Err(Error::Parameter("confidence interval of no values".into()));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Parameter(format!("confidence level {level} not in [0,1)")));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut flags = Vec::new();
    let halfwidth = if n == 1 {
        flags.push("single-sample".to_string());
        0.0
    } else if level == 0.0 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Parameter(e.to_string()))?
            .inverse_cdf(0.5 + level / 2.0);
        t * (var / n as f64).sqrt()
    };
    Ok(BoundEstimate {
        method: method.to_string(),
        side,
        mean,
        halfwidth,
        n,
        level,
        flags,
    })
}

/// Lower-side estimate of the dual at fixed weights over the oracle's scenarios.
pub fn lower_bound<O: DualOracle + ?Sized>(
    oracle: &O,
    w: &[f64],
    level: f64,
    method: &str,
    exec: Execution,
) -> Result<BoundEstimate> {
    let (_, res) = evaluate_all(oracle, w, exec)?;
    let v: Vec<f64> = res.into_iter().map(|(v, _)| v).collect();
    confidence_interval(&v, level, Side::Lower, method)
}

/// Probability-weighted exact value on a finite support.
pub fn exact_expectation<O: DualOracle + ?Sized>(oracle: &O, w: &[f64], exec: Execution) -> Result<f64> {
    Ok(evaluate_all(oracle, w, exec)?.0)
}

pub const MAX_ORACLE_LEAVES: usize = 64;

/// Optimal value of the full scenario-tree problem.
pub fn extensive_optimum(inst: &MslotInstance, tree: &FiniteSupportProcess) -> Result<f64> {
    if tree.num_leaves() > MAX_ORACLE_LEAVES {
        return Err(Error::Parameter(format!(
            "{} leaves exceed the oracle limit of {MAX_ORACLE_LEAVES}",
            tree.num_leaves()
        )));
    }
    let paths = tree.enumerate_paths();
    let (tm, _) = extensive_form(inst, &paths)?;
    Ok(solve_feasible(&tm.model, &SolveOptions::default(), "extensive form")?.objective)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GapReport {
    pub instance: String,
    pub pi: Option<BoundEstimate>,
    pub sw_lb: Option<BoundEstimate>,
    pub na_lb: Option<BoundEstimate>,
    pub condexp_ub: Option<BoundEstimate>,
    pub sw_ub: Option<BoundEstimate>,
    pub na_ub: Option<BoundEstimate>,
    /// `(CondExp - PI) / CondExp`.
    pub initial_gap: Option<f64>,
    /// Share of the PI/CondExp gap closed by the NA lower bound and SW-driven upper bound.
    pub gap_closure: Option<f64>,
    pub flags: Vec<String>,
}

fn separated_below(a: &BoundEstimate, b: &BoundEstimate) -> bool {
    a.mean + a.halfwidth < b.mean - b.halfwidth
}

pub fn ordering_report(instance: &str, rows: &[BoundEstimate]) -> GapReport {
    let find = |m: &str| rows.iter().find(|r| r.method == m).cloned();
    let mut rep = GapReport {
        instance: instance.to_string(),
        pi: find("pi"),
        sw_lb: find("sw-lb"),
        na_lb: find("na-lb"),
        condexp_ub: find("condexp-ub"),
        sw_ub: find("sw-ub"),
        na_ub: find("na-ub"),
        ..GapReport::default()
    };
    let named = [
        ("pi", &rep.pi),
        ("sw-lb", &rep.sw_lb),
        ("na-lb", &rep.na_lb),
        ("condexp-ub", &rep.condexp_ub),
        ("sw-ub", &rep.sw_ub),
        ("na-ub", &rep.na_ub),
    ];
    let mut flags: Vec<String> = named
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| format!("missing:{n}"))
        .collect();
    if let (Some(na), Some(pi)) = (&rep.na_lb, &rep.pi) {
        if separated_below(na, pi) {
            flags.push("violation:na-lb<pi".into());
        }
    }
    if let (Some(sw), Some(na)) = (&rep.sw_lb, &rep.na_lb) {
        if separated_below(na, sw) {
            flags.push("violation:sw-lb>na-lb".into());
        }
    }
    let lbs: Vec<&BoundEstimate> = [&rep.pi, &rep.sw_lb, &rep.na_lb].into_iter().flatten().collect();
    let ubs: Vec<&BoundEstimate> = [&rep.condexp_ub, &rep.sw_ub, &rep.na_ub].into_iter().flatten().collect();
    for ub in &ubs {
        for lb in &lbs {
            if separated_below(ub, lb) {
                flags.push(format!("violation:{}<{}", ub.method, lb.method));
            }
        }
    }
    if let (Some(pi), Some(ce)) = (&rep.pi, &rep.condexp_ub) {
        let span = ce.mean - pi.mean;
        if ce.mean != 0.0 {
            rep.initial_gap = Some(span / ce.mean);
        }
        let lb = rep.na_lb.as_ref().or(rep.sw_lb.as_ref()).map_or(pi.mean, |b| b.mean);
        let ub = rep.sw_ub.as_ref().map_or(ce.mean, |b| b.mean);
        if span.abs() <= 1e-12 * ce.mean.abs().max(1.0) {
            flags.push("degenerate".into());
        } else {
            rep.gap_closure = Some(((lb - pi.mean) + (ce.mean - ub)) / span);
        }
    }
    rep.flags = flags;
    rep
}

/// `min c.x` over a small bounded integer set with equality rows `D x = d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallMip {
    pub c: Vec<f64>,
    pub dmat: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub lower: Vec<i64>,
    pub upper: Vec<i64>,
    /// Extra `a.x <= b` rows defining the integer set.
    pub ineq: Vec<(Vec<f64>, f64)>,
}

pub const MAX_LATTICE_POINTS: usize = 500;

impl SmallMip {
    pub fn lattice_points(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.c.len();
        let mut count: usize = 1;
        for i in 0..n {
            let w = (self.upper[i] - self.lower[i] + 1).max(0) as usize;
            count = count.saturating_mul(w);
        }
        if count > MAX_LATTICE_POINTS * 20 {
            return Err(Error::Parameter(format!("{count} box points is too many to enumerate")));
        }
        let mut out = Vec::new();
        let mut x: Vec<i64> = self.lower.clone();
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Ok(out);
        }
        loop {
            let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            if self
                .ineq
                .iter()
                .all(|(a, b)| a.iter().zip(&xf).map(|(p, q)| p * q).sum::<f64>() <= *b + 1e-9)
            {
                out.push(xf);
                if out.len() > MAX_LATTICE_POINTS {
                    return Err(Error::Parameter("lattice enumeration overflow".into()));
                }
            }
            let mut i = 0;
            loop {
                if i == n {
                    return Ok(out);
                }
                x[i] += 1;
                if x[i] <= self.upper[i] {
                    break;
                }
                x[i] = self.lower[i];
                i += 1;
            }
        }
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.dmat
            .iter()
            .zip(&self.d)
            .map(|(row, di)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - di)
            .collect()
    }
}

/// `z(G a) = min_{x in X} c.x + (G a).(D x - d)` by enumeration.
struct AggregatedDual<'a> {
    points: &'a [Vec<f64>],
    costs: Vec<f64>,
    /// `G'(D x_p - d)` per point.
    agg: Vec<Vec<f64>>,
    dim: usize,
}

impl DualOracle for AggregatedDual<'_> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn num_scenarios(&self) -> usize {
        1
    }
    fn prob(&self, _: usize) -> f64 {
        1.0
    }
    fn evaluate(&self, _: usize, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut best = (f64::INFINITY, 0);
        for p in 0..self.points.len() {
            let v = self.costs[p] + self.agg[p].iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            if v < best.0 {
                best = (v, p);
            }
        }
        Ok((best.0, self.agg[best.1].clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Lemma2Outcome {
    pub dual_value: f64,
    pub primal_value: f64,
    pub pass: bool,
}

/// Compares the aggregated Lagrangian dual (cutting planes) with
/// `min c.x` over `conv(X)` subject to `G'(D x - d) = 0` (LP over lattice points).
pub fn lemma2_check(mip: &SmallMip, g: &[Vec<f64>]) -> Result<Lemma2Outcome> {
    let points = mip.lattice_points()?;
    if points.is_empty() {
        return Err(Error::Parameter("empty integer set".into()));
    }
    let q = g.first().map_or(0, Vec::len);
    if g.len() != mip.d.len() && q > 0 {
        return Err(Error::Structure("G must have one row per equality".into()));
    }
    let costs: Vec<f64> = points
        .iter()
        .map(|x| mip.c.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect();
    let agg: Vec<Vec<f64>> = points
        .iter()
        .map(|x| {
            let r = mip.residual(x);
            (0..q).map(|k| g.iter().zip(&r).map(|(row, ri)| row[k] * ri).sum()).collect()
        })
        .collect();

    let oracle = AggregatedDual {
        points: &points,
        costs: costs.clone(),
        agg: agg.clone(),
        dim: q,
    };
    let opts = MasterOptions {
        tol: 1e-10,
        box_bound: 1e4,
        delta0: 1e4,
        delta_max: 1e4,
        ..MasterOptions::default()
    };
    let state = Trainer::new(&oracle, opts, Execution::Sequential).run(None)?;
    let dual_value = state.incumbent_value;

    let mut lp = MipModel::new(Sense::Minimize);
    for &c in &costs {
        lp.add_var(c, 0.0, f64::INFINITY, false);
    }
    lp.add_row((0..points.len()).map(|p| (p, 1.0)).collect(), RowSense::Eq, 1.0);
    for k in 0..q {
        lp.add_row(
            (0..points.len()).map(|p| (p, agg[p][k])).filter(|(_, a)| *a != 0.0).collect(),
            RowSense::Eq,
            0.0,
        );
    }
    let r = solve(&lp, &SolveOptions::default())?;
    if r.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            context: "lemma2 primal".into(),
            status: format!("{:?}", r.status),
        });
    }
    let primal_value = r.objective;
    Ok(Lemma2Outcome {
        dual_value,
        primal_value,
        pass: (dual_value - primal_value).abs() <= 1e-6 * (1.0 + primal_value.abs()),
    })
}

/// Random small instance with a feasible aggregated system (built around a known lattice point).
pub fn random_small_mip<R: rand::Rng>(rng: &mut R) -> (SmallMip, Vec<Vec<f64>>) {
    let n = rng.random_range(1..=3usize);
    let side = match n {
        1 => 20,
        2 => 12,
        _ => 6,
    };
    let lower: Vec<i64> = (0..n).map(|_| rng.random_range(-2..=0)).collect();
    let upper: Vec<i64> = lower.iter().map(|l| l + rng.random_range(2..side)).collect();
    let xbar: Vec<f64> = lower
        .iter()
        .zip(&upper)
        .map(|(l, u)| rng.random_range(*l..=*u) as f64)
        .collect();
    let m = rng.random_range(1..=2usize);
    let dmat: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(-3..=3) as f64).collect())
        .collect();
    let d = dmat
        .iter()
        .map(|row| row.iter().zip(&xbar).map(|(a, b)| a * b).sum())
        .collect();
    let mut ineq = Vec::new();
    if rng.random_bool(0.5) {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..=4) as f64).collect();
        let b = a.iter().zip(&xbar).map(|(p, q)| p * q).sum::<f64>() + rng.random_range(0..=3) as f64;
        ineq.push((a, b));
    }
    let c = (0..n).map(|_| rng.random_range(-5..=5) as f64).collect();
    let q = rng.random_range(0..=2usize);
    let g = (0..m)
        .map(|_| (0..q).map(|_| rng.random_range(-2..=2) as f64).collect())
        .collect();
    (
        SmallMip {
            c,
            dmat,
            d,
            lower,
            upper,
            ineq,
        },
        g,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::instance::Knobs;
    use crate::process::{DemandProcess, Outcome, ProcessParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ci_hand_example() {
        let e = confidence_interval(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.95, Side::Lower, "x").unwrap();
        assert!((e.mean - 3.0).abs() < 1e-12);
        let expect = 2.776445105 * (2.5f64).sqrt() / 5f64.sqrt();
        assert!((e.halfwidth - expect).abs() < 1e-6, "{}", e.halfwidth);
        assert!((e.halfwidth - 1.963).abs() < 1e-3);
        assert!((e.bound() - (3.0 - e.halfwidth)).abs() < 1e-12);
    }

    #[test]
    fn ci_edge_cases() {
        assert_eq!(confidence_interval(&[4.0; 7], 0.95, Side::Upper, "x").unwrap().halfwidth, 0.0);
        assert_eq!(confidence_interval(&[1.0, 9.0], 0.0, Side::Upper, "x").unwrap().halfwidth, 0.0);
        let one = confidence_interval(&[2.0], 0.95, Side::Upper, "x").unwrap();
        assert_eq!(one.halfwidth, 0.0);
        assert_eq!(one.flags, vec!["single-sample"]);
        assert!(confidence_interval(&[], 0.95, Side::Upper, "x").is_err());
    }

    #[test]
    fn ci_shrinks_with_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ratios = Vec::new();
        for _ in 0..50 {
            let a: Vec<f64> = (0..200).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let b: Vec<f64> = (0..400).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let ha = confidence_interval(&a, 0.95, Side::Lower, "a").unwrap().halfwidth;
            let hb = confidence_interval(&b, 0.95, Side::Lower, "b").unwrap().halfwidth;
            ratios.push(ha / hb);
        }
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((1.3..=1.5).contains(&avg), "{avg}");
    }

    fn est(method: &str, side: Side, mean: f64, hw: f64) -> BoundEstimate {
        BoundEstimate {
            method: method.into(),
            side,
            mean,
            halfwidth: hw,
            n: 100,
            level: 0.95,
            flags: vec![],
        }
    }

    #[test]
    fn gap_closure_table_example() {
        let rows = vec![
            est("pi", Side::Lower, 46584.6, 0.0),
            est("sw-lb", Side::Lower, 33327.5, 0.0),
            est("na-lb", Side::Lower, 47189.4, 0.0),
            est("condexp-ub", Side::Upper, 49406.4, 0.0),
            est("sw-ub", Side::Upper, 49406.4, 0.0),
            est("na-ub", Side::Upper, 49001.1, 0.0),
        ];
        let r = ordering_report("t2", &rows);
        let closure = r.gap_closure.unwrap();
        assert!((closure - 604.8 / 2821.8).abs() < 1e-9);
        assert!((closure - 0.214).abs() < 1e-3);
        assert!(r.flags.is_empty(), "{:?}", r.flags);
    }

    #[test]
    fn gap_report_flags() {
        let rows = vec![
            est("pi", Side::Lower, 100.0, 1.0),
            est("na-lb", Side::Lower, 90.0, 1.0),
            est("condexp-ub", Side::Upper, 100.0, 0.0),
        ];
        let r = ordering_report("x", &rows);
        assert!(r.flags.contains(&"violation:na-lb<pi".to_string()));
        assert!(r.flags.contains(&"missing:sw-ub".to_string()));
        assert!(r.flags.contains(&"degenerate".to_string()));
        assert!(r.gap_closure.is_none());
        let empty = ordering_report("e", &[]);
        assert_eq!(empty.flags.len(), 6);
    }

    #[test]
    fn lemma2_special_cases() {
        let mip = SmallMip {
            c: vec![1.0, -2.0],
            dmat: vec![vec![1.0, 1.0]],
            d: vec![3.0],
            lower: vec![0, 0],
            upper: vec![4, 4],
            ineq: vec![],
        };
        // G = 0 columns: min over X
        let r = lemma2_check(&mip, &[vec![]]).unwrap();
        assert!((r.primal_value + 8.0).abs() < 1e-9);
        assert!(r.pass);
        // G = identity: min over conv(X) with x1 + x2 = 3
        let r = lemma2_check(&mip, &[vec![1.0]]).unwrap();
        assert!((r.primal_value + 6.0).abs() < 1e-9);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn lemma2_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let (mip, g) = random_small_mip(&mut rng);
            let r = lemma2_check(&mip, &g).unwrap();
            assert!(r.pass, "{mip:?} {g:?} {r:?}");
        }
    }

    #[test]
    fn extensive_optimum_guards_and_bounds() {
        let p = ProcessParams::new(0.0, 0.0, vec![vec![100.0]; 2], 1).unwrap();
        let inst = MslotInstance::build("o", p, Knobs::default()).unwrap();
        let o = |d: f64, pr: f64| Outcome {
            demand: vec![d],
            prob: pr,
        };
        let tree = FiniteSupportProcess::new(vec![vec![o(80.0, 1.0)], vec![o(40.0, 0.5), o(160.0, 0.5)]], 0).unwrap();
        let opt = extensive_optimum(&inst, &tree).unwrap();
        let paths = tree.enumerate_paths();
        let pi: f64 = crate::dual_na::pi_values(&inst, &paths, &SolveOptions::default(), Execution::Sequential)
            .unwrap()
            .iter()
            .zip(&paths)
            .map(|(v, p)| v * p.prob)
            .sum();
        assert!(pi <= opt + 1e-6 * opt.abs());
        let big = FiniteSupportProcess::new(vec![vec![o(1.0, 0.5), o(2.0, 0.5)]; 7], 0).unwrap();
        assert!(extensive_optimum(&inst, &big).is_err());
        let single = FiniteSupportProcess::new(vec![vec![o(80.0, 1.0)], vec![o(40.0, 1.0)]], 0).unwrap();
        let det = extensive_optimum(&inst, &single).unwrap();
        let path_pi = crate::dual_na::pi_values(&inst, &single.enumerate_paths(), &SolveOptions::default(), Execution::Sequential).unwrap();
        assert!((det - path_pi[0]).abs() < 1e-9);
        assert_eq!(tree.stages(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn interval_is_well_formed(
            values in prop::collection::vec(-1e6..1e6f64, 1..60),
            level in 0.0..0.999f64,
        ) {
            let e = confidence_interval(&values, level, Side::Lower, "x").unwrap();
            prop_assert!(e.halfwidth >= 0.0 && e.halfwidth.is_finite());
            if values.len() < 2 {
                prop_assert_eq!(e.halfwidth, 0.0);
            }
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e.mean >= lo - 1e-6 && e.mean <= hi + 1e-6);
            prop_assert!(e.bound() <= e.mean);
        }
    }
}
