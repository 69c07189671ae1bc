//! Self-check suites: exact oracles on tiny trees, randomized small MIPs,
//! subgradient probes, and Monte Carlo checks of the demand process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{BasisLayout, BasisSpec, DualCoefficients, NaVars};
use crate::dual_na::{pi_values, NaDual};
use crate::dual_sw::SwDual;
use crate::error::{Error, Result};
use crate::evalstat::{extensive_optimum, lemma2_check, random_small_mip};
use crate::exec::{try_map_indices, Execution};
use crate::instance::{Knobs, MslotInstance};
use crate::master::{evaluate_all, DualOracle, MasterOptions, MasterState, Trainer};
use crate::policy::{exact_policy_expectation, PolicyConfig, PolicyKind};
use crate::process::{DemandProcess, FiniteSupportProcess, Outcome, ProcessParams};
use crate::solve::SolveOptions;

pub const SUITES: [&str; 5] = ["oracle", "lemma2", "gradient", "condexp", "process"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn lines(&self) -> Vec<String> {
        self.checks
            .iter()
            .map(|c| format!("{} {}/{}: {}", if c.pass { "PASS" } else { "FAIL" }, self.suite, c.name, c.detail))
            .collect()
    }
}

fn rel_le(a: f64, b: f64, tol: f64) -> bool {
    a <= b + tol * b.abs().max(a.abs()).max(1.0)
}

/// Three stages, one product, two outcomes in each later stage (four leaves).
pub fn oracle_instance() -> Result<(MslotInstance, FiniteSupportProcess)> {
    let p = ProcessParams::new(0.6, 0.2, vec![vec![100.0]; 3], 17)?;
    let inst = MslotInstance::build("oracle-T3-J1", p, Knobs::default())?;
    let o = |d: f64, prob: f64| Outcome { demand: vec![d], prob };
    let tree = FiniteSupportProcess::new(
        vec![
            vec![o(100.0, 1.0)],
            vec![o(55.0, 0.4), o(150.0, 0.6)],
            vec![o(80.0, 0.5), o(135.0, 0.5)],
        ],
        23,
    )?;
    Ok((inst, tree))
}

fn log_uniform_weights(rng: &mut ChaCha8Rng, dim: usize, max: f64) -> Vec<f64> {
    let scale = max * 10f64.powf(-rng.random_range(0.0..4.0));
    (0..dim).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Exact expectations of both relaxations at random weights never exceed the optimum.
pub fn weak_duality(n_sw: usize, n_na: usize, seed: u64) -> Result<Vec<Check>> {
    let (inst, tree) = oracle_instance()?;
    let paths = tree.enumerate_paths();
    let opt = extensive_optimum(&inst, &tree)?;
    let box_bound = MasterOptions::default().box_bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let sl = BasisLayout::resolve(&BasisSpec::sw(1), &inst)?;
    let sw = SwDual::new(&inst, &tree, &sl, &paths)?;
    let nl = BasisLayout::resolve(&BasisSpec::na(1, NaVars::All), &inst)?;
    let na = NaDual::new(&inst, &tree, &nl, &paths)?;
    let count = |name: &str, oracle: &dyn DualOracle, n: usize, rng: &mut ChaCha8Rng| -> Result<Check> {
        let mut ok = 0;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..n {
            let w = log_uniform_weights(rng, oracle.dim(), box_bound);
            let (v, _) = evaluate_all(oracle, &w, Execution::Sequential)?;
            worst = worst.max(v);
            if rel_le(v, opt, 1e-6) {
                ok += 1;
            }
        }
        Ok(Check::new(
            name,
            ok == n,
            format!("{ok}/{n} exact values <= optimum {opt:.4} (largest {worst:.4})"),
        ))
    };
    out.push(count("weak-duality-sw", &sw, n_sw, &mut rng)?);
    out.push(count("weak-duality-na", &na, n_na, &mut rng)?);
    Ok(out)
}

/// Trained duals on the oracle tree with the retained cut history.
pub struct OracleTraining {
    pub optimum: f64,
    pub pi: f64,
    pub sw: MasterState,
    pub na: MasterState,
    pub checks: Vec<Check>,
}

pub fn oracle_training_options() -> (MasterOptions, MasterOptions) {
    let sw = MasterOptions {
        tol: 1e-9,
        max_iter: 2000,
        ..MasterOptions::default()
    };
    // Lifted weights sum up to two stagewise weights, so the NA box is wider.
    let na = MasterOptions {
        box_bound: 10.0 * sw.box_bound,
        delta_max: 10.0 * sw.delta_max,
        ..sw
    };
    (sw, na)
}

fn cut_checks(name: &str, oracle: &dyn DualOracle, state: &MasterState, probes: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = state
        .points
        .iter()
        .flatten()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(probes);
    for k in 0..probes {
        let base = &state.points[k % state.points.len()];
        let r = span * 10f64.powf(-rng.random_range(0.0..3.0));
        pts.push(base.iter().map(|b| b + rng.random_range(-r..=r)).collect());
    }
    let vals: Vec<Vec<f64>> = try_map_indices(Execution::Parallel, pts.len(), |k| {
        (0..oracle.num_scenarios())
            .map(|s| oracle.evaluate(s, &pts[k]).map(|r| r.0))
            .collect::<Result<Vec<f64>>>()
    })?;
    let reval: Vec<f64> = try_map_indices(Execution::Parallel, state.cuts.len(), |c| {
        let cut = &state.cuts[c];
        oracle.evaluate(cut.scenario, &state.points[cut.point]).map(|r| r.0)
    })?;
    let mut tight = 0;
    let mut valid = 0;
    let total_probe = state.cuts.len() * probes;
    for (c, cut) in state.cuts.iter().enumerate() {
        let at = cut.at(&state.points[cut.point]);
        if (at - reval[c]).abs() <= 1e-6 * reval[c].abs().max(1.0) {
            tight += 1;
        }
        for (k, p) in pts.iter().enumerate() {
            if rel_le(vals[k][cut.scenario], cut.at(p), 1e-6) {
                valid += 1;
            }
        }
    }
    Ok(vec![
        Check::new(
            format!("{name}-cut-tightness"),
            tight == state.cuts.len(),
            format!("{tight}/{} cuts tight at their expansion points", state.cuts.len()),
        ),
        Check::new(
            format!("{name}-cut-validity"),
            valid == total_probe,
            format!("{valid}/{total_probe} probe evaluations under the cut ({probes} probes)"),
        ),
    ])
}

/// Trains SW option 4 and NA on its lifted basis; checks the ordering chain,
/// and optionally every generated cut against `probes` random points.
pub fn oracle_ordering(probes: usize, exec: Execution) -> Result<OracleTraining> {
    let (inst, tree) = oracle_instance()?;
    let paths = tree.enumerate_paths();
    let optimum = extensive_optimum(&inst, &tree)?;
    let pi: f64 = pi_values(&inst, &paths, &SolveOptions::default(), exec)?
        .iter()
        .zip(&paths)
        .map(|(v, p)| v * p.prob)
        .sum();
    let sw_spec = BasisSpec::sw(4);
    let sl = BasisLayout::resolve(&sw_spec, &inst)?;
    let nl = BasisLayout::resolve(&BasisSpec::lift_sw_to_na(&sw_spec)?, &inst)?;
    let sw = SwDual::new(&inst, &tree, &sl, &paths)?;
    let na = NaDual::new(&inst, &tree, &nl, &paths)?;
    let (so, no) = oracle_training_options();
    let sws = Trainer::new(&sw, so, exec).run(None)?;
    let nas = Trainer::new(&na, no, exec).run(None)?;
    let (vs, vn) = (sws.incumbent_value, nas.incumbent_value);
    let mut checks = vec![
        Check::new(
            "sw-le-na-lifted",
            vs <= vn + 1e-6 * vn.abs(),
            format!("sw {vs:.6} <= na {vn:.6} ({:?} / {:?})", sws.status, nas.status),
        ),
        Check::new("na-le-optimum", rel_le(vn, optimum, 1e-6), format!("na {vn:.6} <= optimum {optimum:.6}")),
        Check::new("pi-le-optimum", rel_le(pi, optimum, 1e-6), format!("pi {pi:.6} <= optimum {optimum:.6}")),
        Check::new("pi-le-na", rel_le(pi, vn, 1e-6), format!("pi {pi:.6} <= na {vn:.6}")),
    ];
    let policies = [
        PolicyConfig::new(PolicyKind::CondExp, None),
        PolicyConfig::new(PolicyKind::SwDriven, Some(DualCoefficients::new(sl.clone(), sws.incumbent.clone(), &inst)?)),
        PolicyConfig::new(PolicyKind::NaDriven, Some(DualCoefficients::new(nl.clone(), nas.incumbent.clone(), &inst)?)),
    ];
    for cfg in &policies {
        let v = exact_policy_expectation(cfg, &inst, &tree)?;
        checks.push(Check::new(
            format!("optimum-le-{}-policy", cfg.kind.tag()),
            rel_le(optimum, v, 1e-6),
            format!("optimum {optimum:.6} <= policy {v:.6}"),
        ));
    }
    if probes > 0 {
        checks.extend(cut_checks("sw", &sw, &sws, probes, 101)?);
        checks.extend(cut_checks("na", &na, &nas, probes, 202)?);
    }
    Ok(OracleTraining {
        optimum,
        pi,
        sw: sws,
        na: nas,
        checks,
    })
}

pub fn lemma2_suite(n: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (mip, g) = random_small_mip(&mut rng);
        let r = lemma2_check(&mip, &g)?;
        worst = worst.max((r.dual_value - r.primal_value).abs() / (1.0 + r.primal_value.abs()));
        if r.pass {
            ok += 1;
        }
    }
    Ok(vec![Check::new(
        "restricted-dual-equals-primal",
        ok == n,
        format!("{ok}/{n} agree (largest relative difference {worst:.2e})"),
    )])
}

/// Cut and finite-difference checks for both duals on a sampled instance.
pub fn gradient_suite(probes: usize, exec: Execution) -> Result<Vec<Check>> {
    let inst = MslotInstance::generate(3, 2, 0.6, 0.2, 31, 32)?;
    let paths = inst.process.sample_paths(3, "gradient")?;
    let sl = BasisLayout::resolve(&BasisSpec::sw(1), &inst)?;
    let nl = BasisLayout::resolve(&BasisSpec::na(3, NaVars::X), &inst)?;
    let sw = SwDual::new(&inst, &inst.process, &sl, &paths)?;
    let na = NaDual::new(&inst, &inst.process, &nl, &paths)?;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, oracle) in [("sw", &sw as &dyn DualOracle), ("na", &na as &dyn DualOracle)] {
        let w0: Vec<f64> = (0..oracle.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut state = Trainer::new(oracle, MasterOptions::default(), exec).init(Some(&w0))?;
        state.status = None;
        out.extend(cut_checks(name, oracle, &state, probes, 7)?);
        // Piecewise-linear values: a small step in a random direction is usually exact.
        let mut fd_ok = 0;
        let trials = 5;
        for _ in 0..trials {
            let w: Vec<f64> = (0..oracle.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..oracle.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let (f0, g) = oracle.evaluate(0, &w)?;
            let wp: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let (f1, _) = oracle.evaluate(0, &wp)?;
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            if ((f1 - f0) / h - slope).abs() <= 1e-4 * slope.abs().max(1.0) {
                fd_ok += 1;
            }
        }
        out.push(Check::new(
            format!("{name}-finite-difference"),
            fd_ok >= trials - 1,
            format!("{fd_ok}/{trials} directional derivatives match the subgradient"),
        ));
    }
    Ok(out)
}

/// Monte Carlo continuation means against the closed form.
pub fn condexp_suite(triples: usize, samples: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = 0;
    for k in 0..triples {
        let nt = rng.random_range(2..=6usize);
        let nj = rng.random_range(1..=3usize);
        let rho = rng.random_range(0.0..0.95);
        let rho_y = rng.random_range(0.0..=1.0);
        let mu: Vec<Vec<f64>> = (0..nt).map(|_| (0..nj).map(|_| rng.random_range(40.0..160.0)).collect()).collect();
        let p = ProcessParams::new(rho, rho_y, mu, seed.wrapping_add(k as u64))?;
        let path = p.sample_paths(1, &format!("triple:{k}"))?.remove(0);
        let t = rng.random_range(0..nt - 1);
        let h = rng.random_range(1..nt - t);
        let j = rng.random_range(0..nj);
        let closed = p.conditional_mean_demand(&path, t, h, j)?;
        let draws: Vec<f64> = p
            .conditional_sample(&path, t, samples, "mc")?
            .iter()
            .map(|q| q.demands[t + h][j])
            .collect();
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let se = (draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        if (m - closed).abs() <= 3.0 * se {
            ok += 1;
        }
    }
    let need = (triples as f64 * 0.97).ceil() as usize;
    Ok(vec![Check::new(
        "continuation-means",
        ok >= need,
        format!("{ok}/{triples} within 3 standard errors (need {need})"),
    )])
}

/// Unconditional moments of the demand process and its latent parts.
pub fn process_suite(samples: usize) -> Result<Vec<Check>> {
    let inst = MslotInstance::generate(4, 3, 0.6, 0.2, 41, 42)?;
    let p = &inst.process;
    let paths = p.sample_paths(samples, "moments")?;
    let n = samples as f64;
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (m, s)
    };
    let mut mean_ok = 0;
    let mut std_ok = 0;
    let cells = p.stages * p.products;
    for t in 0..p.stages {
        for j in 0..p.products {
            let d: Vec<f64> = paths.iter().map(|q| q.demands[t][j]).collect();
            let (m, s) = stats(&d);
            if (m - p.mean(t, j)).abs() <= 4.0 * s / n.sqrt() {
                mean_ok += 1;
            }
            let delta: Vec<f64> = paths.iter().map(|q| q.latent_delta[t][j]).collect();
            let (_, sd) = stats(&delta);
            let want = p.delta_std_factor * (t + 1) as f64 * p.mu[t][j];
            if (sd / want - 1.0).abs() < 0.1 {
                std_ok += 1;
            }
        }
    }
    let eps: Vec<f64> = paths.iter().map(|q| q.latent_y[0][0]).collect();
    let (em, es) = stats(&eps);
    Ok(vec![
        Check::new("demand-means", mean_ok == cells, format!("{mean_ok}/{cells} cells within 4 standard errors")),
        Check::new("noise-spread", std_ok == cells, format!("{std_ok}/{cells} cells within 10% of the target deviation")),
        Check::new(
            "shock-moments",
            (em - 1.0).abs() < 0.02 && (es - 0.5).abs() < 0.02,
            format!("first-stage shock mean {em:.4}, std {es:.4}"),
        ),
    ])
}

pub fn run_suite(name: &str, exec: Execution) -> Result<SuiteReport> {
    let checks = match name {
        "oracle" => {
            let mut c = weak_duality(20, 20, 1)?;
            c.extend(oracle_ordering(50, exec)?.checks);
            c
        }
        "lemma2" => lemma2_suite(20, 2)?,
        "gradient" => gradient_suite(50, exec)?,
        "condexp" => condexp_suite(100, 100_000, 3)?,
        "process" => process_suite(20_000)?,
        other => {
            return Err(Error::Parameter(format!(
                "unknown suite {other}; expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: name.to_string(),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weak_duality_small() {
        let c = weak_duality(3, 3, 9).unwrap();
        assert!(c.iter().all(|c| c.pass), "{c:?}");
    }

    #[test]
    fn process_and_condexp_small() {
        assert!(process_suite(4000).unwrap().iter().all(|c| c.pass));
        let c = condexp_suite(10, 20_000, 4).unwrap();
        assert!(c[0].detail.starts_with("10/10") || c[0].detail.starts_with("9/10"), "{c:?}");
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_suite("nope", Execution::Sequential).is_err());
    }
}
