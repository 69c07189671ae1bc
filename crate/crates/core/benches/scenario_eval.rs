//! Sequential against rayon-parallel evaluation of the per-scenario Lagrangian
//! subproblems and the perfect-information bound.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lddr::basis::{BasisLayout, BasisSpec, NaVars};
use lddr::dual_na::{pi_values, NaDual};
use lddr::dual_sw::SwDual;
use lddr::exec::Execution;
use lddr::instance::MslotInstance;
use lddr::master::{evaluate_all, DualOracle};
use lddr::solve::SolveOptions;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn duals(c: &mut Criterion) {
    let inst = MslotInstance::generate(3, 3, 0.6, 0.2, 1, 2).unwrap();
    let paths = inst.process.sample_paths(32, "bench").unwrap();
    let sl = BasisLayout::resolve(&BasisSpec::sw(1), &inst).unwrap();
    let nl = BasisLayout::resolve(&BasisSpec::na(3, NaVars::X), &inst).unwrap();
    let sw = SwDual::new(&inst, &inst.process, &sl, &paths).unwrap();
    let na = NaDual::new(&inst, &inst.process, &nl, &paths).unwrap();
    let mut g = c.benchmark_group("dual-evaluation");
    g.sample_size(10);
    for (name, oracle) in [("sw", &sw as &dyn DualOracle), ("na", &na as &dyn DualOracle)] {
        let w = vec![0.1; oracle.dim()];
        for (mode, exec) in MODES {
            g.bench_with_input(BenchmarkId::new(name, mode), &exec, |b, &exec| {
                b.iter(|| evaluate_all(oracle, &w, exec).unwrap())
            });
        }
    }
    g.finish();

    let mut g = c.benchmark_group("perfect-information");
    g.sample_size(10);
    for (mode, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(mode), &exec, |b, &exec| {
            b.iter(|| pi_values(&inst, &paths, &SolveOptions::default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, duals);
criterion_main!(benches);
