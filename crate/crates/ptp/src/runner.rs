//! Timed protocol runs and parallel sweeps.

use std::time::Instant;

use ptp_core::eval::{run_protocol, Dataset, GridPoint, MethodSpec, ProtocolFailure, RunResult, SeedRun, SweepGrid};
use rayon::prelude::*;

pub type ProtocolOutcome = Result<(RunResult, Vec<SeedRun>), ProtocolFailure>;

/// [`run_protocol`] with the elapsed wall time recorded on the result.
pub fn run_timed(spec: &MethodSpec, dataset: &Dataset, shots: usize, seeds: &[u64]) -> ProtocolOutcome {
    let start = Instant::now();
    let (mut result, runs) = run_protocol(spec, dataset, shots, seeds)?;
    result.wall_ms = start.elapsed().as_millis() as u64;
    Ok((result, runs))
}

/// Runs every grid point with `base` as the template spec, on at most `jobs`
/// threads. Outcomes come back in grid order whatever the execution order;
/// a failing point does not stop the others.
pub fn sweep(base: &MethodSpec, grid: &SweepGrid, dataset: &Dataset, jobs: usize) -> Vec<(GridPoint, ProtocolOutcome)> {
    let points = grid.points();
    let run = |p: &GridPoint| {
        let spec = MethodSpec {
            k: p.k,
            lambda: p.lambda,
            ..base.clone()
        };
        (*p, run_timed(&spec, dataset, p.shots, &grid.seeds))
    };
    if jobs <= 1 {
        return points.iter().map(run).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| points.par_iter().map(run).collect()),
        Err(_) => points.iter().map(run).collect(),
    }
}
