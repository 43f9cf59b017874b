//! Shared fixtures for the criterion benches: the default benchmark flow at
//! a requested dimension plus one deterministic latent point and its cached
//! trajectory, so every bench prices the same work.

use fpsmc::config::RunConfig;
use fpsmc::flow::{Flow, FlowTrajectory, PassCounter};
use fpsmc::gmm::GmmSpec;
use fpsmc::seed;
use nalgebra::DVector;

pub fn bench_flow(dim: usize) -> Flow {
    let mut cfg = RunConfig::default();
    cfg.target.dim = dim;
    cfg.build_flow().expect("default config builds")
}

pub fn bench_point(dim: usize) -> DVector<f64> {
    let mut rng = seed::stream(0xBE1C, &[dim as u64]);
    GmmSpec::standard_normal(dim).sample_direct(&mut rng)
}

pub fn bench_trajectory(flow: &Flow) -> FlowTrajectory {
    let z = bench_point(flow.dim());
    flow.push_forward(&z, &mut PassCounter::new()).expect("generation succeeds")
}
