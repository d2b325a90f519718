//! Shared fixtures for the benchmarks.

use airmeta_core::{
    make_compression, stream_rng, CompressionKind, CompressionMatrix, ExperimentConfig, Schedule, SimRng, Simulator,
    Stream, Vector,
};

pub const SEED: u64 = 0x5eed;

pub fn rng(tag: u64) -> SimRng {
    stream_rng(SEED, Stream::Probe, tag, 0)
}

/// Deterministic dense vector with entries of mixed sign and magnitude.
pub fn signal(d: usize) -> Vector {
    Vector::from_fn(d, |i, _| ((i * 7919 % 1013) as f64 / 1013.0 - 0.5) * (1.0 + (i % 5) as f64))
}

pub fn compression(kind: CompressionKind, m: usize, d: usize) -> CompressionMatrix {
    make_compression(kind, m, d, &mut rng(1)).expect("valid compression shape")
}

/// Default convergence setup with dimension `d` and `m` channel uses.
pub fn config(d: usize, m: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_convergence();
    cfg.environment.dim = d;
    cfg.channel_uses = m;
    cfg.trials = 1;
    cfg.schedule = Schedule::Constant { eta: 0.01, alpha: 0.4 };
    cfg
}

pub fn simulator(d: usize, m: usize) -> Simulator {
    Simulator::new(&config(d, m), 0).expect("valid benchmark config")
}
