//! Single-image prediction latency measurement: a warmup phase, then
//! individually timed forward passes on one thread, summarized as
//! mean/median/p95 with a machine descriptor (absolute numbers are
//! hardware-bound, so the descriptor travels with them).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::zoo::InputShape;

/// Latency statistics over `runs` timed forwards, in seconds.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub runs: usize,
    pub warmup: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
    pub machine: String,
}

/// Time `n_runs` single-input predictions after `warmup` unmeasured ones.
pub fn benchmark_latency(model: &Model<f32>, n_runs: usize, warmup: usize) -> Result<LatencyReport> {
    if n_runs == 0 {
        return Err(Error::contract("benchmark needs at least 1 timed run"));
    }
    let input = fixed_input(model);
    for _ in 0..warmup {
        model.predict(&input)?;
    }
    let mut times = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        model.predict(&input)?;
        times.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = times.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LatencyReport {
        runs: n_runs,
        warmup,
        mean: times.iter().sum::<f64>() / n_runs as f64,
        p50: percentile(&sorted, 0.50),
        p95: percentile(&sorted, 0.95),
        min: sorted[0],
        max: sorted[n_runs - 1],
        machine: machine_descriptor(),
    })
}

/// Nearest-rank percentile over an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn fixed_input(model: &Model<f32>) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = match model.spec().input {
        InputShape::Image { channels, side } => vec![channels, side, side],
        InputShape::Features { len } => vec![len],
    };
    let numel = shape.iter().product();
    Tensor::from_vec(shape, (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect())
        .expect("input shape")
}

/// CPU model string plus the single-thread note.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{} (single-threaded)", cpu)
}
