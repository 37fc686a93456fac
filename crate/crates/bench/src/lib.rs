//! Fixtures shared by the kernel benchmarks.

use pdas_core::data::{generate_sample, DomainSpec, LabelOptions};
use pdas_core::Sample;

pub fn source_sample(index: usize) -> Sample {
    generate_sample(&DomainSpec::source(), index, &LabelOptions::default())
        .expect("source preset is valid")
}

/// Row-major random matrix entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    (0..rows * cols)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}
