//! Shared inputs for the benchmarks.

use scenefuse_core::dataset::{synthesize_recording, Recording, SyntheticSceneSpec};

/// A 10 s synthetic recording of class `class`.
pub fn recording(class: usize, index: usize) -> Recording {
    let spec = SyntheticSceneSpec::new(15, 4, 10.0, 0);
    Recording::new(format!("{class}_{index}"), synthesize_recording(&spec, class, index), Some(class))
        .expect("synthetic recording is valid")
}

/// Deterministic pseudo-random values in [-1, 1).
pub fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}
