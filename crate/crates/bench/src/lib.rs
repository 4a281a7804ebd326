//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stance_core::features::FeatureVector;
use stance_core::StanceLabel;

pub const HASHTAGS: [&str; 8] = [
    "powertowomen",
    "climatechangeisreal",
    "feelthebern",
    "prolifeyouth",
    "godisdead",
    "lovewins",
    "stophillary2016",
    "equalpayforequalwork",
];

pub const WORDS: [&str; 12] = [
    "relational",
    "generalizations",
    "hopefulness",
    "conditional",
    "motoring",
    "caresses",
    "adjustable",
    "replacement",
    "formality",
    "sensitivity",
    "electrical",
    "feudalism",
];

/// Sparse binary-style vectors with a planted linear signal.
pub fn sparse_problem(n: usize, dim: usize, active: usize, seed: u64) -> (Vec<FeatureVector>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dense = vec![0.0; dim];
        for _ in 0..active {
            dense[rng.gen_range(0..dim)] = 1.0;
        }
        let score: f64 = dense[..dim / 2].iter().sum::<f64>() - dense[dim / 2..].iter().sum::<f64>();
        xs.push(FeatureVector::from_dense(&dense));
        ys.push(score >= 0.0);
    }
    (xs, ys)
}

/// Token sequences over a `vocab`-word vocabulary `w0..`.
pub fn token_posts(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<(Vec<String>, StanceLabel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let tokens = (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect();
            (tokens, StanceLabel::ALL[i % 3])
        })
        .collect()
}
