//! Input builders shared by the benchmarks.

use deepinsight_core::hierarchy::{Hierarchy, InsightBlock, TechniqueDescription, GUIDING_PREFIX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `groups` reward vectors of size `size`, uniform in [0, 1).
pub fn reward_groups(groups: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..groups)
        .map(|_| (0..size).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

/// Entropy trace of `len` tokens with noise around 0.5 and a spike every 97 tokens.
pub fn entropy_values(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|i| {
            if i % 97 == 96 {
                4.0
            } else {
                0.5 + rng.random_range(-0.2..0.2)
            }
        })
        .collect()
}

/// A full hierarchy whose proof has roughly `proof_lines` lines.
pub fn sample_hierarchy(proof_lines: usize) -> Hierarchy {
    let insight = InsightBlock::new(
        format!("{GUIDING_PREFIX} We need a bound on $\\sum_k a_k$ for every $n$."),
        TechniqueDescription::present("the auxiliary sequence $b_k = a_k - a_{k-1}$"),
        TechniqueDescription::present("Cauchy-Schwarz; Abel summation"),
        TechniqueDescription::Absent,
    );
    let sketch = "1. Define $b_k$.\n2. Apply Abel summation.\n3. Bound the remainder.".to_string();
    let proof = (0..proof_lines)
        .map(|i| format!("Step {i}: since $a_{i} \\le a_{{{}}}$, the partial sum grows by at most $2^{{-{i}}}$.", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    Hierarchy::new(Some(insight), Some(sketch), proof).expect("valid hierarchy")
}
