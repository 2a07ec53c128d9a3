//! Journey attention on one random sequence, checked against the explicit
//! matrix-product reference.
//!
//!     cargo run --example journey_attention -- [T] [d] [seed]

use joformer::oracle::{block_rotation, kernel_attention, oracle_attention, Mutation};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest kernel/reference difference for `rotate_values = false, true`.
pub fn run_example(t: usize, d: usize, seed: u64) -> anyhow::Result<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let (q, k, v) = (random(t, d), random(t, d), random(t, d));
    let angles: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..d / 2).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let transforms: Vec<_> = angles.iter().map(|a| block_rotation(a)).collect();

    let mut diffs = [0.0; 2];
    for (i, rotate_values) in [false, true].into_iter().enumerate() {
        let fast = kernel_attention(&q, &k, &v, &angles, rotate_values, Mutation::None)?;
        let reference = oracle_attention(&q, &k, &v, &transforms, rotate_values);
        diffs[i] = (&fast - &reference).amax();
        println!("rotate_values={rotate_values:<5}  max |kernel - reference| = {:.3e}", diffs[i]);
    }
    println!("output row 0 equals V_0: {}", kernel_attention(&q, &k, &v, &angles, true, Mutation::None)?.row(0) == v.row(0));
    Ok(diffs)
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let t = args.first().map_or(Ok(5), |s| s.parse())?;
    let d = args.get(1).map_or(Ok(6), |s| s.parse())?;
    let seed = args.get(2).map_or(Ok(0), |s| s.parse())?;
    anyhow::ensure!(d % 2 == 0, "d must be even");
    run_example(t, d, seed)?;
    Ok(())
}
