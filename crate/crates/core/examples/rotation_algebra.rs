//! Planar rotations, the rotary frequency schedule and cumulative angles.
//!
//!     cargo run --example rotation_algebra

use joformer::autograd::Tape;
use joformer::rotation::{
    cumulative_angles_fixed, cumulative_angles_per_token, explicit_rotation_matrix, rope_frequencies, rotate_pairs, Sign,
};
use joformer::Tensor;

pub struct Findings {
    pub frequencies: Vec<f64>,
    pub fixed_phi: Vec<f64>,
    pub per_token_phi: Vec<f64>,
    pub round_trip_error: f64,
}

pub fn run_example() -> anyhow::Result<Findings> {
    let omega = rope_frequencies::<f64>(4, 10_000.0)?;
    println!("ω for d=4: {:?}", omega.as_slice());

    // Φ_p = p·ω for the fixed schedule.
    let fixed = cumulative_angles_fixed(1, 4, &omega);
    println!("fixed Φ (T=4): {:?}", fixed.data());

    // Per-token angles: Φ_p is the sum of the rows of the tokens before p.
    let tape = Tape::<f64>::new();
    let table = tape.constant(Tensor::new(&[3, 2], vec![0.1, 0.0, 0.2, 0.5, 0.3, 1.0])?);
    let phi = cumulative_angles_per_token(&[0, 1, 2, 0], 1, 4, table)?;
    let per_token = phi.value().data().to_vec();
    println!("per-token Φ for tokens [0, 1, 2, 0]: {per_token:?}");

    let x = Tensor::new(&[1, 1, 4], vec![1.0, 2.0, -0.5, 0.25])?;
    let angles = Tensor::new(&[1, 1, 2], vec![0.7, -2.1])?;
    let there = rotate_pairs(&x, &angles, Sign::Negative)?;
    let back = rotate_pairs(&there, &angles, Sign::Positive)?;
    let err = x.max_abs_diff(&back).unwrap_or(f64::INFINITY);
    println!("rotate by -φ then +φ: max error {err:.3e}");

    let m = explicit_rotation_matrix(&[std::f64::consts::FRAC_PI_2]);
    println!("R(π/2) =\n{m:.3}");

    Ok(Findings {
        frequencies: omega.as_slice().to_vec(),
        fixed_phi: fixed.data().to_vec(),
        per_token_phi: per_token,
        round_trip_error: err,
    })
}

fn main() -> anyhow::Result<()> {
    run_example()?;
    Ok(())
}
