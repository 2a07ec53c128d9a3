//! Planar rotation kernels.
//!
//! A per-position transform rotates every coordinate pair `(2j, 2j+1)` by its
//! own angle. Rotations in the same plane commute, so the ordered product of
//! the transforms between two positions collapses to a rotation by the sum of
//! their angles. The cumulative angles `Φ_p = Σ_{i<p} φ_i` therefore encode
//! every journey at once: the journey from `q` to `p` is `Rot(Φ_p − Φ_q)`.

use nalgebra::DMatrix;

use crate::autograd::{CumsumMode, Var};
use crate::error::{ConfigError, TensorError};
use crate::tensor::{Scalar, Tensor};

/// Direction of a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn flip(self) -> Sign {
        match self {
            Sign::Positive => Sign::Negative,
            Sign::Negative => Sign::Positive,
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Sign::Positive => x,
            Sign::Negative => -x,
        }
    }
}

/// One angle (radians) per 2-D subspace of a `d`-dimensional vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleVector<S>(Vec<S>);

impl<S: Scalar> AngleVector<S> {
    pub fn new(angles: Vec<S>) -> Self {
        AngleVector(angles)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    /// Number of planes, `d / 2`.
    pub fn planes(&self) -> usize {
        self.0.len()
    }

    pub fn model_dim(&self) -> usize {
        2 * self.0.len()
    }
}

/// Rotary frequency schedule `ω_j = base^(−2j/d)`, `j = 0 … d/2 − 1`.
/// Evaluated in f64 and rounded once to `S`.
pub fn rope_frequencies<S: Scalar>(d: usize, base: f64) -> Result<AngleVector<S>, ConfigError> {
    if d == 0 || d % 2 != 0 {
        return Err(ConfigError::OddDimension(d));
    }
    if !(base > 1.0) {
        return Err(ConfigError::Invalid {
            field: "rope_base",
            requirement: "> 1",
            value: base.to_string(),
        });
    }
    let angles = (0..d / 2)
        .map(|j| S::from_f64(base.powf(-2.0 * j as f64 / d as f64)))
        .collect();
    Ok(AngleVector(angles))
}

/// Cumulative angles for a position-independent transform: `Φ[b, p, j] = p·ω_j`.
pub fn cumulative_angles_fixed<S: Scalar>(batch: usize, seq: usize, omega: &AngleVector<S>) -> Tensor<S> {
    let planes = omega.planes();
    let mut data = Vec::with_capacity(batch * seq * planes);
    for _ in 0..batch {
        for p in 0..seq {
            let p = S::from_f64(p as f64);
            data.extend(omega.as_slice().iter().map(|&w| p * w));
        }
    }
    Tensor::new(&[batch, seq, planes], data).expect("cumulative angle shape")
}

/// Cumulative angles for token-dependent transforms: the exclusive prefix sum
/// over the sequence of each token's row in `table` (`[V, d/2]`). Gradients
/// flow back into the table.
pub fn cumulative_angles_per_token<'t, S: Scalar>(
    token_ids: &[usize],
    batch: usize,
    seq: usize,
    table: Var<'t, S>,
) -> Result<Var<'t, S>, TensorError> {
    cumulative_angles_per_token_with(token_ids, batch, seq, table, CumsumMode::Exclusive)
}

/// [`cumulative_angles_per_token`] with an explicit prefix-sum mode.
pub fn cumulative_angles_per_token_with<'t, S: Scalar>(
    token_ids: &[usize],
    batch: usize,
    seq: usize,
    table: Var<'t, S>,
    mode: CumsumMode,
) -> Result<Var<'t, S>, TensorError> {
    table.gather_rows(token_ids, &[batch, seq])?.cumsum_seqdim(mode)
}

/// Rotates each pair `(x_2j, x_2j+1)` of `x[.., d]` by `sign · phi[.., j]`.
pub fn rotate_pairs<S: Scalar>(x: &Tensor<S>, phi: &Tensor<S>, sign: Sign) -> Result<Tensor<S>, TensorError> {
    check_rotation_shapes(x, phi)?;
    let mut out = x.clone();
    for (pair, &angle) in out.data_mut().chunks_exact_mut(2).zip(phi.data()) {
        let (s, c) = sign.apply(angle).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
    Ok(out)
}

fn check_rotation_shapes<S: Scalar>(x: &Tensor<S>, phi: &Tensor<S>) -> Result<(), TensorError> {
    let d = x.last_dim();
    let lead_ok = x.rank() >= 1 && phi.rank() == x.rank() && x.shape()[..x.rank() - 1] == phi.shape()[..phi.rank() - 1];
    if d % 2 != 0 || !lead_ok || phi.last_dim() * 2 != d {
        return Err(TensorError::ShapeMismatch {
            op: "apply_rotation",
            lhs: x.shape().to_vec(),
            rhs: phi.shape().to_vec(),
        });
    }
    Ok(())
}

/// Differentiable rotation of `x[B, T, d]` by `sign · phi[B, T, d/2]`.
///
/// With `θ = sign·φ` and output `(o0, o1)` the adjoints are
/// `dx = Rot(θ)ᵀ g` and `dφ = sign · (g1·o0 − g0·o1)`.
pub fn apply_rotation<'t, S: Scalar>(x: Var<'t, S>, phi: Var<'t, S>, sign: Sign) -> Result<Var<'t, S>, TensorError> {
    x.same_tape(&phi)?;
    let out = rotate_pairs(&x.value(), &phi.value(), sign)?;
    Ok(x.tape().record(
        out,
        &[x, phi],
        Box::new(move |inputs, out, grad| {
            let phi = inputs[1];
            let gx = rotate_pairs(grad, phi, sign.flip()).expect("rotation gradient shape");
            let gphi = grad
                .data()
                .chunks_exact(2)
                .zip(out.data().chunks_exact(2))
                .map(|(g, o)| sign.apply(g[1] * o[0] - g[0] * o[1]))
                .collect();
            vec![
                Some(gx),
                Some(Tensor::new(phi.shape(), gphi).expect("angle gradient shape")),
            ]
        }),
    ))
}

/// Materialized block-diagonal rotation `diag(R^(0), …, R^(d/2−1))` with
/// `R^(j) = [[cos φ_j, −sin φ_j], [sin φ_j, cos φ_j]]`.
pub fn explicit_rotation_matrix(angles: &[f64]) -> DMatrix<f64> {
    let d = 2 * angles.len();
    let mut m = DMatrix::zeros(d, d);
    for (j, &phi) in angles.iter().enumerate() {
        let (s, c) = phi.sin_cos();
        let i = 2 * j;
        m[(i, i)] = c;
        m[(i, i + 1)] = -s;
        m[(i + 1, i)] = s;
        m[(i + 1, i + 1)] = c;
    }
    m
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn rope_frequency_examples() {
        assert_eq!(rope_frequencies::<f64>(2, 10000.0).unwrap().as_slice(), &[1.0]);
        let f = rope_frequencies::<f64>(4, 10000.0).unwrap();
        assert_eq!(f.as_slice()[0], 1.0);
        assert_abs_diff_eq!(f.as_slice()[1], 0.01, epsilon = 1e-15);
        assert_eq!(rope_frequencies::<f64>(5, 10000.0), Err(ConfigError::OddDimension(5)));
        assert!(rope_frequencies::<f64>(4, 1.0).is_err());
    }

    #[test]
    fn rope_frequencies_d90_match_direct_evaluation() {
        let f = rope_frequencies::<f64>(90, 10000.0).unwrap();
        assert_eq!(f.planes(), 45);
        assert_eq!(f.as_slice()[0], 1.0);
        for (j, w) in f.as_slice().iter().enumerate() {
            let direct = (-(2.0 * j as f64 / 90.0) * 10000f64.ln()).exp();
            assert_abs_diff_eq!(*w, direct, epsilon = 1e-14);
        }
        assert!(f.as_slice().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fixed_schedule_is_position_times_frequency() {
        let omega = AngleVector::new(vec![0.5f64, 2.0]);
        let phi = cumulative_angles_fixed(2, 4, &omega);
        assert_eq!(phi.shape(), &[2, 4, 2]);
        assert_eq!(&phi.data()[..2], &[0.0, 0.0]);
        assert_eq!(phi.data()[3 * 2], 1.5);
        assert_eq!(phi.data()[(4 + 3) * 2 + 1], 6.0);
    }

    #[test]
    fn per_token_angles_are_exclusive_prefix_sums() {
        let tape = Tape::new();
        let table = tape.param(Tensor::new(&[3, 1], vec![0.1f64, 0.2, 0.3]).unwrap());
        let phi = cumulative_angles_per_token(&[0, 1, 2], 1, 3, table).unwrap();
        let v = phi.value();
        assert_eq!(v.data()[0], 0.0);
        assert_abs_diff_eq!(v.data()[1], 0.1);
        assert_abs_diff_eq!(v.data()[2], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn zero_table_disables_positions() {
        let tape = Tape::new();
        let table = tape.param(Tensor::<f64>::zeros(&[5, 3]));
        let phi = cumulative_angles_per_token(&[4, 0, 2, 2], 2, 2, table).unwrap();
        assert!(phi.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_token_rejects_unknown_token() {
        let tape = Tape::new();
        let table = tape.param(Tensor::<f64>::zeros(&[2, 1]));
        assert!(matches!(
            cumulative_angles_per_token(&[0, 2], 1, 2, table),
            Err(TensorError::IndexOutOfRange { id: 2, position: 1, .. })
        ));
    }

    #[test]
    fn quarter_turn_and_identity() {
        let x = Tensor::new(&[1, 1, 2], vec![1.0f64, 0.0]).unwrap();
        let quarter = Tensor::new(&[1, 1, 1], vec![FRAC_PI_2]).unwrap();
        let out = rotate_pairs(&x, &quarter, Sign::Positive).unwrap();
        assert_abs_diff_eq!(out.data()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.data()[1], 1.0, epsilon = 1e-15);
        let zero = Tensor::zeros(&[1, 1, 1]);
        assert_eq!(rotate_pairs(&x, &zero, Sign::Negative).unwrap(), x);
    }

    #[test]
    fn odd_width_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3]);
        let phi = Tensor::<f64>::zeros(&[1, 2, 1]);
        assert!(rotate_pairs(&x, &phi, Sign::Positive).is_err());
    }

    #[test]
    fn explicit_matrix_examples() {
        assert_eq!(explicit_rotation_matrix(&[0.0, 0.0]), DMatrix::identity(4, 4));
        let half_turn = explicit_rotation_matrix(&[PI]);
        let expected = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!((half_turn - expected).abs().max() < 1e-15);
    }

    proptest! {
        #[test]
        fn rotation_preserves_pair_norms(
            values in prop::collection::vec(-3.0f32..3.0, 12),
            angles in prop::collection::vec(-20.0f32..20.0, 6),
        ) {
            let x = Tensor::new(&[1, 2, 6], values).unwrap();
            let phi = Tensor::new(&[1, 2, 3], angles).unwrap();
            let out = rotate_pairs(&x, &phi, Sign::Positive).unwrap();
            for (a, b) in x.data().chunks(2).zip(out.data().chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                prop_assert!((na - nb).abs() <= 1e-5);
            }
        }

        #[test]
        fn inverse_rotation_round_trips(
            values in prop::collection::vec(-2.0f64..2.0, 8),
            angles in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            let x = Tensor::new(&[2, 1, 4], values).unwrap();
            let phi = Tensor::new(&[2, 1, 2], angles).unwrap();
            let there = rotate_pairs(&x, &phi, Sign::Positive).unwrap();
            let back = rotate_pairs(&there, &phi, Sign::Negative).unwrap();
            prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-6);
        }

        #[test]
        fn same_plane_rotations_compose_by_angle_sum(
            phi in prop::collection::vec(-10.0f64..10.0, 3),
            psi in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let sum: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| a + b).collect();
            let product = explicit_rotation_matrix(&phi) * explicit_rotation_matrix(&psi);
            prop_assert!((product - explicit_rotation_matrix(&sum)).abs().max() < 1e-9);
        }
    }
}
