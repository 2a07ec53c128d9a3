use crate::autograd::Var;
use crate::data::TokenBatch;
use crate::error::{ModelError, TensorError};
use crate::rotation::{apply_rotation, cumulative_angles_fixed, cumulative_angles_per_token, rope_frequencies, Sign};
use crate::tensor::{Scalar, Tensor};

use super::{Layer, Linear, ModelConfig, Norm, ParamSet, Variant};

/// Rotation directions used by [`journey_attention_with`].
///
/// With the default (both negative), `Q'_p = Rot(−Φ_p)Q_p` and
/// `K'_q = Rot(−Φ_q)K_q`, so `Q'_p·K'_q = Q_p·Rot(Φ_p − Φ_q)K_q`, the query
/// against the journey-transformed key. Values are pre-rotated with
/// `value` and the weighted sum is rotated back with the opposite sign,
/// giving `Rot(Φ_p − Φ_q)V_q` per term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConvention {
    pub query_key: Sign,
    pub value: Sign,
}

impl Default for AttentionConvention {
    fn default() -> Self {
        AttentionConvention {
            query_key: Sign::Negative,
            value: Sign::Negative,
        }
    }
}

/// Scaled scores `(Q'·K'ᵀ)/√d` before masking, `[B, T, T]`.
pub fn attention_scores<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    phi: Var<'t, S>,
    convention: AttentionConvention,
) -> Result<Var<'t, S>, TensorError> {
    let d = *q.shape().last().unwrap_or(&0);
    if d % 2 != 0 {
        return Err(TensorError::BadShape {
            op: "journey_attention",
            expected: "even model dimension",
            shape: q.shape(),
        });
    }
    let q_rot = apply_rotation(q, phi, convention.query_key)?;
    let k_rot = apply_rotation(k, phi, convention.query_key)?;
    let inv_sqrt_d = S::one() / S::from_f64(d as f64).sqrt();
    Ok(q_rot.matmul_nt(k_rot)?.scale(inv_sqrt_d))
}

/// Causal single-head attention with positions entering through the
/// cumulative angles `phi[B, T, d/2]`.
///
/// When `rotate_values` is set each value is carried along its journey:
/// `O_p = Σ_{q≤p} α_{p,q} Rot(Φ_p − Φ_q) V_q`. Otherwise
/// `O_p = Σ_{q≤p} α_{p,q} V_q`.
pub fn journey_attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    phi: Var<'t, S>,
    rotate_values: bool,
) -> Result<Var<'t, S>, TensorError> {
    journey_attention_with(q, k, v, phi, rotate_values, AttentionConvention::default())
}

pub fn journey_attention_with<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    phi: Var<'t, S>,
    rotate_values: bool,
    convention: AttentionConvention,
) -> Result<Var<'t, S>, TensorError> {
    Ok(attention_traced(q, k, v, phi, rotate_values, convention)?.0)
}

fn attention_traced<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    phi: Var<'t, S>,
    rotate_values: bool,
    convention: AttentionConvention,
) -> Result<(Var<'t, S>, Var<'t, S>), TensorError> {
    let scores = attention_scores(q, k, phi, convention)?;
    let weights = scores.mask_future()?.softmax_lastdim()?;
    let out = if rotate_values {
        let v_rot = apply_rotation(v, phi, convention.value)?;
        apply_rotation(weights.matmul(v_rot)?, phi, convention.value.flip())?
    } else {
        weights.matmul(v)?
    };
    Ok((out, scores))
}

fn linear<'t, S: Scalar>(x: Var<'t, S>, layer: &Linear<Var<'t, S>>) -> Result<Var<'t, S>, TensorError> {
    x.matmul(layer.weight)?.add_bias(layer.bias)
}

fn norm<'t, S: Scalar>(x: Var<'t, S>, params: &Norm<Var<'t, S>>, eps: f64) -> Result<Var<'t, S>, TensorError> {
    x.layer_norm(params.gain, params.bias, S::from_f64(eps))
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn block_forward<'t, S: Scalar>(
    x: Var<'t, S>,
    layer: &Layer<Var<'t, S>>,
    phi: Var<'t, S>,
    config: &ModelConfig,
) -> Result<Var<'t, S>, TensorError> {
    Ok(block_traced(x, layer, phi, config, config.variant.rotates_values())?.0)
}

fn block_traced<'t, S: Scalar>(
    x: Var<'t, S>,
    layer: &Layer<Var<'t, S>>,
    phi: Var<'t, S>,
    config: &ModelConfig,
    rotate_values: bool,
) -> Result<(Var<'t, S>, Var<'t, S>), TensorError> {
    let h = norm(x, &layer.attn_norm, config.layer_norm_eps)?;
    let q = linear(h, &layer.query)?;
    let k = linear(h, &layer.key)?;
    let v = linear(h, &layer.value)?;
    let (attn, scores) = attention_traced(q, k, v, phi, rotate_values, AttentionConvention::default())?;
    let x = x.add(linear(attn, &layer.output)?)?;
    let h = norm(x, &layer.ffn_norm, config.layer_norm_eps)?;
    let f = linear(linear(h, &layer.ffn_in)?.gelu(), &layer.ffn_out)?;
    Ok((x.add(f)?, scores))
}

/// Cumulative angles `[B, T, d/2]` for a batch: the fixed rotary schedule
/// (a constant) or the per-token prefix sums (differentiable in the table).
pub fn cumulative_angles<'t, S: Scalar>(
    params: &ParamSet<Var<'t, S>>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Var<'t, S>, ModelError> {
    let tape = params.token_embedding.tape();
    match (config.variant, params.angle_table) {
        (Variant::JoFormerPerToken, Some(table)) => {
            Ok(cumulative_angles_per_token(&batch.ids, batch.batch, batch.seq, table)?)
        }
        (Variant::JoFormerPerToken, None) => Err(ModelError::ParameterShape {
            name: "angle_table".into(),
            expected: vec![config.vocab_size, config.d_model / 2],
            found: Vec::new(),
        }),
        _ => {
            let omega = rope_frequencies::<S>(config.d_model, config.rope_base)?;
            Ok(tape.constant(cumulative_angles_fixed(batch.batch, batch.seq, &omega)))
        }
    }
}

/// Logits plus the pre-mask attention scores of every layer.
pub struct ForwardTrace<'t, S: Scalar> {
    pub logits: Var<'t, S>,
    pub scores: Vec<Tensor<S>>,
}

/// Token ids `[B, T]` to next-token logits `[B, T, V]`.
pub fn model_forward<'t, S: Scalar>(
    params: &ParamSet<Var<'t, S>>,
    config: &ModelConfig,
    batch: &TokenBatch,
) -> Result<Var<'t, S>, ModelError> {
    Ok(model_forward_traced(params, config, batch, None)?.logits)
}

/// [`model_forward`] that also returns attention scores. `rotate_values`
/// overrides the variant's value path when set.
pub fn model_forward_traced<'t, S: Scalar>(
    params: &ParamSet<Var<'t, S>>,
    config: &ModelConfig,
    batch: &TokenBatch,
    rotate_values: Option<bool>,
) -> Result<ForwardTrace<'t, S>, ModelError> {
    config.validate()?;
    if batch.seq > config.context_len {
        return Err(ModelError::ContextTooLong {
            len: batch.seq,
            max: config.context_len,
        });
    }
    let rotate_values = rotate_values.unwrap_or(config.variant.rotates_values());
    let phi = cumulative_angles(params, config, batch)?;
    let mut x = params.token_embedding.gather_rows(&batch.ids, &[batch.batch, batch.seq])?;
    let mut scores = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, layer_scores) = block_traced(x, layer, phi, config, rotate_values)?;
        scores.push(layer_scores.value().clone());
        x = next;
    }
    let h = norm(x, &params.final_norm, config.layer_norm_eps)?;
    Ok(ForwardTrace {
        logits: linear(h, &params.head)?,
        scores,
    })
}

/// Mean next-token cross-entropy.
pub fn loss_fn<'t, S: Scalar>(logits: Var<'t, S>, targets: &[usize]) -> Result<Var<'t, S>, TensorError> {
    logits.cross_entropy(targets)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::Tape;
    use crate::model::Parameters;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for rotate in [false, true] {
            let tape = Tape::new();
            let q = tape.constant(random(&[1, 1, 4], &mut rng));
            let k = tape.constant(random(&[1, 1, 4], &mut rng));
            let v = tape.constant(random(&[1, 1, 4], &mut rng));
            let phi = tape.constant(random(&[1, 1, 2], &mut rng));
            let out = journey_attention(q, k, v, phi, rotate).unwrap();
            assert!(out.value().max_abs_diff(&v.value()).unwrap() < 1e-15);
        }
    }

    #[test]
    fn zero_angles_give_plain_causal_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let (t, d) = (4, 6);
        let q = tape.constant(random(&[1, t, d], &mut rng));
        let k = tape.constant(random(&[1, t, d], &mut rng));
        let v = tape.constant(random(&[1, t, d], &mut rng));
        let phi = tape.constant(Tensor::zeros(&[1, t, d / 2]));
        let out = journey_attention(q, k, v, phi, true).unwrap();
        let plain = q
            .matmul_nt(k)
            .unwrap()
            .scale(1.0 / (d as f64).sqrt())
            .mask_future()
            .unwrap()
            .softmax_lastdim()
            .unwrap()
            .matmul(v)
            .unwrap();
        assert!(out.value().max_abs_diff(&plain.value()).unwrap() < 1e-15);
    }

    #[test]
    fn odd_width_is_a_configuration_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
        let phi = tape.constant(Tensor::zeros(&[1, 2, 1]));
        assert!(journey_attention(x, x, x, phi, false).is_err());
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let config = ModelConfig::new(Variant::JoFormerFixed, 1, 4, 3, 5);
        let mut params = Parameters::<f64>::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        params.layers[0].output.weight = Tensor::zeros(&[4, 4]);
        params.layers[0].ffn_out.weight = Tensor::zeros(&[16, 4]);
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = tape.constant(random(&[2, 3, 4], &mut rng));
        let batch = TokenBatch::new(2, 3, vec![0, 1, 2, 3, 4, 0]);
        let phi = cumulative_angles(&vars, &config, &batch).unwrap();
        let y = block_forward(x, &vars.layers[0], phi, &config).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn logits_shape_and_context_limit() {
        let config = ModelConfig::new(Variant::JoFormerPerToken, 2, 6, 4, 7);
        let params = Parameters::<f32>::init(&config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let batch = TokenBatch::new(3, 4, (0..12).map(|i| i % 7).collect());
        let logits = model_forward(&vars, &config, &batch).unwrap();
        assert_eq!(logits.shape(), vec![3, 4, 7]);

        let long = TokenBatch::new(1, 5, vec![0; 5]);
        assert_eq!(
            model_forward(&vars, &config, &long).unwrap_err(),
            ModelError::ContextTooLong { len: 5, max: 4 }
        );
        let bad = TokenBatch::new(1, 2, vec![0, 7]);
        assert!(matches!(
            model_forward(&vars, &config, &bad),
            Err(ModelError::Tensor(TensorError::IndexOutOfRange { id: 7, .. }))
        ));
    }

    #[test]
    fn fixed_variant_scores_match_roformer_when_values_unrotated() {
        let rof = ModelConfig::new(Variant::RoFormer, 2, 8, 6, 9);
        let jof = ModelConfig {
            variant: Variant::JoFormerFixed,
            ..rof.clone()
        };
        let params = Parameters::<f32>::init(&rof, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let batch = TokenBatch::new(2, 6, (0..12).map(|i| (i * 5) % 9).collect());
        let tape = Tape::new();
        let vars = params.register(&tape, false);
        let a = model_forward_traced(&vars, &rof, &batch, None).unwrap();
        let b = model_forward_traced(&vars, &jof, &batch, Some(false)).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(*a.logits.value(), *b.logits.value());
        // the first layer sees identical inputs even with rotated values
        let c = model_forward_traced(&vars, &jof, &batch, None).unwrap();
        assert_eq!(a.scores[0], c.scores[0]);
        assert_ne!(a.scores[1], c.scores[1]);
    }
}
