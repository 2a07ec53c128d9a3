//! Brute-force references and numerical checks for the attention kernels.
//!
//! [`oracle_attention`] materializes every journey matrix
//! `T_{p,q} = R_q R_{q+1} ⋯ R_{p−1}` as an explicit product of block-diagonal
//! rotations and never uses prefix sums, so agreement with
//! [`journey_attention`](crate::model::journey_attention) is meaningful.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{CumsumMode, Tape};
use crate::data::TokenBatch;
use crate::error::ModelError;
use crate::model::{
    attention_scores, journey_attention_with, model_forward, model_forward_traced, AngleInit, AttentionConvention,
    ModelConfig, Parameters, Variant,
};
use crate::rotation::{cumulative_angles_per_token_with, rotate_pairs, Sign};
use crate::tensor::{Scalar, Tensor};

/// Algebraic identities in ieee-64.
pub const TOL_F64: f64 = 1e-9;
/// Forward equivalences in ieee-32.
pub const TOL_F32: f64 = 1e-6;
/// Finite-difference gradient comparisons (relative).
pub const TOL_GRAD: f64 = 1e-5;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative gradient error, so entries whose true
/// gradient is zero are judged on absolute error.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

/// Which error a report is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Judged {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tol: f64,
    pub judged: Judged,
    pub pass: bool,
    /// Shapes, seed and anything else needed to reproduce the check.
    pub input: String,
}

impl OracleReport {
    pub fn new(name: impl Into<String>, max_abs: f64, max_rel: f64, tol: f64, judged: Judged, input: String) -> Self {
        let measured = match judged {
            Judged::Absolute => max_abs,
            Judged::Relative => max_rel,
        };
        OracleReport {
            name: name.into(),
            max_abs,
            max_rel,
            tol,
            judged,
            pass: measured <= tol,
            input,
        }
    }

    fn failed(name: impl Into<String>, tol: f64, judged: Judged, input: String) -> Self {
        OracleReport {
            name: name.into(),
            max_abs: f64::NAN,
            max_rel: f64::NAN,
            tol,
            judged,
            pass: false,
            input,
        }
    }
}

pub fn render_reports(reports: &[OracleReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{} {:<width$}  max_abs={:.3e}  max_rel={:.3e}  tol={:.0e} ({})  [{}]",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.max_abs,
            r.max_rel,
            r.tol,
            match r.judged {
                Judged::Absolute => "abs",
                Judged::Relative => "rel",
            },
            r.input
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    let _ = writeln!(out, "{} checks, {} failed", reports.len(), failed);
    out
}

pub fn reports_to_csv(reports: &[OracleReport]) -> String {
    let mut out = String::from("name,max_abs,max_rel,tol,pass\n");
    for r in reports {
        let _ = writeln!(out, "{},{:.8e},{:.8e},{:.8e},{}", r.name, r.max_abs, r.max_rel, r.tol, r.pass);
    }
    out
}

/// Deliberate defects injected into the kernel path, used to show that the
/// suite is not vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Values rotated the wrong way along the journey.
    FlipValueSign,
    /// Queries and keys rotated the wrong way.
    FlipQueryKeySign,
    /// Prefix sums include the current position.
    InclusiveCumsum,
}

impl Mutation {
    pub const DEFECTS: [Mutation; 3] = [Mutation::FlipValueSign, Mutation::FlipQueryKeySign, Mutation::InclusiveCumsum];

    pub fn convention(self) -> AttentionConvention {
        let base = AttentionConvention::default();
        match self {
            Mutation::FlipValueSign => AttentionConvention {
                value: base.value.flip(),
                ..base
            },
            Mutation::FlipQueryKeySign => AttentionConvention {
                query_key: base.query_key.flip(),
                ..base
            },
            _ => base,
        }
    }

    pub fn cumsum(self) -> CumsumMode {
        match self {
            Mutation::InclusiveCumsum => CumsumMode::Inclusive,
            _ => CumsumMode::Exclusive,
        }
    }
}

/// `diag(R(φ_0), …)` with `R(φ) = [[cos φ, −sin φ], [sin φ, cos φ]]`.
pub fn block_rotation(angles: &[f64]) -> DMatrix<f64> {
    let d = 2 * angles.len();
    DMatrix::from_fn(d, d, |r, c| {
        if r / 2 != c / 2 {
            return 0.0;
        }
        let phi = angles[r / 2];
        match (r % 2, c % 2) {
            (0, 0) | (1, 1) => phi.cos(),
            (0, 1) => -phi.sin(),
            _ => phi.sin(),
        }
    })
}

/// Reference causal attention for one sequence. `q`, `k`, `v` are `[T, d]`;
/// `transforms[i]` is the `d × d` matrix `R_i` of position `i`.
///
/// `O_p = Σ_{q≤p} α_{p,q} W_{p,q}`, with `α_{p,·} = softmax_q(Q_p·T_{p,q}K_q / √d)`
/// and `W_{p,q} = T_{p,q}V_q` when `rotate_values` is set, else `V_q`.
pub fn oracle_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    transforms: &[DMatrix<f64>],
    rotate_values: bool,
) -> DMatrix<f64> {
    let (t, d) = q.shape();
    assert_eq!(k.shape(), (t, d), "key shape");
    assert_eq!(v.shape(), (t, d), "value shape");
    assert_eq!(transforms.len(), t, "one transform per position");
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = DMatrix::zeros(t, d);
    for p in 0..t {
        let journeys: Vec<DMatrix<f64>> = (0..=p)
            .map(|src| {
                let mut m = DMatrix::identity(d, d);
                for r in &transforms[src..p] {
                    m *= r;
                }
                m
            })
            .collect();
        let qp: DVector<f64> = q.row(p).transpose();
        let scores: Vec<f64> = (0..=p)
            .map(|src| qp.dot(&(&journeys[src] * k.row(src).transpose())) * scale)
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut acc = DVector::zeros(d);
        for src in 0..=p {
            let vq: DVector<f64> = v.row(src).transpose();
            let w = if rotate_values { &journeys[src] * vq } else { vq };
            acc += w * (exps[src] / z);
        }
        out.set_row(p, &acc.transpose());
    }
    out
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor<f64> {
    let (r, c) = m.shape();
    Tensor::new(&[1, r, c], (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect()).expect("matrix shape")
}

/// The fast path on one sequence: position `i` gets its own row of angles
/// in a table indexed by token id `i`, so the prefix sums of the per-token
/// path turn them into cumulative angles.
pub fn kernel_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    angles: &[Vec<f64>],
    rotate_values: bool,
    mutation: Mutation,
) -> Result<DMatrix<f64>, ModelError> {
    let (t, d) = q.shape();
    let tape = Tape::<f64>::new();
    let table = tape.constant(Tensor::new(&[t, d / 2], angles.concat())?);
    let ids: Vec<usize> = (0..t).collect();
    let phi = cumulative_angles_per_token_with(&ids, 1, t, table, mutation.cumsum())?;
    let out = journey_attention_with(
        tape.constant(to_tensor(q)),
        tape.constant(to_tensor(k)),
        tape.constant(to_tensor(v)),
        phi,
        rotate_values,
        mutation.convention(),
    )?;
    let out = out.value();
    Ok(DMatrix::from_row_slice(t, d, out.data()))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_angles(rng: &mut ChaCha8Rng, t: usize, planes: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..planes).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect())
        .collect()
}

/// Kernel against oracle on `instances` random `(T, d)` problems.
pub fn check_oracle_attention(
    seed: u64,
    instances: usize,
    shapes: &[(usize, usize)],
    rotate_values: bool,
    mutation: Mutation,
) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let (t, d) = shapes[i % shapes.len()];
        let q = uniform_matrix(&mut rng, t, d);
        let k = uniform_matrix(&mut rng, t, d);
        let v = uniform_matrix(&mut rng, t, d);
        let angles = random_angles(&mut rng, t, d / 2);
        let transforms: Vec<DMatrix<f64>> = angles.iter().map(|a| block_rotation(a)).collect();
        let reference = oracle_attention(&q, &k, &v, &transforms, rotate_values);
        let fast = match kernel_attention(&q, &k, &v, &angles, rotate_values, mutation) {
            Ok(m) => m,
            Err(e) => return OracleReport::failed("oracle_attention", TOL_F64, Judged::Absolute, e.to_string()),
        };
        max_abs = max_abs.max((&fast - &reference).amax());
        max_ref = max_ref.max(reference.amax());
    }
    let shape_text: Vec<String> = shapes.iter().map(|(t, d)| format!("T={t} d={d}")).collect();
    OracleReport::new(
        format!("oracle_attention[rotate_values={rotate_values}]"),
        max_abs,
        max_abs / max_ref.max(f64::MIN_POSITIVE),
        TOL_F64,
        Judged::Absolute,
        format!("{instances} instances, {}, ieee-64, seed {seed}", shape_text.join("/")),
    )
}

fn random_batch(rng: &mut ChaCha8Rng, batch: usize, seq: usize, vocab: usize) -> TokenBatch {
    TokenBatch::new(batch, seq, (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect())
}

fn logits_of<S: Scalar>(params: &Parameters<S>, config: &ModelConfig, batch: &TokenBatch) -> Result<Tensor<S>, ModelError> {
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let logits = model_forward(&vars, config, batch)?;
    let value = logits.value().clone();
    Ok(value)
}

/// Per-token model whose every angle row equals the rotary schedule against
/// the fixed-angle model with the same remaining weights, in ieee-32.
pub fn check_rope_recovery(seed: u64, batches: usize) -> OracleReport {
    let name = "per_token_constant_rows_eq_fixed";
    let run = || -> Result<(f64, f64), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut per_token = ModelConfig::new(Variant::JoFormerPerToken, 2, 16, 12, 13);
        per_token.angle_init = AngleInit::Rope;
        let fixed = ModelConfig {
            variant: Variant::JoFormerFixed,
            ..per_token.clone()
        };
        let params = Parameters::<f32>::init(&per_token, &mut rng)?;
        let fixed_params = Parameters {
            angle_table: None,
            ..params.clone()
        };
        let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
        for _ in 0..batches {
            let batch = random_batch(&mut rng, 4, 12, 13);
            let a = logits_of(&params, &per_token, &batch)?;
            let b = logits_of(&fixed_params, &fixed, &batch)?;
            max_abs = max_abs.max(a.max_abs_diff(&b).unwrap_or(f64::INFINITY));
            max_ref = max_ref.max(b.data().iter().map(|x| x.abs() as f64).fold(0.0, f64::max));
        }
        Ok((max_abs, max_abs / max_ref.max(f64::MIN_POSITIVE)))
    };
    let input = format!("{batches} batches B=4 T=12, 2 layers d=16 V=13, ieee-32, seed {seed}");
    match run() {
        Ok((abs, rel)) => OracleReport::new(name, abs, rel, TOL_F32, Judged::Absolute, input),
        Err(e) => OracleReport::failed(name, TOL_F32, Judged::Absolute, format!("{input}: {e}")),
    }
}

/// Attention scores of the fixed-angle JoFormer and RoFormer on identical
/// weights and inputs; they must agree bit for bit.
pub fn check_scores_bitwise(seed: u64, batches: usize) -> OracleReport {
    let name = "fixed_scores_eq_roformer_bitwise";
    let run = || -> Result<(f64, usize), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rope = ModelConfig::new(Variant::RoFormer, 1, 16, 12, 13);
        let fixed = ModelConfig {
            variant: Variant::JoFormerFixed,
            ..rope.clone()
        };
        let params = Parameters::<f32>::init(&rope, &mut rng)?;
        let (mut max_abs, mut mismatched) = (0.0f64, 0usize);
        for _ in 0..batches {
            let batch = random_batch(&mut rng, 4, 12, 13);
            let tape = Tape::new();
            let vars = params.register(&tape, false);
            let a = model_forward_traced(&vars, &rope, &batch, None)?.scores;
            let b = model_forward_traced(&vars, &fixed, &batch, None)?.scores;
            for (x, y) in a.iter().zip(&b) {
                max_abs = max_abs.max(x.max_abs_diff(y).unwrap_or(f64::INFINITY));
                mismatched += x.data().iter().zip(y.data()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
            }
        }
        Ok((max_abs, mismatched))
    };
    let input = format!("{batches} batches B=4 T=12, 1 layer d=16 V=13, ieee-32, seed {seed}");
    match run() {
        Ok((abs, mismatched)) => OracleReport::new(
            name,
            abs,
            abs,
            0.0,
            Judged::Absolute,
            format!("{input}, {mismatched} differing bit patterns"),
        ),
        Err(e) => OracleReport::failed(name, 0.0, Judged::Absolute, format!("{input}: {e}")),
    }
}

/// `Rot(ψ)Rot(φ)x = Rot(φ+ψ)x` through the kernel and through explicit
/// matrices, in ieee-64.
pub fn check_composition(seed: u64, trials: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_abs = 0.0f64;
    for _ in 0..trials {
        let planes = rng.random_range(1..=8usize);
        let t = rng.random_range(1..=6usize);
        let x = Tensor::new(&[1, t, 2 * planes], (0..2 * planes * t).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape");
        let phi_v: Vec<f64> = (0..planes * t).map(|_| rng.random_range(-10.0..10.0)).collect();
        let psi_v: Vec<f64> = (0..planes * t).map(|_| rng.random_range(-10.0..10.0)).collect();
        let sum_v: Vec<f64> = phi_v.iter().zip(&psi_v).map(|(a, b)| a + b).collect();
        let phi = Tensor::new(&[1, t, planes], phi_v.clone()).expect("shape");
        let psi = Tensor::new(&[1, t, planes], psi_v.clone()).expect("shape");
        let sum = Tensor::new(&[1, t, planes], sum_v.clone()).expect("shape");
        let twice = rotate_pairs(&rotate_pairs(&x, &phi, Sign::Positive).expect("shape"), &psi, Sign::Positive)
            .expect("shape");
        let once = rotate_pairs(&x, &sum, Sign::Positive).expect("shape");
        max_abs = max_abs.max(twice.max_abs_diff(&once).unwrap_or(f64::INFINITY));
        let m = block_rotation(&phi_v[..planes]) * block_rotation(&psi_v[..planes]);
        max_abs = max_abs.max((m - block_rotation(&sum_v[..planes])).amax());
    }
    OracleReport::new(
        "rotation_composition",
        max_abs,
        max_abs,
        TOL_F64,
        Judged::Absolute,
        format!("{trials} trials, d ≤ 16, angles in [-10, 10), ieee-64, seed {seed}"),
    )
}

/// Each rotated plane keeps its Euclidean norm, in ieee-32.
pub fn check_norm_preservation(seed: u64, trials: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let planes = rng.random_range(1..=45usize);
        let t = rng.random_range(1..=20usize);
        let x = Tensor::<f32>::new(&[1, t, 2 * planes], (0..2 * planes * t).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape");
        let phi = Tensor::<f32>::new(&[1, t, planes], (0..planes * t).map(|_| rng.random_range(-50.0..50.0)).collect())
            .expect("shape");
        for sign in [Sign::Positive, Sign::Negative] {
            let y = rotate_pairs(&x, &phi, sign).expect("shape");
            for (a, b) in x.data().chunks_exact(2).zip(y.data().chunks_exact(2)) {
                let na = (a[0] as f64).hypot(a[1] as f64);
                let nb = (b[0] as f64).hypot(b[1] as f64);
                max_abs = max_abs.max((na - nb).abs());
                max_rel = max_rel.max((na - nb).abs() / na.max(f64::MIN_POSITIVE));
            }
        }
    }
    OracleReport::new(
        "norm_preservation",
        max_abs,
        max_rel,
        1e-5,
        Judged::Absolute,
        format!("{trials} trials, d ≤ 90, T ≤ 20, angles in [-50, 50), ieee-32, seed {seed}"),
    )
}

/// The first cumulative angle of every sequence is exactly zero.
pub fn check_prefix_origin(seed: u64, mutation: Mutation) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t, planes, vocab) = (3, 7, 5, 11);
    let tape = Tape::<f64>::new();
    let table = tape.constant(
        Tensor::new(&[vocab, planes], (0..vocab * planes).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape"),
    );
    let ids: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..vocab)).collect();
    let input = format!("B={b} T={t} d={} V={vocab}, ieee-64, seed {seed}", 2 * planes);
    match cumulative_angles_per_token_with(&ids, b, t, table, mutation.cumsum()) {
        Ok(phi) => {
            let phi = phi.value();
            let max_abs = (0..b)
                .flat_map(|i| phi.data()[i * t * planes..i * t * planes + planes].iter())
                .fold(0.0f64, |m, x| m.max(x.abs()));
            OracleReport::new("prefix_origin_zero", max_abs, max_abs, 0.0, Judged::Absolute, input)
        }
        Err(e) => OracleReport::failed("prefix_origin_zero", 0.0, Judged::Absolute, format!("{input}: {e}")),
    }
}

/// `d = 2`, `Q = K = (1, 0)`, journey angle `π/2`: the raw score is zero.
pub fn check_quarter_turn(mutation: Mutation) -> OracleReport {
    let tape = Tape::<f64>::new();
    let unit = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).expect("shape");
    let q = tape.constant(unit.clone());
    let k = tape.constant(unit);
    let phi = tape.constant(Tensor::new(&[1, 2, 1], vec![0.0, std::f64::consts::FRAC_PI_2]).expect("shape"));
    let input = "d=2, Q=K=(1,0), journey angle π/2".to_string();
    match attention_scores(q, k, phi, mutation.convention()) {
        Ok(s) => {
            // scores[p=1, q=0] scaled back by √d
            let raw = s.value().data()[2] * 2f64.sqrt();
            OracleReport::new("quarter_turn_score", raw.abs(), raw.abs(), 1e-12, Judged::Absolute, input)
        }
        Err(e) => OracleReport::failed("quarter_turn_score", 1e-12, Judged::Absolute, format!("{input}: {e}")),
    }
}

/// Problem sizes swept by the oracle comparison: `T ≤ 16`, `d ≤ 16`.
pub const ORACLE_SWEEP: [(usize, usize); 6] = [(1, 2), (2, 4), (5, 6), (8, 10), (12, 16), (16, 8)];

/// Every equivalence check with the kernels as built.
pub fn equivalence_suite(seed: u64) -> Vec<OracleReport> {
    equivalence_suite_with(seed, Mutation::None)
}

/// [`equivalence_suite`] with a defect injected into the kernel path.
pub fn equivalence_suite_with(seed: u64, mutation: Mutation) -> Vec<OracleReport> {
    let mut reports = vec![check_rope_recovery(seed, 20), check_scores_bitwise(seed, 20)];
    reports.push(check_composition(seed, 200));
    for rotate_values in [false, true] {
        reports.push(check_oracle_attention(seed, 100, &[(5, 6)], rotate_values, mutation));
        let mut sweep = check_oracle_attention(seed ^ 0x5eed, 120, &ORACLE_SWEEP, rotate_values, mutation);
        sweep.name = format!("oracle_sweep[rotate_values={rotate_values}]");
        reports.push(sweep);
    }
    reports.push(check_norm_preservation(seed, 200));
    reports.push(check_prefix_origin(seed, mutation));
    reports.push(check_quarter_turn(mutation));
    reports
}

fn loss_value(params: &Parameters<f64>, config: &ModelConfig, batch: &TokenBatch, targets: &[usize]) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let vars = params.register(&tape, false);
    let loss = model_forward(&vars, config, batch)?.cross_entropy(targets)?;
    let value = loss.value().data()[0];
    Ok(value)
}

/// Parameters in ieee-64 drawn on a wider scale than the training
/// initialization, so every gradient entry is well away from zero.
pub fn grad_check_params(config: &ModelConfig, seed: u64) -> Result<Parameters<f64>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::<f64>::init(config, &mut rng)?;
    for t in params.values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    Ok(params)
}

/// Backpropagated gradients against central finite differences over every
/// parameter entry, in ieee-64.
pub fn grad_check_model(config: &ModelConfig, seed: u64, tol: f64) -> OracleReport {
    let name = format!("grad_check[{}]", config.variant);
    let (b, t) = (2, config.context_len);
    let input = format!(
        "{} layer(s) d={} T={t} V={} B={b}, h={FD_STEP:.0e}, ieee-64, seed {seed}",
        config.n_layers, config.d_model, config.vocab_size
    );
    let run = || -> Result<OracleReport, ModelError> {
        let mut params = grad_check_params(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let batch = random_batch(&mut rng, b, t, config.vocab_size);
        let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..config.vocab_size)).collect();

        let tape = Tape::new();
        let vars = params.register(&tape, true);
        let loss = model_forward(&vars, config, &batch)?.cross_entropy(&targets)?;
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<(String, Tensor<f64>)> =
            vars.named().into_iter().map(|(n, v)| (n, grads.take_or_zeros(*v))).collect();
        drop(vars);

        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        let mut worst = String::new();
        let mut entries = 0usize;
        for (slot, (pname, grad)) in analytic.iter().enumerate() {
            for j in 0..grad.numel() {
                let a = grad.data()[j];
                let original = params.values_mut()[slot].data()[j];
                params.values_mut()[slot].data_mut()[j] = original + FD_STEP;
                let up = loss_value(&params, config, &batch, &targets)?;
                params.values_mut()[slot].data_mut()[j] = original - FD_STEP;
                let down = loss_value(&params, config, &batch, &targets)?;
                params.values_mut()[slot].data_mut()[j] = original;
                let n = (up - down) / (2.0 * FD_STEP);
                if !a.is_finite() || !n.is_finite() {
                    return Ok(OracleReport::failed(
                        name.clone(),
                        tol,
                        Judged::Relative,
                        format!("{input}: non-finite gradient at {pname}[{j}] (analytic {a}, numeric {n})"),
                    ));
                }
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(GRAD_REL_FLOOR);
                max_abs = max_abs.max(abs);
                if rel > max_rel || worst.is_empty() {
                    max_rel = rel;
                    worst = format!("{pname}[{j}]");
                }
                entries += 1;
            }
        }
        Ok(OracleReport::new(
            name.clone(),
            max_abs,
            max_rel,
            tol,
            Judged::Relative,
            format!("{input}, {entries} entries, worst {worst}"),
        ))
    };
    run().unwrap_or_else(|e| OracleReport::failed(name.clone(), tol, Judged::Relative, format!("{input}: {e}")))
}

/// The configuration used for the gradient check: 1 layer, `d = 6`,
/// `T = 5`, `V = 11`.
pub fn grad_check_config(variant: Variant) -> ModelConfig {
    ModelConfig::new(variant, 1, 6, 5, 11)
}

/// Equivalence suite plus gradient checks of all three variants.
pub fn verify_all(seed: u64) -> Vec<OracleReport> {
    let mut reports = equivalence_suite(seed);
    for variant in [Variant::JoFormerPerToken, Variant::JoFormerFixed, Variant::RoFormer] {
        reports.push(grad_check_model(&grad_check_config(variant), seed, TOL_GRAD));
    }
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transforms_give_plain_causal_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, k, v) = (uniform_matrix(&mut rng, 4, 6), uniform_matrix(&mut rng, 4, 6), uniform_matrix(&mut rng, 4, 6));
        let eye = vec![DMatrix::identity(6, 6); 4];
        let out = oracle_attention(&q, &k, &v, &eye, true);
        // Row 1 by hand.
        let s: Vec<f64> = (0..2).map(|j| q.row(1).dot(&k.row(j)) / 6f64.sqrt()).collect();
        let w: Vec<f64> = s.iter().map(|x| x.exp()).collect();
        let z = w[0] + w[1];
        for c in 0..6 {
            let expect = (w[0] * v[(0, c)] + w[1] * v[(1, c)]) / z;
            assert!((out[(1, c)] - expect).abs() < 1e-12);
        }
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn single_position_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (uniform_matrix(&mut rng, 1, 4), uniform_matrix(&mut rng, 1, 4), uniform_matrix(&mut rng, 1, 4));
        let out = oracle_attention(&q, &k, &v, &[block_rotation(&[0.3, 1.0])], true);
        assert_eq!(out, v);
    }

    #[test]
    fn block_rotation_quarter_turn() {
        let m = block_rotation(&[std::f64::consts::FRAC_PI_2]);
        let y = m * DVector::from_vec(vec![1.0, 0.0]);
        assert!((y[0]).abs() < 1e-16 && (y[1] - 1.0).abs() < 1e-16);
    }

    #[test]
    fn suite_passes_as_built() {
        let reports = equivalence_suite(11);
        assert!(reports.iter().all(|r| r.pass), "{}", render_reports(&reports));
    }

    #[test]
    fn every_defect_is_caught() {
        for m in Mutation::DEFECTS {
            let reports = equivalence_suite_with(3, m);
            assert!(reports.iter().any(|r| !r.pass), "{m:?} went unnoticed");
        }
    }

    #[test]
    fn value_sign_flip_breaks_value_rotating_comparison_only() {
        let on = check_oracle_attention(5, 10, &[(5, 6)], true, Mutation::FlipValueSign);
        let off = check_oracle_attention(5, 10, &[(5, 6)], false, Mutation::FlipValueSign);
        assert!(!on.pass && off.pass);
    }

    #[test]
    fn inclusive_prefix_is_caught_twice() {
        assert!(!check_prefix_origin(2, Mutation::InclusiveCumsum).pass);
        assert!(!check_oracle_attention(2, 5, &[(5, 6)], false, Mutation::InclusiveCumsum).pass);
    }

    #[test]
    fn gradient_check_per_token() {
        let r = grad_check_model(&grad_check_config(Variant::JoFormerPerToken), 0, TOL_GRAD);
        assert!(r.pass, "{}", render_reports(&[r]));
        assert!(r.input.contains("entries"));
    }

    #[test]
    fn fixed_schedule_has_no_trainable_angles() {
        let config = grad_check_config(Variant::JoFormerFixed);
        let params = grad_check_params(&config, 0).unwrap();
        assert!(params.angle_table.is_none());
        assert!(params.named().iter().all(|(n, _)| !n.contains("angle")));
    }

    #[test]
    fn saturated_targets_have_vanishing_gradients() {
        let config = grad_check_config(Variant::JoFormerPerToken);
        let mut params = grad_check_params(&config, 4).unwrap();
        // The head ignores its input and always favours token 3 by a wide margin.
        params.head.weight = Tensor::zeros(&[6, 11]);
        params.head.bias = Tensor::new(&[11], (0..11).map(|i| if i == 3 { 60.0 } else { 0.0 }).collect()).unwrap();
        let batch = TokenBatch::new(1, 5, vec![0, 1, 2, 3, 4]);
        let tape = Tape::new();
        let vars = params.register(&tape, true);
        let loss = model_forward(&vars, &config, &batch).unwrap().cross_entropy(&[3; 5]).unwrap();
        assert!(loss.value().data()[0] < 1e-20);
        let grads = tape.backward(loss).unwrap();
        for (name, v) in vars.named() {
            if let Some(g) = grads.get(*v) {
                assert!(g.data().iter().all(|x| x.abs() < 1e-20), "{name}");
            }
        }
    }

    #[test]
    fn report_rendering() {
        let reports = vec![
            OracleReport::new("a", 1e-12, 1e-11, 1e-9, Judged::Absolute, "x".into()),
            OracleReport::new("b", 1.0, 1e-6, 1e-5, Judged::Relative, "y".into()),
            OracleReport::new("c", 1e-3, 1e-3, 1e-9, Judged::Absolute, "z".into()),
        ];
        assert!(reports[0].pass && reports[1].pass && !reports[2].pass);
        let text = render_reports(&reports);
        assert!(text.contains("PASS a") && text.contains("FAIL c") && text.ends_with("3 checks, 1 failed\n"));
        let csv = reports_to_csv(&reports);
        assert!(csv.starts_with("name,max_abs,max_rel,tol,pass\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
