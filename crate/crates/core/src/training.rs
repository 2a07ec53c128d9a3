//! Adam with cosine learning-rate decay, single runs and multi-seed sweeps.
//!
//! One training step draws a fresh batch of random windows from the training
//! split; `total_steps` counts optimizer steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{sample_batch, Dataset};
use crate::error::{ConfigError, TensorError, TrainError};
use crate::kv;
use crate::metrics::{evaluate, final_validation, MetricsRecord, Split};
use crate::model::{model_forward, ModelConfig, Parameters};
use crate::tensor::{Scalar, Tensor};

/// Stream of the seeded generator used for parameter initialization.
const INIT_STREAM: u64 = 0;
/// Stream used for batch sampling.
const SAMPLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global max-norm clipping; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            total_steps: 10_000,
            batch_size: 32,
            seq_len: 20,
            seeds: vec![1, 2, 3],
            eval_every: 50,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, requirement, value: String| Err(ConfigError::Invalid {
            field,
            requirement,
            value,
        });
        if self.total_steps == 0 {
            return invalid("total_steps", ">= 1", "0".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size", ">= 1", "0".into());
        }
        if self.seq_len == 0 {
            return invalid("seq_len", ">= 1", "0".into());
        }
        if self.eval_every == 0 {
            return invalid("eval_every", ">= 1", "0".into());
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "a non-empty list", String::new());
        }
        if !(self.min_lr >= 0.0 && self.lr0 > self.min_lr) {
            return invalid("lr0", "> min_lr >= 0", format!("lr0 {} min_lr {}", self.lr0, self.min_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("beta1/beta2", "in [0, 1)", format!("{} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return invalid("eps", "> 0", self.eps.to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return invalid("grad_clip", "> 0", c.to_string());
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", format!("{:?}", self.lr0)),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("seeds", format_seeds(&self.seeds)),
            ("eval_every", self.eval_every.to_string()),
            ("min_lr", format!("{:?}", self.min_lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            (
                "grad_clip",
                self.grad_clip.map_or_else(|| "none".to_string(), |c| format!("{c:?}")),
            ),
        ]
    }

    /// Applies one `key = value` entry. Returns `Ok(false)` for keys that
    /// are not training settings.
    pub fn apply(&mut self, entry: &kv::Entry) -> Result<bool, ConfigError> {
        match entry.key.as_str() {
            "lr0" | "lr" => self.lr0 = kv::value(entry)?,
            "total_steps" | "steps" => self.total_steps = kv::value(entry)?,
            "batch_size" => self.batch_size = kv::value(entry)?,
            "seq_len" => self.seq_len = kv::value(entry)?,
            "seeds" => {
                self.seeds = parse_seeds(&entry.value).map_err(|message| ConfigError::Parse {
                    line: entry.line,
                    message,
                })?
            }
            "eval_every" => self.eval_every = kv::value(entry)?,
            "min_lr" => self.min_lr = kv::value(entry)?,
            "beta1" => self.beta1 = kv::value(entry)?,
            "beta2" => self.beta2 = kv::value(entry)?,
            "eps" => self.eps = kv::value(entry)?,
            "grad_clip" => {
                self.grad_clip = match entry.value.as_str() {
                    "none" | "" => None,
                    _ => Some(kv::value(entry)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub fn format_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

/// Comma-separated seed list, e.g. `1,2,3`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("invalid seed `{s}`")))
        .collect()
}

/// `min_lr + ½(lr0 − min_lr)(1 + cos(π·step/total_steps))`; steps past the
/// end return `min_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, min_lr: f64) -> f64 {
    if step >= total_steps {
        return min_lr;
    }
    let progress = step as f64 / total_steps as f64;
    min_lr + 0.5 * (lr0 - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[&[usize]], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &Parameters<S>, config: &TrainConfig) -> Self {
        let named = params.named();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        AdamState::new(&shapes, config.beta1, config.beta2, config.eps)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.v
    }

    /// One in-place update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (c1, c2) = (S::one() - b1, S::one() - b2);
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let step_size = S::from_f64(lr / bias1);
        let inv_sqrt_bias2 = S::from_f64(1.0 / bias2.sqrt());
        let eps = S::from_f64(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() * inv_sqrt_bias2 + eps);
            }
            debug_assert!(m.all_finite() && v.all_finite() || !g.all_finite());
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for g in grads {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Loss and gradients of one batch, gradients in enumeration order.
pub fn loss_and_grads<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    batch: &crate::data::Batch,
) -> Result<(f64, Vec<Tensor<S>>), TrainError> {
    let tape = Tape::new();
    let vars = params.register(&tape, true);
    let logits = model_forward(&vars, config, &batch.inputs)?;
    let loss = logits.cross_entropy(&batch.targets).map_err(crate::error::ModelError::from)?;
    let value = loss.value().data()[0].as_f64();
    let mut grads = tape.backward(loss).map_err(crate::error::ModelError::from)?;
    let grads = vars.named().into_iter().map(|(_, v)| grads.take_or_zeros(*v)).collect();
    Ok((value, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub log: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn final_val(&self) -> Option<&MetricsRecord> {
        final_validation(&self.log)
    }
}

/// Progress hook called with each record as it is appended to the log.
pub type Observer<'a> = &'a mut dyn FnMut(&MetricsRecord);

/// Trains one model from `seed`. The log gets a step-0 train/val pair, then
/// every `eval_every` steps (and at the last step) the mean training loss
/// since the previous entry plus a full validation pass.
pub fn train_run(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
    data: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    train_run_observed(model_config, train_config, seed, data, &mut |_| {})
}

pub fn train_run_observed(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
    data: &Dataset,
    observer: Observer<'_>,
) -> Result<TrainOutcome, TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    if train_config.seq_len > model_config.context_len {
        return Err(ConfigError::Invalid {
            field: "seq_len",
            requirement: "<= context_len",
            value: train_config.seq_len.to_string(),
        }
        .into());
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(INIT_STREAM);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seed);
    sample_rng.set_stream(SAMPLE_STREAM);

    let mut params = Parameters::<f32>::init(model_config, &mut init_rng)?;
    let mut adam = AdamState::for_params(&params, train_config);
    let (total, seq) = (train_config.total_steps, train_config.seq_len);
    let lr_at = |step: usize| cosine_lr(step, total, train_config.lr0, train_config.min_lr);
    let mut log = Vec::new();
    let mut push = |log: &mut Vec<MetricsRecord>, record: MetricsRecord| {
        observer(&record);
        log.push(record);
    };
    let record = |step, split, loss, lr| MetricsRecord::new(step, split, loss, lr, seed, model_config.variant, model_config.n_layers);

    let probe = sample_batch(&data.split.train, train_config.batch_size, seq, &mut sample_rng.clone())?;
    let (initial, _) = loss_and_grads(&params, model_config, &probe)?;
    push(&mut log, record(0, Split::Train, initial, lr_at(0)));
    let val = evaluate(&params, model_config, &data.split.val, seq)?;
    push(&mut log, record(0, Split::Val, val.loss, lr_at(0)));

    let (mut running, mut count) = (0.0f64, 0usize);
    for step in 1..=total {
        let lr = lr_at(step - 1);
        let batch = sample_batch(&data.split.train, train_config.batch_size, seq, &mut sample_rng)?;
        let (loss, mut grads) = loss_and_grads(&params, model_config, &batch)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, lr, loss });
        }
        if let Some(max_norm) = train_config.grad_clip {
            clip_grad_norm(&mut grads, max_norm);
        }
        adam.step(&mut params.values_mut(), &grads, lr)
            .map_err(crate::error::ModelError::from)?;
        running += loss;
        count += 1;
        if step % train_config.eval_every == 0 || step == total {
            push(&mut log, record(step, Split::Train, running / count as f64, lr));
            let val = evaluate(&params, model_config, &data.split.val, seq)?;
            if !val.loss.is_finite() {
                return Err(TrainError::NonFinite { step, lr, loss: val.loss });
            }
            push(&mut log, record(step, Split::Val, val.loss, lr));
            (running, count) = (0.0, 0);
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Final validation perplexity per seed and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub per_seed: Vec<(u64, f64)>,
    pub mean_perplexity: f64,
    pub mean_loss: f64,
}

/// Runs [`train_run`] for every configured seed, in order.
pub fn multi_seed_run(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    data: &Dataset,
) -> Result<(SeedSummary, Vec<TrainOutcome>), TrainError> {
    train_config.validate()?;
    let mut outcomes = Vec::with_capacity(train_config.seeds.len());
    for &seed in &train_config.seeds {
        let outcome = train_run(model_config, train_config, seed, data).map_err(|e| TrainError::Seed {
            seed,
            source: Box::new(e),
        })?;
        outcomes.push(outcome);
    }
    let finals: Vec<&MetricsRecord> = outcomes
        .iter()
        .map(|o| o.final_val().expect("every run logs a validation record"))
        .collect();
    let n = finals.len() as f64;
    let summary = SeedSummary {
        per_seed: finals.iter().map(|r| (r.seed, r.perplexity)).collect(),
        mean_perplexity: finals.iter().map(|r| r.perplexity).sum::<f64>() / n,
        mean_loss: finals.iter().map(|r| r.loss).sum::<f64>() / n,
    };
    Ok((summary, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![x]).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10_000, 3e-4, 0.0), 3e-4);
        assert!((cosine_lr(5_000, 10_000, 3e-4, 0.0) - 1.5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(10_000, 10_000, 3e-4, 0.0), 0.0);
        assert_eq!(cosine_lr(12_000, 10_000, 3e-4, 1e-5), 1e-5);
        assert!((cosine_lr(50, 100, 1.0, 0.2) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        let lrs: Vec<f64> = (0..=1000).map(|s| cosine_lr(s, 1000, 3e-4, 1e-6)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = w.clone();
        let mut adam = AdamState::<f64>::new(&[&[3]], 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam.step(&mut [&mut w], &[Tensor::zeros(&[3])], 0.1).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = scalar(0.0);
        let mut adam = AdamState::<f64>::new(&[&[1]], 0.9, 0.999, 1e-8);
        adam.step(&mut [&mut w], &[scalar(1.0)], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        assert!((w.data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let mut w = scalar(0.0);
        let mut adam = AdamState::<f64>::new(&[&[1]], 0.9, 0.999, 1e-8);
        let mut dist = Vec::new();
        for _ in 0..50 {
            let g = scalar(2.0 * (w.data()[0] - 3.0));
            adam.step(&mut [&mut w], &[g], 0.1).unwrap();
            dist.push((w.data()[0] - 3.0).abs());
        }
        assert!(dist[49] < 0.5, "{dist:?}");
        // Monotone while still approaching, before momentum overshoots.
        assert!(dist[..20].windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut w = scalar(0.0);
        let mut adam = AdamState::<f64>::new(&[&[1]], 0.9, 0.999, 1e-8);
        assert!(adam.step(&mut [&mut w], &[Tensor::zeros(&[2])], 0.1).is_err());
        assert!(adam.step(&mut [&mut w], &[], 0.1).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn config_validation_and_keys() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut c = TrainConfig::default();
        for e in kv::parse("steps = 200\nseeds = 4, 5\ngrad_clip = 1.0\n").unwrap() {
            assert!(c.apply(&e).unwrap());
        }
        assert_eq!((c.total_steps, c.seeds.clone(), c.grad_clip), (200, vec![4, 5], Some(1.0)));
        let mut back = TrainConfig::default();
        for e in kv::parse(&kv::render(c.to_pairs())).unwrap() {
            back.apply(&e).unwrap();
        }
        assert_eq!(back, c);
    }

    fn toy_data() -> Dataset {
        let text: String = "the quick brown fox jumps over the lazy dog. ".repeat(60);
        Dataset::from_text(&text).unwrap()
    }

    fn small_configs(variant: Variant, vocab: usize) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::new(variant, 1, 16, 8, vocab);
        let train = TrainConfig {
            lr0: 3e-3,
            total_steps: 30,
            batch_size: 8,
            seq_len: 8,
            seeds: vec![1],
            eval_every: 10,
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn run_is_deterministic_and_learns() {
        let data = toy_data();
        let (model, train) = small_configs(Variant::JoFormerPerToken, data.vocab.len());
        let a = train_run(&model, &train, 7, &data).unwrap();
        let b = train_run(&model, &train, 7, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let steps: Vec<usize> = a.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 0, 10, 10, 20, 20, 30, 30]);
        let first = a.log[1].loss;
        let last = a.final_val().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
        assert!((a.log[0].loss - (data.vocab.len() as f64).ln()).abs() < 0.5);
        let c = train_run(&model, &train, 8, &data).unwrap();
        assert_ne!(a.log, c.log);
    }

    #[test]
    fn single_seed_summary_equals_the_run() {
        let data = toy_data();
        let (model, mut train) = small_configs(Variant::RoFormer, data.vocab.len());
        train.total_steps = 5;
        train.eval_every = 5;
        let (summary, outcomes) = multi_seed_run(&model, &train, &data).unwrap();
        let fin = outcomes[0].final_val().unwrap();
        assert_eq!(summary.per_seed, vec![(1, fin.perplexity)]);
        assert_eq!(summary.mean_perplexity, fin.perplexity);
    }

    #[test]
    fn seed_mean_is_arithmetic_mean() {
        let data = toy_data();
        let (model, mut train) = small_configs(Variant::JoFormerFixed, data.vocab.len());
        train.total_steps = 4;
        train.eval_every = 4;
        train.seeds = vec![1, 2, 3];
        let (summary, _) = multi_seed_run(&model, &train, &data).unwrap();
        let mean = summary.per_seed.iter().map(|(_, p)| p).sum::<f64>() / 3.0;
        assert!((summary.mean_perplexity - mean).abs() < 1e-9);
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let data = toy_data();
        let (model, mut train) = small_configs(Variant::RoFormer, data.vocab.len());
        train.lr0 = 1e30;
        train.total_steps = 20;
        match train_run(&model, &train, 1, &data) {
            Err(TrainError::NonFinite { step, lr, .. }) => {
                assert!(step >= 1);
                assert!(lr > 0.0);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn context_must_cover_sequence() {
        let data = toy_data();
        let (mut model, train) = small_configs(Variant::RoFormer, data.vocab.len());
        model.context_len = 4;
        assert!(matches!(train_run(&model, &train, 1, &data), Err(TrainError::Config(_))));
    }
}
