//! Single-head autoregressive transformer shared by the three positional
//! variants.

mod checkpoint;
mod forward;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    attention_scores, block_forward, cumulative_angles, journey_attention, journey_attention_with, loss_fn,
    model_forward, model_forward_traced, AttentionConvention, ForwardTrace,
};

use crate::autograd::{Tape, Var};
use crate::error::{ConfigError, ModelError};
use crate::kv;
use crate::rotation::rope_frequencies;
use crate::tensor::{Scalar, Tensor};

/// How positional rotations enter attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Fixed rotary schedule on queries and keys; values unrotated.
    RoFormer,
    /// Same fixed schedule, with values carried along the journey as well.
    JoFormerFixed,
    /// Learned angle vector per vocabulary token, composed along the sequence.
    JoFormerPerToken,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::RoFormer, Variant::JoFormerFixed, Variant::JoFormerPerToken];

    pub fn name(self) -> &'static str {
        match self {
            Variant::RoFormer => "roformer",
            Variant::JoFormerFixed => "joformer-fixed",
            Variant::JoFormerPerToken => "joformer-per-token",
        }
    }

    /// Display label used in tables and plots.
    pub fn label(self) -> &'static str {
        match self {
            Variant::RoFormer => "RoFormer (baseline)",
            Variant::JoFormerFixed => "Fixed-angle JoFormer",
            Variant::JoFormerPerToken => "Per-token JoFormer",
        }
    }

    pub fn rotates_values(self) -> bool {
        !matches!(self, Variant::RoFormer)
    }

    pub fn learns_angles(self) -> bool {
        matches!(self, Variant::JoFormerPerToken)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

/// Initialization of the per-token angle table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleInit {
    /// Uniform(−0.02, 0.02).
    SmallUniform,
    /// Every row set to the rotary frequency schedule.
    Rope,
}

impl fmt::Display for AngleInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AngleInit::SmallUniform => "uniform",
            AngleInit::Rope => "rope",
        })
    }
}

impl FromStr for AngleInit {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(AngleInit::SmallUniform),
            "rope" => Ok(AngleInit::Rope),
            other => Err(ConfigError::Invalid {
                field: "angle_init",
                requirement: "`uniform` or `rope`",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    pub ffn_mult: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub layer_norm_eps: f64,
    pub angle_init: AngleInit,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_layers: usize, d_model: usize, context_len: usize, vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            n_layers,
            d_model,
            ffn_mult: 4,
            context_len,
            vocab_size,
            rope_base: 10000.0,
            layer_norm_eps: 1e-5,
            angle_init: AngleInit::SmallUniform,
        }
    }

    /// The experimental setup: d = 90, 4d feed-forward, context of 20.
    pub fn standard(variant: Variant, n_layers: usize, vocab_size: usize) -> Self {
        Self::new(variant, n_layers, 90, 20, vocab_size)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field, value: usize| {
            if value == 0 {
                Err(ConfigError::Invalid {
                    field,
                    requirement: "positive",
                    value: value.to_string(),
                })
            } else {
                Ok(())
            }
        };
        positive("n_layers", self.n_layers)?;
        positive("d_model", self.d_model)?;
        positive("ffn_mult", self.ffn_mult)?;
        positive("context_len", self.context_len)?;
        positive("vocab_size", self.vocab_size)?;
        if self.d_model % 2 != 0 {
            return Err(ConfigError::OddDimension(self.d_model));
        }
        if !(self.rope_base > 1.0) {
            return Err(ConfigError::Invalid {
                field: "rope_base",
                requirement: "> 1",
                value: self.rope_base.to_string(),
            });
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ConfigError::Invalid {
                field: "layer_norm_eps",
                requirement: "> 0",
                value: self.layer_norm_eps.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("context_len", self.context_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("rope_base", format!("{:?}", self.rope_base)),
            ("layer_norm_eps", format!("{:?}", self.layer_norm_eps)),
            ("angle_init", self.angle_init.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        kv::render(self.to_pairs())
    }

    /// Applies one `key = value` entry. Returns `Ok(false)` for keys that
    /// are not model settings.
    pub fn apply(&mut self, entry: &kv::Entry) -> Result<bool, ConfigError> {
        match entry.key.as_str() {
            "variant" => self.variant = entry.value.parse()?,
            "n_layers" | "layers" => self.n_layers = kv::value(entry)?,
            "d_model" => self.d_model = kv::value(entry)?,
            "ffn_mult" => self.ffn_mult = kv::value(entry)?,
            "context_len" => self.context_len = kv::value(entry)?,
            "vocab_size" => self.vocab_size = kv::value(entry)?,
            "rope_base" => self.rope_base = kv::value(entry)?,
            "layer_norm_eps" => self.layer_norm_eps = kv::value(entry)?,
            "angle_init" => self.angle_init = entry.value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut config = ModelConfig::new(Variant::RoFormer, 1, 2, 1, 1);
        for entry in kv::parse(text)? {
            if !config.apply(&entry)? {
                return Err(ConfigError::UnknownKey(entry.key));
            }
        }
        config.validate()?;
        Ok(config)
    }
}

/// Affine map `x · weight + bias` with `weight: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

/// One transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub attn_norm: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

/// All learnable weights of the model, generic over what is stored per
/// parameter (tensors, tape variables, shapes, optimizer moments …).
///
/// Enumeration order, used by checkpoints, the optimizer and gradient
/// checks:
///
/// 1. `token_embedding` `[V, d]`
/// 2. `angle_table` `[V, d/2]` (per-token variant only)
/// 3. for each layer `i`: `layers.i.attn_norm.{gain,bias}`,
///    `layers.i.{query,key,value,output}.{weight,bias}`,
///    `layers.i.ffn_norm.{gain,bias}`, `layers.i.ffn_in.{weight,bias}`,
///    `layers.i.ffn_out.{weight,bias}`
/// 4. `final_norm.{gain,bias}`
/// 5. `head.{weight,bias}` (`[d, V]`, `[V]`)
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub token_embedding: T,
    pub angle_table: Option<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Norm<T>,
    pub head: Linear<T>,
}

pub type Parameters<S> = ParamSet<Tensor<S>>;

impl<T> Linear<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Linear<U>, E> {
        Ok(Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }

    fn refs(&self) -> [(&'static str, &T); 2] {
        [("weight", &self.weight), ("bias", &self.bias)]
    }

    fn refs_mut(&mut self) -> [(&'static str, &mut T); 2] {
        [("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

impl<T> Norm<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Norm<U>, E> {
        Ok(Norm {
            gain: f(&format!("{prefix}.gain"), &self.gain)?,
            bias: f(&format!("{prefix}.bias"), &self.bias)?,
        })
    }

    fn refs(&self) -> [(&'static str, &T); 2] {
        [("gain", &self.gain), ("bias", &self.bias)]
    }

    fn refs_mut(&mut self) -> [(&'static str, &mut T); 2] {
        [("gain", &mut self.gain), ("bias", &mut self.bias)]
    }
}

impl<T> Layer<T> {
    fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<Layer<U>, E> {
        Ok(Layer {
            attn_norm: self.attn_norm.try_map(&format!("{prefix}.attn_norm"), f)?,
            query: self.query.try_map(&format!("{prefix}.query"), f)?,
            key: self.key.try_map(&format!("{prefix}.key"), f)?,
            value: self.value.try_map(&format!("{prefix}.value"), f)?,
            output: self.output.try_map(&format!("{prefix}.output"), f)?,
            ffn_norm: self.ffn_norm.try_map(&format!("{prefix}.ffn_norm"), f)?,
            ffn_in: self.ffn_in.try_map(&format!("{prefix}.ffn_in"), f)?,
            ffn_out: self.ffn_out.try_map(&format!("{prefix}.ffn_out"), f)?,
        })
    }

    fn refs(&self) -> Vec<(String, &T)> {
        let mut out = Vec::with_capacity(16);
        for (name, pair) in [
            ("attn_norm", self.attn_norm.refs()),
            ("query", self.query.refs()),
            ("key", self.key.refs()),
            ("value", self.value.refs()),
            ("output", self.output.refs()),
            ("ffn_norm", self.ffn_norm.refs()),
            ("ffn_in", self.ffn_in.refs()),
            ("ffn_out", self.ffn_out.refs()),
        ] {
            out.extend(pair.map(|(k, v)| (format!("{name}.{k}"), v)));
        }
        out
    }

    fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::with_capacity(16);
        out.extend(self.attn_norm.refs_mut().map(|(_, v)| v));
        out.extend(self.query.refs_mut().map(|(_, v)| v));
        out.extend(self.key.refs_mut().map(|(_, v)| v));
        out.extend(self.value.refs_mut().map(|(_, v)| v));
        out.extend(self.output.refs_mut().map(|(_, v)| v));
        out.extend(self.ffn_norm.refs_mut().map(|(_, v)| v));
        out.extend(self.ffn_in.refs_mut().map(|(_, v)| v));
        out.extend(self.ffn_out.refs_mut().map(|(_, v)| v));
        out
    }
}

impl<T> ParamSet<T> {
    /// Applies `f` to every parameter in enumeration order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> Result<U, E>) -> Result<ParamSet<U>, E> {
        let token_embedding = f("token_embedding", &self.token_embedding)?;
        let angle_table = match &self.angle_table {
            Some(t) => Some(f("angle_table", t)?),
            None => None,
        };
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
            .collect::<Result<_, E>>()?;
        Ok(ParamSet {
            token_embedding,
            angle_table,
            layers,
            final_norm: self.final_norm.try_map("final_norm", &mut f)?,
            head: self.head.try_map("head", &mut f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamSet<U> {
        self.try_map(|name, t| Ok::<_, std::convert::Infallible>(f(name, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// `(name, parameter)` pairs in enumeration order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        if let Some(t) = &self.angle_table {
            out.push(("angle_table".to_string(), t));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            out.extend(layer.refs().into_iter().map(|(k, v)| (format!("layers.{i}.{k}"), v)));
        }
        out.extend(self.final_norm.refs().map(|(k, v)| (format!("final_norm.{k}"), v)));
        out.extend(self.head.refs().map(|(k, v)| (format!("head.{k}"), v)));
        out
    }

    /// Mutable references in enumeration order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        if let Some(t) = &mut self.angle_table {
            out.push(t);
        }
        for layer in &mut self.layers {
            out.extend(layer.refs_mut());
        }
        out.extend(self.final_norm.refs_mut().map(|(_, v)| v));
        out.extend(self.head.refs_mut().map(|(_, v)| v));
        out
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Parameter shapes for a configuration.
pub fn parameter_shapes(config: &ModelConfig) -> ParamSet<Vec<usize>> {
    let d = config.d_model;
    let f = config.ffn_dim();
    let v = config.vocab_size;
    let linear = |i: usize, o: usize| Linear {
        weight: vec![i, o],
        bias: vec![o],
    };
    let norm = || Norm {
        gain: vec![d],
        bias: vec![d],
    };
    ParamSet {
        token_embedding: vec![v, d],
        angle_table: config.variant.learns_angles().then(|| vec![v, d / 2]),
        layers: (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: norm(),
                query: linear(d, d),
                key: linear(d, d),
                value: linear(d, d),
                output: linear(d, d),
                ffn_norm: norm(),
                ffn_in: linear(d, f),
                ffn_out: linear(f, d),
            })
            .collect(),
        final_norm: norm(),
        head: linear(d, v),
    }
}

const INIT_STD: f64 = 0.02;
const ANGLE_INIT_RANGE: f64 = 0.02;

impl<S: Scalar> Parameters<S> {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit gains;
    /// the angle table follows `config.angle_init`. Draws happen in
    /// enumeration order.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ConfigError> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let uniform = Uniform::new(-ANGLE_INIT_RANGE, ANGLE_INIT_RANGE).expect("valid range");
        let rope = rope_frequencies::<S>(config.d_model, config.rope_base)?;
        Ok(parameter_shapes(config).map(|name, shape| {
            let numel: usize = shape.iter().product();
            let data: Vec<S> = if name == "angle_table" {
                match config.angle_init {
                    AngleInit::SmallUniform => (0..numel).map(|_| S::from_f64(uniform.sample(rng))).collect(),
                    AngleInit::Rope => rope.as_slice().iter().copied().cycle().take(numel).collect(),
                }
            } else if name.ends_with(".gain") {
                vec![S::one(); numel]
            } else if name.ends_with(".bias") {
                vec![S::zero(); numel]
            } else {
                (0..numel).map(|_| S::from_f64(normal.sample(rng))).collect()
            };
            Tensor::new(shape, data).expect("parameter shape")
        }))
    }

    /// Checks every tensor against the shapes the configuration requires.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let expected = parameter_shapes(config).named().into_iter().map(|(n, s)| (n, s.clone())).collect::<Vec<_>>();
        let found = self.named();
        if expected.len() != found.len() {
            let missing = expected
                .iter()
                .find(|(n, _)| !found.iter().any(|(m, _)| m == n))
                .or_else(|| expected.last())
                .map(|(n, s)| (n.clone(), s.clone()))
                .unwrap_or_default();
            return Err(ModelError::ParameterShape {
                name: missing.0,
                expected: missing.1,
                found: Vec::new(),
            });
        }
        for ((name, shape), (_, tensor)) in expected.into_iter().zip(found) {
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name,
                    expected: shape,
                    found: tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Records every parameter as a leaf; `trainable` leaves receive
    /// gradients, otherwise they are constants.
    pub fn register<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> ParamSet<Var<'t, S>> {
        self.map(|_, t| tape.leaf(t.clone(), trainable))
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Parameters<T> {
        self.map(|_, t| t.cast())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("rope".parse::<Variant>(), Err(ConfigError::UnknownVariant(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::standard(Variant::RoFormer, 1, 65);
        assert!(c.validate().is_ok());
        c.d_model = 91;
        assert_eq!(c.validate(), Err(ConfigError::OddDimension(91)));
        c.d_model = 90;
        c.context_len = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ModelConfig::standard(Variant::JoFormerPerToken, 3, 65);
        c.layer_norm_eps = 1e-6;
        c.angle_init = AngleInit::Rope;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(matches!(
            ModelConfig::from_text("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn enumeration_order_and_counts() {
        let c = ModelConfig::new(Variant::JoFormerPerToken, 2, 6, 5, 11);
        let shapes = parameter_shapes(&c);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 2 * 16 + 4);
        assert_eq!(names[0], "token_embedding");
        assert_eq!(names[1], "angle_table");
        assert_eq!(names[2], "layers.0.attn_norm.gain");
        assert_eq!(names[4], "layers.0.query.weight");
        assert_eq!(names[17], "layers.0.ffn_out.bias");
        assert_eq!(names[34], "final_norm.gain");
        assert_eq!(names[37], "head.bias");
        // map visits in the same order as named()
        let mut visited = Vec::new();
        shapes.map(|n, _| visited.push(n.to_string()));
        assert_eq!(visited, names);

        let fixed = ModelConfig::new(Variant::JoFormerFixed, 2, 6, 5, 11);
        assert_eq!(parameter_shapes(&fixed).len(), names.len() - 1);
    }

    #[test]
    fn angle_table_size_is_vocab_by_half_width() {
        let c = ModelConfig::standard(Variant::JoFormerPerToken, 1, 65);
        let roformer = ModelConfig::standard(Variant::RoFormer, 1, 65);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Parameters::<f32>::init(&c, &mut rng).unwrap();
        let b = Parameters::<f32>::init(&roformer, &mut rng).unwrap();
        assert_eq!(a.numel() - b.numel(), 65 * 45);
    }

    #[test]
    fn init_statistics_and_determinism() {
        let c = ModelConfig::standard(Variant::JoFormerPerToken, 1, 65);
        let p = Parameters::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let q = Parameters::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p, q);
        assert!(p.final_norm.gain.data().iter().all(|&g| g == 1.0));
        assert!(p.head.bias.data().iter().all(|&b| b == 0.0));
        let table = p.angle_table.as_ref().unwrap();
        assert!(table.data().iter().all(|a| a.abs() <= 0.02));
        let w = p.layers[0].ffn_in.weight.data();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.002);
    }

    #[test]
    fn rope_angle_init_copies_schedule() {
        let mut c = ModelConfig::new(Variant::JoFormerPerToken, 1, 8, 4, 3);
        c.angle_init = AngleInit::Rope;
        let p = Parameters::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let rope = rope_frequencies::<f64>(8, 10000.0).unwrap();
        for row in p.angle_table.unwrap().data().chunks(4) {
            assert_eq!(row, rope.as_slice());
        }
    }

    #[test]
    fn shape_check_catches_wrong_tensor() {
        let c = ModelConfig::new(Variant::RoFormer, 1, 4, 4, 3);
        let mut p = Parameters::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(p.check_shapes(&c).is_ok());
        p.head.bias = Tensor::zeros(&[4]);
        assert!(matches!(p.check_shapes(&c), Err(ModelError::ParameterShape { .. })));
    }
}
