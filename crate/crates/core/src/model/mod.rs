//! Caption decoders: the gated causal-convolution decoder, its per-layer
//! attention variant, and the LSTM baseline.

mod checkpoint;
mod conv;
mod lstm;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use conv::attention_layer;

use crate::error::{Error, Result};
use crate::image::ImageFeatures;
use crate::tensor::{Element, Graph, Tensor, Var};

pub const MAX_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Conv,
    ConvAttention,
    Lstm,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Conv => "conv",
            DecoderKind::ConvAttention => "conv_attention",
            DecoderKind::Lstm => "lstm",
        }
    }

    pub fn is_conv(self) -> bool {
        !matches!(self, DecoderKind::Lstm)
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(DecoderKind::Conv),
            "conv_attention" => Ok(DecoderKind::ConvAttention),
            "lstm" => Ok(DecoderKind::Lstm),
            other => Err(Error::Config(format!("unknown decoder {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub decoder: DecoderKind,
    pub num_layers: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// Filled from the vocabulary when left at 0.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub regions: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            decoder: DecoderKind::Conv,
            num_layers: 1,
            emb_dim: 512,
            hidden: 512,
            kernel: 5,
            vocab_size: 0,
            feature_dim: 64,
            regions: 16,
            max_len: 15,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=MAX_LAYERS).contains(&self.num_layers) {
            return bad(format!(
                "num_layers must be in 1..={MAX_LAYERS}, got {}",
                self.num_layers
            ));
        }
        if self.decoder.is_conv() && self.kernel == 0 {
            return bad("kernel width must be at least 1".into());
        }
        if self.decoder == DecoderKind::ConvAttention && self.regions == 0 {
            return bad("attention needs at least one region".into());
        }
        for (name, v) in [
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Parameter tensors in registry order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, e, h, f, k) = (
            self.vocab_size,
            self.emb_dim,
            self.hidden,
            self.feature_dim,
            self.kernel,
        );
        let mut out = vec![("embed".to_string(), vec![v, e])];
        match self.decoder {
            DecoderKind::Conv | DecoderKind::ConvAttention => {
                out.push(("img_proj".into(), vec![f, e]));
                for l in 0..self.num_layers {
                    let c_in = if l == 0 { 2 * e } else { h };
                    out.push((format!("conv{l}.weight"), vec![k, c_in, 2 * h]));
                    out.push((format!("conv{l}.bias"), vec![2 * h]));
                    if self.decoder == DecoderKind::ConvAttention {
                        out.push((format!("attn{l}.query"), vec![h, f]));
                        out.push((format!("attn{l}.value"), vec![f, h]));
                    }
                }
            }
            DecoderKind::Lstm => {
                out.push(("init.h".into(), vec![f, h]));
                out.push(("init.c".into(), vec![f, h]));
                for l in 0..self.num_layers {
                    let input = if l == 0 { e } else { h };
                    out.push((format!("lstm{l}.input"), vec![input, 4 * h]));
                    out.push((format!("lstm{l}.hidden"), vec![h, 4 * h]));
                    out.push((format!("lstm{l}.bias"), vec![4 * h]));
                }
            }
        }
        out.push(("out.weight".into(), vec![h, v]));
        out.push(("out.bias".into(), vec![v]));
        out
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, e, h, f, k) = (
            self.vocab_size,
            self.emb_dim,
            self.hidden,
            self.feature_dim,
            self.kernel,
        );
        let l = self.num_layers;
        let head = v * e + h * v + v;
        match self.decoder {
            DecoderKind::Conv | DecoderKind::ConvAttention => {
                let conv = k * 2 * e * 2 * h + (l - 1) * k * h * 2 * h + l * 2 * h;
                let attn = if self.decoder == DecoderKind::ConvAttention {
                    l * 2 * h * f
                } else {
                    0
                };
                head + f * e + conv + attn
            }
            DecoderKind::Lstm => {
                let gates = e * 4 * h + (l - 1) * h * 4 * h + l * (h * 4 * h + 4 * h);
                head + 2 * f * h + gates
            }
        }
    }
}

/// Span of input positions that can influence one output position of a
/// convolutional decoder.
pub fn receptive_field(cfg: &ModelConfig) -> Result<usize> {
    if !cfg.decoder.is_conv() {
        return Err(Error::Config(
            "receptive field is defined for convolutional decoders only".into(),
        ));
    }
    Ok(1 + cfg.num_layers * (cfg.kernel.max(1) - 1))
}

/// A decoder's configuration together with all of its learned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// Graph handles of a model's parameters, in registry order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Options that only apply while training.
pub struct TrainMode<'a> {
    pub rng: &'a mut dyn RngCore,
}

impl Model<f32> {
    /// Uniform `±1/√fan_in` weights and zero biases, fully determined by
    /// `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = cfg
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; numel]
                } else {
                    let fan_in: usize = shape[..shape.len() - 1].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Model {
            config: cfg.clone(),
            params,
        })
    }
}

impl<T: Element> Model<T> {
    /// Assembles a model from explicit tensors; names and shapes must follow
    /// the configuration's layout.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {pname:?} {:?} does not match expected {name:?} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars(self.params.iter().map(|(_, t)| g.param(t.clone())).collect())
    }

    fn var(&self, vars: &ParamVars, name: &str) -> Var {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"));
        vars.0[i]
    }

    /// Teacher-forced logits `[T×V]` for `tokens` conditioned on `features`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &ParamVars,
        features: &ImageFeatures,
        tokens: &[usize],
        train: Option<&mut TrainMode<'_>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > cfg.max_len + 1 {
            return Err(Error::Data(format!(
                "{} tokens exceed max_len + 1 = {}",
                tokens.len(),
                cfg.max_len + 1
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Range {
                index: bad,
                len: cfg.vocab_size,
            });
        }
        if features.dim() != cfg.feature_dim {
            return Err(Error::Data(format!(
                "features have dim {}, model expects {}",
                features.dim(),
                cfg.feature_dim
            )));
        }
        if cfg.decoder == DecoderKind::ConvAttention && features.num_regions() != cfg.regions {
            return Err(Error::Data(format!(
                "features have {} regions, model expects {}",
                features.num_regions(),
                cfg.regions
            )));
        }
        match cfg.decoder {
            DecoderKind::Conv | DecoderKind::ConvAttention => conv::forward(self, g, vars, features, tokens, train),
            DecoderKind::Lstm => lstm::forward(self, g, vars, features, tokens, train),
        }
    }

    /// Convenience wrapper that evaluates logits on a fresh graph.
    pub fn logits(&self, features: &ImageFeatures, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g);
        let out = self.forward(&mut g, &vars, features, tokens, None)?;
        Ok(g.value(out).clone())
    }
}

pub(crate) fn global_row<T: Element>(g: &mut Graph<T>, features: &ImageFeatures) -> Var {
    let data = features.global().iter().map(|&v| T::from_f64(v as f64)).collect();
    g.constant(Tensor::new(vec![1, features.dim()], data).expect("feature dims are validated"))
}

/// Inverted dropout; a no-op outside training or when `p == 0`.
pub(crate) fn maybe_dropout<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: f64,
    train: &mut Option<&mut TrainMode<'_>>,
) -> Result<Var> {
    match train {
        Some(mode) if p > 0.0 => {
            let n = g.value(x).numel();
            let scale = T::from_f64(1.0 / (1.0 - p));
            let keep = (0..n)
                .map(|_| if mode.rng.gen::<f64>() < p { T::zero() } else { scale })
                .collect();
            g.dropout(x, keep)
        }
        _ => Ok(x),
    }
}
