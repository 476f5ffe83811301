//! The four attention models on a shared convolutional trunk.
//!
//! * PAN / PAN-CTX gate the output of every attended block with a sigmoid map
//!   and pass the gated features on; the last head is a spatial softmax whose
//!   weighted sum feeds the classifier. PAN-CTX scores each location from its
//!   3×3 neighbourhood.
//! * SAN is a single softmax head on the last block.
//! * HAN classifies every location of the last block and marginalises the
//!   per-location class distributions over the attention map.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{parse_list, KeyValues};
use crate::error::{PanError, Result};
use crate::layers::{normalize_scores, AttentionHead, ConvBlock, Query};
use crate::tensor::{Tape, Tensor, Var};

/// Initial output bias of intermediate heads: sigmoid(2) ≈ 0.88 keeps the
/// gates open at the start of training.
pub const GATE_BIAS_INIT: f32 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Pan,
    PanCtx,
    San,
    Han,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Pan, ModelKind::PanCtx, ModelKind::San, ModelKind::Han];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pan => "PAN",
            ModelKind::PanCtx => "PAN_CTX",
            ModelKind::San => "SAN",
            ModelKind::Han => "HAN",
        }
    }

    pub fn is_progressive(self) -> bool {
        matches!(self, ModelKind::Pan | ModelKind::PanCtx)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = PanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PAN" => Ok(ModelKind::Pan),
            "PAN_CTX" => Ok(ModelKind::PanCtx),
            "SAN" => Ok(ModelKind::San),
            "HAN" => Ok(ModelKind::Han),
            _ => Err(PanError::config(format!("unknown model kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_blocks: usize,
    pub in_channels: usize,
    pub channels: usize,
    /// 1-based indices of the blocks whose (pooled) outputs carry a head.
    pub attention_layers: Vec<usize>,
    /// Neighbourhood radius δ of the intermediate heads; the final head uses 0.
    pub context_radius: usize,
    pub num_colors: usize,
    pub hidden_dim: usize,
    pub input_size: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        let (attention_layers, context_radius) = match kind {
            ModelKind::Pan => (vec![1, 2, 3, 4], 0),
            ModelKind::PanCtx => (vec![1, 2, 3, 4], 1),
            ModelKind::San | ModelKind::Han => (vec![4], 0),
        };
        ModelConfig {
            kind,
            num_blocks: 4,
            in_channels: 3,
            channels: 32,
            attention_layers,
            context_radius,
            num_colors: 5,
            hidden_dim: 32,
            input_size: 96,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn final_layer(&self) -> usize {
        *self.attention_layers.last().unwrap_or(&0)
    }

    /// Spatial extent of the last block's output.
    pub fn final_resolution(&self) -> usize {
        self.input_size >> self.num_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(PanError::config("a model needs at least one convolution block"));
        }
        if self.channels == 0 || self.hidden_dim == 0 || self.num_colors < 2 || self.in_channels == 0 {
            return Err(PanError::config("channels, hidden_dim and in_channels must be positive, num_colors ≥ 2"));
        }
        let step = 1usize << self.num_blocks;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(PanError::config(format!(
                "input size {} is not divisible by 2^{} pooling stages",
                self.input_size, self.num_blocks
            )));
        }
        let layers = &self.attention_layers;
        if layers.is_empty() {
            return Err(PanError::config("at least one attention layer is required"));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) || layers[0] == 0 {
            return Err(PanError::config(format!(
                "attention layers {layers:?} must be strictly increasing, 1-based"
            )));
        }
        if self.final_layer() != self.num_blocks {
            return Err(PanError::config(format!(
                "the final attention layer must sit on block {}",
                self.num_blocks
            )));
        }
        if matches!(self.kind, ModelKind::San | ModelKind::Han) && layers.len() != 1 {
            return Err(PanError::config(format!(
                "{} carries exactly one attention head on the last block",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        self.write_key_values(&mut kv);
        kv
    }

    pub fn write_key_values(&self, kv: &mut KeyValues) {
        kv.insert("model", self.kind);
        kv.insert("blocks", self.num_blocks);
        kv.insert("in_channels", self.in_channels);
        kv.insert("channels", self.channels);
        let layers: Vec<String> = self.attention_layers.iter().map(|l| l.to_string()).collect();
        kv.insert("attention_layers", layers.join(","));
        kv.insert("context_radius", self.context_radius);
        kv.insert("num_colors", self.num_colors);
        kv.insert("hidden_dim", self.hidden_dim);
        kv.insert("input_size", self.input_size);
    }

    /// Consumes the model keys of `kv`; missing keys fall back to the defaults
    /// of the named kind.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let kind: ModelKind = kv
            .take::<String>("model")?
            .ok_or_else(|| PanError::config("missing key `model`"))?
            .parse()?;
        let mut cfg = ModelConfig::new(kind);
        cfg.num_blocks = kv.take_or("blocks", cfg.num_blocks)?;
        cfg.in_channels = kv.take_or("in_channels", cfg.in_channels)?;
        cfg.channels = kv.take_or("channels", cfg.channels)?;
        if let Some(raw) = kv.take::<String>("attention_layers")? {
            cfg.attention_layers = parse_list(&raw)?;
        } else if cfg.num_blocks != 4 {
            cfg.attention_layers = if kind.is_progressive() {
                (1..=cfg.num_blocks).collect()
            } else {
                vec![cfg.num_blocks]
            };
        }
        cfg.context_radius = kv.take_or("context_radius", cfg.context_radius)?;
        cfg.num_colors = kv.take_or("num_colors", cfg.num_colors)?;
        cfg.hidden_dim = kv.take_or("hidden_dim", cfg.hidden_dim)?;
        cfg.input_size = kv.take_or("input_size", cfg.input_size)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Test hooks for the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Replace every intermediate gate by 1 (scores at +∞).
    pub open_gates: bool,
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Class scores; `None` for HAN, whose output is already a distribution.
    pub logits: Option<Var>,
    pub probabilities: Var,
    pub attention: Vec<Var>,
    /// Block outputs before gating, one per block.
    pub features: Vec<Var>,
    pub attended_feature: Var,
    pub params: Vec<Var>,
}

/// Values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub attention_maps: Vec<Tensor>,
    pub attended_feature: Tensor,
}

impl ForwardResult {
    pub fn from_tape(tape: &Tape, fwd: &Forward) -> Self {
        let probabilities = tape.value(fwd.probabilities).clone();
        let logits = match fwd.logits {
            Some(l) => tape.value(l).clone(),
            None => Tensor::new(
                probabilities.shape(),
                probabilities.data().iter().map(|p| p.max(f32::MIN_POSITIVE).ln()).collect(),
            )
            .expect("same shape"),
        };
        ForwardResult {
            logits,
            probabilities,
            attention_maps: fwd.attention.iter().map(|&a| tape.value(a).clone()).collect(),
            attended_feature: tape.value(fwd.attended_feature).clone(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.probabilities.shape()[0]
    }

    /// Arg-max class per row, ties towards the lower index.
    pub fn predictions(&self) -> Vec<usize> {
        let k = self.probabilities.shape()[1];
        self.probabilities
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Final attention map of sample `n` as a flat row-major grid.
    pub fn final_map(&self, n: usize) -> (&[f32], usize, usize) {
        let map = self.attention_maps.last().expect("at least one head");
        let (h, w) = (map.shape()[2], map.shape()[3]);
        (&map.data()[n * h * w..(n + 1) * h * w], h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    /// One head per entry of `config.attention_layers`, same order.
    pub heads: Vec<AttentionHead>,
    /// D×E fully connected weight, or K×C×1×1 per-location weight for HAN.
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

impl Model {
    /// Zero-initialised model with the architecture of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.num_blocks)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { config.channels };
                ConvBlock::new(cin, config.channels, true)
            })
            .collect();
        let heads = config
            .attention_layers
            .iter()
            .map(|&l| {
                let is_final = l == config.final_layer();
                let radius = if is_final { 0 } else { config.context_radius };
                AttentionHead::new(config.channels, config.hidden_dim, radius, is_final)
            })
            .collect();
        let classifier_weight = match config.kind {
            ModelKind::Han => Tensor::zeros(&[config.num_colors, config.channels, 1, 1]),
            _ => Tensor::zeros(&[config.channels, config.num_colors]),
        };
        Ok(Model {
            config: config.clone(),
            blocks,
            heads,
            classifier_weight,
            classifier_bias: Tensor::zeros(&[config.num_colors]),
        })
    }

    /// He-normal weights (std √(2/fan_in)), zero biases, gate biases at
    /// [`GATE_BIAS_INIT`]. Draws follow the canonical parameter order.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |t: &mut Tensor, fan_in: usize| {
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        };
        for block in &mut model.blocks {
            let fan_in = block.in_channels() * 9;
            he(&mut block.weight, fan_in);
        }
        for head in &mut model.heads {
            let fan_in = head.input_width();
            he(&mut head.context_weight, fan_in);
            he(&mut head.query_weight, fan_in);
            let hidden = head.hidden();
            he(&mut head.output_weight, hidden);
            if !head.is_final {
                head.output_bias.data_mut()[0] = GATE_BIAS_INIT;
            }
        }
        he(&mut model.classifier_weight, config.channels);
        Ok(model)
    }

    /// Parameter tensors in canonical order: blocks (weight, bias), heads
    /// (context, query, hidden bias, output weight, output bias), classifier.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        for h in &self.heads {
            out.extend(h.tensors());
        }
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        for h in &mut self.heads {
            out.extend(h.tensors_mut());
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            out.push(format!("conv{}.weight", i + 1));
            out.push(format!("conv{}.bias", i + 1));
        }
        for &l in &self.config.attention_layers {
            for part in ["context_weight", "query_weight", "hidden_bias", "output_weight", "output_bias"] {
                out.push(format!("att{l}.{part}"));
            }
        }
        out.push("classifier.weight".into());
        out.push("classifier.bias".into());
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        images: Var,
        queries: &[Query],
        opts: ForwardOptions,
    ) -> Result<Forward> {
        let (n, c, h, w) = tape.value(images).dims4()?;
        if c != self.config.in_channels || h != self.config.input_size || w != self.config.input_size {
            return Err(PanError::config(format!(
                "model expects N×{}×{s}×{s} images, got {:?}",
                self.config.in_channels,
                tape.shape(images),
                s = self.config.input_size
            )));
        }
        if queries.len() != n {
            return Err(PanError::config(format!("{} queries for {n} images", queries.len())));
        }
        let params: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        let query = tape.constant(Query::batch(queries));
        let head_params: Vec<[Var; 5]> = (0..self.heads.len())
            .map(|i| {
                let base = 2 * self.blocks.len() + 5 * i;
                std::array::from_fn(|k| params[base + k])
            })
            .collect();
        let cls_w = params[params.len() - 2];
        let cls_b = params[params.len() - 1];

        let mut x = images;
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        let mut head_idx = 0;
        let mut final_alpha = None;
        for (bi, block) in self.blocks.iter().enumerate() {
            x = block.forward_with(tape, x, params[2 * bi], params[2 * bi + 1])?;
            features.push(x);
            if self.config.attention_layers.get(head_idx) != Some(&(bi + 1)) {
                continue;
            }
            let head = &self.heads[head_idx];
            let alpha = if !head.is_final && opts.open_gates {
                let (_, _, fh, fw) = tape.value(x).dims4()?;
                tape.constant(Tensor::ones(&[n, 1, fh, fw]))
            } else {
                let s = head.scores_with(tape, x, query, &head_params[head_idx])?;
                normalize_scores(tape, s, head.is_final)?
            };
            attention.push(alpha);
            if head.is_final {
                final_alpha = Some(alpha);
            } else {
                x = tape.attend(x, alpha)?;
            }
            head_idx += 1;
        }
        let alpha = final_alpha.ok_or_else(|| PanError::config("model has no final attention head"))?;
        let weighted = tape.attend(x, alpha)?;
        let attended_feature = tape.spatial_sum(weighted)?;

        let (logits, probabilities) = match self.config.kind {
            ModelKind::Han => {
                let per_location = tape.conv2d(x, cls_w, Some(cls_b), 1, 0)?;
                let dist = tape.channel_softmax(per_location)?;
                let mixed = tape.attend(dist, alpha)?;
                (None, tape.spatial_sum(mixed)?)
            }
            _ => {
                let logits = tape.fully_connected(attended_feature, cls_w, Some(cls_b))?;
                (Some(logits), tape.channel_softmax(logits)?)
            }
        };
        Ok(Forward {
            logits,
            probabilities,
            attention,
            features,
            attended_feature,
            params,
        })
    }

    pub fn pan_forward(&self, tape: &mut Tape, images: Var, queries: &[Query], opts: ForwardOptions) -> Result<Forward> {
        self.expect_kind(&[ModelKind::Pan, ModelKind::PanCtx])?;
        self.forward(tape, images, queries, opts)
    }

    pub fn san_forward(&self, tape: &mut Tape, images: Var, queries: &[Query]) -> Result<Forward> {
        self.expect_kind(&[ModelKind::San])?;
        self.forward(tape, images, queries, ForwardOptions::default())
    }

    pub fn han_forward(&self, tape: &mut Tape, images: Var, queries: &[Query]) -> Result<Forward> {
        self.expect_kind(&[ModelKind::Han])?;
        self.forward(tape, images, queries, ForwardOptions::default())
    }

    fn expect_kind(&self, kinds: &[ModelKind]) -> Result<()> {
        if kinds.contains(&self.config.kind) {
            Ok(())
        } else {
            Err(PanError::usage(format!(
                "{} model cannot run a {:?} forward pass",
                self.config.kind, kinds
            )))
        }
    }

    /// Training loss: cross-entropy on logits, or the marginal negative
    /// log-likelihood for HAN.
    pub fn loss(&self, tape: &mut Tape, fwd: &Forward, labels: &[usize]) -> Result<Var> {
        match fwd.logits {
            Some(logits) => tape.softmax_cross_entropy(logits, labels),
            None => tape.nll_of_probability(fwd.probabilities, labels),
        }
    }

    /// Forward pass without keeping the tape.
    pub fn infer(&self, images: &Tensor, queries: &[Query]) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let fwd = self.forward(&mut tape, x, queries, ForwardOptions::default())?;
        Ok(ForwardResult::from_tape(&tape, &fwd))
    }

    /// Copies parameters from a flat list in canonical order.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(PanError::config(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(PanError::config(format!(
                    "parameter shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t;
        }
        Ok(())
    }
}
