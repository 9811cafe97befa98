//! A small attention encoder whose query and value projections are PLoRA
//! layers. Everything else (token embeddings, key/output projections, the
//! feed-forward blocks) is a frozen, seeded-random stand-in for a pretrained
//! backbone. A trainable linear head sits on the mean-pooled final states.
//!
//! Per block, for a sequence `X` (`T x d`) and user embedding `p`:
//!
//! ```text
//! Q = plora_q(X, p)    K = X Wk + bk    V = plora_v(X, p)
//! A_h = softmax(Q_h K_hᵀ / sqrt(d_h))     per head h
//! X1 = X + concat_h(A_h V_h) Wo + bo
//! X' = X1 + gelu(X1 W1 + b1) W2 + b2
//! ```
//!
//! Backward is written out by hand and only produces gradients for the
//! adapters, the head and `p`; frozen tensors never get a gradient buffer.

use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::config::{parse_value, Configurable};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng, Vector};
use crate::plora::{LayerGradients, MergeState, PLoRAConfig, PLoRALinear};
use crate::users::UserId;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub d_ff: usize,
    /// Adapter settings; `d_in` and `d_out` must equal `d_model`.
    pub plora: PLoRAConfig,
    pub embed_std: f64,
    pub backbone_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            d_model: 32,
            n_heads: 1,
            n_layers: 1,
            max_len: 32,
            n_classes: 5,
            d_ff: 64,
            plora: PLoRAConfig::default(),
            embed_std: 1.0,
            backbone_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("vocab_size, max_len, n_layers and d_ff must be positive".into());
        }
        if self.plora.d_in != self.d_model || self.plora.d_out != self.d_model {
            return bad(format!(
                "adapter shape {}x{} does not match d_model {}",
                self.plora.d_in, self.plora.d_out, self.d_model
            ));
        }
        if !(self.embed_std > 0.0) || !(self.backbone_std > 0.0) {
            return bad("embed_std and backbone_std must be > 0".into());
        }
        self.plora.validate()
    }

    /// Sets `d_model` and keeps the adapter shape in sync.
    pub fn with_d_model(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.plora.d_in = d_model;
        self.plora.d_out = d_model;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Configurable for EncoderConfig {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "d_model" => {
                let d: usize = parse_value(key, value)?;
                *self = self.clone().with_d_model(d);
            }
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "n_classes" => self.n_classes = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "rank" => self.plora.rank = parse_value(key, value)?,
            "d_p" => self.plora.d_p = parse_value(key, value)?,
            "alpha_r" => self.plora.alpha_r = parse_value(key, value)?,
            "init_std" => self.plora.init_std = parse_value(key, value)?,
            "embed_std" => self.embed_std = parse_value(key, value)?,
            "backbone_std" => self.backbone_std = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("rank".into(), self.plora.rank.to_string()),
            ("d_p".into(), self.plora.d_p.to_string()),
            ("alpha_r".into(), format!("{:?}", self.plora.alpha_r)),
            ("init_std".into(), format!("{:?}", self.plora.init_std)),
            ("embed_std".into(), format!("{:?}", self.embed_std)),
            ("backbone_std".into(), format!("{:?}", self.backbone_std)),
        ]
    }
}

/// Frozen affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Linear {
    fn random(d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: Matrix::gaussian(d_in, d_out, std, rng)?,
            bias: Vector::zeros(d_out),
        })
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_broadcast(self.bias.as_slice())?;
        Ok(out)
    }

    fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub query: PLoRALinear,
    pub key: Linear,
    pub value: PLoRALinear,
    pub output: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

/// Addresses a trainable tensor of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    TaskIn(usize, Projection),
    SharedOut(usize, Projection),
    PersonIn(usize, Projection),
    HeadWeight,
    HeadBias,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::TaskIn(l, p) => format!("block{l}.{}.task_in", p.name()),
            ParamId::SharedOut(l, p) => format!("block{l}.{}.shared_out", p.name()),
            ParamId::PersonIn(l, p) => format!("block{l}.{}.person_in", p.name()),
            ParamId::HeadWeight => "head.weight".into(),
            ParamId::HeadBias => "head.bias".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub input: Matrix,
    /// PLoRA query output.
    pub query: Matrix,
    pub key: Matrix,
    /// PLoRA value output.
    pub value: Matrix,
    /// One `T x T` attention matrix per head.
    pub attention: Vec<Matrix>,
    pub context: Matrix,
    pub residual: Matrix,
    pub ff_pre: Matrix,
    pub ff_act: Matrix,
}

/// Everything the backward pass and the MIM pairing need from one forward.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    version: u64,
    folded: bool,
    pub p: Vector,
    pub blocks: Vec<BlockTrace>,
    pub pooled: Vector,
    pub logits: Vector,
}

impl ForwardTrace {
    pub fn is_folded(&self) -> bool {
        self.folded
    }
}

/// Upstream gradient for one sample. `logits` is required; the other parts
/// are optional extra gradients flowing into the pooled representation and
/// into individual PLoRA block outputs.
#[derive(Clone, Debug)]
pub struct Upstream {
    pub logits: Vector,
    pub pooled: Option<Vector>,
    pub blocks: Option<Vec<BlockUpstream>>,
}

impl Upstream {
    pub fn logits(g: Vector) -> Self {
        Self {
            logits: g,
            pooled: None,
            blocks: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockUpstream {
    pub query: Matrix,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub query: LayerGradients,
    pub value: LayerGradients,
}

/// Gradients over every trainable tensor of the encoder plus the active
/// user embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<BlockGrads>,
    pub head_weight: Matrix,
    pub head_bias: Vector,
    pub p: Vector,
}

impl ModelGrads {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let layer = LayerGradients::zeros(&config.plora);
        Self {
            blocks: (0..config.n_layers)
                .map(|_| BlockGrads {
                    query: layer.clone(),
                    value: layer.clone(),
                })
                .collect(),
            head_weight: Matrix::zeros(config.d_model, config.n_classes),
            head_bias: Vector::zeros(config.n_classes),
            p: Vector::zeros(config.plora.d_p),
        }
    }

    /// Adds everything except `p`, which belongs to a specific user.
    pub fn accumulate_shared(&mut self, other: &ModelGrads) -> Result<()> {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in [(&mut a.query, &b.query), (&mut a.value, &b.value)] {
                x.task_in.add_assign(&y.task_in)?;
                x.shared_out.add_assign(&y.shared_out)?;
                x.person_in.add_assign(&y.person_in)?;
            }
        }
        self.head_weight.add_assign(&other.head_weight)?;
        self.head_bias.axpy(1.0, &other.head_bias)
    }

    pub fn accumulate(&mut self, other: &ModelGrads) -> Result<()> {
        self.accumulate_shared(other)?;
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.query.p.axpy(1.0, &b.query.p)?;
            a.value.p.axpy(1.0, &b.value.p)?;
        }
        self.p.axpy(1.0, &other.p)
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let layer = |l: usize, p: Projection| match p {
            Projection::Query => &self.blocks[l].query,
            Projection::Value => &self.blocks[l].value,
        };
        match id {
            ParamId::TaskIn(l, p) => layer(l, p).task_in.data(),
            ParamId::SharedOut(l, p) => layer(l, p).shared_out.data(),
            ParamId::PersonIn(l, p) => layer(l, p).person_in.data(),
            ParamId::HeadWeight => self.head_weight.data(),
            ParamId::HeadBias => self.head_bias.as_slice(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.p.is_zero()
            && self.head_weight.is_zero()
            && self.head_bias.is_zero()
            && self
                .blocks
                .iter()
                .all(|b| b.query.is_zero() && b.value.is_zero())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    embedding: Matrix,
    blocks: Vec<Block>,
    head_weight: Matrix,
    head_bias: Vector,
    merged_user: Option<UserId>,
    version: u64,
}

/// Equality over parameters and merge state; the trace version is ignored.
impl PartialEq for EncoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.blocks == other.blocks
            && self.head_weight == other.head_weight
            && self.head_bias == other.head_bias
            && self.merged_user == other.merged_user
    }
}

fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * u * (1.0 + (C * (u + 0.044_715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (u + 0.044_715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * u * u)
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        softmax_in_place(m.row_mut(r));
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl EncoderModel {
    /// Seeded construction: every frozen tensor and every Gaussian adapter
    /// factor is drawn from one stream, so a seed fixes the whole model.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let embedding = Matrix::gaussian(config.vocab_size, d, config.embed_std, &mut rng)?;
        let std = config.backbone_std;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let query = PLoRALinear::with_random_base(config.plora.clone(), std, &mut rng)?;
            let key = Linear::random(d, d, std, &mut rng)?;
            let value = PLoRALinear::with_random_base(config.plora.clone(), std, &mut rng)?;
            let output = Linear::random(d, d, std, &mut rng)?;
            let ff_in = Linear::random(d, config.d_ff, std, &mut rng)?;
            let ff_out = Linear::random(config.d_ff, d, std, &mut rng)?;
            blocks.push(Block {
                query,
                key,
                value,
                output,
                ff_in,
                ff_out,
            });
        }
        let head_weight = Matrix::gaussian(d, config.n_classes, config.plora.init_std, &mut rng)?;
        let head_bias = Vector::zeros(config.n_classes);
        Ok(Self {
            config,
            embedding,
            blocks,
            head_weight,
            head_bias,
            merged_user: None,
            version: fresh_version(),
        })
    }

    /// Reassembles a model from stored tensors (checkpoint loading).
    pub fn from_parts(
        config: EncoderConfig,
        embedding: Matrix,
        blocks: Vec<Block>,
        head_weight: Matrix,
        head_bias: Vector,
        merged_user: Option<UserId>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if embedding.shape() != (config.vocab_size, d) {
            return Err(Error::dim("embedding", embedding.shape(), (config.vocab_size, d)));
        }
        if blocks.len() != config.n_layers {
            return Err(Error::Config(format!(
                "expected {} blocks, got {}",
                config.n_layers,
                blocks.len()
            )));
        }
        for b in &blocks {
            for (name, lin, shape) in [
                ("key", &b.key, (d, d)),
                ("output", &b.output, (d, d)),
                ("ff_in", &b.ff_in, (d, config.d_ff)),
                ("ff_out", &b.ff_out, (config.d_ff, d)),
            ] {
                if lin.weight.shape() != shape || lin.bias.len() != shape.1 {
                    return Err(Error::dim(name, lin.weight.shape(), shape));
                }
            }
            if b.query.config() != &config.plora || b.value.config() != &config.plora {
                return Err(Error::Config("adapter config mismatch".into()));
            }
        }
        if head_weight.shape() != (d, config.n_classes) || head_bias.len() != config.n_classes {
            return Err(Error::dim("head", head_weight.shape(), (d, config.n_classes)));
        }
        Ok(Self {
            config,
            embedding,
            blocks,
            head_weight,
            head_bias,
            merged_user,
            version: fresh_version(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head_weight(&self) -> &Matrix {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &Vector {
        &self.head_bias
    }

    pub fn plora_layer(&self, layer: usize, proj: Projection) -> &PLoRALinear {
        match proj {
            Projection::Query => &self.blocks[layer].query,
            Projection::Value => &self.blocks[layer].value,
        }
    }

    /// Mutable access to one PLoRA layer; invalidates outstanding traces.
    pub fn plora_layer_mut(&mut self, layer: usize, proj: Projection) -> &mut PLoRALinear {
        self.version = fresh_version();
        match proj {
            Projection::Query => &mut self.blocks[layer].query,
            Projection::Value => &mut self.blocks[layer].value,
        }
    }

    pub fn plora_layers(&self) -> impl Iterator<Item = &PLoRALinear> {
        self.blocks.iter().flat_map(|b| [&b.query, &b.value])
    }

    /// Every trainable tensor, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in 0..self.config.n_layers {
            for p in [Projection::Query, Projection::Value] {
                ids.push(ParamId::TaskIn(l, p));
                ids.push(ParamId::SharedOut(l, p));
                ids.push(ParamId::PersonIn(l, p));
            }
        }
        ids.push(ParamId::HeadWeight);
        ids.push(ParamId::HeadBias);
        ids
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::TaskIn(l, p) => self.plora_layer(l, p).task_in().data(),
            ParamId::SharedOut(l, p) => self.plora_layer(l, p).shared_out().data(),
            ParamId::PersonIn(l, p) => self.plora_layer(l, p).person_in().data(),
            ParamId::HeadWeight => self.head_weight.data(),
            ParamId::HeadBias => self.head_bias.as_slice(),
        }
    }

    pub fn param_shape(&self, id: ParamId) -> (usize, usize) {
        match id {
            ParamId::TaskIn(l, p) => self.plora_layer(l, p).task_in().shape(),
            ParamId::SharedOut(l, p) => self.plora_layer(l, p).shared_out().shape(),
            ParamId::PersonIn(l, p) => self.plora_layer(l, p).person_in().shape(),
            ParamId::HeadWeight => self.head_weight.shape(),
            ParamId::HeadBias => (1, self.head_bias.len()),
        }
    }

    /// Mutable view of a trainable tensor; invalidates outstanding traces.
    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version = fresh_version();
        match id {
            ParamId::TaskIn(l, p) => self.plora_layer_mut(l, p).task_in_mut().data_mut(),
            ParamId::SharedOut(l, p) => self.plora_layer_mut(l, p).shared_out_mut().data_mut(),
            ParamId::PersonIn(l, p) => self.plora_layer_mut(l, p).person_in_mut().data_mut(),
            ParamId::HeadWeight => self.head_weight.data_mut(),
            ParamId::HeadBias => self.head_bias.as_mut_slice(),
        }
    }

    pub fn is_merged(&self) -> bool {
        self.plora_layers().any(|l| !l.merge_state().is_clean())
    }

    pub fn merged_user(&self) -> Option<&UserId> {
        self.merged_user.as_ref()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            x.row_mut(r).copy_from_slice(self.embedding.row(t as usize));
        }
        x
    }

    /// Forward pass with user embedding `p` (zero for anonymous users).
    pub fn forward(&self, tokens: &[u32], p: &Vector) -> Result<ForwardTrace> {
        if self.is_merged() {
            return Err(Error::State(
                "model is merged; use forward_folded for plain affine inference".into(),
            ));
        }
        if p.len() != self.config.plora.d_p {
            return Err(Error::dim("user embedding", (1, p.len()), (1, self.config.plora.d_p)));
        }
        self.run(tokens, Some(p))
    }

    /// Forward pass through folded weights: query and value projections are
    /// evaluated as plain `hW + b` with no adapter arithmetic.
    pub fn forward_folded(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        if !self.plora_layers().all(|l| !l.merge_state().is_clean()) {
            return Err(Error::State("forward_folded needs every adapter merged".into()));
        }
        self.run(tokens, None)
    }

    fn run(&self, tokens: &[u32], p: Option<&Vector>) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut x = self.embed(tokens);
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (query, value) = match p {
                Some(p) => (block.query.forward(&x, p)?, block.value.forward(&x, p)?),
                None => (block.query.affine(&x)?, block.value.affine(&x)?),
            };
            let key = block.key.forward(&x)?;
            let mut context = Matrix::zeros(x.rows(), self.config.d_model);
            let mut attention = Vec::with_capacity(self.config.n_heads);
            for h in 0..self.config.n_heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let mut scores = query.columns(a, b).matmul_t(&key.columns(a, b))?;
                scores.scale(inv_sqrt);
                softmax_rows(&mut scores);
                context.set_columns(a, &scores.matmul(&value.columns(a, b))?);
                attention.push(scores);
            }
            let mut residual = block.output.forward(&context)?;
            residual.add_assign(&x)?;
            let ff_pre = block.ff_in.forward(&residual)?;
            let mut ff_act = ff_pre.clone();
            ff_act.data_mut().iter_mut().for_each(|u| *u = gelu(*u));
            let mut next = block.ff_out.forward(&ff_act)?;
            next.add_assign(&residual)?;
            traces.push(BlockTrace {
                input: x,
                query,
                key,
                value,
                attention,
                context,
                residual,
                ff_pre,
                ff_act,
            });
            x = next;
        }
        let pooled = x.column_means();
        let mut logits = pooled.to_row().matmul(&self.head_weight)?;
        logits.add_row_broadcast(self.head_bias.as_slice())?;
        let logits = Vector::from_matrix(logits);
        if !logits.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric {
                name: "logits".into(),
            });
        }
        Ok(ForwardTrace {
            version: self.version,
            folded: p.is_none(),
            p: p.cloned().unwrap_or_else(|| Vector::zeros(self.config.plora.d_p)),
            blocks: traces,
            pooled,
            logits,
        })
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, tokens: &[u32], p: &Vector) -> Result<usize> {
        let trace = if self.is_merged() {
            self.forward_folded(tokens)?
        } else {
            self.forward(tokens, p)?
        };
        Ok(argmax(trace.logits.as_slice()))
    }

    /// Exact gradients for the adapters, the head and `p`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Upstream) -> Result<ModelGrads> {
        if trace.version != self.version {
            return Err(Error::State(
                "trace was produced before the model last changed".into(),
            ));
        }
        if trace.folded {
            return Err(Error::State("cannot backpropagate through folded weights".into()));
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        if upstream.logits.len() != cfg.n_classes {
            return Err(Error::dim("logit gradient", (1, upstream.logits.len()), (1, cfg.n_classes)));
        }
        let g_logits = upstream.logits.to_row();
        let head_weight = trace.pooled.to_row().t_matmul(&g_logits)?;
        let head_bias = upstream.logits.clone();
        let mut g_pooled = g_logits.matmul_t(&self.head_weight)?;
        if let Some(extra) = &upstream.pooled {
            if extra.len() != d {
                return Err(Error::dim("pooled gradient", (1, extra.len()), (1, d)));
            }
            g_pooled.axpy(1.0, &extra.to_row())?;
        }
        let seq_len = trace.blocks.first().map_or(0, |b| b.input.rows());
        let mut gx = Matrix::zeros(seq_len, d);
        let inv_t = 1.0 / seq_len as f64;
        for r in 0..seq_len {
            for (o, &g) in gx.row_mut(r).iter_mut().zip(g_pooled.data()) {
                *o = g * inv_t;
            }
        }

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut blocks = vec![None; self.blocks.len()];
        let mut g_p = Vector::zeros(cfg.plora.d_p);
        for (l, (block, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            // feed-forward with residual
            let g_act = gx.matmul_t(&block.ff_out.weight)?;
            let mut g_pre = g_act;
            for (g, &u) in g_pre.data_mut().iter_mut().zip(bt.ff_pre.data()) {
                *g *= gelu_grad(u);
            }
            let mut g_res = gx;
            g_res.add_assign(&g_pre.matmul_t(&block.ff_in.weight)?)?;

            // attention with residual
            let g_ctx = g_res.matmul_t(&block.output.weight)?;
            let mut g_x = g_res;
            let mut g_query = Matrix::zeros(seq_len, d);
            let mut g_key = Matrix::zeros(seq_len, d);
            let mut g_value = Matrix::zeros(seq_len, d);
            for (h, attn) in bt.attention.iter().enumerate() {
                let (a, b) = (h * dh, (h + 1) * dh);
                let g_ctx_h = g_ctx.columns(a, b);
                let v_h = bt.value.columns(a, b);
                let g_attn = g_ctx_h.matmul_t(&v_h)?;
                g_value.set_columns(a, &attn.t_matmul(&g_ctx_h)?);
                let mut g_scores = Matrix::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let arow = attn.row(i);
                    let grow = g_attn.row(i);
                    let inner = crate::linalg::dot(arow, grow);
                    for (o, (&aij, &gij)) in g_scores.row_mut(i).iter_mut().zip(arow.iter().zip(grow)) {
                        *o = aij * (gij - inner) * inv_sqrt;
                    }
                }
                g_query.set_columns(a, &g_scores.matmul(&bt.key.columns(a, b))?);
                g_key.set_columns(a, &g_scores.t_matmul(&bt.query.columns(a, b))?);
            }
            if let Some(extra) = upstream.blocks.as_ref().map(|bs| &bs[l]) {
                g_query.add_assign(&extra.query)?;
                g_value.add_assign(&extra.value)?;
            }
            g_x.add_assign(&g_key.matmul_t(&block.key.weight)?)?;
            let value = block.value.backward(&bt.input, &trace.p, &g_value)?;
            let query = block.query.backward(&bt.input, &trace.p, &g_query)?;
            g_x.add_assign(&value.grad_h)?;
            g_x.add_assign(&query.grad_h)?;
            g_p.axpy(1.0, &value.grads.p)?;
            g_p.axpy(1.0, &query.grads.p)?;
            blocks[l] = Some(BlockGrads {
                query: query.grads,
                value: value.grads,
            });
            gx = g_x;
        }
        Ok(ModelGrads {
            blocks: blocks.into_iter().map(|b| b.expect("every block visited")).collect(),
            head_weight,
            head_bias,
            p: g_p,
        })
    }

    /// Folds every PLoRA layer for `p` (zero for a generic merge).
    pub fn merge_for_user(&mut self, user: Option<&UserId>, p: &Vector) -> Result<()> {
        if self.is_merged() {
            return Err(Error::State("model is already merged".into()));
        }
        for block in &mut self.blocks {
            block.query.merge_for_user(p)?;
            block.value.merge_for_user(p)?;
        }
        self.merged_user = if p.is_zero() { None } else { user.cloned() };
        self.version = fresh_version();
        Ok(())
    }

    pub fn unmerge(&mut self) -> Result<()> {
        for block in &mut self.blocks {
            block.query.unmerge()?;
            block.value.unmerge()?;
        }
        self.merged_user = None;
        self.version = fresh_version();
        Ok(())
    }

    pub fn switch_user(&mut self, from: &Vector, to: &Vector, to_user: Option<&UserId>) -> Result<()> {
        for block in &mut self.blocks {
            block.query.switch_user(from, to)?;
            block.value.switch_user(from, to)?;
        }
        self.merged_user = if to.is_zero() { None } else { to_user.cloned() };
        self.version = fresh_version();
        Ok(())
    }

    /// Embedding currently folded into the biases, if merged.
    pub fn folded_embedding(&self) -> Option<Vector> {
        self.blocks.first().and_then(|b| b.query.folded_embedding())
    }

    pub fn merge_states(&self) -> Vec<MergeState> {
        self.plora_layers().map(|l| l.merge_state().clone()).collect()
    }

    /// Frozen backbone parameter count.
    pub fn frozen_count(&self) -> usize {
        let mut n = self.embedding.data().len();
        for b in &self.blocks {
            n += b.query.count_frozen()
                + b.value.count_frozen()
                + b.key.param_count()
                + b.output.param_count()
                + b.ff_in.param_count()
                + b.ff_out.param_count();
        }
        n
    }

    pub fn adapter_count(&self) -> usize {
        self.plora_layers().map(|l| l.count_trainable()).sum()
    }

    pub fn head_count(&self) -> usize {
        self.head_weight.data().len() + self.head_bias.len()
    }

    /// Frozen tensors in storage order, with names.
    pub fn frozen_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![("embedding".to_string(), self.embedding.clone())];
        for (l, b) in self.blocks.iter().enumerate() {
            let mut push = |name: &str, w: &Matrix, bias: &Vector| {
                out.push((format!("block{l}.{name}.weight"), w.clone()));
                out.push((format!("block{l}.{name}.bias"), bias.to_row()));
            };
            push("q", b.query.weight(), b.query.bias());
            push("k", &b.key.weight, &b.key.bias);
            push("v", b.value.weight(), b.value.bias());
            push("o", &b.output.weight, &b.output.bias);
            push("ff_in", &b.ff_in.weight, &b.ff_in.bias);
            push("ff_out", &b.ff_out.weight, &b.ff_out.bias);
        }
        out
    }

    /// SHA-256 over the bit patterns of every frozen tensor.
    pub fn frozen_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, m) in self.frozen_tensors() {
            hasher.update(name.as_bytes());
            for v in m.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// SHA-256 over the selected trainable tensors.
    pub fn param_checksum(&self, ids: &[ParamId]) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for &id in ids {
            hasher.update(id.name().as_bytes());
            for v in self.param(id) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff_grad, max_rel_error};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            n_heads: 2,
            n_layers: 2,
            max_len: 6,
            n_classes: 3,
            d_ff: 12,
            plora: PLoRAConfig {
                rank: 2,
                d_p: 3,
                alpha_r: 4.0,
                init_std: 0.3,
                ..PLoRAConfig::default()
            },
            embed_std: 1.0,
            backbone_std: 0.4,
            ..EncoderConfig::default()
        }
        .with_d_model(8)
    }

    fn perturb_adapters(model: &mut EncoderModel, rng: &mut Rng) {
        for id in model.param_ids() {
            for v in model.param_mut(id) {
                *v = 0.5 * rng.normal();
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.n_classes = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.plora.d_in = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn exactly_two_plora_layers_per_block() {
        let model = EncoderModel::new(tiny_config(), 1).unwrap();
        assert_eq!(model.plora_layers().count(), 4);
    }

    #[test]
    fn fresh_model_ignores_user() {
        let model = EncoderModel::new(tiny_config(), 2).unwrap();
        let mut rng = Rng::new(3);
        let tokens = [1u32, 5, 7, 19];
        let base = model.forward(&tokens, &Vector::zeros(3)).unwrap();
        for _ in 0..10 {
            let p = Vector::gaussian(3, 2.0, &mut rng).unwrap();
            let t = model.forward(&tokens, &p).unwrap();
            assert_eq!(t.logits, base.logits);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = EncoderModel::new(tiny_config(), 4).unwrap();
        let t = model.forward(&[0, 1, 2, 3, 4], &Vector::zeros(3)).unwrap();
        for b in &t.blocks {
            for a in &b.attention {
                for r in 0..a.rows() {
                    assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn input_validation() {
        let model = EncoderModel::new(tiny_config(), 5).unwrap();
        let p = Vector::zeros(3);
        assert!(matches!(model.forward(&[20], &p), Err(Error::Input(_))));
        assert!(matches!(model.forward(&[1; 7], &p), Err(Error::Input(_))));
        assert!(matches!(model.forward(&[], &p), Err(Error::Input(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(6);
        let mut model = EncoderModel::new(tiny_config(), 6).unwrap();
        perturb_adapters(&mut model, &mut rng);
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let t = model.forward(&[3, 4, 5], &p).unwrap();
        let g = model.backward(&t, &Upstream::logits(Vector::zeros(3))).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut model = EncoderModel::new(tiny_config(), 7).unwrap();
        let t = model.forward(&[1, 2], &Vector::zeros(3)).unwrap();
        model.param_mut(ParamId::HeadBias)[0] += 1.0;
        let r = model.backward(&t, &Upstream::logits(Vector::zeros(3)));
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let mut model = EncoderModel::new(tiny_config(), 8).unwrap();
        perturb_adapters(&mut model, &mut rng);
        let tokens = [2u32, 9, 11, 4, 0];
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let g_logits = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let t = model.forward(&tokens, &p).unwrap();
        let grads = model.backward(&t, &Upstream::logits(g_logits.clone())).unwrap();
        let objective = |m: &EncoderModel, p: &Vector| {
            m.forward(&tokens, p).unwrap().logits.dot(&g_logits)
        };
        for id in model.param_ids() {
            let (r, c) = model.param_shape(id);
            let at = Matrix::from_vec(r, c, model.param(id).to_vec()).unwrap();
            let num = finite_diff_grad(
                |m| {
                    let mut probe = model.clone();
                    probe.param_mut(id).copy_from_slice(m.data());
                    objective(&probe, &p)
                },
                &at,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(grads.slice(id), num.data(), 1e-3);
            assert!(err < 1e-4, "{}: rel err {err}", id.name());
        }
        let num_p = finite_diff_grad(
            |m| objective(&model, &Vector::from_matrix(m.clone())),
            &p.to_row(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(grads.p.as_slice(), num_p.data(), 1e-3) < 1e-4);
    }

    #[test]
    fn merged_model_matches_unmerged() {
        let mut rng = Rng::new(9);
        let mut model = EncoderModel::new(tiny_config(), 9).unwrap();
        perturb_adapters(&mut model, &mut rng);
        let p = Vector::gaussian(3, 1.0, &mut rng).unwrap();
        let tokens = [1u32, 2, 3, 4];
        let expected = model.forward(&tokens, &p).unwrap();
        let mut merged = model.clone();
        let user = UserId::new("u").unwrap();
        merged.merge_for_user(Some(&user), &p).unwrap();
        assert_eq!(merged.merged_user(), Some(&user));
        assert!(merged.forward(&tokens, &p).is_err());
        let folded = merged.forward_folded(&tokens).unwrap();
        assert!(folded.logits.max_abs_diff(&expected.logits) < 1e-8);
        assert!(merged.backward(&folded, &Upstream::logits(Vector::zeros(3))).is_err());
        merged.unmerge().unwrap();
        assert!(!merged.is_merged());
    }
}
