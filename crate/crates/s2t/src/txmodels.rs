//! The seven networks of the link, built from `ross-core` blocks.
//!
//! Every network owns a name prefix (`enc`, `chenc`, `chdec`, `dec`, `gen`,
//! `disc`, `probe`, `comp`) so the parameters of several networks can share
//! one store and one set of [`Bindings`].

use ross_core::autodiff::AutodiffError;
use ross_core::losses::{BOS, EOS, PAD};
use ross_core::nnblocks::{
    causal_mask, collect_decls, init_params, positional_encoding, Activation, Bindings, Conv1dLayer, Conv2dLayer,
    DecoderBlock, Dense, Embedding, Init, LayerSpec, NnError, Norm, ParamDecl, ParamStore, TransformerBlock,
};
use ross_core::{Real, Tape, Tensor, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{net}: {msg}")]
    Shape { net: &'static str, msg: String },
}

fn shape_err(net: &'static str, msg: impl Into<String>) -> ModelError {
    ModelError::Shape { net, msg: msg.into() }
}

/// Probe values at or above this binarise to 1.
pub const PROBE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub frames_per_token: usize,
    pub model_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub extractor_kernels: Vec<usize>,
    pub extractor_strides: Vec<usize>,
    pub converter_depth: usize,
    pub converter_conv_depth: usize,
    pub conv_kernel: usize,
    pub decoder_depth: usize,
    pub feature_width: usize,
    pub channel_hidden: usize,
    /// Real values per feature row sent over the air (two per symbol).
    pub symbol_width: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_target_len: usize,
    pub probe_len: usize,
    pub intermediate_width: usize,
    pub disc_channels: usize,
    pub disc_depth: usize,
    pub probe_hidden: usize,
    pub comp_channels: usize,
    pub comp_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_dim: 16,
            frames_per_token: 4,
            model_width: 64,
            heads: 4,
            ff_width: 128,
            extractor_kernels: vec![2, 2, 1],
            extractor_strides: vec![2, 2, 1],
            converter_depth: 2,
            converter_conv_depth: 2,
            conv_kernel: 3,
            decoder_depth: 2,
            feature_width: 32,
            channel_hidden: 64,
            symbol_width: 16,
            src_vocab: 27,
            tgt_vocab: 27,
            max_target_len: 16,
            probe_len: 16,
            intermediate_width: 64,
            disc_channels: 8,
            disc_depth: 3,
            probe_hidden: 32,
            comp_channels: 64,
            comp_depth: 3,
        }
    }
}

impl ModelConfig {
    /// Full-size layer counts and widths. Not trained here.
    pub fn full_scale() -> Self {
        Self {
            frame_dim: 80,
            frames_per_token: 8,
            model_width: 512,
            heads: 8,
            ff_width: 2048,
            extractor_kernels: vec![3, 3, 3, 3, 3, 3, 3],
            extractor_strides: vec![2, 2, 2, 1, 1, 1, 1],
            converter_depth: 12,
            converter_conv_depth: 3,
            conv_kernel: 3,
            decoder_depth: 6,
            feature_width: 256,
            channel_hidden: 1024,
            symbol_width: 32,
            src_vocab: 8000,
            tgt_vocab: 8000,
            max_target_len: 64,
            probe_len: 64,
            intermediate_width: 512,
            disc_channels: 16,
            disc_depth: 5,
            probe_hidden: 256,
            comp_channels: 256,
            comp_depth: 5,
        }
    }

    pub fn padded_frames(&self) -> usize {
        self.max_target_len * self.frames_per_token
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        for (what, v) in [
            ("converter_depth", self.converter_depth),
            ("converter_conv_depth", self.converter_conv_depth),
            ("decoder_depth", self.decoder_depth),
            ("disc_depth", self.disc_depth),
            ("comp_depth", self.comp_depth),
            ("extractor depth", self.extractor_kernels.len()),
        ] {
            if v == 0 {
                return err(format!("{what} must be at least 1"));
            }
        }
        if self.comp_depth < 2 {
            return err("comp_depth must be at least 2".into());
        }
        if self.tgt_vocab < 4 || self.src_vocab < 4 {
            return err(format!("vocabularies ({}, {}) must hold PAD, BOS, EOS and a content token", self.src_vocab, self.tgt_vocab));
        }
        if self.probe_len != self.max_target_len {
            return err(format!("probe_len {} must equal max_target_len {}", self.probe_len, self.max_target_len));
        }
        if self.extractor_kernels.len() != self.extractor_strides.len() {
            return err("extractor_kernels and extractor_strides differ in length".into());
        }
        let stride: usize = self.extractor_strides.iter().product();
        if stride != self.frames_per_token {
            return err(format!("extractor stride product {stride} must equal frames_per_token {}", self.frames_per_token));
        }
        if self.model_width % self.heads != 0 {
            return err(format!("model_width {} not divisible by {} heads", self.model_width, self.heads));
        }
        if self.symbol_width % 2 != 0 {
            return err(format!("symbol_width {} must be even", self.symbol_width));
        }
        Ok(())
    }
}

/// Token ids with the three reserved entries fixed at 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved ids plus `content` tokens named `w0`, `w1`, ...
    pub fn synthetic(content: usize) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
        tokens.extend((0..content).map(|i| format!("w{i}")));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Space-joined tokens up to (not including) EOS.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS && i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn extractor(prefix: &str, cfg: &ModelConfig, input: usize, width: usize) -> Result<Vec<Conv1dLayer>, NnError> {
    let mut layers = Vec::new();
    let mut w_in = input;
    for (i, (&k, &s)) in cfg.extractor_kernels.iter().zip(&cfg.extractor_strides).enumerate() {
        layers.push(Conv1dLayer::new(format!("{prefix}.x{i}"), w_in, width, k, s, Activation::Gelu, true)?);
        w_in = width;
    }
    Ok(layers)
}

fn conv_head(prefix: &str, cfg: &ModelConfig, input: usize, output: usize) -> Result<Vec<Conv1dLayer>, NnError> {
    let mut layers = Vec::new();
    for i in 0..cfg.converter_conv_depth - 1 {
        layers.push(Conv1dLayer::new(format!("{prefix}.c{i}"), input, input, cfg.conv_kernel, 1, Activation::Gelu, true)?);
    }
    let last = cfg.converter_conv_depth - 1;
    layers.push(Conv1dLayer::new(format!("{prefix}.c{last}"), input, output, cfg.conv_kernel, 1, Activation::Identity, false)?);
    Ok(layers)
}

fn run_convs<R: Real>(layers: &[Conv1dLayer], tape: &mut Tape<R>, p: &Bindings, mut x: Var) -> Result<Var, NnError> {
    for l in layers {
        x = l.forward(tape, p, x)?;
    }
    Ok(x)
}

fn add_positions<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var, ModelError> {
    let (n, w) = tape.value(x).dims2().ok_or_else(|| shape_err("positional", "expected a matrix"))?;
    let pe = tape.constant(positional_encoding(n, w));
    Ok(tape.add(x, pe)?)
}

fn decls_of(layers: &[&dyn LayerSpec]) -> Vec<ParamDecl> {
    collect_decls(layers)
}

/// Frames to the fixed `(L̃·r, frame_dim)` grid: zero rows appended.
fn pad_frames<R: Real>(net: &'static str, cfg: &ModelConfig, tape: &mut Tape<R>, x: Var) -> Result<Var, ModelError> {
    let (n, d) = match *tape.shape(x) {
        [n, d] => (n, d),
        ref s => return Err(shape_err(net, format!("frames must be (frames, {}), got {s:?}", cfg.frame_dim))),
    };
    if d != cfg.frame_dim {
        return Err(shape_err(net, format!("frame dim {d}, expected {}", cfg.frame_dim)));
    }
    let full = cfg.padded_frames();
    if n == 0 {
        return Err(shape_err(net, format!("no frames; at least 1 of at most {full} required")));
    }
    if n > full {
        return Err(shape_err(net, format!("{n} frames exceed the {full} that fit {} token slots", cfg.max_target_len)));
    }
    if n == full {
        return Ok(x);
    }
    let zeros = tape.constant(Tensor::zeros([full - n, d]));
    Ok(tape.concat(&[x, zeros], 0)?)
}

/// Extractor (strided 1-D convs) and converter (transformers plus 1-D
/// convs): frames → F of shape `(L̃, feature_width)`.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    cfg: ModelConfig,
    extractor: Vec<Conv1dLayer>,
    blocks: Vec<TransformerBlock>,
    head: Vec<Conv1dLayer>,
}

impl SemanticEncoder {
    pub const PREFIX: &'static str = "enc";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        Ok(Self {
            cfg: cfg.clone(),
            extractor: extractor(p, cfg, cfg.frame_dim, cfg.model_width)?,
            blocks: (0..cfg.converter_depth)
                .map(|i| TransformerBlock::new(format!("{p}.t{i}"), cfg.model_width, cfg.heads, cfg.ff_width))
                .collect::<Result<_, _>>()?,
            head: conv_head(p, cfg, cfg.model_width, cfg.feature_width)?,
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut v: Vec<&dyn LayerSpec> = Vec::new();
        v.extend(self.extractor.iter().map(|l| l as &dyn LayerSpec));
        v.extend(self.blocks.iter().map(|l| l as &dyn LayerSpec));
        v.extend(self.head.iter().map(|l| l as &dyn LayerSpec));
        decls_of(&v)
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, frames: Var) -> Result<Var, ModelError> {
        let x = pad_frames("encoder", &self.cfg, tape, frames)?;
        let x = run_convs(&self.extractor, tape, p, x)?;
        let mut h = add_positions(tape, x)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h, None)?;
        }
        Ok(run_convs(&self.head, tape, p, h)?)
    }
}

/// Two dense layers, ReLU then linear, applied per row.
#[derive(Clone, Debug)]
pub struct DensePair {
    first: Dense,
    second: Dense,
}

impl DensePair {
    fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Result<Self, ModelError> {
        Ok(Self {
            first: Dense::new(format!("{prefix}.d0"), input, hidden, Activation::Relu)?,
            second: Dense::new(format!("{prefix}.d1"), hidden, output, Activation::Identity)?,
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        decls_of(&[&self.first, &self.second])
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, x: Var) -> Result<Var, ModelError> {
        let h = self.first.forward(tape, p, x)?;
        Ok(self.second.forward(tape, p, h)?)
    }
}

/// F → X, `symbol_width` reals per feature row.
#[derive(Clone, Debug)]
pub struct ChannelEncoder(DensePair);

impl ChannelEncoder {
    pub const PREFIX: &'static str = "chenc";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self(DensePair::new(Self::PREFIX, cfg.feature_width, cfg.channel_hidden, cfg.symbol_width)?))
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        self.0.decls()
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, f: Var) -> Result<Var, ModelError> {
        self.0.forward(tape, p, f)
    }
}

/// Y → F̂.
#[derive(Clone, Debug)]
pub struct ChannelDecoder(DensePair);

impl ChannelDecoder {
    pub const PREFIX: &'static str = "chdec";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self(DensePair::new(Self::PREFIX, cfg.symbol_width, cfg.channel_hidden, cfg.feature_width)?))
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        self.0.decls()
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, y: Var) -> Result<Var, ModelError> {
        self.0.forward(tape, p, y)
    }
}

/// Transformer decoder over target embeddings with cross-attention to F̂.
#[derive(Clone, Debug)]
pub struct SemanticDecoder {
    cfg: ModelConfig,
    embed: Embedding,
    blocks: Vec<DecoderBlock>,
    norm: Norm,
    out: Dense,
}

impl SemanticDecoder {
    pub const PREFIX: &'static str = "dec";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        Ok(Self {
            cfg: cfg.clone(),
            embed: Embedding::new(format!("{p}.embed"), cfg.tgt_vocab, cfg.model_width)?,
            blocks: (0..cfg.decoder_depth)
                .map(|i| DecoderBlock::new(format!("{p}.t{i}"), cfg.model_width, cfg.feature_width, cfg.heads, cfg.ff_width))
                .collect::<Result<_, _>>()?,
            norm: Norm::new(format!("{p}.ln"), cfg.model_width)?,
            out: Dense::new(format!("{p}.out"), cfg.model_width, cfg.tgt_vocab, Activation::Identity)?,
        })
    }

    /// The output projection starts at zero, so an untrained decoder
    /// predicts the uniform distribution.
    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut v: Vec<&dyn LayerSpec> = vec![&self.embed];
        v.extend(self.blocks.iter().map(|l| l as &dyn LayerSpec));
        v.push(&self.norm);
        v.push(&self.out);
        let out_w = format!("{}.out.w", Self::PREFIX);
        decls_of(&v)
            .into_iter()
            .map(|d| if d.name == out_w { ParamDecl::new(d.name, d.shape, Init::Zeros) } else { d })
            .collect()
    }

    /// Per-position distributions `(len, E)` for decoder input `tokens`
    /// (BOS-prefixed).
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, memory: Var, tokens: &[usize]) -> Result<Var, ModelError> {
        let n = tokens.len();
        if n == 0 || n > self.cfg.max_target_len {
            return Err(shape_err("decoder", format!("teacher length {n} outside 1..={}", self.cfg.max_target_len)));
        }
        match *tape.shape(memory) {
            [l, w] if l == self.cfg.max_target_len && w == self.cfg.feature_width => {}
            ref s => {
                return Err(shape_err(
                    "decoder",
                    format!("memory must be ({}, {}), got {s:?}", self.cfg.max_target_len, self.cfg.feature_width),
                ))
            }
        }
        let e = self.embed.forward(tape, p, tokens)?;
        let mut h = add_positions(tape, e)?;
        let mask = causal_mask(n);
        for b in &self.blocks {
            h = b.forward(tape, p, h, memory, Some(&mask))?;
        }
        let h = self.norm.forward(tape, p, h)?;
        let logits = self.out.forward(tape, p, h)?;
        Ok(tape.softmax(logits)?)
    }

    /// Argmax decoding from BOS; stops after EOS or `L̃` tokens. The
    /// returned tokens include the EOS when one was produced.
    pub fn greedy<R: Real>(&self, params: &ParamStore<R>, memory: &Tensor<R>) -> Result<Vec<usize>, ModelError> {
        let mut tokens = vec![BOS];
        let mut out = Vec::with_capacity(self.cfg.max_target_len);
        while out.len() < self.cfg.max_target_len {
            let mut tape = Tape::new();
            let p = Bindings::of(&mut tape, params, false);
            let m = tape.constant(memory.clone());
            let probs = self.forward(&mut tape, &p, m, &tokens)?;
            let t = tape.value(probs);
            let last = t.row(tokens.len() - 1);
            let next = argmax(last);
            out.push(next);
            if next == EOS {
                break;
            }
            tokens.push(next);
        }
        Ok(out)
    }
}

pub fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compensating generator: frames → (F̃, Ĩ). Ĩ is the output of the first
/// conv stack.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: ModelConfig,
    extractor: Vec<Conv1dLayer>,
    dense: DensePair,
    blocks: Vec<TransformerBlock>,
    head: Vec<Conv1dLayer>,
}

impl Generator {
    pub const PREFIX: &'static str = "gen";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        Ok(Self {
            cfg: cfg.clone(),
            extractor: extractor(p, cfg, cfg.frame_dim, cfg.intermediate_width)?,
            dense: DensePair::new(&format!("{p}.mid"), cfg.intermediate_width, cfg.model_width, cfg.model_width)?,
            blocks: (0..cfg.converter_depth)
                .map(|i| TransformerBlock::new(format!("{p}.t{i}"), cfg.model_width, cfg.heads, cfg.ff_width))
                .collect::<Result<_, _>>()?,
            head: conv_head(p, cfg, cfg.model_width, cfg.feature_width)?,
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut v: Vec<&dyn LayerSpec> = Vec::new();
        v.extend(self.extractor.iter().map(|l| l as &dyn LayerSpec));
        let mut d = decls_of(&v);
        d.extend(self.dense.decls());
        let mut rest: Vec<&dyn LayerSpec> = Vec::new();
        rest.extend(self.blocks.iter().map(|l| l as &dyn LayerSpec));
        rest.extend(self.head.iter().map(|l| l as &dyn LayerSpec));
        d.extend(decls_of(&rest));
        d
    }

    /// Ĩ alone, `(L′, intermediate_width)`.
    pub fn intermediate<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, frames: Var) -> Result<Var, ModelError> {
        let x = pad_frames("generator", &self.cfg, tape, frames)?;
        Ok(run_convs(&self.extractor, tape, p, x)?)
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, frames: Var) -> Result<(Var, Var), ModelError> {
        let i = self.intermediate(tape, p, frames)?;
        let h = self.dense.forward(tape, p, i)?;
        let mut h = add_positions(tape, h)?;
        for b in &self.blocks {
            h = b.forward(tape, p, h, None)?;
        }
        Ok((run_convs(&self.head, tape, p, h)?, i))
    }
}

/// 2-D conv stack over the feature map, dense, sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: ModelConfig,
    convs: Vec<Conv2dLayer>,
    dense: Dense,
}

impl Discriminator {
    pub const PREFIX: &'static str = "disc";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        let mut convs = Vec::new();
        let (mut h, mut w) = (cfg.max_target_len, cfg.feature_width);
        let mut c_in = 1;
        for i in 0..cfg.disc_depth {
            let l = Conv2dLayer::new(format!("{p}.c{i}"), c_in, cfg.disc_channels, (3, 3), (2, 2), Activation::Gelu)?;
            (h, w) = l.out_extent(h, w);
            c_in = cfg.disc_channels;
            convs.push(l);
        }
        let dense = Dense::new(format!("{p}.out"), c_in * h * w, 1, Activation::Sigmoid)?;
        Ok(Self { cfg: cfg.clone(), convs, dense })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        let mut v: Vec<&dyn LayerSpec> = self.convs.iter().map(|l| l as &dyn LayerSpec).collect();
        v.push(&self.dense);
        decls_of(&v)
    }

    /// Realness score, a one-element tensor.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, f: Var) -> Result<Var, ModelError> {
        let (l, w) = (self.cfg.max_target_len, self.cfg.feature_width);
        if tape.shape(f) != [l, w] {
            return Err(shape_err("discriminator", format!("input must be ({l}, {w}), got {:?}", tape.shape(f))));
        }
        let mut x = tape.reshape(f, &[1, l, w])?;
        for c in &self.convs {
            x = c.forward(tape, p, x)?;
        }
        let n = tape.value(x).numel();
        let flat = tape.reshape(x, &[n])?;
        let y = self.dense.forward(tape, p, flat)?;
        Ok(tape.reshape(y, &[])?)
    }
}

/// Three per-row dense layers ending in a sigmoid: Ĩ → c.
#[derive(Clone, Debug)]
pub struct ProbeNet {
    layers: [Dense; 3],
}

impl ProbeNet {
    pub const PREFIX: &'static str = "probe";

    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        let h = cfg.probe_hidden;
        Ok(Self {
            layers: [
                Dense::new(format!("{p}.d0"), cfg.intermediate_width, h, Activation::Relu)?,
                Dense::new(format!("{p}.d1"), h, h, Activation::Relu)?,
                Dense::new(format!("{p}.d2"), h, 1, Activation::Sigmoid)?,
            ],
        })
    }

    pub fn decls(&self) -> Vec<ParamDecl> {
        decls_of(&[&self.layers[0], &self.layers[1], &self.layers[2]])
    }

    /// c of length L′.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, i: Var) -> Result<Var, ModelError> {
        let mut h = i;
        for l in &self.layers {
            h = l.forward(tape, p, h)?;
        }
        let n = tape.shape(h)[0];
        Ok(tape.reshape(h, &[n])?)
    }
}

/// `c ≥ 0.5 → 1`.
pub fn binarize<R: Real>(c: &[R]) -> Vec<bool> {
    c.iter().map(|&v| v >= R::lit(PROBE_THRESHOLD)).collect()
}

/// 2-D conv stack over `[F̂̃; C]`; its output is added only on rows with
/// `C = 1`, other rows are copied through.
#[derive(Clone, Debug)]
pub struct Compensator {
    cfg: ModelConfig,
    convs: Vec<Conv2dLayer>,
}

impl Compensator {
    pub const PREFIX: &'static str = "comp";

    /// The first conv spans the whole feature width with stride `W`, so
    /// later layers see one column per position with the features as
    /// channels. The last layer emits `W` channels, one per feature.
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let p = Self::PREFIX;
        let w = cfg.feature_width;
        let mut convs = Vec::new();
        for i in 0..cfg.comp_depth {
            let last = i + 1 == cfg.comp_depth;
            let (c_in, kernel, stride) = if i == 0 { (2, (3, 2 * w - 1), (1, w)) } else { (cfg.comp_channels, (3, 1), (1, 1)) };
            let c_out = if last { w } else { cfg.comp_channels };
            let act = if last { Activation::Identity } else { Activation::Gelu };
            convs.push(Conv2dLayer::new(format!("{p}.c{i}"), c_in, c_out, kernel, stride, act)?);
        }
        Ok(Self { cfg: cfg.clone(), convs })
    }

    /// The last conv starts at zero, so an untrained compensator is the
    /// identity.
    pub fn decls(&self) -> Vec<ParamDecl> {
        let v: Vec<&dyn LayerSpec> = self.convs.iter().map(|l| l as &dyn LayerSpec).collect();
        let last_w = format!("{}.c{}.w", Self::PREFIX, self.convs.len() - 1);
        decls_of(&v)
            .into_iter()
            .map(|d| if d.name == last_w { ParamDecl::new(d.name, d.shape, Init::Zeros) } else { d })
            .collect()
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bindings, f: Var, probe: &[bool]) -> Result<Var, ModelError> {
        let (l, w) = (self.cfg.max_target_len, self.cfg.feature_width);
        if tape.shape(f) != [l, w] {
            return Err(shape_err("compensator", format!("features must be ({l}, {w}), got {:?}", tape.shape(f))));
        }
        if probe.len() != l {
            return Err(shape_err("compensator", format!("probe length {} differs from {l}", probe.len())));
        }
        let c = Tensor::from_fn([1, l, w], |k| if probe[k / w] { R::one() } else { R::zero() });
        let c = tape.constant(c);
        let f3 = tape.reshape(f, &[1, l, w])?;
        let mut x = tape.concat(&[f3, c], 0)?;
        for conv in &self.convs {
            x = conv.forward(tape, p, x)?;
        }
        let delta = tape.reshape(x, &[w, l])?;
        let delta = tape.transpose(delta)?;
        let moved = tape.add(f, delta)?;
        let rows: Vec<bool> = (0..l * w).map(|k| probe[k / w]).collect();
        Ok(tape.select(&rows, moved, f)?)
    }
}

/// All seven networks for one config.
#[derive(Clone, Debug)]
pub struct Networks {
    pub cfg: ModelConfig,
    pub encoder: SemanticEncoder,
    pub chenc: ChannelEncoder,
    pub chdec: ChannelDecoder,
    pub decoder: SemanticDecoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub probe: ProbeNet,
    pub compensator: Compensator,
}

/// Which network a parameter group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Net {
    Encoder,
    ChannelEncoder,
    ChannelDecoder,
    Decoder,
    Generator,
    Discriminator,
    Probe,
    Compensator,
}

impl Net {
    pub const ALL: [Net; 8] = [
        Net::Encoder,
        Net::ChannelEncoder,
        Net::ChannelDecoder,
        Net::Decoder,
        Net::Generator,
        Net::Discriminator,
        Net::Probe,
        Net::Compensator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Net::Encoder => SemanticEncoder::PREFIX,
            Net::ChannelEncoder => ChannelEncoder::PREFIX,
            Net::ChannelDecoder => ChannelDecoder::PREFIX,
            Net::Decoder => SemanticDecoder::PREFIX,
            Net::Generator => Generator::PREFIX,
            Net::Discriminator => Discriminator::PREFIX,
            Net::Probe => ProbeNet::PREFIX,
            Net::Compensator => Compensator::PREFIX,
        }
    }

    /// Parameters of `self` inside a merged store.
    pub fn slice<R: Real>(self, store: &ParamStore<R>) -> ParamStore<R> {
        store.extract(&format!("{}.", self.prefix()))
    }
}

impl Networks {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: SemanticEncoder::new(cfg)?,
            chenc: ChannelEncoder::new(cfg)?,
            chdec: ChannelDecoder::new(cfg)?,
            decoder: SemanticDecoder::new(cfg)?,
            generator: Generator::new(cfg)?,
            discriminator: Discriminator::new(cfg)?,
            probe: ProbeNet::new(cfg)?,
            compensator: Compensator::new(cfg)?,
        })
    }

    pub fn decls(&self, net: Net) -> Vec<ParamDecl> {
        match net {
            Net::Encoder => self.encoder.decls(),
            Net::ChannelEncoder => self.chenc.decls(),
            Net::ChannelDecoder => self.chdec.decls(),
            Net::Decoder => self.decoder.decls(),
            Net::Generator => self.generator.decls(),
            Net::Discriminator => self.discriminator.decls(),
            Net::Probe => self.probe.decls(),
            Net::Compensator => self.compensator.decls(),
        }
    }

    /// Fresh parameters for `nets`, each network seeded from `seed` and its
    /// position in [`Net::ALL`].
    pub fn init<R: Real>(&self, nets: &[Net], seed: u64) -> Result<ParamStore<R>, ModelError> {
        let mut store = ParamStore::new(seed);
        for &n in nets {
            let idx = Net::ALL.iter().position(|&m| m == n).expect("listed") as u64;
            let part = init_params::<R>(&self.decls(n), crate::seeds::derive(seed, &[crate::seeds::label::INIT, idx]))?;
            store.merge(&part)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nets() -> Networks {
        Networks::new(&ModelConfig::default()).unwrap()
    }

    fn frames(n: usize) -> Tensor {
        Tensor::from_fn([n, 16], |k| ((k as f64) * 0.37).sin())
    }

    #[test]
    fn encoder_shape_for_any_length() {
        let n = nets();
        let p = n.init::<f64>(&[Net::Encoder], 1).unwrap();
        for len in [1, 17, 40, 64] {
            let mut t = Tape::new();
            let b = Bindings::of(&mut t, &p, false);
            let x = t.constant(frames(len));
            let f = n.encoder.forward(&mut t, &b, x).unwrap();
            assert_eq!(t.shape(f), [16, 32]);
        }
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, &p, false);
        let x = t.constant(frames(65));
        assert!(n.encoder.forward(&mut t, &b, x).is_err());
        let x = t.constant(Tensor::zeros([0, 16]));
        assert!(n.encoder.forward(&mut t, &b, x).is_err());
    }

    #[test]
    fn untrained_decoder_is_uniform() {
        let n = nets();
        let p = n.init::<f64>(&[Net::Decoder], 2).unwrap();
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, &p, false);
        let m = t.constant(Tensor::from_fn([16, 32], |k| (k as f64).cos()));
        let probs = n.decoder.forward(&mut t, &b, m, &[BOS, 5, 6]).unwrap();
        for v in t.value(probs).data() {
            assert!((v - 1.0 / 27.0).abs() < 1e-15);
        }
        assert!(n.decoder.forward(&mut t, &b, m, &[BOS; 17]).is_err());
    }

    #[test]
    fn zero_channel_nets_emit_zero() {
        let n = nets();
        let mut p = n.init::<f64>(&[Net::ChannelEncoder], 3).unwrap();
        let names: Vec<String> = p.names().cloned().collect();
        for k in names {
            p.get_mut(&k).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, &p, false);
        let f = t.constant(Tensor::full([16, 32], 1.5));
        let x = n.chenc.forward(&mut t, &b, f).unwrap();
        assert_eq!(t.shape(x), [16, 16]);
        assert!(t.value(x).data().iter().all(|&v| v == 0.0));
        let bad = t.constant(Tensor::zeros([16, 31]));
        assert!(n.chenc.forward(&mut t, &b, bad).is_err());
    }

    #[test]
    fn generator_and_probe_shapes() {
        let n = nets();
        let p = n.init::<f64>(&[Net::Generator, Net::Probe, Net::Discriminator], 4).unwrap();
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, &p, false);
        let x = t.constant(frames(48));
        let (ft, it) = n.generator.forward(&mut t, &b, x).unwrap();
        assert_eq!(t.shape(ft), [16, 32]);
        assert_eq!(t.shape(it), [16, 64]);
        let c = n.probe.forward(&mut t, &b, it).unwrap();
        assert_eq!(t.shape(c), [16]);
        assert!(t.value(c).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let d = n.discriminator.forward(&mut t, &b, ft).unwrap();
        let s = t.value(d).item();
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn binarize_ties_to_one() {
        assert_eq!(binarize(&[0.5, 0.4999999, 0.9, 0.0]), vec![true, false, true, false]);
    }

    #[test]
    fn compensator_passes_unprobed_rows() {
        let n = nets();
        let mut p = n.init::<f64>(&[Net::Compensator], 5).unwrap();
        p.get_mut("comp.c2.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.3);
        let f0 = Tensor::from_fn([16, 32], |k| (k as f64 * 0.11).sin());
        let mut t = Tape::new();
        let b = Bindings::of(&mut t, &p, false);
        let f = t.constant(f0.clone());
        let none = n.compensator.forward(&mut t, &b, f, &[false; 16]).unwrap();
        assert!(t.value(none).bit_eq(&f0));
        let all = n.compensator.forward(&mut t, &b, f, &[true; 16]).unwrap();
        for r in 0..16 {
            assert_ne!(t.value(all).row(r), f0.row(r));
        }
        assert!(n.compensator.forward(&mut t, &b, f, &[true; 15]).is_err());
    }

    #[test]
    fn greedy_halts() {
        let n = nets();
        let p = n.init::<f64>(&[Net::Decoder], 6).unwrap();
        let out = n.decoder.greedy(&p, &Tensor::zeros([16, 32])).unwrap();
        assert!(out.len() <= 16);
        assert!(out.len() == 16 || out.last() == Some(&EOS));
    }

    #[test]
    fn config_checks() {
        let bad = ModelConfig { probe_len: 8, ..ModelConfig::default() };
        assert!(Networks::new(&bad).is_err());
        let bad = ModelConfig { extractor_strides: vec![2, 1, 1], ..ModelConfig::default() };
        assert!(Networks::new(&bad).is_err());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::synthetic(24);
        assert_eq!(v.len(), 27);
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.render(&[3, 4, EOS, 5]), "w0 w1");
    }
}
