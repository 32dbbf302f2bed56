//! The three classifier architectures: a dense MLP, a 1-D MBConv network
//! in the style of EfficientNet, and an encoder-only transformer over
//! spectrum patches.
//!
//! All models consume a standardized feature vector and produce class
//! logits plus a latent vector (the representation right before the final
//! dense layer). Activations inside the convolutional network are stored
//! channels-last, `[batch, length, channels]`, so pointwise convolutions are
//! plain matrix products.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::defects::N_CLASSES;
use crate::rng::rng_from_seed;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Descriptor(String),
    #[error("batch feature length {got} does not match model input length {expected}")]
    InputLength { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Cnn,
    Transformer,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::Mlp, ArchKind::Cnn, ArchKind::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Mlp => "MLP",
            ArchKind::Cnn => "CNN",
            ArchKind::Transformer => "Transformer",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(ArchKind::Mlp),
            "cnn" => Ok(ArchKind::Cnn),
            "transformer" => Ok(ArchKind::Transformer),
            _ => Err(format!("unknown architecture `{s}` (expected mlp, cnn or transformer)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { hidden: vec![512, 512, 256, 128, 64], dropout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub stem: usize,
    pub stem_stride: usize,
    pub kernel: usize,
    /// Output channels of each MBConv block.
    pub channels: Vec<usize>,
    /// Depthwise stride of each block.
    pub strides: Vec<usize>,
    pub expand_ratio: usize,
    pub se_ratio: f64,
    pub dropout: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stem: 64,
            stem_stride: 2,
            kernel: 3,
            channels: vec![256, 256, 256, 256, 256, 512, 512, 1024],
            strides: vec![2, 1, 1, 1, 1, 2, 1, 2],
            expand_ratio: 6,
            se_ratio: 0.25,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { patch: 16, d_model: 512, heads: 4, layers: 12, mlp_hidden: 2048, dropout: 0.1 }
    }
}

impl TransformerConfig {
    /// Smallest multiple of the patch size holding `feature_len` values.
    pub fn padded_len(&self, feature_len: usize) -> usize {
        feature_len.div_ceil(self.patch) * self.patch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Hyper {
    Mlp(MlpConfig),
    Cnn(CnnConfig),
    Transformer(TransformerConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub input_len: usize,
    /// Number of stacked spectra in the input (1 for a single S-parameter,
    /// 2 for S11 followed by S21). The CNN treats them as input channels.
    pub channels: usize,
    pub n_classes: usize,
    pub hyper: Hyper,
}

impl ArchitectureDescriptor {
    pub fn kind(&self) -> ArchKind {
        match self.hyper {
            Hyper::Mlp(_) => ArchKind::Mlp,
            Hyper::Cnn(_) => ArchKind::Cnn,
            Hyper::Transformer(_) => ArchKind::Transformer,
        }
    }

    pub fn mlp(input_len: usize) -> Self {
        Self { input_len, channels: 1, n_classes: N_CLASSES, hyper: Hyper::Mlp(MlpConfig::default()) }
    }

    pub fn cnn(input_len: usize) -> Self {
        Self { input_len, channels: 1, n_classes: N_CLASSES, hyper: Hyper::Cnn(CnnConfig::default()) }
    }

    pub fn transformer(input_len: usize) -> Self {
        Self { input_len, channels: 1, n_classes: N_CLASSES, hyper: Hyper::Transformer(TransformerConfig::default()) }
    }

    /// Length of the vector fed to the model for a raw feature length.
    pub fn model_input_len(hyper: &Hyper, feature_len: usize) -> usize {
        match hyper {
            Hyper::Transformer(t) => t.padded_len(feature_len),
            _ => feature_len,
        }
    }

    pub fn latent_len(&self) -> usize {
        match &self.hyper {
            Hyper::Mlp(c) => *c.hidden.last().unwrap_or(&self.input_len),
            Hyper::Cnn(c) => *c.channels.last().unwrap_or(&c.stem),
            Hyper::Transformer(t) => t.d_model,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Descriptor(m));
        if self.n_classes != N_CLASSES {
            return err(format!("n_classes must be {N_CLASSES}"));
        }
        if self.input_len == 0 {
            return err("input_len must be at least 1".into());
        }
        if self.channels == 0 || self.input_len % self.channels != 0 {
            return err(format!("input_len {} not divisible into {} channels", self.input_len, self.channels));
        }
        match &self.hyper {
            Hyper::Mlp(c) => {
                if c.hidden.contains(&0) || !(0.0..1.0).contains(&c.dropout) {
                    return err("MLP widths must be positive and dropout in [0, 1)".into());
                }
            }
            Hyper::Cnn(c) => {
                if self.input_len < 64 {
                    return err(format!("CNN input_len {} is below the minimum of 64", self.input_len));
                }
                if c.channels.is_empty() || c.channels.len() != c.strides.len() {
                    return err("CNN needs one stride per block".into());
                }
                if c.kernel % 2 == 0 || c.stem == 0 || c.expand_ratio == 0 || c.channels.contains(&0) {
                    return err("CNN kernel must be odd and widths positive".into());
                }
                let mut len = self.input_len / self.channels;
                for &s in std::iter::once(&c.stem_stride).chain(&c.strides) {
                    if s == 0 {
                        return err("CNN strides must be positive".into());
                    }
                    len = (len - 1) / s + 1;
                }
                if len < 2 {
                    return err("CNN input too short for the downsampling stages".into());
                }
            }
            Hyper::Transformer(t) => {
                if t.patch == 0 || self.input_len % t.patch != 0 {
                    return err(format!(
                        "input_len {} is not divisible by patch size {}; pad to {}",
                        self.input_len,
                        t.patch,
                        t.padded_len(self.input_len)
                    ));
                }
                if t.heads == 0 || t.d_model % t.heads != 0 || t.layers == 0 || t.mlp_hidden == 0 {
                    return err("d_model must split evenly across heads".into());
                }
            }
        }
        Ok(())
    }
}

/// Paper-sized networks, or width/depth-reduced versions that train in
/// minutes on a single core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

impl Hyper {
    pub fn preset(kind: ArchKind, scale: Scale) -> Self {
        match (kind, scale) {
            (ArchKind::Mlp, _) => Hyper::Mlp(MlpConfig::default()),
            (ArchKind::Cnn, Scale::Paper) => Hyper::Cnn(CnnConfig::default()),
            (ArchKind::Cnn, Scale::Desk) => Hyper::Cnn(CnnConfig {
                stem: 16,
                channels: vec![16, 16, 16, 16, 16, 32, 32, 64],
                expand_ratio: 4,
                ..CnnConfig::default()
            }),
            (ArchKind::Transformer, Scale::Paper) => Hyper::Transformer(TransformerConfig::default()),
            (ArchKind::Transformer, Scale::Desk) => Hyper::Transformer(TransformerConfig {
                d_model: 32,
                heads: 4,
                layers: 2,
                mlp_hidden: 64,
                ..TransformerConfig::default()
            }),
        }
    }
}

impl ArchitectureDescriptor {
    /// Descriptor for `blocks` stacked spectra of `n_points` each; the
    /// transformer input is padded up to a whole number of patches.
    pub fn for_features(hyper: Hyper, blocks: usize, n_points: usize) -> Self {
        let feature_len = blocks * n_points;
        Self {
            input_len: Self::model_input_len(&hyper, feature_len),
            channels: match hyper {
                Hyper::Cnn(_) => blocks,
                _ => 1,
            },
            n_classes: N_CLASSES,
            hyper,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct MbConv {
    expand: Option<ParamId>,
    depthwise: ParamId,
    se_reduce: Dense,
    se_expand: Dense,
    project: ParamId,
    stride: usize,
    residual: bool,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln2: Norm,
    fc1: Dense,
    fc2: Dense,
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp {
        layers: Vec<Dense>,
        dropout: f64,
    },
    Cnn {
        stem_w: ParamId,
        stem_b: ParamId,
        stem_stride: usize,
        blocks: Vec<MbConv>,
        head: Dense,
        kernel: usize,
        dropout: f64,
    },
    Transformer {
        patch: Dense,
        pos: ParamId,
        layers: Vec<EncoderLayer>,
        final_norm: Norm,
        head: Dense,
        heads: usize,
        dropout: f64,
    },
}

/// Logits and latent representation of a batch.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub logits: Var,
    pub latent: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub descriptor: ArchitectureDescriptor,
    pub params: ParamStore<T>,
    layout: Layout,
    mode: Mode,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(self.rng.random_range(-bound..bound))).collect();
        self.store.add(name, Tensor::new(shape, data).unwrap())
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::from_f64_lossy(v)))
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let w = self.uniform(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
        let b = self.constant(format!("{name}.b"), &[fan_out], 0.0);
        Dense { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), &[dim], 1.0),
            beta: self.constant(format!("{name}.beta"), &[dim], 0.0),
        }
    }
}

fn dense<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, d: Dense) -> Result<Var, TensorError> {
    let w = g.param(p, d.w);
    let b = g.param(p, d.b);
    let h = g.matmul(x, w)?;
    g.add_broadcast(h, b)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var, n: Norm) -> Result<Var, TensorError> {
    let gamma = g.param(p, n.gamma);
    let beta = g.param(p, n.beta);
    g.layernorm(x, gamma, beta, LN_EPS)
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of the descriptor and `seed`.
    pub fn build(descriptor: &ArchitectureDescriptor, seed: u64) -> Result<Self, ModelError> {
        descriptor.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: rng_from_seed(seed) };
        let nc = descriptor.n_classes;
        let layout = match &descriptor.hyper {
            Hyper::Mlp(c) => {
                let mut widths = vec![descriptor.input_len];
                widths.extend(&c.hidden);
                widths.push(nc);
                let layers =
                    widths.windows(2).enumerate().map(|(i, w)| init.dense(&format!("dense{i}"), w[0], w[1])).collect();
                Layout::Mlp { layers, dropout: c.dropout }
            }
            Hyper::Cnn(c) => {
                let cin = descriptor.channels;
                let stem_w =
                    init.uniform("stem.w".into(), &[c.kernel, cin, c.stem], 1.0 / ((c.kernel * cin) as f64).sqrt());
                let stem_b = init.constant("stem.b".into(), &[c.stem], 0.0);
                let mut blocks = Vec::new();
                let mut c_in = c.stem;
                for (i, (&c_out, &stride)) in c.channels.iter().zip(&c.strides).enumerate() {
                    let hidden = c_in * c.expand_ratio;
                    let expand = (c.expand_ratio != 1).then(|| {
                        init.uniform(format!("block{i}.expand.w"), &[c_in, hidden], 1.0 / (c_in as f64).sqrt())
                    });
                    let depthwise =
                        init.uniform(format!("block{i}.dw.w"), &[c.kernel, hidden], 1.0 / (c.kernel as f64).sqrt());
                    let squeezed = ((c_in as f64 * c.se_ratio) as usize).max(1);
                    let se_reduce = init.dense(&format!("block{i}.se.reduce"), hidden, squeezed);
                    let se_expand = init.dense(&format!("block{i}.se.expand"), squeezed, hidden);
                    let project =
                        init.uniform(format!("block{i}.project.w"), &[hidden, c_out], 1.0 / (hidden as f64).sqrt());
                    blocks.push(MbConv {
                        expand,
                        depthwise,
                        se_reduce,
                        se_expand,
                        project,
                        stride,
                        residual: stride == 1 && c_in == c_out,
                    });
                    c_in = c_out;
                }
                let head = init.dense("head", c_in, nc);
                Layout::Cnn {
                    stem_w,
                    stem_b,
                    stem_stride: c.stem_stride,
                    blocks,
                    head,
                    kernel: c.kernel,
                    dropout: c.dropout,
                }
            }
            Hyper::Transformer(t) => {
                let tokens = descriptor.input_len / t.patch;
                let d = t.d_model;
                let patch = init.dense("patch", t.patch, d);
                let pos = {
                    let normal = Normal::new(0.0, 0.02).unwrap();
                    let data = (0..tokens * d).map(|_| T::from_f64_lossy(normal.sample(&mut init.rng))).collect();
                    init.store.add("pos", Tensor::new(&[tokens, d], data).unwrap())
                };
                let layers = (0..t.layers)
                    .map(|i| EncoderLayer {
                        ln1: init.norm(&format!("layer{i}.ln1"), d),
                        q: init.dense(&format!("layer{i}.q"), d, d),
                        k: init.dense(&format!("layer{i}.k"), d, d),
                        v: init.dense(&format!("layer{i}.v"), d, d),
                        o: init.dense(&format!("layer{i}.o"), d, d),
                        ln2: init.norm(&format!("layer{i}.ln2"), d),
                        fc1: init.dense(&format!("layer{i}.fc1"), d, t.mlp_hidden),
                        fc2: init.dense(&format!("layer{i}.fc2"), t.mlp_hidden, d),
                    })
                    .collect();
                let final_norm = init.norm("final.norm", d);
                let head = init.dense("head", d, nc);
                Layout::Transformer { patch, pos, layers, final_norm, head, heads: t.heads, dropout: t.dropout }
            }
        };
        Ok(Self { descriptor: descriptor.clone(), params: store, layout, mode: Mode::Eval })
    }

    /// Re-creates a model around stored parameters, checking every name and shape.
    pub fn from_params(descriptor: &ArchitectureDescriptor, params: ParamStore<T>) -> Result<Self, ModelError> {
        let mut model = Self::build(descriptor, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Descriptor(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(ModelError::Descriptor(format!(
                    "parameter {n2} {:?} does not match {n1} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn kind(&self) -> ArchKind {
        self.descriptor.kind()
    }

    /// Records the forward pass of `x[B, input_len]` on `g`. Dropout follows
    /// the graph's train flag.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Outputs, ModelError> {
        self.forward_inner(g, x, None)
    }

    /// As [`Model::forward_graph`], also returning each encoder layer's
    /// attention weights `[B, heads, tokens, tokens]` (transformer only).
    pub fn forward_with_attention(&self, g: &mut Graph<T>, x: Var) -> Result<(Outputs, Vec<Var>), ModelError> {
        let mut maps = Vec::new();
        let out = self.forward_inner(g, x, Some(&mut maps))?;
        Ok((out, maps))
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<usize, ModelError> {
        let s = g.shape(x);
        let got = s.get(1).copied().unwrap_or(0);
        if s.len() != 2 || got != self.descriptor.input_len {
            return Err(ModelError::InputLength { expected: self.descriptor.input_len, got });
        }
        Ok(s[0])
    }

    fn forward_inner(&self, g: &mut Graph<T>, x: Var, mut attn: Option<&mut Vec<Var>>) -> Result<Outputs, ModelError> {
        let batch = self.check_input(g, x)?;
        let p = &self.params;
        let nc = self.descriptor.channels;
        let input_len = self.descriptor.input_len;
        match &self.layout {
            Layout::Mlp { layers, dropout } => {
                let mut h = x;
                let (last, hidden) = layers.split_last().expect("at least one layer");
                for d in hidden {
                    h = dense(g, p, h, *d)?;
                    h = g.dropout(h, *dropout)?;
                    h = g.gelu(h);
                }
                let latent = h;
                let logits = dense(g, p, h, *last)?;
                Ok(Outputs { logits, latent })
            }
            Layout::Cnn { stem_w, stem_b, stem_stride, blocks, head, kernel, dropout } => {
                let h = g.reshape(x, &[batch, nc, input_len / nc])?;
                let h = g.permute(h, &[0, 2, 1])?;
                let w = g.param(p, *stem_w);
                let b = g.param(p, *stem_b);
                let h = g.conv1d(h, w, *stem_stride, kernel / 2)?;
                let h = g.add_broadcast(h, b)?;
                let mut h = g.silu(h);
                for i in 0..blocks.len() {
                    h = self.cnn_block(g, i, h, blocks[i].residual)?;
                }
                let latent = g.mean_axis1(h)?;
                let d = g.dropout(latent, *dropout)?;
                let logits = dense(g, p, d, *head)?;
                Ok(Outputs { logits, latent })
            }
            Layout::Transformer { patch, pos, layers, final_norm, head, heads, dropout } => {
                let Hyper::Transformer(cfg) = &self.descriptor.hyper else { unreachable!() };
                let tokens = input_len / cfg.patch;
                let dm = cfg.d_model;
                let dh = dm / heads;
                let h = g.reshape(x, &[batch, tokens, cfg.patch])?;
                let h = dense(g, p, h, *patch)?;
                let pe = g.param(p, *pos);
                let mut h = g.add_broadcast(h, pe)?;
                let inv_sqrt = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
                for layer in layers {
                    let a = norm(g, p, h, layer.ln1)?;
                    let split = |g: &mut Graph<T>, d: Dense| -> Result<Var, TensorError> {
                        let t = dense(g, p, a, d)?;
                        let t = g.reshape(t, &[batch, tokens, *heads, dh])?;
                        g.permute(t, &[0, 2, 1, 3])
                    };
                    let q = split(g, layer.q)?;
                    let k = split(g, layer.k)?;
                    let v = split(g, layer.v)?;
                    let scores = g.batch_matmul(q, k, true)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let weights = g.softmax(scores);
                    if let Some(maps) = attn.as_deref_mut() {
                        maps.push(weights);
                    }
                    let ctx = g.batch_matmul(weights, v, false)?;
                    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
                    let ctx = g.reshape(ctx, &[batch, tokens, dm])?;
                    let o = dense(g, p, ctx, layer.o)?;
                    let o = g.dropout(o, *dropout)?;
                    h = g.add(h, o)?;

                    let m = norm(g, p, h, layer.ln2)?;
                    let m = dense(g, p, m, layer.fc1)?;
                    let m = g.gelu(m);
                    let m = dense(g, p, m, layer.fc2)?;
                    let m = g.dropout(m, *dropout)?;
                    h = g.add(h, m)?;
                }
                let h = norm(g, p, h, *final_norm)?;
                let latent = g.mean_axis1(h)?;
                let d = g.dropout(latent, *dropout)?;
                let logits = dense(g, p, d, *head)?;
                Ok(Outputs { logits, latent })
            }
        }
    }

    /// One MBConv block of the CNN applied to `x[B, L, C]`. `residual`
    /// toggles the identity shortcut (only meaningful when the block
    /// preserves shape).
    pub fn cnn_block(&self, g: &mut Graph<T>, index: usize, x: Var, residual: bool) -> Result<Var, ModelError> {
        let Layout::Cnn { blocks, kernel, .. } = &self.layout else {
            return Err(ModelError::Descriptor("not a CNN".into()));
        };
        let blk = blocks.get(index).ok_or_else(|| ModelError::Descriptor(format!("no block {index}")))?;
        let p = &self.params;
        let mut h = x;
        if let Some(w) = blk.expand {
            let w = g.param(p, w);
            h = g.matmul(h, w)?;
            h = g.silu(h);
        }
        let dw = g.param(p, blk.depthwise);
        h = g.depthwise_conv1d(h, dw, blk.stride, kernel / 2)?;
        h = g.silu(h);

        let s = g.mean_axis1(h)?;
        let s = dense(g, p, s, blk.se_reduce)?;
        let s = g.silu(s);
        let s = dense(g, p, s, blk.se_expand)?;
        let s = g.sigmoid(s);
        h = g.scale_channels(h, s)?;

        let w = g.param(p, blk.project);
        h = g.matmul(h, w)?;
        if residual {
            if g.shape(h) != g.shape(x) {
                return Err(ModelError::Descriptor(format!("block {index} changes shape; no identity shortcut")));
            }
            h = g.add(h, x)?;
        }
        Ok(h)
    }

    fn run(&self, batch: &Tensor<T>) -> Result<(Graph<T>, Outputs), ModelError> {
        let mut g = Graph::new(self.mode == Mode::Train, 0);
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, x)?;
        Ok((g, out))
    }

    /// Class probabilities `[B, n_classes]`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (mut g, out) = self.run(batch)?;
        let probs = g.softmax(out.logits);
        Ok(g.value(probs).clone())
    }

    /// Latent vectors `[B, latent_len]`.
    pub fn extract_latent(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (g, out) = self.run(batch)?;
        Ok(g.value(out.latent).clone())
    }

    /// Probabilities and latents from one pass.
    pub fn forward_with_latent(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let (mut g, out) = self.run(batch)?;
        let probs = g.softmax(out.logits);
        Ok((g.value(probs).clone(), g.value(out.latent).clone()))
    }
}

/// Paper-sized MLP: 512-512-256-128-64 hidden units, GELU, dropout 0.2.
pub fn build_mlp<T: Real>(input_len: usize) -> Result<Model<T>, ModelError> {
    Model::build(&ArchitectureDescriptor::mlp(input_len), 0)
}

/// Paper-sized 8-block MBConv CNN ending in 1024 channels.
pub fn build_cnn<T: Real>(input_len: usize) -> Result<Model<T>, ModelError> {
    Model::build(&ArchitectureDescriptor::cnn(input_len), 0)
}

/// Paper-sized 12-layer, 4-head, 512-wide encoder over 16-point patches.
pub fn build_transformer<T: Real>(input_len: usize) -> Result<Model<T>, ModelError> {
    Model::build(&ArchitectureDescriptor::transformer(input_len), 0)
}
