//! fMRI sequence encoder, next-TR self-supervised pretraining, the frozen
//! image/text encoder stand-ins, and the feature-extractor registry.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{AdamW, ParamId, ParamStore};
use crate::rng;
use crate::synthworld::{Image, World, IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_PIXELS, IMAGE_WIDTH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub clip_length: usize,
    /// Rows of the TR embedding table; must exceed the longest sequence.
    pub max_tr: usize,
    /// Learned TR embeddings; otherwise fixed sinusoids.
    pub learned_tr_embedding: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            clip_length: 5,
            max_tr: 16,
            learned_tr_embedding: true,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.max_tr <= self.clip_length {
            return Err(Error::Config("max_tr must exceed clip_length".into()));
        }
        if self.input_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("input_dim and n_layers must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder readout at the query slot that follows the clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriLatent(pub Array1<f64>);

/// Unit-norm image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLatent(pub Array1<f64>);

/// Unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextLatent(pub Array1<f64>);

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Causal transformer over TR tokens with a learned query token appended
/// after the clip; the query position's output is the fMRI latent.
#[derive(Debug, Clone)]
pub struct FmriEncoder {
    pub config: EncoderConfig,
    w_in: ParamId,
    b_in: ParamId,
    /// TR embedding table `[max_tr × model_dim]`.
    pub tr_embedding: ParamId,
    query: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

fn sinusoid_table(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(t, i)| {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let a = t as f64 * freq;
        if i % 2 == 0 { a.sin() } else { a.cos() }
    })
}

impl FmriEncoder {
    /// Registers the encoder's parameters under `prefix` in `store`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &format!("{prefix}init"));
        let d = config.model_dim;
        let p = |n: &str| format!("{prefix}{n}");
        let w_in = store.add_normal(p("w_in"), config.input_dim, d, 1.0 / (config.input_dim as f64).sqrt(), &mut r);
        let b_in = store.add_zeros(p("b_in"), 1, d);
        let tr_embedding = if config.learned_tr_embedding {
            store.add_normal(p("tr_embedding"), config.max_tr, d, 0.1, &mut r)
        } else {
            store.add_frozen(p("tr_embedding"), sinusoid_table(config.max_tr, d) * 0.1)
        };
        let query = store.add_normal(p("query"), 1, d, 0.1, &mut r);
        let std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let q = |n: &str| format!("{prefix}layer{l}.{n}");
            layers.push(Layer {
                ln1_g: store.add_ones(q("ln1_g"), 1, d),
                ln1_b: store.add_zeros(q("ln1_b"), 1, d),
                wq: store.add_normal(q("wq"), d, d, std, &mut r),
                bq: store.add_zeros(q("bq"), 1, d),
                wk: store.add_normal(q("wk"), d, d, std, &mut r),
                bk: store.add_zeros(q("bk"), 1, d),
                wv: store.add_normal(q("wv"), d, d, std, &mut r),
                bv: store.add_zeros(q("bv"), 1, d),
                wo: store.add_normal(q("wo"), d, d, std / (2.0 * config.n_layers as f64).sqrt(), &mut r),
                bo: store.add_zeros(q("bo"), 1, d),
                ln2_g: store.add_ones(q("ln2_g"), 1, d),
                ln2_b: store.add_zeros(q("ln2_b"), 1, d),
                w1: store.add_normal(q("w1"), d, 4 * d, std, &mut r),
                b1: store.add_zeros(q("b1"), 1, 4 * d),
                w2: store.add_normal(q("w2"), 4 * d, d, 0.5 / (d as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt(), &mut r),
                b2: store.add_zeros(q("b2"), 1, d),
            });
        }
        let lnf_g = store.add_ones(p("lnf_g"), 1, d);
        let lnf_b = store.add_zeros(p("lnf_b"), 1, d);
        Ok(Self { config, w_in, b_in, tr_embedding, query, layers, lnf_g, lnf_b })
    }

    fn affine(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn norm(tape: &mut Tape, store: &ParamStore, x: Var, g: ParamId, b: ParamId) -> Var {
        let y = tape.layer_norm(x, 1e-5);
        let g = tape.param(store, g);
        let b = tape.param(store, b);
        let y = tape.mul_row(y, g);
        tape.add_row(y, b)
    }

    /// Runs the transformer over `batch` sequences of `seq_len` embedded
    /// rows stacked as `[batch·seq_len × model_dim]`.
    fn transformer(&self, tape: &mut Tape, store: &ParamStore, mut x: Var, seq_len: usize) -> Var {
        let d = self.config.model_dim;
        let heads = self.config.n_heads;
        let dh = d / heads;
        for layer in &self.layers {
            let h = Self::norm(tape, store, x, layer.ln1_g, layer.ln1_b);
            let q = Self::affine(tape, store, h, layer.wq, layer.bq);
            let k = Self::affine(tape, store, h, layer.wk, layer.bk);
            let v = Self::affine(tape, store, h, layer.wv, layer.bv);
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
                let kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
                let vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = tape.block_causal_softmax(scores, seq_len);
                outs.push(tape.matmul(attn, vh));
            }
            let cat = tape.concat_cols(&outs);
            let att = Self::affine(tape, store, cat, layer.wo, layer.bo);
            x = tape.add(x, att);
            let h = Self::norm(tape, store, x, layer.ln2_g, layer.ln2_b);
            let m = Self::affine(tape, store, h, layer.w1, layer.b1);
            let m = tape.gelu(m);
            let m = Self::affine(tape, store, m, layer.w2, layer.b2);
            x = tape.add(x, m);
        }
        Self::norm(tape, store, x, self.lnf_g, self.lnf_b)
    }

    /// Embeds `[batch·len × input_dim]` rows and adds TR embeddings; with
    /// `append_query` a query token follows each sequence. Returns the
    /// hidden states `[batch·(len + q) × model_dim]`.
    pub fn hidden_states(&self, tape: &mut Tape, store: &ParamStore, input: Var, batch: usize, len: usize, append_query: bool) -> Var {
        let emb = Self::affine(tape, store, input, self.w_in, self.b_in);
        let seq_len = len + usize::from(append_query);
        let seq = if append_query {
            let qtok = tape.param(store, self.query);
            let qrep = tape.gather_rows(qtok, vec![0; batch]);
            let both = tape.concat_rows(&[emb, qrep]);
            let idx: Vec<usize> = (0..batch)
                .flat_map(|b| (0..len).map(move |t| b * len + t).chain(std::iter::once(batch * len + b)))
                .collect();
            tape.gather_rows(both, idx)
        } else {
            emb
        };
        let table = tape.param(store, self.tr_embedding);
        let tr = tape.gather_rows(table, (0..batch).flat_map(|_| 0..seq_len).collect());
        let x = tape.add(seq, tr);
        self.transformer(tape, store, x, seq_len)
    }

    /// Latents `[batch × model_dim]` for stacked clips `[batch·L × P]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var, batch: usize) -> Var {
        let len = self.config.clip_length;
        let h = self.hidden_states(tape, store, input, batch, len, true);
        tape.gather_rows(h, (0..batch).map(|b| b * (len + 1) + len).collect())
    }

    /// Stacks clips into a `[batch·L × P]` leaf after checking shapes.
    pub fn stack(&self, clips: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let (l, p) = (self.config.clip_length, self.config.input_dim);
        let mut out = Array2::zeros((clips.len() * l, p));
        for (b, c) in clips.iter().enumerate() {
            if c.dim() != (l, p) {
                return Err(Error::dims("clip shape", format!("[{l} x {p}]"), format!("{:?}", c.dim())));
            }
            out.slice_mut(s![b * l..(b + 1) * l, ..]).assign(c);
        }
        Ok(out)
    }

    /// Encodes one clip.
    pub fn encode_fmri(&self, store: &ParamStore, clip: &Array2<f64>) -> Result<FmriLatent> {
        let x = self.stack(&[clip])?;
        let mut tape = Tape::new();
        let input = tape.leaf(x);
        let out = self.forward(&mut tape, store, input, 1);
        Ok(FmriLatent(tape.value(out).row(0).to_owned()))
    }

    /// Encodes many clips in one pass, `[n × model_dim]`.
    pub fn encode_batch(&self, store: &ParamStore, clips: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((clips.len(), self.config.model_dim));
        for (chunk_idx, chunk) in clips.chunks(64).enumerate() {
            let x = self.stack(chunk)?;
            let mut tape = Tape::new();
            let input = tape.leaf(x);
            let y = self.forward(&mut tape, store, input, chunk.len());
            out.slice_mut(s![chunk_idx * 64..chunk_idx * 64 + chunk.len(), ..]).assign(tape.value(y));
        }
        Ok(out)
    }
}

/// Next-TR prediction head and optimizer for self-supervised pretraining.
pub struct SslTrainer {
    pub encoder: FmriEncoder,
    pub store: ParamStore,
    head_w: ParamId,
    head_b: ParamId,
    pub optimizer: AdamW,
}

impl SslTrainer {
    pub fn new(config: EncoderConfig, lr: f64, weight_decay: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = FmriEncoder::new(config.clone(), &mut store, "enc.")?;
        let mut r = rng::stream(config.seed, "ssl-head");
        let head_w = store.add_normal("ssl.head_w", config.model_dim, config.input_dim, 0.02, &mut r);
        let head_b = store.add_zeros("ssl.head_b", 1, config.input_dim);
        Ok(Self { encoder, store, head_w, head_b, optimizer: AdamW::new(lr, weight_decay) })
    }

    /// Mean squared error of next-TR predictions over a batch of equally
    /// long windows `[W × P]`.
    pub fn loss_graph(&self, tape: &mut Tape, store: &ParamStore, windows: &[&Array2<f64>]) -> Result<Var> {
        let w = windows.first().map(|x| x.nrows()).unwrap_or(0);
        if w < 2 {
            return Err(Error::InvalidArgument("SSL windows need at least 2 TRs".into()));
        }
        if w > self.encoder.config.max_tr {
            return Err(Error::InvalidArgument(format!("window length {w} exceeds max_tr")));
        }
        let p = self.encoder.config.input_dim;
        let mut x = Array2::zeros((windows.len() * w, p));
        for (b, win) in windows.iter().enumerate() {
            if win.dim() != (w, p) {
                return Err(Error::dims("SSL window", format!("[{w} x {p}]"), format!("{:?}", win.dim())));
            }
            x.slice_mut(s![b * w..(b + 1) * w, ..]).assign(win);
        }
        let input = tape.leaf(x.clone());
        let h = self.encoder.hidden_states(tape, store, input, windows.len(), w, false);
        let src: Vec<usize> = (0..windows.len()).flat_map(|b| (0..w - 1).map(move |t| b * w + t)).collect();
        let dst: Vec<usize> = src.iter().map(|i| i + 1).collect();
        let h = tape.gather_rows(h, src);
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let pred = tape.matmul(h, hw);
        let pred = tape.add_row(pred, hb);
        let target = tape.leaf(x.select(ndarray::Axis(0), &dst));
        Ok(tape.mse(pred, target))
    }

    /// One optimizer step; returns the loss before the update.
    pub fn ssl_pretrain_step(&mut self, windows: &[&Array2<f64>]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_graph(&mut tape, &self.store, windows)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "SSL loss is {value} at step {}",
                self.optimizer.steps_taken()
            )));
        }
        let grads = tape.backward(loss).param_grads();
        self.optimizer.step(&mut self.store, &grads);
        Ok(value)
    }
}

/// Frozen image encoder. Token 0 reads the semantic coefficients off the
/// world's render basis; the remaining tokens are fixed linear projections
/// of image patches.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    basis: Array2<f64>,
    gain: f64,
    patch_proj: Array2<f64>,
    grid: (usize, usize),
    pub n_tokens: usize,
    pub dim: usize,
}

fn patch_grid(n_patches: usize) -> Result<(usize, usize)> {
    let mut best = None;
    for gh in 1..=n_patches {
        if n_patches % gh != 0 {
            continue;
        }
        let gw = n_patches / gh;
        if gh <= gw && IMAGE_HEIGHT % gh == 0 && IMAGE_WIDTH % gw == 0 {
            best = Some((gh, gw));
        }
    }
    best.ok_or_else(|| Error::Config(format!("{n_patches} patches do not tile a {IMAGE_HEIGHT}x{IMAGE_WIDTH} image")))
}

impl ImageEncoder {
    pub fn from_world(world: &World, n_tokens: usize) -> Result<Self> {
        if n_tokens < 2 {
            return Err(Error::Config("image token grid needs at least 2 tokens".into()));
        }
        let grid = patch_grid(n_tokens - 1)?;
        let dim = world.spec.embed_dim;
        let patch_pixels = (IMAGE_HEIGHT / grid.0) * (IMAGE_WIDTH / grid.1) * IMAGE_CHANNELS;
        let mut r = rng::stream(world.spec.seed, "image-encoder");
        let std = 1.0 / (0.12 * (patch_pixels as f64).sqrt());
        let patch_proj = Array2::from_shape_simple_fn((patch_pixels, dim), || std * { let z: f64 = StandardNormal.sample(&mut r); z });
        Ok(Self { basis: world.render_basis.clone(), gain: world.render_gain, patch_proj, grid, n_tokens, dim })
    }

    fn check(image: &Image) -> Result<()> {
        if image.dim() != (IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS) {
            return Err(Error::dims("image", format!("{IMAGE_HEIGHT}x{IMAGE_WIDTH}x{IMAGE_CHANNELS}"), format!("{:?}", image.dim())));
        }
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Semantic coefficients read from the render basis.
    pub fn coefficients(&self, image: &Image) -> Array1<f64> {
        let flat = Array1::from_iter(image.iter().map(|v| v - 0.5));
        self.basis.dot(&flat) / self.gain
    }

    /// Token grid `[n_tokens × dim]` with roughly unit-variance entries.
    pub fn encode_grid(&self, image: &Image) -> Result<Array2<f64>> {
        Self::check(image)?;
        let mut grid = Array2::zeros((self.n_tokens, self.dim));
        grid.row_mut(0).assign(&(self.coefficients(image) * (self.dim as f64).sqrt()));
        let (ph, pw) = (IMAGE_HEIGHT / self.grid.0, IMAGE_WIDTH / self.grid.1);
        for gy in 0..self.grid.0 {
            for gx in 0..self.grid.1 {
                let patch = image.slice(s![gy * ph..(gy + 1) * ph, gx * pw..(gx + 1) * pw, ..]);
                let flat = Array1::from_iter(patch.iter().map(|v| v - 0.5));
                grid.row_mut(1 + gy * self.grid.1 + gx).assign(&flat.dot(&self.patch_proj));
            }
        }
        Ok(grid)
    }

    /// Unit-norm image latent (normalized token 0).
    pub fn encode_image(&self, image: &Image) -> Result<ImageLatent> {
        Self::check(image)?;
        Ok(ImageLatent(unit(self.coefficients(image))))
    }

    /// Latent of a token grid's semantic token.
    pub fn latent_of_grid(grid: &Array2<f64>) -> ImageLatent {
        ImageLatent(unit(grid.row(0).to_owned()))
    }
}

pub fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 { v / n } else { v }
}

/// Frozen text encoder: mean of `[prompts; token embeddings]`, a frozen
/// linear map, then normalization.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    /// `[vocab × dim]`.
    pub token_table: Array2<f64>,
    pub dim: usize,
}

impl TextEncoder {
    pub fn from_world(world: &World) -> Self {
        let scale = (world.spec.embed_dim as f64).sqrt();
        let token_table = world.vocab.latents.dot(&world.semantic_proj.t()) * scale;
        Self { token_table, dim: world.spec.embed_dim }
    }

    /// Registers the frozen projection in `store`.
    pub fn register(&self, store: &mut ParamStore, name: &str) -> ParamId {
        store.add_frozen(name, Array2::eye(self.dim))
    }

    /// Sum of token embeddings and token count.
    pub fn token_sum(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let mut acc = Array1::zeros(self.dim);
        for &t in tokens {
            if t >= self.token_table.nrows() {
                return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
            }
            acc += &self.token_table.row(t);
        }
        Ok(acc)
    }

    /// Batched text path on the tape. `prompts` is `[B × K·dim]`,
    /// `token_sums` is `[B × dim]` and `lengths[b]` the token count.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, proj: ParamId, prompts: Option<(Var, usize)>, token_sums: &Array2<f64>, lengths: &[usize]) -> Var {
        let mut total = tape.leaf(token_sums.clone());
        let k = match prompts {
            Some((p, k)) => {
                for slot in 0..k {
                    let part = tape.slice_cols(p, slot * self.dim, (slot + 1) * self.dim);
                    total = tape.add(total, part);
                }
                k
            }
            None => 0,
        };
        let total = tape.scale_rows(total, lengths.iter().map(|l| 1.0 / (l + k) as f64).collect());
        let w = tape.param(store, proj);
        let h = tape.matmul(total, w);
        tape.normalize_rows(h)
    }

    /// Encodes one token sequence with optional prompt vectors `[K × dim]`.
    pub fn encode_text(&self, store: &ParamStore, proj: ParamId, tokens: &[usize], prompts: Option<&Array2<f64>>) -> Result<TextLatent> {
        let sum = self.token_sum(tokens)?;
        let mut tape = Tape::new();
        let p = match prompts {
            Some(p) => {
                if p.ncols() != self.dim {
                    return Err(Error::dims("prompt width", self.dim, p.ncols()));
                }
                let flat = Array2::from_shape_vec((1, p.len()), p.iter().cloned().collect()).expect("flat");
                Some((tape.leaf(flat), p.nrows()))
            }
            None => None,
        };
        let out = self.forward(&mut tape, store, proj, p, &sum.insert_axis(ndarray::Axis(0)), &[tokens.len()]);
        Ok(TextLatent(tape.value(out).row(0).to_owned()))
    }
}

/// Deterministic map from an image to a fixed-width feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Array1<f64>;
}

/// Fixed Gaussian random projection of centred pixels.
pub struct RandomProjection {
    proj: Array2<f64>,
}

impl RandomProjection {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &format!("rp{dim}"));
        let std = 1.0 / (IMAGE_PIXELS as f64).sqrt();
        Self { proj: Array2::from_shape_simple_fn((dim, IMAGE_PIXELS), || std * { let z: f64 = StandardNormal.sample(&mut r); z }) }
    }
}

impl FeatureExtractor for RandomProjection {
    fn dim(&self) -> usize {
        self.proj.nrows()
    }
    fn extract(&self, image: &Image) -> Array1<f64> {
        self.proj.dot(&Array1::from_iter(image.iter().map(|v| v - 0.5)))
    }
}

/// Average pooling onto a `g × g × C` grid.
pub struct AvgPool {
    grid: usize,
}

impl FeatureExtractor for AvgPool {
    fn dim(&self) -> usize {
        self.grid * self.grid * IMAGE_CHANNELS
    }
    fn extract(&self, image: &Image) -> Array1<f64> {
        let (ph, pw) = (IMAGE_HEIGHT / self.grid, IMAGE_WIDTH / self.grid);
        let mut out = Array1::zeros(self.dim());
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                for c in 0..IMAGE_CHANNELS {
                    let cell = image.slice(s![gy * ph..(gy + 1) * ph, gx * pw..(gx + 1) * pw, c]);
                    out[(gy * self.grid + gx) * IMAGE_CHANNELS + c] = cell.mean().unwrap_or(0.0);
                }
            }
        }
        out
    }
}

/// The frozen image encoder's semantic latent.
pub struct EmbeddingExtractor {
    encoder: ImageEncoder,
}

impl FeatureExtractor for EmbeddingExtractor {
    fn dim(&self) -> usize {
        self.encoder.dim
    }
    fn extract(&self, image: &Image) -> Array1<f64> {
        unit(self.encoder.coefficients(image))
    }
}

/// Extractors keyed by `(name, layer_tag)`, written `name/layer_tag`.
#[derive(Default)]
pub struct FeatureRegistry {
    entries: BTreeMap<(String, String), Box<dyn FeatureExtractor>>,
}

impl FeatureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, layer_tag: &str, extractor: Box<dyn FeatureExtractor>) {
        self.entries.insert((name.to_string(), layer_tag.to_string()), extractor);
    }

    /// `rp/64`, `rp/256`, `pool/4`, `pool/8` and `embed/cls`.
    pub fn builtin(image_encoder: &ImageEncoder, seed: u64) -> Self {
        let mut r = Self::new();
        r.register("rp", "64", Box::new(RandomProjection::new(64, seed)));
        r.register("rp", "256", Box::new(RandomProjection::new(256, seed)));
        r.register("pool", "4", Box::new(AvgPool { grid: 4 }));
        r.register("pool", "8", Box::new(AvgPool { grid: 8 }));
        r.register("embed", "cls", Box::new(EmbeddingExtractor { encoder: image_encoder.clone() }));
        r
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.keys().map(|(n, t)| format!("{n}/{t}")).collect()
    }

    fn get(&self, name: &str, layer_tag: &str) -> Result<&dyn FeatureExtractor> {
        self.entries
            .get(&(name.to_string(), layer_tag.to_string()))
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownExtractor(format!("{name}/{layer_tag}")))
    }

    pub fn dim(&self, name: &str, layer_tag: &str) -> Result<usize> {
        Ok(self.get(name, layer_tag)?.dim())
    }

    pub fn extract_features(&self, name: &str, layer_tag: &str, image: &Image) -> Result<Array1<f64>> {
        Ok(self.get(name, layer_tag)?.extract(image))
    }

    /// Features for many images stacked as `[n × dim]`; `key` is `name/tag`.
    pub fn extract_all(&self, key: &str, images: &[Image]) -> Result<Array2<f64>> {
        let (name, tag) = key.split_once('/').ok_or_else(|| Error::UnknownExtractor(key.to_string()))?;
        let ex = self.get(name, tag)?;
        let mut out = Array2::zeros((images.len(), ex.dim()));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&ex.extract(img));
        }
        Ok(out)
    }
}
