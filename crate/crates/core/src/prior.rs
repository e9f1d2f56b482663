//! Diffusion prior from fMRI latents to image token grids, fMRI
//! augmentations, best-of-n candidate selection and the small image
//! decoder that turns grids back into pixels.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::params::{AdamW, ParamId, ParamStore};
use crate::preproc::BoldClip;
use crate::rng::{self, Rng};
use crate::synthworld::{image_to_matrix, matrix_to_image, Image, IMAGE_PIXELS};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Array1<f64>,
    pub alphas: Array1<f64>,
    pub alpha_bar: Array1<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid schedule: T={t_train}, betas {beta_start}..{beta_end}")));
        }
        let betas = Array1::linspace(beta_start, beta_end, t_train);
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Array1<f64>) -> Self {
        let alphas = betas.mapv(|b| 1.0 - b);
        let mut acc = 1.0;
        let alpha_bar = alphas.mapv(|a| {
            acc *= a;
            acc
        });
        Self { betas, alphas, alpha_bar }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `n` schedule indices evenly spaced from `T − 1` down to 0.
    pub fn sampling_indices(&self, n: usize) -> Vec<usize> {
        let last = (self.len() - 1) as f64;
        if n == 1 {
            return vec![self.len() - 1];
        }
        (0..n).map(|i| (last * (1.0 - i as f64 / (n - 1) as f64)).round() as usize).collect()
    }
}

fn gaussian(shape: (usize, usize), r: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(r);
        z
    })
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn noise_forward(x0: &Array2<f64>, t: usize, schedule: &NoiseSchedule, r: &mut Rng) -> Result<Array2<f64>> {
    let eps = gaussian(x0.dim(), r);
    noise_with(x0, t, schedule, &eps)
}

fn noise_with(x0: &Array2<f64>, t: usize, schedule: &NoiseSchedule, eps: &Array2<f64>) -> Result<Array2<f64>> {
    if t >= schedule.len() {
        return Err(Error::InvalidArgument(format!("diffusion step {t} outside [0, {})", schedule.len())));
    }
    let ab = schedule.alpha_bar[t];
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Probability of shuffling the TR order of a clip.
    pub p_permute: f64,
    /// Probability of z-scoring each TR row across parcels.
    pub p_normalize: f64,
    /// Per-parcel probability of zero-masking.
    pub p_sparse: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_permute: 0.2, p_normalize: 0.2, p_sparse: 0.1 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { p_permute: 0.0, p_normalize: 0.0, p_sparse: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_permute", self.p_permute), ("p_normalize", self.p_normalize), ("p_sparse", self.p_sparse)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// TR permutation, row renormalization and sparse parcel masking.
pub fn augment_fmri(clip: &BoldClip, config: &AugmentConfig, r: &mut Rng) -> BoldClip {
    let mut out = clip.clone();
    if config.p_permute > 0.0 && r.random_bool(config.p_permute) {
        let mut order: Vec<usize> = (0..out.data.nrows()).collect();
        order.shuffle(r);
        out.data = out.data.select(ndarray::Axis(0), &order);
    }
    if config.p_normalize > 0.0 && r.random_bool(config.p_normalize) {
        for mut row in out.data.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                row.mapv_inplace(|v| (v - mean) / sd);
            }
        }
    }
    if config.p_sparse > 0.0 {
        for mut col in out.data.columns_mut() {
            if r.random_bool(config.p_sparse) {
                col.fill(0.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub n_tokens: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub alpha: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sample_steps: usize,
    pub n_candidates: usize,
    pub augment: AugmentConfig,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            n_tokens: 9,
            hidden: 256,
            time_dim: 16,
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            alpha: 0.3,
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.02,
            sample_steps: 20,
            n_candidates: 2,
            augment: AugmentConfig::default(),
            log_every: 100,
            seed: 42,
        }
    }
}

/// Projection `W` plus a per-token denoiser that predicts the clean grid.
///
/// Each token row of the noisy grid is concatenated with its projected
/// fMRI condition row, a time embedding and a token embedding, passed
/// through two GELU layers whose first activation skips to the output
/// layer, and added to the condition row.
pub struct PriorModel {
    pub config: PriorConfig,
    pub dim: usize,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub w: ParamId,
    token_emb: ParamId,
    a1: ParamId,
    c1: ParamId,
    a2: ParamId,
    c2: ParamId,
    a3: ParamId,
    c3: ParamId,
}

fn time_embedding(t: usize, t_train: usize, dim: usize) -> Array1<f64> {
    let x = t as f64 / t_train as f64;
    Array1::from_shape_fn(dim, |i| {
        let freq = (i / 2 + 1) as f64 * std::f64::consts::PI;
        if i % 2 == 0 { (freq * x).sin() } else { (freq * x).cos() }
    })
}

/// A decoded candidate with its grid and similarity to the fMRI latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionCandidate {
    pub image: Image,
    pub image_latent: Array2<f64>,
    pub similarity_to_fmri: f64,
}

impl PriorModel {
    pub fn new(config: PriorConfig, dim: usize) -> Result<Self> {
        if !(config.alpha > 0.0 && config.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", config.alpha)));
        }
        if config.n_tokens == 0 || config.hidden == 0 || dim == 0 {
            return Err(Error::Config("prior sizes must be positive".into()));
        }
        config.augment.validate()?;
        let schedule = NoiseSchedule::linear(config.t_train, config.beta_start, config.beta_end)?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, "prior-init");
        let k = config.n_tokens;
        let h = config.hidden;
        let input = 2 * dim + config.time_dim + dim;
        let w = store.add_normal("prior.w", dim, k * dim, 1.0 / (dim as f64).sqrt(), &mut r);
        let token_emb = store.add_normal("prior.token_emb", k, dim, 0.1, &mut r);
        let a1 = store.add_normal("prior.a1", input, h, 1.0 / (input as f64).sqrt(), &mut r);
        let c1 = store.add_zeros("prior.c1", 1, h);
        let a2 = store.add_normal("prior.a2", h, h, 1.0 / (h as f64).sqrt(), &mut r);
        let c2 = store.add_zeros("prior.c2", 1, h);
        let a3 = store.add_normal("prior.a3", h, dim, 0.1 / (h as f64).sqrt(), &mut r);
        let c3 = store.add_zeros("prior.c3", 1, dim);
        Ok(Self { config, dim, store, schedule, w, token_emb, a1, c1, a2, c2, a3, c3 })
    }

    /// `H_T = reshape(W·h)` as `[tokens × dim]`.
    pub fn project_latent(&self, h_fmri: &Array1<f64>) -> Result<Array2<f64>> {
        if h_fmri.len() != self.dim {
            return Err(Error::dims("fMRI latent", self.dim, h_fmri.len()));
        }
        let flat = h_fmri.dot(self.store.value(self.w));
        Ok(flat.into_shape_with_order((self.config.n_tokens, self.dim)).expect("grid shape"))
    }

    /// Condition rows `[B·tokens × dim]` from `[B × dim]` latents.
    fn condition_graph(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        let b = tape.shape(h).0;
        let w = tape.param(store, self.w);
        let flat = tape.matmul(h, w);
        tape.reshape(flat, b * self.config.n_tokens, self.dim)
    }

    /// Predicted clean grids `[B·tokens × dim]`.
    pub fn denoise_graph(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, cond: Var, steps: &[usize]) -> Var {
        let k = self.config.n_tokens;
        let rows = steps.len() * k;
        let mut temb = Array2::zeros((rows, self.config.time_dim));
        for (b, &t) in steps.iter().enumerate() {
            let e = time_embedding(t, self.config.t_train, self.config.time_dim);
            for j in 0..k {
                temb.row_mut(b * k + j).assign(&e);
            }
        }
        let temb = tape.leaf(temb);
        let table = tape.param(store, self.token_emb);
        let tok = tape.gather_rows(table, (0..rows).map(|i| i % k).collect());
        let input = tape.concat_cols(&[x_t, cond, temb, tok]);
        let a1 = tape.param(store, self.a1);
        let c1 = tape.param(store, self.c1);
        let a2 = tape.param(store, self.a2);
        let c2 = tape.param(store, self.c2);
        let a3 = tape.param(store, self.a3);
        let c3 = tape.param(store, self.c3);
        let h1 = tape.matmul(input, a1);
        let h1 = tape.add_row(h1, c1);
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, a2);
        let h2 = tape.add_row(h2, c2);
        let h2 = tape.gelu(h2);
        let skip = tape.add(h1, h2);
        let out = tape.matmul(skip, a3);
        let out = tape.add_row(out, c3);
        tape.add(cond, out)
    }

    fn stack_grids(&self, grids: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let k = self.config.n_tokens;
        let mut out = Array2::zeros((grids.len() * k, self.dim));
        for (b, g) in grids.iter().enumerate() {
            if g.dim() != (k, self.dim) {
                return Err(Error::dims("latent grid", format!("[{k} x {}]", self.dim), format!("{:?}", g.dim())));
            }
            out.slice_mut(ndarray::s![b * k..(b + 1) * k, ..]).assign(g);
        }
        Ok(out)
    }

    /// Loss graph for given noise draws: `α · mean‖target − D(x_t, t, W·h)‖²`.
    pub fn loss_graph(&self, tape: &mut Tape, store: &ParamStore, h_fmri: &Array2<f64>, targets: &[&Array2<f64>], steps: &[usize], eps: &Array2<f64>) -> Result<Var> {
        if h_fmri.nrows() != targets.len() || steps.len() != targets.len() {
            return Err(Error::dims("prior batch", targets.len(), h_fmri.nrows()));
        }
        let x0 = self.stack_grids(targets)?;
        let k = self.config.n_tokens;
        let mut x_t = Array2::zeros(x0.dim());
        for (b, &t) in steps.iter().enumerate() {
            let rows = ndarray::s![b * k..(b + 1) * k, ..];
            x_t.slice_mut(rows).assign(&noise_with(&x0.slice(rows).to_owned(), t, &self.schedule, &eps.slice(rows).to_owned())?);
        }
        let h = tape.leaf(h_fmri.clone());
        let cond = self.condition_graph(tape, store, h);
        let xt = tape.leaf(x_t);
        let pred = self.denoise_graph(tape, store, xt, cond, steps);
        let target = tape.leaf(x0);
        let mse = tape.mse(pred, target);
        Ok(tape.scale(mse, self.config.alpha))
    }

    /// One optimizer step on a batch of fMRI latents and target grids.
    pub fn prior_train_step(&mut self, opt: &mut AdamW, h_fmri: &Array2<f64>, targets: &[&Array2<f64>], r: &mut Rng) -> Result<f64> {
        let steps: Vec<usize> = (0..targets.len()).map(|_| r.random_range(0..self.schedule.len())).collect();
        let eps = gaussian((targets.len() * self.config.n_tokens, self.dim), r);
        let mut tape = Tape::new();
        let loss = self.loss_graph(&mut tape, &self.store, h_fmri, targets, &steps, &eps)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("prior loss is {value} after {} steps", opt.steps_taken())));
        }
        let grads = tape.backward(loss).param_grads();
        opt.step(&mut self.store, &grads);
        Ok(value)
    }

    /// Deterministic denoising from pure noise over `n_steps` evenly spaced
    /// schedule indices.
    pub fn sample_prior(&self, h_fmri: &Array1<f64>, n_steps: usize, r: &mut Rng) -> Result<Array2<f64>> {
        if n_steps < 1 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        let cond = self.project_latent(h_fmri)?;
        let mut x = gaussian((self.config.n_tokens, self.dim), r);
        let idx = self.schedule.sampling_indices(n_steps.min(self.schedule.len()));
        for (i, &t) in idx.iter().enumerate() {
            let mut tape = Tape::new();
            let xt = tape.leaf(x.clone());
            let c = tape.leaf(cond.clone());
            let pred = self.denoise_graph(&mut tape, &self.store, xt, c, &[t]);
            let x0 = tape.value(pred).clone();
            match idx.get(i + 1) {
                None => return Ok(x0),
                Some(&next) => {
                    let ab = self.schedule.alpha_bar[t];
                    let eps = (&x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
                    let an = self.schedule.alpha_bar[next];
                    x = x0 * an.sqrt() + eps * (1.0 - an).sqrt();
                }
            }
        }
        unreachable!("sampling loop returns on its last index")
    }

    /// Samples `n_candidates` grids, decodes them and keeps the one whose
    /// image latent is most similar to `h_fmri`.
    pub fn reconstruct(&self, h_fmri: &Array1<f64>, decoder: &ImageDecoder, image_encoder: &ImageEncoder, r: &mut Rng) -> Result<(ReconstructionCandidate, Vec<ReconstructionCandidate>)> {
        let mut candidates = Vec::with_capacity(self.config.n_candidates);
        for _ in 0..self.config.n_candidates.max(1) {
            let grid = self.sample_prior(h_fmri, self.config.sample_steps, r)?;
            let image = decoder.decode_image(&grid)?;
            let latent = image_encoder.encode_image(&image)?.0;
            let similarity = cosine(&latent, h_fmri);
            candidates.push(ReconstructionCandidate { image, image_latent: grid, similarity_to_fmri: similarity });
        }
        let best = select_best(&candidates, h_fmri)?.clone();
        Ok((best, candidates))
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let d = a.dot(a).sqrt() * b.dot(b).sqrt();
    if d == 0.0 { 0.0 } else { (a.dot(b) / d).clamp(-1.0, 1.0) }
}

/// The candidate with the highest stored similarity to the fMRI latent;
/// ties go to the lowest index.
pub fn select_best<'a>(candidates: &'a [ReconstructionCandidate], _h_fmri: &Array1<f64>) -> Result<&'a ReconstructionCandidate> {
    let mut best: Option<&ReconstructionCandidate> = None;
    for c in candidates {
        if best.is_none_or(|b| c.similarity_to_fmri > b.similarity_to_fmri) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("select_best needs at least one candidate".into()))
}

/// Trains the prior on fixed `(h_fmri, grid)` pairs, re-encoding augmented
/// clips each step through `encode` when augmentation is enabled.
pub fn train_prior(
    model: &mut PriorModel,
    clips: &[BoldClip],
    targets: &[Array2<f64>],
    encode: &dyn Fn(&[&Array2<f64>]) -> Result<Array2<f64>>,
) -> Result<Vec<f64>> {
    if clips.is_empty() || clips.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("prior training needs matching nonempty clips ({}) and targets ({})", clips.len(), targets.len())));
    }
    let cfg = model.config.clone();
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, "prior-shuffle");
    let mut aug_rng = rng::stream(cfg.seed, "prior-augment");
    let mut noise_rng = rng::stream(cfg.seed, "prior-noise");
    let augmenting = cfg.augment != AugmentConfig::none();
    let cached = if augmenting {
        None
    } else {
        Some(encode(&clips.iter().map(|c| &c.data).collect::<Vec<_>>())?)
    };
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.clamp(1, clips.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let h = match &cached {
            Some(all) => all.select(ndarray::Axis(0), &batch),
            None => {
                let aug: Vec<BoldClip> = batch.iter().map(|&i| augment_fmri(&clips[i], &cfg.augment, &mut aug_rng)).collect();
                encode(&aug.iter().map(|c| &c.data).collect::<Vec<_>>())?
            }
        };
        let tgt: Vec<&Array2<f64>> = batch.iter().map(|&i| &targets[i]).collect();
        let loss = model.prior_train_step(&mut opt, &h, &tgt, &mut noise_rng)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::debug!("prior step {step} loss {loss:.5}");
        }
        curve.push(loss);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 128, steps: 600, batch_size: 32, lr: 3e-3, seed: 42 }
    }
}

/// Grid-to-pixels network: a linear path plus one GELU layer, clipped to
/// `[0, 1]` at the output.
pub struct ImageDecoder {
    pub store: ParamStore,
    n_tokens: usize,
    dim: usize,
    lin: ParamId,
    u1: ParamId,
    v1: ParamId,
    u2: ParamId,
    bias: ParamId,
}

impl ImageDecoder {
    pub fn new(n_tokens: usize, dim: usize, config: &DecoderConfig) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, "decoder-init");
        let input = n_tokens * dim;
        let lin = store.add_normal("dec.lin", input, IMAGE_PIXELS, 0.01 / (input as f64).sqrt(), &mut r);
        let u1 = store.add_normal("dec.u1", input, config.hidden, 1.0 / (input as f64).sqrt(), &mut r);
        let v1 = store.add_zeros("dec.v1", 1, config.hidden);
        let u2 = store.add_normal("dec.u2", config.hidden, IMAGE_PIXELS, 0.01 / (config.hidden as f64).sqrt(), &mut r);
        let bias = store.add("dec.bias", Array2::from_elem((1, IMAGE_PIXELS), 0.5));
        Self { store, n_tokens, dim, lin, u1, v1, u2, bias }
    }

    pub fn from_store(store: ParamStore, n_tokens: usize, dim: usize) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::Config(format!("decoder checkpoint lacks {n}")));
        let (lin, u1, v1, u2, bias) = (find("dec.lin")?, find("dec.u1")?, find("dec.v1")?, find("dec.u2")?, find("dec.bias")?);
        if store.value(lin).nrows() != n_tokens * dim {
            return Err(Error::dims("decoder input", n_tokens * dim, store.value(lin).nrows()));
        }
        Ok(Self { store, n_tokens, dim, lin, u1, v1, u2, bias })
    }

    /// Unclipped output `[B × pixels]` for flattened grids `[B × tokens·dim]`.
    fn forward_graph(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let lin = tape.param(store, self.lin);
        let u1 = tape.param(store, self.u1);
        let v1 = tape.param(store, self.v1);
        let u2 = tape.param(store, self.u2);
        let bias = tape.param(store, self.bias);
        let a = tape.matmul(x, lin);
        let h = tape.matmul(x, u1);
        let h = tape.add_row(h, v1);
        let h = tape.gelu(h);
        let b = tape.matmul(h, u2);
        let s = tape.add(a, b);
        tape.add_row(s, bias)
    }

    fn flatten(&self, grids: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let n = self.n_tokens * self.dim;
        let mut out = Array2::zeros((grids.len(), n));
        for (i, g) in grids.iter().enumerate() {
            if g.dim() != (self.n_tokens, self.dim) {
                return Err(Error::dims("decoder grid", format!("[{} x {}]", self.n_tokens, self.dim), format!("{:?}", g.dim())));
            }
            out.row_mut(i).assign(&Array1::from_iter(g.iter().cloned()));
        }
        Ok(out)
    }

    /// Fits the decoder to `(grid, image)` pairs by mean squared error.
    pub fn train(&mut self, grids: &[Array2<f64>], images: &[Image], config: &DecoderConfig) -> Result<Vec<f64>> {
        if grids.is_empty() || grids.len() != images.len() {
            return Err(Error::InvalidArgument("decoder training needs matching nonempty grids and images".into()));
        }
        let x = self.flatten(&grids.iter().collect::<Vec<_>>())?;
        let mut y = Array2::zeros((images.len(), IMAGE_PIXELS));
        for (i, img) in images.iter().enumerate() {
            y.row_mut(i).assign(&image_to_matrix(img).row(0));
        }
        let mut opt = AdamW::new(config.lr, 0.0);
        let mut r = rng::stream(config.seed, "decoder-shuffle");
        let mut order: Vec<usize> = (0..grids.len()).collect();
        let bs = config.batch_size.clamp(1, grids.len());
        let mut curve = Vec::with_capacity(config.steps);
        let mut cursor = order.len();
        for _ in 0..config.steps {
            if cursor + bs > order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + bs];
            cursor += bs;
            let mut tape = Tape::new();
            let xb = tape.leaf(x.select(ndarray::Axis(0), idx));
            let pred = self.forward_graph(&mut tape, &self.store, xb);
            let yb = tape.leaf(y.select(ndarray::Axis(0), idx));
            let loss = tape.mse(pred, yb);
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Numerical(format!("decoder loss is {v}")));
            }
            let grads = tape.backward(loss).param_grads();
            opt.step(&mut self.store, &grads);
            curve.push(v);
        }
        Ok(curve)
    }

    /// Decodes a grid to an image clipped to `[0, 1]`.
    pub fn decode_image(&self, grid: &Array2<f64>) -> Result<Image> {
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite latent grid".into()));
        }
        let x = self.flatten(&[grid])?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = self.forward_graph(&mut tape, &self.store, xv);
        let flat = tape.value(out).mapv(|v| v.clamp(0.0, 1.0));
        matrix_to_image(&flat)
    }
}
