//! Trimodal contrastive alignment of fMRI, image and text latents, with
//! prompt vectors generated per sample by a small conditioning network.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{EncoderConfig, FmriEncoder, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::params::{AdamW, ParamId, ParamStore};
use crate::rng;

/// Normalized per-modality projections for one batch.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub z_fmri: Array2<f64>,
    pub z_image: Array2<f64>,
    pub z_text: Array2<f64>,
}

impl TripletBatch {
    pub fn new(z_fmri: Array2<f64>, z_image: Array2<f64>, z_text: Array2<f64>) -> Result<Self> {
        if z_image.dim() != z_fmri.dim() || z_text.dim() != z_fmri.dim() {
            return Err(Error::dims("triplet batch", format!("{:?}", z_fmri.dim()), format!("{:?}/{:?}", z_image.dim(), z_text.dim())));
        }
        for m in [&z_fmri, &z_image, &z_text] {
            check_unit_rows(m)?;
        }
        Ok(Self { z_fmri, z_image, z_text })
    }
}

fn check_unit_rows(m: &Array2<f64>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("row {i} has norm {n}, expected unit")));
        }
    }
    Ok(())
}

fn log_softmax_diag_mean(logits: &Array2<f64>) -> f64 {
    let n = logits.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        acc += row[i] - lse;
    }
    acc / n as f64
}

/// Symmetric InfoNCE over a batch of paired unit rows at temperature `tau`.
pub fn clip_loss(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if z1.dim() != z2.dim() || z1.nrows() == 0 {
        return Err(Error::dims("clip_loss batch", format!("{:?}", z1.dim()), format!("{:?}", z2.dim())));
    }
    let logits = z1.dot(&z2.t()) / tau;
    Ok(-0.5 * (log_softmax_diag_mean(&logits) + log_softmax_diag_mean(&logits.t().to_owned())))
}

/// Mean of the fMRI–image and fMRI–text losses.
pub fn trimodal_loss(batch: &TripletBatch, tau: f64) -> Result<f64> {
    Ok(0.5 * (clip_loss(&batch.z_fmri, &batch.z_image, tau)? + clip_loss(&batch.z_fmri, &batch.z_text, tau)?))
}

/// [`clip_loss`] on the tape, with `log_tau` a `1 × 1` node.
pub fn clip_loss_graph(tape: &mut Tape, z1: Var, z2: Var, log_tau: Var) -> Var {
    let t2 = tape.transpose(z2);
    let sim = tape.matmul(z1, t2);
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(sim, inv_tau);
    let lt = tape.transpose(logits);
    let a = tape.log_softmax_rows(logits);
    let b = tape.log_softmax_rows(lt);
    let da = tape.diag_mean(a);
    let db = tape.diag_mean(b);
    let s = tape.add(da, db);
    tape.scale(s, -0.5)
}

/// Top-1 retrieval: fraction of rows whose best match is their own index.
pub fn retrieval_accuracy(z_fmri: &Array2<f64>, z_other: &Array2<f64>) -> f64 {
    let n = z_fmri.nrows();
    if n == 0 {
        return 0.0;
    }
    let sim = z_fmri.dot(&z_other.t());
    let hits = sim
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, row)| argmax(row.iter().copied()) == Some(*i))
        .count();
    hits as f64 / n as f64
}

/// Index of the first maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Two-layer bottleneck network mapping `[h_fmri ‖ h_image]` to `K` prompt
/// vectors.
#[derive(Debug, Clone)]
pub struct MetaNet {
    pub n_prompts: usize,
    pub text_dim: usize,
    pub input_dim: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MetaNet {
    pub fn new(store: &mut ParamStore, input_dim: usize, text_dim: usize, n_prompts: usize, seed: u64) -> Self {
        let hidden = (input_dim / 16).max(1);
        let mut r = rng::stream(seed, "metanet");
        Self {
            n_prompts,
            text_dim,
            input_dim,
            w1: store.add_normal("meta.w1", input_dim, hidden, 1.0 / (input_dim as f64).sqrt(), &mut r),
            b1: store.add_zeros("meta.b1", 1, hidden),
            w2: store.add_zeros("meta.w2", hidden, n_prompts * text_dim),
            b2: store.add_zeros("meta.b2", 1, n_prompts * text_dim),
        }
    }

    /// `[B × input_dim]` → `[B × K·text_dim]`.
    pub fn forward_graph(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(features, w1);
        let h = tape.add_row(h, b1);
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    /// Prompt vectors `[K × text_dim]` for one sample.
    pub fn metanet_forward(&self, store: &ParamStore, h_fmri: &Array1<f64>, h_image: &Array1<f64>) -> Result<Array2<f64>> {
        if h_fmri.len() + h_image.len() != self.input_dim {
            return Err(Error::dims("meta-net input", self.input_dim, h_fmri.len() + h_image.len()));
        }
        if h_fmri.iter().chain(h_image.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite meta-net input".into()));
        }
        let f = ndarray::concatenate(Axis(0), &[h_fmri.view(), h_image.view()]).expect("1-d concat");
        let mut tape = Tape::new();
        let x = tape.leaf(f.insert_axis(Axis(0)));
        let out = self.forward_graph(&mut tape, store, x);
        let flat = tape.value(out).row(0).to_owned();
        Ok(flat.into_shape_with_order((self.n_prompts, self.text_dim)).expect("prompt shape"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub n_prompts: usize,
    /// Include the fMRI–text term; otherwise fMRI–image only.
    pub use_text: bool,
    /// Generate prompts with the meta-net; otherwise plain text latents.
    pub use_prompts: bool,
    /// Multiply the step count by the number of subjects.
    pub universal: bool,
    pub init_tau: f64,
    pub min_tau: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.03,
            n_prompts: 8,
            use_text: true,
            use_prompts: true,
            universal: false,
            init_tau: 0.07,
            min_tau: 0.01,
            log_every: 100,
            seed: 42,
        }
    }
}

/// One training pair with precomputed frozen-encoder inputs.
#[derive(Debug, Clone)]
pub struct ContrastiveSample {
    /// `[clip_length × n_parcels]`.
    pub clip: Array2<f64>,
    pub image_latent: Array1<f64>,
    pub text_tokens: Vec<usize>,
    pub subject_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    /// Retrieval accuracies on the logging batch, when computed.
    pub brain_vision: Option<f64>,
    pub brain_language: Option<f64>,
}

/// fMRI encoder, projector, meta-net and temperature sharing one store,
/// plus the frozen text encoder's projection.
pub struct ContrastiveModel {
    pub store: ParamStore,
    pub encoder: FmriEncoder,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub metanet: MetaNet,
    pub log_tau: ParamId,
    pub text: TextEncoder,
    pub text_proj: ParamId,
}

impl ContrastiveModel {
    pub fn new(encoder_config: EncoderConfig, text: TextEncoder, n_prompts: usize, init_tau: f64) -> Result<Self> {
        if !(init_tau > 0.0) {
            return Err(Error::Config("init_tau must be positive".into()));
        }
        let seed = encoder_config.seed;
        let d = encoder_config.model_dim;
        if text.dim != d {
            return Err(Error::dims("text embedding width", d, text.dim));
        }
        let mut store = ParamStore::new();
        let encoder = FmriEncoder::new(encoder_config, &mut store, "enc.")?;
        let mut r = rng::stream(seed, "fmri-projector");
        let proj_w = store.add_normal("proj.w", d, d, 1.0 / (d as f64).sqrt(), &mut r);
        let proj_b = store.add_zeros("proj.b", 1, d);
        let metanet = MetaNet::new(&mut store, 2 * d, d, n_prompts, seed);
        let log_tau = store.add("log_tau", Array2::from_elem((1, 1), init_tau.ln()));
        let text_proj = text.register(&mut store, "text.proj");
        Ok(Self { store, encoder, proj_w, proj_b, metanet, log_tau, text, text_proj })
    }

    pub fn tau(&self) -> f64 {
        self.store.value(self.log_tau)[[0, 0]].exp()
    }

    /// Copies `enc.*` parameters from a pretrained store.
    pub fn load_encoder(&mut self, pretrained: &ParamStore) -> Result<()> {
        let names: Vec<(ParamId, String)> = self.store.iter().filter(|(_, p)| p.name.starts_with("enc.")).map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in names {
            let src = pretrained.find(&name).ok_or_else(|| Error::Config(format!("pretrained checkpoint lacks {name}")))?;
            let v = pretrained.value(src).clone();
            if v.dim() != self.store.value(id).dim() {
                return Err(Error::dims(name, format!("{:?}", self.store.value(id).dim()), format!("{:?}", v.dim())));
            }
            self.store.get_mut(id).value = v;
        }
        Ok(())
    }

    /// Projected unit fMRI latent from encoder output rows.
    pub fn project_graph(&self, tape: &mut Tape, store: &ParamStore, o: Var) -> Var {
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        let z = tape.matmul(o, w);
        let z = tape.add_row(z, b);
        tape.normalize_rows(z)
    }

    fn text_graph(&self, tape: &mut Tape, store: &ParamStore, o: Option<Var>, image: &Array2<f64>, tokens: &[&[usize]], use_prompts: bool) -> Result<Var> {
        let mut sums = Array2::zeros((tokens.len(), self.text.dim));
        for (i, t) in tokens.iter().enumerate() {
            sums.row_mut(i).assign(&self.text.token_sum(t)?);
        }
        let lengths: Vec<usize> = tokens.iter().map(|t| t.len()).collect();
        let prompts = match (use_prompts, o) {
            (true, Some(o)) => {
                let img = tape.leaf(image.clone());
                let f = tape.concat_cols(&[o, img]);
                Some((self.metanet.forward_graph(tape, store, f), self.metanet.n_prompts))
            }
            _ => None,
        };
        Ok(self.text.forward(tape, store, self.text_proj, prompts, &sums, &lengths))
    }

    /// Batch loss graph; returns `(loss, z_fmri, z_text)`.
    pub fn loss_graph(&self, tape: &mut Tape, store: &ParamStore, batch: &[&ContrastiveSample], config: &ContrastiveConfig) -> Result<(Var, Var, Option<Var>)> {
        let clips: Vec<&Array2<f64>> = batch.iter().map(|s| &s.clip).collect();
        let x = self.encoder.stack(&clips)?;
        let input = tape.leaf(x);
        let o = self.encoder.forward(tape, store, input, batch.len());
        let z_f = self.project_graph(tape, store, o);
        let mut image = Array2::zeros((batch.len(), self.text.dim));
        for (i, s) in batch.iter().enumerate() {
            if s.image_latent.len() != self.text.dim {
                return Err(Error::dims("image latent", self.text.dim, s.image_latent.len()));
            }
            image.row_mut(i).assign(&s.image_latent);
        }
        let log_tau = tape.param(store, self.log_tau);
        let z_i = tape.leaf(image.clone());
        let li = clip_loss_graph(tape, z_f, z_i, log_tau);
        if !config.use_text {
            return Ok((li, z_f, None));
        }
        let tokens: Vec<&[usize]> = batch.iter().map(|s| s.text_tokens.as_slice()).collect();
        let z_t = self.text_graph(tape, store, Some(o), &image, &tokens, config.use_prompts)?;
        let lt = clip_loss_graph(tape, z_f, z_t, log_tau);
        let sum = tape.add(li, lt);
        Ok((tape.scale(sum, 0.5), z_f, Some(z_t)))
    }

    /// Encoder outputs `[n × model_dim]` before projection.
    pub fn encode(&self, clips: &[&Array2<f64>]) -> Result<Array2<f64>> {
        self.encoder.encode_batch(&self.store, clips)
    }

    /// Unit-norm projected fMRI latents.
    pub fn embed_fmri(&self, clips: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let o = self.encode(clips)?;
        let mut tape = Tape::new();
        let o = tape.leaf(o);
        let z = self.project_graph(&mut tape, &self.store, o);
        Ok(tape.value(z).clone())
    }

    /// Text latents conditioned on each sample's fMRI and image latents.
    pub fn embed_text(&self, samples: &[&ContrastiveSample], use_prompts: bool) -> Result<Array2<f64>> {
        let clips: Vec<&Array2<f64>> = samples.iter().map(|s| &s.clip).collect();
        let o = self.encode(&clips)?;
        let image = Array2::from_shape_fn((samples.len(), self.text.dim), |(i, j)| samples[i].image_latent[j]);
        let tokens: Vec<&[usize]> = samples.iter().map(|s| s.text_tokens.as_slice()).collect();
        let mut tape = Tape::new();
        let o = tape.leaf(o);
        let z = self.text_graph(&mut tape, &self.store, Some(o), &image, &tokens, use_prompts)?;
        Ok(tape.value(z).clone())
    }

    /// Plain text latent without prompts.
    pub fn embed_plain_text(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        Ok(self.text.encode_text(&self.store, self.text_proj, tokens, None)?.0)
    }

    /// Brain→vision and brain→language top-1 retrieval on `samples`.
    pub fn retrieval(&self, samples: &[&ContrastiveSample], config: &ContrastiveConfig) -> Result<(f64, f64)> {
        let clips: Vec<&Array2<f64>> = samples.iter().map(|s| &s.clip).collect();
        let z_f = self.embed_fmri(&clips)?;
        let image = Array2::from_shape_fn((samples.len(), self.text.dim), |(i, j)| samples[i].image_latent[j]);
        let z_t = self.embed_text(samples, config.use_prompts)?;
        Ok((retrieval_accuracy(&z_f, &image), retrieval_accuracy(&z_f, &z_t)))
    }
}

/// Builds training samples from clips and their stimuli.
pub fn make_samples<'a>(image_encoder: &ImageEncoder, items: impl IntoIterator<Item = (Array2<f64>, &'a crate::synthworld::Image, Vec<usize>, usize)>) -> Result<Vec<ContrastiveSample>> {
    items
        .into_iter()
        .map(|(clip, image, text_tokens, subject_id)| {
            Ok(ContrastiveSample { clip, image_latent: image_encoder.encode_image(image)?.0, text_tokens, subject_id })
        })
        .collect()
}

/// Trains `model` in place and returns the loss curve (one point per step).
///
/// A non-finite loss aborts before the offending update, leaving `model` at
/// the last good parameters.
pub fn train_contrastive(model: &mut ContrastiveModel, samples: &[ContrastiveSample], config: &ContrastiveConfig) -> Result<Vec<CurvePoint>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("contrastive training needs at least one sample".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_subjects = samples.iter().map(|s| s.subject_id).max().unwrap_or(0) + 1;
    let steps = if config.universal { config.steps * n_subjects } else { config.steps };
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut r = rng::stream(config.seed, "contrastive-shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let bs = config.batch_size.min(samples.len());
    let min_log_tau = config.min_tau.ln();
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            if !batch.iter().any(|s: &&ContrastiveSample| std::ptr::eq(*s, &samples[idx])) {
                batch.push(&samples[idx]);
            }
        }
        let mut tape = Tape::new();
        let (loss, z_f, z_t) = model.loss_graph(&mut tape, &model.store, &batch, config)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical(format!("contrastive loss is {value} at step {step}; parameters kept from step {}", step.saturating_sub(1))));
        }
        let log = config.log_every > 0 && (step % config.log_every == 0 || step + 1 == steps);
        let (bv, bl) = if log {
            let zf = tape.value(z_f);
            let img = Array2::from_shape_fn((batch.len(), zf.ncols()), |(i, j)| batch[i].image_latent[j]);
            (Some(retrieval_accuracy(zf, &img)), z_t.map(|z| retrieval_accuracy(zf, tape.value(z))))
        } else {
            (None, None)
        };
        curve.push(CurvePoint { step, loss: value, tau: model.tau(), brain_vision: bv, brain_language: bl });
        let grads = tape.backward(loss).param_grads();
        opt.step(&mut model.store, &grads);
        let lt = &mut model.store.get_mut(model.log_tau).value[[0, 0]];
        *lt = lt.max(min_log_tau);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::max_fd_error;
    use crate::synthworld::{generate_world, WorldSpec};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(r: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_simple_fn((n, d), || r.random_range(-1.0f64..1.0));
        for mut row in m.rows_mut() {
            let nrm: f64 = row.dot(&row).sqrt();
            row /= nrm;
        }
        m
    }

    /// Double-loop evaluation of the symmetric loss with the explicit
    /// −1/(2|B|) prefactor.
    fn oracle(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
        let n = z1.nrows();
        let mut logits = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..z1.ncols() {
                    s += z1[[i, k]] * z2[[j, k]];
                }
                logits[i][j] = s / tau;
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| logits[i][j].exp()).sum();
            let col: f64 = (0..n).map(|j| logits[j][i].exp()).sum();
            total += (logits[i][i].exp() / row).ln() + (logits[i][i].exp() / col).ln();
        }
        -total / (2.0 * n as f64)
    }

    #[test]
    fn single_element_batch_has_zero_loss() {
        let z = array![[0.6, 0.8]];
        assert_eq!(clip_loss(&z, &z, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_at_unit_temperature() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((clip_loss(&z, &z, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let z = array![[1.0, 0.0]];
        assert!(clip_loss(&z, &z, 0.0).is_err());
        assert!(clip_loss(&z, &z, -1.0).is_err());
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = r.random_range(1..=8);
            let z1 = random_unit_rows(&mut r, n, 5);
            let z2 = random_unit_rows(&mut r, n, 5);
            let tau = r.random_range(0.05..2.0);
            let got = clip_loss(&z1, &z2, tau).unwrap();
            let want = oracle(&z1, &z2, tau);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn trimodal_is_average_of_pairwise_losses() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let f = random_unit_rows(&mut r, 6, 4);
        let i = random_unit_rows(&mut r, 6, 4);
        let t = random_unit_rows(&mut r, 6, 4);
        let b = TripletBatch::new(f.clone(), i.clone(), t.clone()).unwrap();
        let want = 0.5 * (oracle(&f, &i, 0.3) + oracle(&f, &t, 0.3));
        assert!((trimodal_loss(&b, 0.3).unwrap() - want).abs() < 1e-12);
        let same = TripletBatch::new(f.clone(), i.clone(), i.clone()).unwrap();
        assert!((trimodal_loss(&same, 0.3).unwrap() - clip_loss(&f, &i, 0.3).unwrap()).abs() < 1e-15);
        let one = TripletBatch::new(f.slice(ndarray::s![0..1, ..]).to_owned(), i.slice(ndarray::s![0..1, ..]).to_owned(), t.slice(ndarray::s![0..1, ..]).to_owned()).unwrap();
        assert_eq!(trimodal_loss(&one, 0.3).unwrap(), 0.0);
        assert!(TripletBatch::new(f.clone() * 2.0, i, t).is_err());
    }

    #[test]
    fn graph_loss_equals_direct_loss_and_gradients_match_fd() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let z1 = random_unit_rows(&mut r, 5, 3);
        let z2 = random_unit_rows(&mut r, 5, 3);
        let lt = 0.4f64.ln();
        let eval = |a: &Array2<f64>, b: &Array2<f64>, lt: f64| {
            let mut tape = Tape::new();
            let (x, y, l) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(array![[lt]]));
            let out = clip_loss_graph(&mut tape, x, y, l);
            (tape.scalar(out), tape, [x, y, l], out)
        };
        let (v, tape, vars, out) = eval(&z1, &z2, lt);
        assert!((v - clip_loss(&z1, &z2, lt.exp()).unwrap()).abs() < 1e-12);
        let g = tape.backward(out);
        let h = 1e-6;
        for (k, base) in [&z1, &z2].into_iter().enumerate() {
            for idx in [(0, 0), (2, 1), (4, 2)] {
                let mut up = base.clone();
                up[idx] += h;
                let mut dn = base.clone();
                dn[idx] -= h;
                let fd = if k == 0 { (eval(&up, &z2, lt).0 - eval(&dn, &z2, lt).0) / (2.0 * h) } else { (eval(&z1, &up, lt).0 - eval(&z1, &dn, lt).0) / (2.0 * h) };
                let an = g.wrt(vars[k]).unwrap()[idx];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{fd} vs {an}");
            }
        }
        let fd = (eval(&z1, &z2, lt + h).0 - eval(&z1, &z2, lt - h).0) / (2.0 * h);
        let an = g.wrt(vars[2]).unwrap()[[0, 0]];
        assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()), "{fd} vs {an}");
    }

    #[test]
    fn identity_pairing_is_optimal_for_orthogonal_rows() {
        for n in 2..=4usize {
            let eye = Array2::<f64>::eye(n);
            let base = clip_loss(&eye, &eye, 0.5).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            // Heap's algorithm over all pairings.
            fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
                if k == 1 {
                    out.push(p.clone());
                    return;
                }
                for i in 0..k {
                    heap(k - 1, p, out);
                    let j = if k % 2 == 0 { i } else { 0 };
                    p.swap(j, k - 1);
                }
            }
            let mut all = Vec::new();
            heap(n, &mut perm, &mut all);
            for p in all {
                let z2 = eye.select(Axis(0), &p);
                assert!(clip_loss(&eye, &z2, 0.5).unwrap() >= base - 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_permutation_invariant(seed in 0u64..1000, n in 1usize..8) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let z1 = random_unit_rows(&mut r, n, 4);
            let z2 = random_unit_rows(&mut r, n, 4);
            let a = clip_loss(&z1, &z2, 0.2).unwrap();
            prop_assert_eq!(a, clip_loss(&z2, &z1, 0.2).unwrap());
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut r);
            let b = clip_loss(&z1.select(Axis(0), &p), &z2.select(Axis(0), &p), 0.2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn retrieval_examples() {
        let z = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(retrieval_accuracy(&z, &z), 1.0);
        let rev = z.select(Axis(0), &[2, 1, 0]);
        let z2 = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(retrieval_accuracy(&z2, &z2.select(Axis(0), &[1, 0])), 0.0);
        // Middle row maps to itself under reversal of an odd-length batch.
        assert!((retrieval_accuracy(&z, &rev) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn retrieval_chance_level() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let mut acc = 0.0;
        for _ in 0..1000 {
            let a = random_unit_rows(&mut r, 100, 8);
            let b = random_unit_rows(&mut r, 100, 8);
            acc += retrieval_accuracy(&a, &b);
        }
        let mean = acc / 1000.0;
        assert!((mean - 0.01).abs() <= 0.005, "mean {mean}");
    }

    fn tiny_model() -> (ContrastiveModel, Vec<ContrastiveSample>) {
        let mut s = WorldSpec::with_parcels(14, 5);
        s.latent_dim = 32;
        s.embed_dim = 8;
        s.n_classes = 6;
        s.clip_length = 3;
        let w = generate_world(&s).unwrap();
        let cfg = EncoderConfig { input_dim: 14, model_dim: 8, n_layers: 1, n_heads: 2, clip_length: 3, max_tr: 6, learned_tr_embedding: true, seed: 5 };
        let model = ContrastiveModel::new(cfg, TextEncoder::from_world(&w), 2, 0.5).unwrap();
        let img = ImageEncoder::from_world(&w, 9).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let samples = (0..3)
            .map(|c| ContrastiveSample {
                clip: Array2::from_shape_simple_fn((3, 14), || r.random_range(-1.0..1.0)),
                image_latent: img.encode_image(&w.class_image(c)).unwrap().0,
                text_tokens: w.class_labels[c].clone(),
                subject_id: 0,
            })
            .collect();
        (model, samples)
    }

    #[test]
    fn metanet_zero_init_gives_zero_prompts_and_fixed_shape() {
        let (model, _) = tiny_model();
        let p = model.metanet.metanet_forward(&model.store, &Array1::zeros(8), &Array1::zeros(8)).unwrap();
        assert_eq!(p.dim(), (2, 8));
        assert!(p.iter().all(|v| *v == 0.0));
        assert!(model.metanet.metanet_forward(&model.store, &Array1::zeros(8), &Array1::zeros(7)).is_err());
    }

    #[test]
    fn all_trainable_parameters_pass_gradient_check() {
        let (mut model, samples) = tiny_model();
        // Move the zero-initialized final meta-net layer off zero so every
        // path carries gradient.
        let mut r = ChaCha8Rng::seed_from_u64(12);
        for id in [model.metanet.w2, model.metanet.b2] {
            model.store.get_mut(id).value.mapv_inplace(|_| r.random_range(-0.3..0.3));
        }
        let cfg = ContrastiveConfig::default();
        let batch: Vec<&ContrastiveSample> = samples.iter().collect();
        let mut tape = Tape::new();
        let (loss, _, _) = model.loss_graph(&mut tape, &model.store, &batch, &cfg).unwrap();
        let grads = tape.backward(loss).param_grads();
        let meta = grads.iter().find(|(id, _)| *id == model.metanet.w1).map(|(_, g)| g.mapv(f64::abs).sum()).unwrap();
        assert!(meta > 1e-10, "meta-net receives no gradient");
        assert!(grads.iter().all(|(id, _)| !model.store.get(*id).frozen));
        let m = &model;
        let mut store = model.store.clone();
        let (err, at) = max_fd_error(&mut store, &grads, 6, 1e-5, &mut |s| {
            let mut t = Tape::new();
            let (l, _, _) = m.loss_graph(&mut t, s, &batch, &cfg).unwrap();
            t.scalar(l)
        });
        assert!(err < 1e-4, "worst {err} at {at}");
    }

    #[test]
    fn frozen_text_projection_is_untouched_by_training() {
        let (mut model, samples) = tiny_model();
        let before = model.store.value(model.text_proj).clone();
        let cfg = ContrastiveConfig { steps: 5, batch_size: 3, lr: 1e-2, log_every: 1, ..Default::default() };
        train_contrastive(&mut model, &samples, &cfg).unwrap();
        assert_eq!(model.store.value(model.text_proj), &before);
        assert!(model.store.get(model.text_proj).frozen);
    }

    #[test]
    fn universal_mode_multiplies_steps() {
        let (mut model, mut samples) = tiny_model();
        for (i, s) in samples.iter_mut().enumerate() {
            s.subject_id = i % 2;
        }
        let cfg = ContrastiveConfig { steps: 3, batch_size: 2, universal: true, log_every: 0, ..Default::default() };
        assert_eq!(train_contrastive(&mut model, &samples, &cfg).unwrap().len(), 6);
    }
}
