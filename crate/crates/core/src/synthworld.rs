//! Synthetic generative world with known ground truth.
//!
//! Class concepts live in a `latent_dim` semantic space. Each concept is a
//! shared "domain" direction plus a class-specific direction, so classes are
//! related but separable. Brain responses are a fixed linear mixing of the
//! concept latent that is nonzero only on the informative parcels; images
//! are rendered from a projection of the same latent onto smooth colour
//! gratings; label text is a bag of words whose latents sum to the concept.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::preproc::band_bounds;
use crate::rng;

pub const IMAGE_HEIGHT: usize = 32;
pub const IMAGE_WIDTH: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_PIXELS: usize = IMAGE_HEIGHT * IMAGE_WIDTH * IMAGE_CHANNELS;

/// `[H × W × C]` image with values in `[0, 1]`.
pub type Image = Array3<f64>;

const NOUNS: &[&str] = &[
    "dog", "cat", "horse", "bird", "fish", "car", "truck", "bicycle", "boat", "plane", "tree", "flower", "mountain",
    "beach", "river", "house", "bridge", "tower", "chair", "table", "lamp", "clock", "phone", "laptop", "book", "cup",
    "bottle", "pizza", "cake", "apple", "banana", "guitar", "piano", "ball", "kite", "train", "bus", "elephant",
    "zebra", "giraffe", "bear", "sheep", "cow", "umbrella", "bench", "sofa", "bed", "window", "door", "road",
];

const SPARE_WORDS: &[&str] = &[
    "internet", "movie", "museum", "concert", "library", "kitchen", "garden", "market", "festival", "office",
    "barbecue", "resting", "swimming", "hiking", "dancing", "cooking", "reading", "sleeping", "wedding", "airport",
    "hospital", "classroom", "stadium", "forest", "desert", "snow", "rain", "sunset", "night", "morning", "party",
    "game", "travel", "shopping", "painting", "singing", "camping", "fishing", "skiing", "running", "meeting",
    "lecture", "theater", "zoo", "farm", "harbor", "castle", "temple", "subway", "bakery", "circus", "garage",
    "attic", "cellar", "balcony", "rooftop", "playground", "parade", "picnic", "storm", "island", "valley",
    "canyon", "glacier",
];

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_parcels: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Width of the shared image/text embedding space; must equal the
    /// encoder's `model_dim`.
    pub embed_dim: usize,
    /// Strictly increasing parcel indices that carry stimulus signal.
    pub informative_set: Vec<usize>,
    pub noise_sigma: f64,
    /// Per-trial pixel noise added to rendered images.
    pub image_jitter: f64,
    /// Squared weight of the shared domain direction in each class latent.
    pub domain_share: f64,
    pub n_tr: usize,
    pub tr_seconds: f64,
    pub delay: usize,
    pub clip_length: usize,
    /// Number of presentations averaged into each test trial.
    pub test_repeats: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self::with_parcels(1024, 42)
    }
}

impl WorldSpec {
    /// Default world with `n_parcels` parcels; the informative set is two
    /// thirds of the first of seven contiguous parcel bands.
    pub fn with_parcels(n_parcels: usize, seed: u64) -> Self {
        Self {
            n_parcels,
            n_classes: 50,
            latent_dim: 768,
            embed_dim: 64,
            informative_set: Self::default_informative(n_parcels),
            noise_sigma: 0.1,
            image_jitter: 0.02,
            domain_share: 0.3,
            n_tr: 12,
            tr_seconds: 2.0,
            delay: 1,
            clip_length: 5,
            test_repeats: 4,
            seed,
        }
    }

    pub fn default_informative(n_parcels: usize) -> Vec<usize> {
        let (lo, hi) = band_bounds(n_parcels, 7)[0];
        (lo..hi).filter(|i| i % 3 != 2).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.informative_set.is_empty() {
            return bad("informative_set must be nonempty".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if !self.informative_set.windows(2).all(|w| w[0] < w[1]) {
            return bad("informative_set must be strictly increasing".into());
        }
        if self.informative_set.last().is_some_and(|&i| i >= self.n_parcels) {
            return bad("informative_set index out of range".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.image_jitter >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.domain_share) {
            return bad("domain_share must lie in [0, 1)".into());
        }
        if self.n_tr < self.delay + self.clip_length + 2 {
            return bad(format!("n_tr {} too short for delay {} + clip {}", self.n_tr, self.delay, self.clip_length));
        }
        if self.embed_dim == 0 || self.embed_dim > self.latent_dim || self.test_repeats == 0 {
            return bad("embed_dim must lie in [1, latent_dim] and test_repeats >= 1".into());
        }
        Ok(())
    }
}

/// Word table shared by labels and scenario descriptions.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub words: Vec<String>,
    /// `[n_words × latent_dim]` semantic contribution of each word.
    pub latents: Array2<f64>,
}

impl Vocabulary {
    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Whitespace tokenization against the vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::InvalidArgument(format!("unknown token `{w}`"))))
            .collect()
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.words[t].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// A generated world: class latents, mixing matrix and render function.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub domain: Array1<f64>,
    /// `[n_classes × latent_dim]`, unit rows.
    pub class_latents: Array2<f64>,
    /// `[n_parcels × latent_dim]`, zero outside the informative set.
    pub mixing: Array2<f64>,
    /// `[embed_dim × latent_dim]` projection into the image/text space.
    pub semantic_proj: Array2<f64>,
    /// `[embed_dim × IMAGE_PIXELS]` orthonormal smooth patterns.
    pub render_basis: Array2<f64>,
    pub render_gain: f64,
    pub vocab: Vocabulary,
    pub class_labels: Vec<Vec<usize>>,
    /// Vocabulary ids of words not used by any class label.
    pub spare_words: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    pub trial_id: String,
    pub class_id: usize,
    pub image: Image,
    pub label_text: Vec<usize>,
    /// `[n_tr × n_parcels]`.
    pub parcel_series: Array2<f64>,
    pub onset_tr: usize,
    pub subject_id: usize,
    pub split: Split,
    /// Presentations averaged into this series (1 for training trials).
    pub repeats: usize,
}

#[derive(Debug, Clone)]
pub struct TrialSet {
    pub train: Vec<SyntheticTrial>,
    pub test: Vec<SyntheticTrial>,
}

impl TrialSet {
    pub fn all(&self) -> impl Iterator<Item = &SyntheticTrial> {
        self.train.iter().chain(self.test.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceBand {
    Near,
    Far,
}

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub scenario_id: String,
    pub description_tokens: Vec<usize>,
    pub target_latent: Array1<f64>,
    pub n_repeats: usize,
    pub distance_band: DistanceBand,
}

/// A scenario together with its repeated recordings.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// One `[n_tr × n_parcels]` series per repeat.
    pub repeats: Vec<Array2<f64>>,
    pub onset_tr: usize,
}

fn unit_gaussian(dim: usize, rng: &mut rng::Rng) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

fn remove_component(v: &Array1<f64>, dir: &Array1<f64>) -> Array1<f64> {
    v - &(dir * v.dot(dir))
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Builds a world as a pure function of `spec` (including its seed).
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "world");
    let d = spec.latent_dim;
    let a = spec.domain_share.sqrt();
    let b = (1.0 - spec.domain_share).sqrt();
    let domain = unit_gaussian(d, &mut r);

    // Class-specific directions, orthogonal to the domain direction, drawn
    // until every pair of class latents has cosine below 0.5.
    let max_specific_cos = (0.5 - spec.domain_share) / (1.0 - spec.domain_share);
    let mut specific: Vec<Array1<f64>> = Vec::with_capacity(spec.n_classes);
    let mut attempts = 0;
    while specific.len() < spec.n_classes {
        attempts += 1;
        if attempts > 200 * spec.n_classes {
            return Err(Error::InvalidArgument(format!(
                "latent_dim {d} too small to place {} separable classes",
                spec.n_classes
            )));
        }
        let v = remove_component(&unit_gaussian(d, &mut r), &domain);
        let v = &v / v.dot(&v).sqrt();
        if specific.iter().all(|u| u.dot(&v) < max_specific_cos - 1e-9) {
            specific.push(v);
        }
    }
    let mut class_latents = Array2::zeros((spec.n_classes, d));
    for (c, v) in specific.iter().enumerate() {
        let latent = &domain * a + v * b;
        let n = latent.dot(&latent).sqrt();
        class_latents.row_mut(c).assign(&(latent / n));
    }

    let mut mixing = Array2::zeros((spec.n_parcels, d));
    for &p in &spec.informative_set {
        for v in mixing.row_mut(p).iter_mut() {
            *v = StandardNormal.sample(&mut r);
        }
    }

    let proj_scale = 1.0 / (spec.embed_dim as f64).sqrt();
    let semantic_proj =
        Array2::from_shape_simple_fn((spec.embed_dim, d), || proj_scale * { let z: f64 = StandardNormal.sample(&mut r); z });

    let render_basis = smooth_basis(spec.embed_dim, &mut r)?;
    let render_gain = 0.12 * (IMAGE_PIXELS as f64).sqrt();

    // Vocabulary: the domain word, one noun per class, then spare words
    // with graded semantic strength and no domain component.
    let mut words = vec!["photo".to_string()];
    let mut latents = vec![&domain * a];
    let mut class_labels = Vec::with_capacity(spec.n_classes);
    for (c, v) in specific.iter().enumerate() {
        let noun = match NOUNS.get(c) {
            Some(n) => (*n).to_string(),
            None => format!("object{c}"),
        };
        words.push(noun);
        latents.push(v * b);
        class_labels.push(vec![0, words.len() - 1]);
    }
    let mut spare_words = Vec::new();
    for (k, w) in SPARE_WORDS.iter().enumerate() {
        let v = remove_component(&unit_gaussian(d, &mut r), &domain);
        let v = &v / v.dot(&v).sqrt();
        let strength = 0.2 + 0.6 * (k as f64 / (SPARE_WORDS.len() - 1) as f64);
        words.push((*w).to_string());
        latents.push(v * strength);
        spare_words.push(words.len() - 1);
    }
    let mut lat = Array2::zeros((latents.len(), d));
    for (i, l) in latents.iter().enumerate() {
        lat.row_mut(i).assign(l);
    }

    Ok(World {
        spec: spec.clone(),
        domain,
        class_latents,
        mixing,
        semantic_proj,
        render_basis,
        render_gain,
        vocab: Vocabulary { words, latents: lat },
        class_labels,
        spare_words,
    })
}

/// Orthonormal rows of low-frequency colour gratings over the image grid.
fn smooth_basis(n: usize, r: &mut rng::Rng) -> Result<Array2<f64>> {
    let mut basis = Array2::<f64>::zeros((n, IMAGE_PIXELS));
    let max_freq = ((n as f64).sqrt().ceil() as usize).max(3);
    for k in 0..n {
        let mut row = Array1::<f64>::zeros(IMAGE_PIXELS);
        let fx = r.random_range(0..=max_freq) as f64;
        let fy = r.random_range(0..=max_freq) as f64;
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let color: [f64; 3] = [StandardNormal.sample(r), StandardNormal.sample(r), StandardNormal.sample(r)];
        for y in 0..IMAGE_HEIGHT {
            for x in 0..IMAGE_WIDTH {
                let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / IMAGE_WIDTH as f64 + phase;
                let g = arg.cos();
                for (c, col) in color.iter().enumerate() {
                    row[(y * IMAGE_WIDTH + x) * IMAGE_CHANNELS + c] = g * col;
                }
            }
        }
        for j in 0..k {
            let prev = basis.row(j).to_owned();
            row = &row - &(&prev * row.dot(&prev));
        }
        let norm = row.dot(&row).sqrt();
        if norm < 1e-6 {
            return Err(Error::Numerical("render basis is rank deficient".into()));
        }
        basis.row_mut(k).assign(&(row / norm));
    }
    Ok(basis)
}

impl World {
    /// Semantic latent of a token sequence: the sum of its word latents.
    pub fn text_latent(&self, tokens: &[usize]) -> Array1<f64> {
        let mut v = Array1::zeros(self.spec.latent_dim);
        for &t in tokens {
            v += &self.vocab.latents.row(t);
        }
        v
    }

    /// Image/text-space coefficients of a semantic latent.
    pub fn embed(&self, latent: &Array1<f64>) -> Array1<f64> {
        self.semantic_proj.dot(latent)
    }

    /// Noise-free rendering of a semantic latent.
    pub fn render(&self, latent: &Array1<f64>) -> Image {
        self.render_coefficients(&self.embed(latent))
    }

    pub fn render_coefficients(&self, coef: &Array1<f64>) -> Image {
        let flat = self.render_basis.t().dot(coef) * self.render_gain + 0.5;
        let flat = flat.mapv(|v| v.clamp(0.0, 1.0));
        Array3::from_shape_vec((IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS), flat.to_vec()).expect("image shape")
    }

    pub fn class_image(&self, class_id: usize) -> Image {
        self.render(&self.class_latents.row(class_id).to_owned())
    }

    /// Parcel response to a latent: `mixing · latent`.
    pub fn response(&self, latent: &Array1<f64>) -> Array1<f64> {
        self.mixing.dot(latent)
    }

    /// Series with `signal` held over `clip_length` TRs from
    /// `onset + delay`, plus Gaussian noise everywhere.
    fn series(&self, signal: &Array1<f64>, onset: usize, r: &mut rng::Rng) -> Array2<f64> {
        let spec = &self.spec;
        let mut x = Array2::zeros((spec.n_tr, spec.n_parcels));
        let start = onset + spec.delay;
        for t in start..start + spec.clip_length {
            x.row_mut(t).assign(signal);
        }
        if spec.noise_sigma > 0.0 {
            x.mapv_inplace(|v| v + spec.noise_sigma * { let z: f64 = StandardNormal.sample(r); z });
        }
        x
    }

    fn onset_range(&self) -> (usize, usize) {
        let hi = self.spec.n_tr - self.spec.delay - self.spec.clip_length;
        (1.min(hi), hi)
    }

    fn trial(&self, idx: usize, class_id: usize, subject_id: usize, split: Split) -> SyntheticTrial {
        let mut r = rng::indexed(self.spec.seed, "trial", idx as u64);
        let (lo, hi) = self.onset_range();
        let onset = r.random_range(lo..=hi);
        let latent = self.class_latents.row(class_id).to_owned();
        let signal = self.response(&latent);
        let repeats = match split {
            Split::Train => 1,
            Split::Test => self.spec.test_repeats,
        };
        let mut series = Array2::zeros((self.spec.n_tr, self.spec.n_parcels));
        for _ in 0..repeats {
            series += &self.series(&signal, onset, &mut r);
        }
        series /= repeats as f64;
        let mut image = self.render(&latent);
        if self.spec.image_jitter > 0.0 {
            image.mapv_inplace(|v| (v + self.spec.image_jitter * { let z: f64 = StandardNormal.sample(&mut r); z }).clamp(0.0, 1.0));
        }
        let prefix = match split {
            Split::Train => "tr",
            Split::Test => "te",
        };
        SyntheticTrial {
            trial_id: format!("{prefix}{idx:05}"),
            class_id,
            image,
            label_text: self.class_labels[class_id].clone(),
            parcel_series: series,
            onset_tr: onset,
            subject_id,
            split,
            repeats,
        }
    }
}

/// Generates training and test trials. Training classes cycle through all
/// classes; test classes are drawn from the classes present in training.
pub fn generate_trials(world: &World, n_train: usize, n_test: usize, n_subjects: usize) -> Result<TrialSet> {
    if n_train == 0 || n_test == 0 || n_subjects == 0 {
        return Err(Error::InvalidArgument("n_train, n_test and n_subjects must be >= 1".into()));
    }
    let n_classes = world.spec.n_classes;
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut rng::stream(world.spec.seed, "class-order"));
    let train_classes: Vec<usize> = (0..n_train).map(|i| order[i % n_classes]).collect();
    let mut covered = train_classes.clone();
    covered.sort_unstable();
    covered.dedup();
    let mut pick = rng::stream(world.spec.seed, "test-classes");
    let mut pool = covered.clone();
    pool.shuffle(&mut pick);
    let test_classes: Vec<usize> = (0..n_test).map(|i| pool[i % pool.len()]).collect();

    let train = train_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| world.trial(i, c, i % n_subjects, Split::Train))
        .collect();
    let test = test_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| world.trial(n_train + i, c, i % n_subjects, Split::Test))
        .collect();
    Ok(TrialSet { train, test })
}

/// Generates imagination scenarios: the first half are near some class
/// (the class label plus one modifier word), the rest are described by
/// spare words with no class content.
pub fn generate_scenarios(world: &World, n_scenarios: usize, n_repeats: usize) -> Result<Vec<Scenario>> {
    if n_scenarios < 2 || n_repeats == 0 {
        return Err(Error::InvalidArgument("need n_scenarios >= 2 and n_repeats >= 1".into()));
    }
    let n_near = n_scenarios.div_ceil(2);
    let n_far = n_scenarios - n_near;
    if n_near > world.spec.n_classes || n_near + 2 * n_far > world.spare_words.len() {
        return Err(Error::InvalidArgument("not enough classes or spare words for the scenario set".into()));
    }
    let mut r = rng::stream(world.spec.seed, "scenarios");
    let mut classes: Vec<usize> = (0..world.spec.n_classes).collect();
    classes.shuffle(&mut r);
    let mut spare = world.spare_words.clone();
    spare.shuffle(&mut r);
    let mut spare = spare.into_iter();

    let mut specs = Vec::with_capacity(n_scenarios);
    for (s, &class_id) in classes.iter().take(n_near).enumerate() {
        // Weakest spare words keep the description within the near band.
        let modifier = spare.next().expect("counted above");
        let mut tokens = world.class_labels[class_id].clone();
        tokens.push(modifier);
        let target = world.text_latent(&tokens);
        let class = world.class_latents.row(class_id).to_owned();
        if 1.0 - cosine(&target, &class) >= 0.3 {
            // Replace an over-strong modifier by dropping it.
            tokens.pop();
        }
        specs.push((s, tokens, DistanceBand::Near));
    }
    // Far scenarios are spread over the range of mean class distances that
    // valid word pairs reach, rather than clustering near orthogonality.
    let far_words: Vec<usize> = spare.collect();
    let mut candidates = Vec::new();
    for (i, &a) in far_words.iter().enumerate() {
        for &b in &far_words[i + 1..] {
            let target = world.text_latent(&[a, b]);
            let dists: Vec<f64> =
                world.class_latents.rows().into_iter().map(|c| 1.0 - cosine(&target, &c.to_owned())).collect();
            if dists.iter().all(|&d| d >= 0.8) {
                candidates.push((dists.iter().sum::<f64>() / dists.len() as f64, a, b));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut used = std::collections::HashSet::new();
    for s in 0..n_far {
        let goal = if n_far == 1 { 0 } else { s * (candidates.len().saturating_sub(1)) / (n_far - 1) };
        let free = |&(_, a, b): &(f64, usize, usize)| !used.contains(&a) && !used.contains(&b);
        let pick = (0..candidates.len())
            .filter(|&k| free(&candidates[k]))
            .min_by_key(|&k| k.abs_diff(goal))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("latent_dim {} too small to place far scenarios", world.spec.latent_dim))
            })?;
        let (_, a, b) = candidates[pick];
        used.insert(a);
        used.insert(b);
        specs.push((n_near + s, vec![a, b], DistanceBand::Far));
    }

    let (lo, hi) = world.onset_range();
    Ok(specs
        .into_iter()
        .map(|(s, tokens, band)| {
            let target = world.text_latent(&tokens);
            let target = &target / target.dot(&target).sqrt();
            let mut rr = rng::indexed(world.spec.seed, "scenario-series", s as u64);
            let onset = rr.random_range(lo..=hi);
            let signal = world.response(&target);
            let repeats = (0..n_repeats).map(|_| world.series(&signal, onset, &mut rr)).collect();
            Scenario {
                spec: ScenarioSpec {
                    scenario_id: format!("sc{s:03}"),
                    description_tokens: tokens,
                    target_latent: target,
                    n_repeats,
                    distance_band: band,
                },
                repeats,
                onset_tr: onset,
            }
        })
        .collect())
}

impl Scenario {
    /// Element-wise mean of the repeated recordings.
    pub fn averaged(&self) -> Array2<f64> {
        let mut acc = Array2::zeros(self.repeats[0].dim());
        for r in &self.repeats {
            acc += r;
        }
        acc / self.repeats.len() as f64
    }
}

pub fn image_to_matrix(img: &Image) -> Array2<f64> {
    Array2::from_shape_vec((1, img.len()), img.iter().cloned().collect()).expect("flat image")
}

pub fn matrix_to_image(m: &Array2<f64>) -> Result<Image> {
    if m.len() != IMAGE_PIXELS {
        return Err(Error::dims("image", IMAGE_PIXELS, m.len()));
    }
    Ok(Array3::from_shape_vec((IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS), m.iter().cloned().collect())
        .expect("image shape"))
}

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialEntry {
    pub trial_id: String,
    pub class_id: usize,
    pub subject_id: usize,
    pub onset_tr: usize,
    pub split: Split,
    pub repeats: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub scenario_id: String,
    pub description: String,
    pub distance_band: DistanceBand,
    pub n_repeats: usize,
    pub onset_tr: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub world: WorldSpec,
    pub n_tr: usize,
    pub n_parcels: usize,
    pub image_shape: [usize; 3],
    pub tr_seconds: f64,
    pub trials: Vec<TrialEntry>,
    pub scenarios: Vec<ScenarioEntry>,
}

/// Writes a dataset directory:
/// `manifest.json`, `labels.tsv`, `series/<id>.f32`, `images/<id>.f32`,
/// `scenarios/<id>_r<k>.f32` and `world.ckpt`.
pub fn write_dataset(dir: &Path, world: &World, trials: &TrialSet, scenarios: &[Scenario]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir.join("series"))?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("scenarios"))?;
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for t in trials.all() {
        io::write_f32(&dir.join("series").join(format!("{}.f32", t.trial_id)), &t.parcel_series)?;
        io::write_f32(&dir.join("images").join(format!("{}.f32", t.trial_id)), &image_to_matrix(&t.image))?;
        entries.push(TrialEntry {
            trial_id: t.trial_id.clone(),
            class_id: t.class_id,
            subject_id: t.subject_id,
            onset_tr: t.onset_tr,
            split: t.split,
            repeats: t.repeats,
        });
        labels.push(vec![t.trial_id.clone(), t.class_id.to_string(), world.vocab.render(&t.label_text)]);
    }
    io::write_tsv(&dir.join("labels.tsv"), &["trial_id", "class_id", "label_text"], &labels)?;
    let mut sc_entries = Vec::new();
    for s in scenarios {
        for (k, rep) in s.repeats.iter().enumerate() {
            io::write_f32(&dir.join("scenarios").join(format!("{}_r{k}.f32", s.spec.scenario_id)), rep)?;
        }
        sc_entries.push(ScenarioEntry {
            scenario_id: s.spec.scenario_id.clone(),
            description: world.vocab.render(&s.spec.description_tokens),
            distance_band: s.spec.distance_band,
            n_repeats: s.spec.n_repeats,
            onset_tr: s.onset_tr,
        });
    }
    let manifest = DatasetManifest {
        world: world.spec.clone(),
        n_tr: world.spec.n_tr,
        n_parcels: world.spec.n_parcels,
        image_shape: [IMAGE_HEIGHT, IMAGE_WIDTH, IMAGE_CHANNELS],
        tr_seconds: world.spec.tr_seconds,
        trials: entries,
        scenarios: sc_entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    world_store(world).save(&dir.join("world.ckpt"))?;
    Ok(manifest)
}

fn world_store(world: &World) -> ParamStore {
    let mut s = ParamStore::new();
    s.add_frozen("domain", world.domain.clone().insert_axis(Axis(0)));
    s.add_frozen("class_latents", world.class_latents.clone());
    s.add_frozen("mixing", world.mixing.clone());
    s.add_frozen("semantic_proj", world.semantic_proj.clone());
    s.add_frozen("render_basis", world.render_basis.clone());
    s.add_frozen("vocab_latents", world.vocab.latents.clone());
    s
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact { stage: "synth".into(), path: path.clone() })?;
    Ok(serde_json::from_str(&text)?)
}

/// Reloads the world persisted by [`write_dataset`].
pub fn read_world(dir: &Path) -> Result<World> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("world.ckpt");
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: "synth".into(), path });
    }
    let store = ParamStore::load(&path)?;
    let get = |name: &str| {
        store
            .find(name)
            .map(|id| store.value(id).clone())
            .ok_or_else(|| Error::Format { path: path.clone(), reason: format!("missing {name}") })
    };
    // Structural parts (vocabulary words, labels) are regenerated from the
    // spec; numeric arrays come from the file.
    let mut world = generate_world(&manifest.world)?;
    world.domain = get("domain")?.row(0).to_owned();
    world.class_latents = get("class_latents")?;
    world.mixing = get("mixing")?;
    world.semantic_proj = get("semantic_proj")?;
    world.render_basis = get("render_basis")?;
    world.vocab.latents = get("vocab_latents")?;
    Ok(world)
}

/// Reads every trial of a dataset directory.
pub fn read_trials(dir: &Path, world: &World) -> Result<TrialSet> {
    let manifest = read_manifest(dir)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.trials {
        let series = io::read_f32(&dir.join("series").join(format!("{}.f32", e.trial_id)), manifest.n_tr, manifest.n_parcels)?;
        let image = matrix_to_image(&io::read_f32(&dir.join("images").join(format!("{}.f32", e.trial_id)), 1, IMAGE_PIXELS)?)?;
        let trial = SyntheticTrial {
            trial_id: e.trial_id.clone(),
            class_id: e.class_id,
            image,
            label_text: world.class_labels[e.class_id].clone(),
            parcel_series: series,
            onset_tr: e.onset_tr,
            subject_id: e.subject_id,
            split: e.split,
            repeats: e.repeats,
        };
        match e.split {
            Split::Train => train.push(trial),
            Split::Test => test.push(trial),
        }
    }
    Ok(TrialSet { train, test })
}

pub fn read_scenarios(dir: &Path, world: &World) -> Result<Vec<Scenario>> {
    let manifest = read_manifest(dir)?;
    manifest
        .scenarios
        .iter()
        .map(|e| {
            let tokens = world.vocab.tokenize(&e.description)?;
            let target = world.text_latent(&tokens);
            let target = &target / target.dot(&target).sqrt();
            let repeats = (0..e.n_repeats)
                .map(|k| {
                    io::read_f32(
                        &dir.join("scenarios").join(format!("{}_r{k}.f32", e.scenario_id)),
                        manifest.n_tr,
                        manifest.n_parcels,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Scenario {
                spec: ScenarioSpec {
                    scenario_id: e.scenario_id.clone(),
                    description_tokens: tokens,
                    target_latent: target,
                    n_repeats: e.n_repeats,
                    distance_band: e.distance_band,
                },
                repeats,
                onset_tr: e.onset_tr,
            })
        })
        .collect()
}

/// Mean absolute value of each parcel over the stimulus window of a trial.
pub fn window_magnitude(world: &World, trial: &SyntheticTrial) -> Array1<f64> {
    let start = trial.onset_tr + world.spec.delay;
    trial
        .parcel_series
        .slice(s![start..start + world.spec.clip_length, ..])
        .mapv(f64::abs)
        .mean_axis(Axis(0))
        .expect("nonempty window")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> WorldSpec {
        let mut s = WorldSpec::with_parcels(70, seed);
        s.latent_dim = 96;
        s.embed_dim = 16;
        s.n_classes = 10;
        s
    }

    #[test]
    fn same_seed_gives_bit_identical_worlds() {
        let a = generate_world(&WorldSpec::default()).unwrap();
        let b = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(a.class_latents, b.class_latents);
        assert_eq!(a.mixing, b.mixing);
        assert_eq!(a.render_basis, b.render_basis);
        let ta = generate_trials(&a, 5, 2, 1).unwrap();
        let tb = generate_trials(&b, 5, 2, 1).unwrap();
        for (x, y) in ta.all().zip(tb.all()) {
            assert_eq!(x.parcel_series, y.parcel_series);
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn default_classes_are_unit_norm_and_pairwise_below_half() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        assert_eq!(w.class_latents.dim(), (50, 768));
        let mut max_cos = f64::MIN;
        let mut pairs = 0;
        for i in 0..50 {
            let a = w.class_latents.row(i);
            assert!((a.dot(&a).sqrt() - 1.0).abs() < 1e-12);
            for j in i + 1..50 {
                max_cos = max_cos.max(a.dot(&w.class_latents.row(j)));
                pairs += 1;
            }
        }
        assert_eq!(pairs, 1225);
        assert!(max_cos < 0.5, "max pairwise cosine {max_cos}");
    }

    #[test]
    fn mixing_rows_outside_informative_set_are_zero() {
        let w = generate_world(&small_spec(3)).unwrap();
        for p in 0..w.spec.n_parcels {
            let nz = w.mixing.row(p).iter().any(|v| *v != 0.0);
            assert_eq!(nz, w.spec.informative_set.binary_search(&p).is_ok());
        }
    }

    #[test]
    fn rejects_empty_informative_set_and_single_class() {
        let mut s = small_spec(1);
        s.informative_set.clear();
        assert!(generate_world(&s).is_err());
        let mut s = small_spec(1);
        s.n_classes = 1;
        assert!(generate_world(&s).is_err());
        let mut s = small_spec(1);
        s.informative_set = vec![3, 2];
        assert!(generate_world(&s).is_err());
    }

    #[test]
    fn zero_noise_same_class_trials_are_identical_and_silent_outside_informative() {
        let mut s = small_spec(5);
        s.noise_sigma = 0.0;
        let w = generate_world(&s).unwrap();
        let trials = generate_trials(&w, 30, 1, 1).unwrap();
        let a = trials.train.iter().find(|t| t.class_id == trials.train[0].class_id && t.trial_id != trials.train[0].trial_id).unwrap();
        let b = &trials.train[0];
        // Same class and zero noise: identical response rows in the window.
        let wa = a.onset_tr + s.delay;
        let wb = b.onset_tr + s.delay;
        for k in 0..s.clip_length {
            assert_eq!(a.parcel_series.row(wa + k), b.parcel_series.row(wb + k));
        }
        for t in trials.all() {
            let start = t.onset_tr + s.delay;
            for p in (0..s.n_parcels).filter(|p| s.informative_set.binary_search(p).is_err()) {
                for k in 0..s.clip_length {
                    assert_eq!(t.parcel_series[[start + k, p]], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_noise_trials_with_equal_onsets_are_identical() {
        let mut s = small_spec(5);
        s.noise_sigma = 0.0;
        s.image_jitter = 0.0;
        let w = generate_world(&s).unwrap();
        let trials = generate_trials(&w, 60, 1, 1).unwrap();
        let mut found = false;
        for (i, a) in trials.train.iter().enumerate() {
            for b in &trials.train[i + 1..] {
                if a.class_id == b.class_id && a.onset_tr == b.onset_tr {
                    assert_eq!(a.parcel_series, b.parcel_series);
                    found = true;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn trial_counts_and_ids() {
        let w = generate_world(&small_spec(7)).unwrap();
        let t = generate_trials(&w, 200, 20, 2).unwrap();
        assert_eq!(t.train.len() + t.test.len(), 220);
        let mut ids: Vec<&str> = t.all().map(|x| x.trial_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 220);
        let train_classes: std::collections::BTreeSet<usize> = t.train.iter().map(|x| x.class_id).collect();
        assert!(t.test.iter().all(|x| train_classes.contains(&x.class_id)));
        assert!(t.test.iter().all(|x| x.split == Split::Test && x.repeats == w.spec.test_repeats));
        for x in t.all() {
            assert!(x.parcel_series.nrows() >= x.onset_tr + s_delay(&w) + w.spec.clip_length);
        }
    }

    fn s_delay(w: &World) -> usize {
        w.spec.delay
    }

    #[test]
    fn informative_window_signal_exceeds_noise_by_five_sigma() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let trials = generate_trials(&w, 100, 1, 1).unwrap();
        let mut mean = Array1::<f64>::zeros(w.spec.n_parcels);
        for t in &trials.train {
            mean += &window_magnitude(&w, t);
        }
        mean /= trials.train.len() as f64;
        let informative: f64 =
            w.spec.informative_set.iter().map(|&p| mean[p]).sum::<f64>() / w.spec.informative_set.len() as f64;
        let others: Vec<f64> = (0..w.spec.n_parcels)
            .filter(|p| w.spec.informative_set.binary_search(p).is_err())
            .map(|p| mean[p])
            .collect();
        let other = others.iter().sum::<f64>() / others.len() as f64;
        assert!(informative - other >= 5.0 * w.spec.noise_sigma, "informative {informative} other {other}");
    }

    #[test]
    fn scenarios_respect_distance_bands() {
        let w = generate_world(&WorldSpec::default()).unwrap();
        let sc = generate_scenarios(&w, 12, 5).unwrap();
        assert_eq!(sc.len(), 12);
        for s in &sc {
            assert_eq!(s.repeats.len(), 5);
            let nearest = w
                .class_latents
                .rows()
                .into_iter()
                .map(|c| 1.0 - cosine(&s.spec.target_latent, &c.to_owned()))
                .fold(f64::INFINITY, f64::min);
            match s.spec.distance_band {
                DistanceBand::Near => assert!(nearest < 0.3, "near scenario at {nearest}"),
                DistanceBand::Far => assert!(nearest >= 0.8, "far scenario at {nearest}"),
            }
        }
        assert!(sc.iter().any(|s| s.spec.distance_band == DistanceBand::Near));
        assert!(sc.iter().any(|s| s.spec.distance_band == DistanceBand::Far));
    }

    #[test]
    fn near_scenarios_are_closer_to_training_latents_than_far() {
        let mut spec = WorldSpec::default();
        spec.noise_sigma = 0.0;
        let w = generate_world(&spec).unwrap();
        let sc = generate_scenarios(&w, 6, 5).unwrap();
        let mean_dist = |s: &Scenario| {
            w.class_latents.rows().into_iter().map(|c| 1.0 - cosine(&s.spec.target_latent, &c.to_owned())).sum::<f64>()
                / w.spec.n_classes as f64
        };
        let near: Vec<f64> = sc.iter().filter(|s| s.spec.distance_band == DistanceBand::Near).map(mean_dist).collect();
        let far: Vec<f64> = sc.iter().filter(|s| s.spec.distance_band == DistanceBand::Far).map(mean_dist).collect();
        let max_near = near.iter().cloned().fold(f64::MIN, f64::max);
        let min_far = far.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_near < min_far);
    }

    #[test]
    fn averaging_five_repeats_divides_noise_variance_by_five() {
        let mut spec = small_spec(11);
        spec.noise_sigma = 0.5;
        let w = generate_world(&spec).unwrap();
        // Pre-stimulus TR 0 of a non-informative parcel is pure noise.
        let parcel = (0..spec.n_parcels).find(|p| spec.informative_set.binary_search(p).is_err()).unwrap();
        let draws: Vec<f64> = (0..1000)
            .map(|i| {
                let mut r = rng::indexed(99, "var", i);
                let series: Vec<Array2<f64>> =
                    (0..5).map(|_| w.series(&Array1::zeros(spec.n_parcels), 2, &mut r)).collect();
                series.iter().map(|x| x[[0, parcel]]).sum::<f64>() / 5.0
            })
            .collect();
        let m = draws.iter().sum::<f64>() / 1000.0;
        let var = draws.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 999.0;
        let expected = 0.25 / 5.0;
        // Sample variance of 1000 Gaussian draws has relative sd sqrt(2/999).
        assert!((var - expected).abs() < 4.0 * expected * (2.0f64 / 999.0).sqrt(), "var {var}");
    }

    #[test]
    fn dataset_round_trip() {
        let w = generate_world(&small_spec(13)).unwrap();
        let t = generate_trials(&w, 6, 2, 1).unwrap();
        let sc = generate_scenarios(&w, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &w, &t, &sc).unwrap();
        let w2 = read_world(dir.path()).unwrap();
        assert_eq!(w2.mixing, w.mixing);
        let t2 = read_trials(dir.path(), &w2).unwrap();
        assert_eq!(t2.train.len(), 6);
        assert_eq!(t2.test[1].parcel_series, io::quantize_f32(&t.test[1].parcel_series));
        let labels = io::read_delimited(&dir.path().join("labels.tsv"), '\t').unwrap();
        assert_eq!(labels.len(), 8);
        let sc2 = read_scenarios(dir.path(), &w2).unwrap();
        assert_eq!(sc2[0].spec.description_tokens, sc[0].spec.description_tokens);
    }
}
