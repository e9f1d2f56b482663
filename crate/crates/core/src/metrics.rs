//! Reconstruction and decoding metrics: pixel correlation, SSIM, feature
//! two-way identification, n-way top-1, correlation distance, Fréchet
//! distance, coefficient matrices, permutation testing and mean cosine
//! distance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthworld::{Image, World, IMAGE_CHANNELS};

fn pearson_view(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dims("correlation operands", a.len(), b.len()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("correlation with a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of two equally long vectors.
pub fn pearson(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    pearson_view(a.view(), b.view())
}

/// Pearson correlation over flattened pixels.
pub fn pixcorr(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims("image shape", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let fa = Array1::from_iter(a.iter().cloned());
    let fb = Array1::from_iter(b.iter().cloned());
    pearson(&fa, &fb)
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

/// Luma conversion of an `H × W × 3` image.
pub fn grayscale(img: &Image) -> Array2<f64> {
    let (h, w, c) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == IMAGE_CHANNELS {
            0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
        } else {
            img[[y, x, 0]]
        }
    })
}

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| {
        let (dy, dx) = (i as f64 - r, j as f64 - r);
        (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s = w.sum();
    w /= s;
    w
}

/// Mean SSIM over all valid 7×7 Gaussian-weighted windows of two
/// grayscale images with dynamic range 1.
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims("SSIM image shape", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - SSIM_WINDOW {
        for x in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let g = win[[i, j]];
                    let (va, vb) = (a[[y + i, x + j]], b[[y + i, x + j]]);
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * (va * vb);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims("SSIM image shape", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    ssim_gray(&grayscale(a), &grayscale(b))
}

/// Pearson correlations between every row of `a` and every row of `b`.
pub fn cross_correlation(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::dims("feature width", a.ncols(), b.ncols()));
    }
    let center = |m: &Array2<f64>| -> Result<Array2<f64>> {
        let mut c = m.clone();
        for (i, mut row) in c.rows_mut().into_iter().enumerate() {
            let mean = row.mean().unwrap_or(0.0);
            row -= mean;
            let n = row.dot(&row).sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("feature row {i} is constant")));
            }
            row /= n;
        }
        Ok(c)
    };
    Ok(center(a)?.dot(&center(b)?.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Mean over rows of the fraction of off-diagonal entries strictly below
/// the diagonal entry. Ties count as failures.
pub fn two_way_from_matrix(m: &Array2<f64>) -> Result<f64> {
    let n = m.nrows();
    if n < 2 || m.ncols() != n {
        return Err(Error::InvalidArgument(format!("two-way identification needs a square matrix with n >= 2, got {:?}", m.dim())));
    }
    // Every row has n − 1 comparisons, so the mean of row ratios is the
    // pooled win count over n·(n − 1).
    let mut wins = 0usize;
    for i in 0..n {
        let d = m[[i, i]];
        wins += (0..n).filter(|&j| j != i && m[[i, j]] < d).count();
    }
    Ok(wins as f64 / (n * (n - 1)) as f64)
}

/// Two-way identification on feature correlations between reconstructions
/// and ground truth.
pub fn feature_two_way(recon: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    if recon.dim() != truth.dim() {
        return Err(Error::dims("feature matrices", format!("{:?}", truth.dim()), format!("{:?}", recon.dim())));
    }
    two_way_from_matrix(&cross_correlation(recon, truth)?)
}

/// Maps an image to class probabilities.
pub trait Classifier {
    fn n_classes(&self) -> usize;
    fn probs(&self, image: &Image) -> Array1<f64>;
}

/// Nearest-template classifier over the world's noiseless class images;
/// probabilities are a softmax of negative mean squared distance.
pub struct TemplateClassifier {
    templates: Array2<f64>,
    temperature: f64,
}

impl TemplateClassifier {
    pub fn from_world(world: &World) -> Self {
        let n = world.spec.n_classes;
        let first = world.class_image(0);
        let mut templates = Array2::zeros((n, first.len()));
        for c in 0..n {
            templates.row_mut(c).assign(&Array1::from_iter(world.class_image(c).iter().cloned()));
        }
        Self { templates, temperature: 1e-3 }
    }
}

impl Classifier for TemplateClassifier {
    fn n_classes(&self) -> usize {
        self.templates.nrows()
    }

    fn probs(&self, image: &Image) -> Array1<f64> {
        let x = Array1::from_iter(image.iter().cloned());
        let logits: Array1<f64> = self
            .templates
            .rows()
            .into_iter()
            .map(|t| -(&t - &x).mapv(|v| v * v).mean().unwrap_or(0.0) / self.temperature)
            .collect();
        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = logits.mapv(|v| (v - m).exp());
        let s = e.sum();
        e / s
    }
}

fn argmax_over(row: ArrayView1<f64>, classes: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in classes {
        let v = row[c];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

/// n-way top-1 from class-probability rows of reconstructions and of their
/// ground-truth images.
///
/// Trial `k` uses item `k mod n`. Its truth class is the classifier's top-1
/// on the ground-truth image; `n_way − 1` distractor classes are drawn
/// without replacement from the other classes, and the trial succeeds when
/// the reconstruction's most probable class within that restricted set is
/// the truth class. Ties resolve toward the truth class.
pub fn n_way_top1_probs(recon_probs: &Array2<f64>, truth_probs: &Array2<f64>, n_way: usize, n_trials: usize, r: &mut Rng) -> Result<f64> {
    let (n, n_classes) = recon_probs.dim();
    if truth_probs.dim() != recon_probs.dim() {
        return Err(Error::dims("probability matrices", format!("{:?}", recon_probs.dim()), format!("{:?}", truth_probs.dim())));
    }
    if n_way < 2 || n_classes < n_way {
        return Err(Error::InvalidArgument(format!("{n_way}-way evaluation needs at least {n_way} classes, have {n_classes}")));
    }
    if n == 0 || n_trials == 0 {
        return Err(Error::InvalidArgument("n-way evaluation needs items and trials".into()));
    }
    let truth: Vec<usize> = truth_probs.rows().into_iter().map(|row| argmax_over(row, 0..n_classes).expect("nonempty")).collect();
    let mut hits = 0usize;
    for k in 0..n_trials {
        let i = k % n;
        let t = truth[i];
        let picks = index::sample(r, n_classes - 1, n_way - 1);
        let classes = std::iter::once(t).chain(picks.iter().map(|p| if p >= t { p + 1 } else { p }));
        if argmax_over(recon_probs.row(i), classes) == Some(t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_trials as f64)
}

pub fn n_way_top1(classifier: &dyn Classifier, recon: &[Image], truth: &[Image], n_way: usize, n_trials: usize, r: &mut Rng) -> Result<f64> {
    if recon.len() != truth.len() {
        return Err(Error::dims("image lists", truth.len(), recon.len()));
    }
    let k = classifier.n_classes();
    let stack = |imgs: &[Image]| {
        let mut m = Array2::zeros((imgs.len(), k));
        for (i, img) in imgs.iter().enumerate() {
            m.row_mut(i).assign(&classifier.probs(img));
        }
        m
    };
    n_way_top1_probs(&stack(recon), &stack(truth), n_way, n_trials, r)
}

/// Mean over rows of `1 − corr(a_i, b_i)`.
pub fn correlation_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::dims("feature matrices", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let mut acc = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        acc += 1.0 - pearson_view(ra, rb)?;
    }
    Ok(acc / a.nrows() as f64)
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.mean_axis(Axis(0)).expect("rows");
    let c = x - &mu;
    let cov = c.t().dot(&c) / (n.saturating_sub(1).max(1)) as f64;
    let d = cov.nrows();
    (mu, DMatrix::from_fn(d, d, |i, j| cov[[i, j]]))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    if eig.eigenvalues.iter().any(|&v| v < -1e-8 * scale) {
        return Err(Error::Numerical("covariance is not positive semi-definite".into()));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets, with
/// covariances regularized by `1e-6·I`.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::dims("FID feature sets", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    let (mu_a, mut sa) = mean_and_cov(a);
    let (mu_b, mut sb) = mean_and_cov(b);
    let d = sa.nrows();
    let eye = DMatrix::<f64>::identity(d, d) * 1e-6;
    sa += &eye;
    sb += &eye;
    let ra = psd_sqrt(&sa)?;
    let inner = &ra * &sb * &ra;
    let cross = psd_sqrt(&inner)?.trace();
    let diff = &mu_a - &mu_b;
    let fid = diff.dot(&diff) + sa.trace() + sb.trace() - 2.0 * cross;
    if !fid.is_finite() {
        return Err(Error::Numerical("FID is not finite".into()));
    }
    Ok(fid.max(0.0))
}

/// Pearson correlations between image embeddings (rows) and text
/// embeddings (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix {
    pub values: Array2<f64>,
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
}

pub fn coefficient_matrix(image_embeds: &Array2<f64>, text_embeds: &Array2<f64>, row_ids: Vec<String>, col_ids: Vec<String>) -> Result<CoefficientMatrix> {
    if image_embeds.nrows() < 2 || image_embeds.dim() != text_embeds.dim() {
        return Err(Error::dims("embedding matrices", format!("{:?}", image_embeds.dim()), format!("{:?}", text_embeds.dim())));
    }
    if row_ids.len() != image_embeds.nrows() || col_ids.len() != text_embeds.nrows() {
        return Err(Error::InvalidArgument("row/column id counts do not match the embeddings".into()));
    }
    Ok(CoefficientMatrix { values: cross_correlation(image_embeds, text_embeds)?, row_ids, col_ids })
}

pub fn two_way_identification(m: &CoefficientMatrix) -> Result<f64> {
    two_way_from_matrix(&m.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub null_samples: Vec<f64>,
    pub p_value: f64,
}

/// Permutation test of two-way identification: the null shuffles which
/// image row is paired with which text column.
pub fn permutation_test(m: &CoefficientMatrix, n_perm: usize, r: &mut Rng) -> Result<PermutationResult> {
    let n = m.values.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("permutation test needs n >= 3, got {n}")));
    }
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be positive".into()));
    }
    if n_perm < 100 {
        log::warn!("permutation test with only {n_perm} permutations; p-values will be coarse");
    }
    let observed = two_way_from_matrix(&m.values)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut null_samples = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        order.shuffle(r);
        null_samples.push(two_way_from_matrix(&m.values.select(Axis(0), &order))?);
    }
    let exceed = null_samples.iter().filter(|&&v| v >= observed).count();
    let p_value = (1 + exceed) as f64 / (n_perm + 1) as f64;
    Ok(PermutationResult { observed, null_samples, p_value })
}

/// Average of `1 − cos(u, v)` over all pairs of rows of `u` and `v`.
pub fn mean_cosine_distance(u: &Array2<f64>, v: &Array2<f64>) -> Result<f64> {
    if u.ncols() != v.ncols() || u.nrows() == 0 || v.nrows() == 0 {
        return Err(Error::dims("cosine operands", format!("{:?}", u.dim()), format!("{:?}", v.dim())));
    }
    let unit = |m: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 {
                return Err(Error::InvalidArgument("zero-norm vector in cosine distance".into()));
            }
            row /= n;
        }
        Ok(out)
    };
    let sims = unit(u)?.dot(&unit(v)?.t());
    Ok(1.0 - sims.mean().expect("nonempty"))
}

/// One reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: f64,
    pub chance: Option<f64>,
    pub n_trials: usize,
    pub config_hash: String,
}

/// Named metrics in a fixed (sorted) order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, MetricEntry>,
}

impl MetricReport {
    pub fn insert(&mut self, name: &str, value: f64, chance: Option<f64>, n_trials: usize, config_hash: &str) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("metric {name} is {value}")));
        }
        self.metrics.insert(name.to_string(), MetricEntry { value, chance, n_trials, config_hash: config_hash.to_string() });
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|e| e.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use crate::rng::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn gauss(shape: (usize, usize), r: &mut Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(r);
            z
        })
    }

    fn random_image(r: &mut Rng) -> Image {
        Array3::from_shape_simple_fn((32, 32, 3), || r.random_range(0.0..1.0))
    }

    #[test]
    fn pixcorr_examples() {
        let mut r = rng(1);
        let x = random_image(&mut r);
        assert!((pixcorr(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pixcorr(&x, &x.mapv(|v| 1.0 - v)).unwrap() + 1.0).abs() < 1e-12);
        let a = Array3::from_shape_vec((2, 2, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = Array3::from_shape_vec((2, 2, 1), vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert!((pixcorr(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = Array3::from_elem((2, 2, 1), 0.5);
        assert!(matches!(pixcorr(&c, &c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ssim_examples() {
        let mut r = rng(2);
        let (a, b) = (random_image(&mut r), random_image(&mut r));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let zero = Image::zeros((32, 32, 3));
        let one = Image::ones((32, 32, 3));
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let want = (2.0 * 0.0 * 1.0 + c1) * c2 / ((0.0 + 1.0 + c1) * c2);
        assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-12);
        assert!(ssim_gray(&Array2::zeros((6, 6)), &Array2::zeros((6, 6))).is_err());
    }

    #[test]
    fn hand_matrix_two_way() {
        let m = array![[0.9, 0.1, 0.5], [0.2, 0.8, 0.9], [0.3, 0.4, 0.7]];
        assert!((two_way_from_matrix(&m).unwrap() - 2.5 / 3.0).abs() < 1e-12);
        let cm = CoefficientMatrix { values: m, row_ids: vec![], col_ids: vec![] };
        assert!((two_way_identification(&cm).unwrap() - 0.8333).abs() < 1e-4);
        let max_diag = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(two_way_from_matrix(&max_diag).unwrap(), 1.0);
        let min_diag = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(two_way_from_matrix(&min_diag).unwrap(), 0.0);
        // Ties are failures.
        assert_eq!(two_way_from_matrix(&Array2::from_elem((3, 3), 0.5)).unwrap(), 0.0);
    }

    #[test]
    fn feature_two_way_identity_and_chance() {
        let mut r = rng(3);
        let f = gauss((10, 6), &mut r);
        assert_eq!(feature_two_way(&f, &f).unwrap(), 1.0);
        let mut acc = 0.0;
        for _ in 0..1000 {
            acc += feature_two_way(&gauss((100, 8), &mut r), &gauss((100, 8), &mut r)).unwrap();
        }
        let mean = acc / 1000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn n_way_examples() {
        let mut r = rng(4);
        // Perfect classifier: one-hot on the true class for both.
        let truth = Array2::from_shape_fn((50, 50), |(i, j)| if i == j { 1.0 } else { 0.0 });
        assert_eq!(n_way_top1_probs(&truth, &truth, 50, 1000, &mut r).unwrap(), 1.0);
        for (way, target, tol) in [(50usize, 0.02, 0.005), (2, 0.5, 0.02)] {
            let mut acc = 0.0;
            for _ in 0..20 {
                let rp = gauss((200, 50), &mut r);
                let tp = gauss((200, 50), &mut r);
                acc += n_way_top1_probs(&rp, &tp, way, 1000, &mut r).unwrap();
            }
            let mean = acc / 20.0;
            assert!((mean - target).abs() <= tol, "{way}-way mean {mean}");
        }
        assert!(n_way_top1_probs(&gauss((5, 10), &mut r), &gauss((5, 10), &mut r), 50, 10, &mut r).is_err());
    }

    #[test]
    fn correlation_distance_examples() {
        let a = array![[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]];
        assert!(correlation_distance(&a, &a).unwrap().abs() < 1e-12);
        assert!((correlation_distance(&a, &(-&a)).unwrap() - 2.0).abs() < 1e-12);
        let hand = array![[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]];
        let half = array![[1.0, 3.0, 2.0, 4.0], [1.0, 4.0, 4.0, 1.0]];
        // corr((1,2,3,4),(1,3,2,4)) = 0.8 and ((1,2,3,4),(1,4,4,1)) = 0.
        assert!((correlation_distance(&hand, &half).unwrap() - (0.2 + 1.0) / 2.0).abs() < 1e-12);
        assert!(correlation_distance(&array![[1.0, 1.0]], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn correlation_distance_hand_case_0_5_and_0() {
        let a = array![[1.0, -1.0, 0.0, 0.0], [1.0, -1.0, 1.0, -1.0]];
        let b = array![[1.0, 0.0, -1.0, 0.0], [1.0, 1.0, -1.0, -1.0]];
        let c0 = pearson(&a.row(0).to_owned(), &b.row(0).to_owned()).unwrap();
        assert!((c0 - 0.5).abs() < 1e-12, "{c0}");
        assert!((correlation_distance(&a, &b).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn frechet_examples() {
        let mut r = rng(5);
        let a = gauss((200, 4), &mut r);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let x = gauss((20000, 1), &mut r);
        let y = gauss((20000, 1), &mut r) + 3.0;
        let f = frechet_distance(&x, &y).unwrap();
        assert!((f - 9.0).abs() < 0.15, "{f}");
        let b = gauss((200, 4), &mut r);
        let mut p: Vec<usize> = (0..200).collect();
        p.shuffle(&mut r);
        let f1 = frechet_distance(&a, &b).unwrap();
        let f2 = frechet_distance(&a.select(Axis(0), &p), &b.select(Axis(0), &p)).unwrap();
        assert!((f1 - f2).abs() < 1e-9);
    }

    #[test]
    fn coefficient_matrix_examples() {
        let mut r = rng(6);
        let e = gauss((4, 5), &mut r);
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let m = coefficient_matrix(&e, &e, ids.clone(), ids.clone()).unwrap();
        for i in 0..4 {
            assert!((m.values[[i, i]] - 1.0).abs() < 1e-12);
        }
        // Mean-centered orthonormal rows.
        let o = array![[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]];
        let m = coefficient_matrix(&o, &o, vec!["a".into(), "b".into()], vec!["a".into(), "b".into()]).unwrap();
        assert!(m.values[[0, 1]].abs() < 1e-12);
        let a = array![[1.0, 2.0, 3.0], [3.0, 1.0, 2.0]];
        let b = array![[2.0, 4.0, 6.0], [1.0, 2.0, 4.0]];
        let m = coefficient_matrix(&a, &b, vec!["0".into(), "1".into()], vec!["0".into(), "1".into()]).unwrap();
        assert!((m.values[[0, 0]] - 1.0).abs() < 1e-12);
        // (3,1,2) vs (2,4,6): centered (1,−1,0)·(−2,0,2) = −2, norms √2·√8 = 4.
        assert!((m.values[[1, 0]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn permutation_floor_and_errors() {
        let m = CoefficientMatrix { values: Array2::eye(6), row_ids: vec![], col_ids: vec![] };
        let res = permutation_test(&m, 5000, &mut rng(7)).unwrap();
        assert_eq!(res.observed, 1.0);
        // Only the identity permutation reaches 1.0; with 720 orderings a few
        // null draws can hit it, so p is at least the floor.
        assert!(res.p_value >= 1.0 / 5001.0);
        let big = CoefficientMatrix { values: Array2::eye(30), row_ids: vec![], col_ids: vec![] };
        let res = permutation_test(&big, 5000, &mut rng(8)).unwrap();
        assert!((res.p_value - 1.0 / 5001.0).abs() < 1e-15);
        let small = CoefficientMatrix { values: Array2::eye(2), row_ids: vec![], col_ids: vec![] };
        assert!(permutation_test(&small, 100, &mut rng(9)).is_err());
    }

    #[test]
    fn mean_cosine_examples() {
        let u = array![[1.0, 0.0]];
        assert_eq!(mean_cosine_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(mean_cosine_distance(&u, &array![[0.0, 2.0]]).unwrap(), 1.0);
        assert!((mean_cosine_distance(&u, &array![[0.0, 1.0], [-1.0, 0.0]]).unwrap() - 1.5).abs() < 1e-12);
        assert!(mean_cosine_distance(&u, &array![[0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn two_way_invariant_under_joint_permutation(seed in 0u64..500, n in 2usize..9) {
            let mut r = rng(seed);
            let m = gauss((n, n), &mut r);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut r);
            let pm = m.select(Axis(0), &p).select(Axis(1), &p);
            prop_assert_eq!(two_way_from_matrix(&m).unwrap(), two_way_from_matrix(&pm).unwrap());
        }
    }

    #[test]
    fn report_rejects_non_finite() {
        let mut rep = MetricReport::default();
        assert!(rep.insert("x", f64::NAN, None, 1, "h").is_err());
        rep.insert("x", 0.5, Some(0.5), 10, "h").unwrap();
        assert_eq!(rep.value("x"), Some(0.5));
    }
}
