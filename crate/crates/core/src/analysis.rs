//! Post-hoc analyses: k-means over image latents with elbow diagnostics,
//! input-gradient parcel saliency, network ablations, and the zero-shot
//! imagination evaluation with its distance-versus-accuracy analysis.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{coefficient_matrix, mean_cosine_distance, permutation_test, two_way_identification, CoefficientMatrix, PermutationResult};
use crate::preproc::{apply_network_mask, BoldClip, NetworkMap};
use crate::rng::{self, Rng};
use crate::synthworld::{DistanceBand, Scenario};

pub const ELBOW_RESTARTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// `[k × d]`.
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub ssd: f64,
    /// SSD after every Lloyd iteration.
    pub ssd_trace: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for each row; ties go to the lower index.
fn assign(x: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (c, cen) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(row, cen);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn ssd_of(x: &Array2<f64>, centroids: &Array2<f64>, assignments: &[usize]) -> f64 {
    x.rows().into_iter().zip(assignments).map(|(row, &c)| sq_dist(row, centroids.row(c))).sum()
}

/// Recomputes centroids as cluster means. An empty cluster takes over the
/// point farthest from its current centroid.
fn update(x: &Array2<f64>, k: usize, assignments: &mut [usize]) -> Array2<f64> {
    let d = x.ncols();
    loop {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (row, &c) in x.rows().into_iter().zip(assignments.iter()) {
            sums.row_mut(c).zip_mut_with(&row, |s, v| *s += v);
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
                row /= n as f64;
            }
            return sums;
        };
        for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
            if n > 0 {
                row /= n as f64;
            }
        }
        // Farthest point among clusters that can spare one.
        let mut far = None;
        for (i, row) in x.rows().into_iter().enumerate() {
            let c = assignments[i];
            if counts[c] < 2 {
                continue;
            }
            let dist = sq_dist(row, sums.row(c));
            if far.is_none_or(|(_, best)| dist > best) {
                far = Some((i, dist));
            }
        }
        let (i, _) = far.expect("n >= k guarantees a cluster with two points");
        assignments[i] = empty;
    }
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or `max_iter` is reached.
fn lloyd(x: &Array2<f64>, init: Array2<f64>, max_iter: usize) -> Result<ClusterModel> {
    let k = init.nrows();
    let mut assignments = assign(x, &init);
    let mut centroids = update(x, k, &mut assignments);
    let mut trace = vec![ssd_of(x, &centroids, &assignments)];
    for _ in 0..max_iter {
        let mut next = assign(x, &centroids);
        if next == assignments {
            break;
        }
        let c = update(x, k, &mut next);
        let ssd = ssd_of(x, &c, &next);
        let prev = *trace.last().expect("nonempty");
        if ssd > prev + 1e-9 * prev.abs().max(1.0) {
            return Err(Error::Numerical(format!("k-means ssd increased from {prev} to {ssd}")));
        }
        trace.push(ssd);
        assignments = next;
        centroids = c;
    }
    let ssd = *trace.last().expect("nonempty");
    Ok(ClusterModel { k, centroids, assignments, ssd, ssd_trace: trace })
}

/// k-means++ seeding: the first centre uniformly, then each further centre
/// with probability proportional to its squared distance to the nearest
/// chosen centre.
fn plus_plus(x: &Array2<f64>, k: usize, r: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = x.rows().into_iter().map(|row| sq_dist(row, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
        for (i, row) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, x.row(next)));
        }
    }
    x.select(Axis(0), &chosen)
}

pub fn kmeans_fit(latents: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel> {
    let n = latents.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut r = rng::indexed(seed, "kmeans", k as u64);
    lloyd(latents, plus_plus(latents, k, &mut r), max_iter)
}

/// Best-of-restarts SSD for each `k`. Besides the k-means++ restarts, each
/// `k` is also started from the previous solution plus its worst-fit point,
/// which makes the curve non-increasing.
pub fn elbow_curve(latents: &Array2<f64>, k_range: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    let n = latents.nrows();
    if k_range.iter().any(|&k| k == 0 || k > n) {
        return Err(Error::InvalidArgument(format!("elbow k values must lie in [1, {n}]")));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut previous: Option<ClusterModel> = None;
    let mut out = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut best: Option<ClusterModel> = None;
        for restart in 0..ELBOW_RESTARTS {
            let mut r = rng::indexed(rng::derive(seed, "elbow"), &k.to_string(), restart as u64);
            let m = lloyd(latents, plus_plus(latents, k, &mut r), 300)?;
            if best.as_ref().is_none_or(|b| m.ssd < b.ssd) {
                best = Some(m);
            }
        }
        if let Some(prev) = previous.as_ref().filter(|p| p.k < k) {
            let mut init = prev.centroids.clone();
            while init.nrows() < k {
                let a = assign(latents, &init);
                let (far, _) = latents
                    .rows()
                    .into_iter()
                    .enumerate()
                    .map(|(i, row)| (i, sq_dist(row, init.row(a[i]))))
                    .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
                init.push_row(latents.row(far)).expect("matching width");
            }
            let m = lloyd(latents, init, 300)?;
            if best.as_ref().is_none_or(|b| m.ssd < b.ssd) {
                best = Some(m);
            }
        }
        let best = best.expect("at least one restart");
        out.push((k, best.ssd));
        previous = Some(best);
    }
    Ok(out)
}

/// Frequency of each label among the members of every cluster.
pub fn label_frequencies(model: &ClusterModel, labels: &[String]) -> Result<Vec<BTreeMap<String, usize>>> {
    if labels.len() != model.assignments.len() {
        return Err(Error::dims("cluster labels", model.assignments.len(), labels.len()));
    }
    let mut tables = vec![BTreeMap::new(); model.k];
    for (label, &c) in labels.iter().zip(&model.assignments) {
        *tables[c].entry(label.clone()).or_insert(0) += 1;
    }
    Ok(tables)
}

/// A differentiable scalar target over one clip.
pub trait InputGradient {
    /// `∂target/∂clip`, same shape as `clip`. `index` identifies the clip
    /// within the analysed set, for targets that depend on it.
    fn input_gradient(&self, clip: &Array2<f64>, index: usize) -> Result<Array2<f64>>;
}

/// Linear readout `Σ_t Σ_p w_p · x[t, p]`.
#[derive(Debug, Clone)]
pub struct LinearReadout {
    pub weights: Array1<f64>,
}

impl InputGradient for LinearReadout {
    fn input_gradient(&self, clip: &Array2<f64>, _index: usize) -> Result<Array2<f64>> {
        if clip.ncols() != self.weights.len() {
            return Err(Error::dims("readout width", self.weights.len(), clip.ncols()));
        }
        let mut g = Array2::zeros(clip.dim());
        for mut row in g.rows_mut() {
            row.assign(&self.weights);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub importance: Array1<f64>,
    pub target: String,
    pub subjects_averaged: usize,
}

/// Mean absolute input gradient per parcel over clips and TRs, computed
/// per subject and then averaged across subjects. `clips` pairs each clip
/// with its subject id.
pub fn gradcam_saliency(model: &dyn InputGradient, clips: &[(usize, &Array2<f64>)], target: &str) -> Result<SaliencyMap> {
    let Some((_, first)) = clips.first() else {
        return Err(Error::InvalidArgument("saliency needs at least one clip".into()));
    };
    let p = first.ncols();
    // Running means are exact when every term is equal, so a constant
    // gradient reproduces its magnitude bit for bit.
    let mut per_subject: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (index, &(subject, clip)) in clips.iter().enumerate() {
        if clip.ncols() != p {
            return Err(Error::dims("clip parcels", p, clip.ncols()));
        }
        let g = model.input_gradient(clip, index)?;
        if g.dim() != clip.dim() {
            return Err(Error::dims("input gradient", format!("{:?}", clip.dim()), format!("{:?}", g.dim())));
        }
        let (mean, count) = per_subject.entry(subject).or_insert_with(|| (Array1::zeros(p), 0));
        for row in g.rows() {
            *count += 1;
            let k = *count as f64;
            mean.zip_mut_with(&row, |m, v| *m += (v.abs() - *m) / k);
        }
    }
    let mut importance = Array1::zeros(p);
    for (k, (mean, _)) in per_subject.values().enumerate() {
        let k = (k + 1) as f64;
        importance.zip_mut_with(mean, |m: &mut f64, v| *m += (v - *m) / k);
    }
    if importance.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numerical("non-finite saliency".into()));
    }
    if importance.iter().all(|&v| v == 0.0) {
        log::warn!("saliency target `{target}` has zero gradient everywhere");
    }
    Ok(SaliencyMap { importance, target: target.to_string(), subjects_averaged: per_subject.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRegions {
    /// `(parcel, network label)` in decreasing importance.
    pub regions: Vec<(usize, String)>,
    pub network_counts: BTreeMap<String, usize>,
}

/// Top `k` parcels by importance; equal importance ranks the lower index first.
pub fn top_k_regions(map: &SaliencyMap, k: usize, networks: &NetworkMap) -> Result<TopRegions> {
    let p = map.importance.len();
    if k > p {
        return Err(Error::InvalidArgument(format!("k={k} exceeds {p} parcels")));
    }
    if networks.n_parcels() != p {
        return Err(Error::dims("network map parcels", p, networks.n_parcels()));
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| map.importance[b].total_cmp(&map.importance[a]).then(a.cmp(&b)));
    let regions: Vec<(usize, String)> = order[..k].iter().map(|&i| (i, networks.label_of(i).to_string())).collect();
    let mut network_counts = BTreeMap::new();
    for (_, label) in &regions {
        *network_counts.entry(label.clone()).or_insert(0) += 1;
    }
    Ok(TopRegions { regions, network_counts })
}

/// Evaluates a decoder on clips; the returned map must contain `semantic`.
pub trait SemanticEvaluator {
    fn evaluate(&self, clips: &[BoldClip]) -> Result<BTreeMap<String, f64>>;
}

pub const SEMANTIC: &str = "semantic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    MaskAtEvaluation,
    MaskThroughTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub masked_network: String,
    pub semantic_accuracy: f64,
    pub full_brain_accuracy: f64,
    /// Masked minus full-brain value per metric.
    pub deltas: BTreeMap<String, f64>,
}

impl AblationResult {
    /// `(masked − full) / full`.
    pub fn relative_change(&self) -> f64 {
        if self.full_brain_accuracy == 0.0 {
            return 0.0;
        }
        (self.semantic_accuracy - self.full_brain_accuracy) / self.full_brain_accuracy
    }
}

fn semantic_of(metrics: &BTreeMap<String, f64>) -> Result<f64> {
    let v = *metrics.get(SEMANTIC).ok_or_else(|| Error::InvalidArgument("evaluator did not report semantic accuracy".into()))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Numerical(format!("semantic accuracy {v} outside [0, 1]")));
    }
    Ok(v)
}

/// Builds an ablation result from full-brain and masked metric tables.
pub fn ablation_from(label: &str, full: &BTreeMap<String, f64>, masked: &BTreeMap<String, f64>) -> Result<AblationResult> {
    let deltas = masked.iter().filter_map(|(k, v)| full.get(k).map(|f| (k.clone(), v - f))).collect();
    Ok(AblationResult {
        masked_network: label.to_string(),
        semantic_accuracy: semantic_of(masked)?,
        full_brain_accuracy: semantic_of(full)?,
        deltas,
    })
}

/// Evaluates `full` on the intact clips and `masked_model` on the clips
/// with `label` zeroed. In mask-at-evaluation mode `masked_model` is the
/// full-brain model itself; for mask-through-training it is a model
/// retrained on masked inputs.
pub fn ablate_network(full: &dyn SemanticEvaluator, masked_model: &dyn SemanticEvaluator, clips: &[BoldClip], networks: &NetworkMap, label: &str) -> Result<AblationResult> {
    networks.label_index(label)?;
    let masked: Vec<BoldClip> = clips.iter().map(|c| apply_network_mask(c, networks, &[label])).collect::<Result<_>>()?;
    ablation_from(label, &full.evaluate(clips)?, &masked_model.evaluate(&masked)?)
}

/// Decodes scenario recordings into the shared image/text embedding space.
pub trait ScenarioDecoder {
    /// Embedding of the image reconstructed from `series`, a recording
    /// (single repeat or average) of `scenario`.
    fn decode_embedding(&self, scenario: &Scenario, series: &Array2<f64>, index: u64) -> Result<Array1<f64>>;
    fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub permutation: PermutationResult,
    pub matrix: CoefficientMatrix,
}

fn text_matrix(decoder: &dyn ScenarioDecoder, scenarios: &[Scenario]) -> Result<Array2<f64>> {
    let rows = scenarios.iter().map(|s| decoder.text_embedding(&s.spec.description_tokens)).collect::<Result<Vec<_>>>()?;
    stack_rows(&rows)
}

fn stack_rows(rows: &[Array1<f64>]) -> Result<Array2<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::dims("embedding width", d, r.len()));
        }
        m.row_mut(i).assign(r);
    }
    Ok(m)
}

/// Reconstructs every scenario from its averaged repeats and scores the
/// reconstructions against the scenario descriptions.
pub fn zero_shot_eval(decoder: &dyn ScenarioDecoder, scenarios: &[Scenario], n_perm: usize, r: &mut Rng) -> Result<ZeroShotResult> {
    if scenarios.len() < 3 {
        return Err(Error::InvalidArgument(format!("zero-shot evaluation needs >= 3 scenarios, got {}", scenarios.len())));
    }
    let recon = scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| decoder.decode_embedding(s, &s.averaged(), i as u64))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = scenarios.iter().map(|s| s.spec.scenario_id.clone()).collect();
    let matrix = coefficient_matrix(&stack_rows(&recon)?, &text_matrix(decoder, scenarios)?, ids.clone(), ids)?;
    let accuracy = two_way_identification(&matrix)?;
    let permutation = permutation_test(&matrix, n_perm, r)?;
    Ok(ZeroShotResult { accuracy, permutation, matrix })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScale {
    pub scenario_id: String,
    pub band: DistanceBand,
    pub accuracy: f64,
    pub mean_cosine_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleAnalysisResult {
    pub scenarios: Vec<ScenarioScale>,
    pub rank_correlation: f64,
    pub p_value: f64,
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; undefined when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length samples of size >= 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("rank correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-scenario decoding accuracy against mean cosine distance to the
/// training images.
///
/// A scenario's accuracy averages, over its individual repeats, the
/// fraction of other scenario descriptions that correlate less with the
/// repeat's reconstruction than its own description does. The p-value is
/// two-sided, from `n_perm` shuffles of the accuracies.
pub fn scale_analysis(decoder: &dyn ScenarioDecoder, scenarios: &[Scenario], train_image_latents: &Array2<f64>, n_perm: usize, r: &mut Rng) -> Result<ScaleAnalysisResult> {
    let n = scenarios.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!("scale analysis needs >= 5 scenarios, got {n}")));
    }
    let bands: Vec<DistanceBand> = scenarios.iter().map(|s| s.spec.distance_band).collect();
    if !bands.contains(&DistanceBand::Near) || !bands.contains(&DistanceBand::Far) {
        return Err(Error::InvalidArgument("scale analysis needs both near and far scenarios".into()));
    }
    if n_perm == 0 {
        return Err(Error::InvalidArgument("n_perm must be positive".into()));
    }
    let text = text_matrix(decoder, scenarios)?;
    let mut rows = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        let mut acc = 0.0;
        for (ri, rep) in s.repeats.iter().enumerate() {
            let e = decoder.decode_embedding(s, rep, (si * s.repeats.len() + ri) as u64)?;
            let m = crate::metrics::cross_correlation(&e.insert_axis(Axis(0)), &text)?;
            let own = m[[0, si]];
            let wins = (0..n).filter(|&j| j != si && m[[0, j]] < own).count();
            acc += wins as f64 / (n - 1) as f64;
        }
        let d_mc = mean_cosine_distance(&text.row(si).to_owned().insert_axis(Axis(0)), train_image_latents)?;
        rows.push(ScenarioScale {
            scenario_id: s.spec.scenario_id.clone(),
            band: s.spec.distance_band,
            accuracy: acc / s.repeats.len().max(1) as f64,
            mean_cosine_distance: d_mc,
        });
    }
    let d: Vec<f64> = rows.iter().map(|s| s.mean_cosine_distance).collect();
    let mut a: Vec<f64> = rows.iter().map(|s| s.accuracy).collect();
    let rho = spearman(&d, &a)?;
    let mut exceed = 0;
    for _ in 0..n_perm {
        a.shuffle(r);
        if spearman(&d, &a)?.abs() >= rho.abs() - 1e-12 {
            exceed += 1;
        }
    }
    Ok(ScaleAnalysisResult { scenarios: rows, rank_correlation: rho, p_value: (1 + exceed) as f64 / (n_perm + 1) as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, ScenarioSpec, World, WorldSpec};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use crate::rng::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(centres: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut x = Array2::zeros((centres.len() * per, 2));
        let mut labels = Vec::new();
        for (b, &(cx, cy)) in centres.iter().enumerate() {
            for i in 0..per {
                let row = b * per + i;
                x[[row, 0]] = cx + noise.sample(&mut r);
                x[[row, 1]] = cy + noise.sample(&mut r);
                labels.push(b);
            }
        }
        (x, labels)
    }

    #[test]
    fn k_equal_n_has_zero_ssd() {
        let (x, _) = blobs(&[(0.0, 0.0)], 12, 1.0, 1);
        let m = kmeans_fit(&x, 12, 42, 100).unwrap();
        assert!(m.ssd.abs() < 1e-18);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (x, _) = blobs(&[(1.0, -2.0)], 30, 1.0, 2);
        let m = kmeans_fit(&x, 1, 42, 100).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert!((m.centroids[[0, j]] - mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (x, labels) = blobs(&[(0.0, 0.0), (20.0, 20.0)], 25, 0.5, 3);
        let m = kmeans_fit(&x, 2, 42, 100).unwrap();
        let map = m.assignments[0];
        let agree = m.assignments.iter().zip(&labels).filter(|(a, l)| (**a == map) == (**l == 0)).count();
        assert_eq!(agree, labels.len());
    }

    #[test]
    fn centroids_are_means_of_members() {
        let (x, _) = blobs(&[(0.0, 0.0), (3.0, 0.0), (0.0, 3.0)], 20, 1.0, 4);
        let m = kmeans_fit(&x, 4, 7, 100).unwrap();
        for c in 0..m.k {
            let members: Vec<usize> = (0..x.nrows()).filter(|&i| m.assignments[i] == c).collect();
            assert!(!members.is_empty());
            let mean = x.select(Axis(0), &members).mean_axis(Axis(0)).unwrap();
            for j in 0..2 {
                assert!((m.centroids[[c, j]] - mean[j]).abs() < 1e-12);
            }
        }
        let brute: f64 = (0..x.nrows()).map(|i| sq_dist(x.row(i), m.centroids.row(m.assignments[i]))).sum();
        assert!((brute - m.ssd).abs() < 1e-9);
        assert!(m.ssd_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // Duplicated points make k-means++ pick identical centres.
        let x = array![[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]];
        let init = array![[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]];
        let m = lloyd(&x, init, 10).unwrap();
        for c in 0..3 {
            assert!(m.assignments.contains(&c));
        }
    }

    #[test]
    fn elbow_single_point_is_zero() {
        let x = array![[1.0, 2.0, 3.0]];
        assert_eq!(elbow_curve(&x, &[1], 42).unwrap(), vec![(1, 0.0)]);
    }

    #[test]
    fn elbow_is_monotone_on_random_data() {
        let mut r = Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((60, 5), || r.random_range(-1.0..1.0));
        let ks: Vec<usize> = (1..=10).collect();
        let curve = elbow_curve(&x, &ks, 42).unwrap();
        assert!(curve.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn elbow_bends_at_three_blobs() {
        let (x, _) = blobs(&[(0.0, 0.0), (30.0, 0.0), (0.0, 30.0)], 20, 0.5, 5);
        let curve = elbow_curve(&x, &[2, 3], 42).unwrap();
        assert!(curve[1].1 / curve[0].1 < 0.2);
    }

    #[test]
    fn label_table_counts_members() {
        let (x, _) = blobs(&[(0.0, 0.0), (20.0, 20.0)], 3, 0.1, 6);
        let m = kmeans_fit(&x, 2, 42, 50).unwrap();
        let labels: Vec<String> = ["a", "a", "b", "c", "c", "c"].iter().map(|s| s.to_string()).collect();
        let t = label_frequencies(&m, &labels).unwrap();
        assert_eq!(t.iter().map(|m| m.values().sum::<usize>()).sum::<usize>(), 6);
        assert_eq!(t[m.assignments[3]].get("c"), Some(&3));
    }

    #[test]
    fn single_parcel_readout_concentrates_saliency() {
        let p = 40;
        let mut w = Array1::zeros(p);
        w[17] = 2.5;
        let model = LinearReadout { weights: w };
        let mut r = Rng::seed_from_u64(3);
        let clips: Vec<Array2<f64>> = (0..4).map(|_| Array2::from_shape_simple_fn((5, p), || r.random_range(-1.0..1.0))).collect();
        let refs: Vec<(usize, &Array2<f64>)> = clips.iter().enumerate().map(|(i, c)| (i % 2, c)).collect();
        let map = gradcam_saliency(&model, &refs, "readout").unwrap();
        assert_eq!(map.subjects_averaged, 2);
        assert!(map.importance[17] / map.importance.sum() >= 0.99);
    }

    #[test]
    fn linear_saliency_equals_weight_magnitudes() {
        let mut r = Rng::seed_from_u64(4);
        let w = Array1::from_shape_simple_fn(30, || r.random_range(-2.0..2.0));
        let model = LinearReadout { weights: w.clone() };
        let clip = Array2::from_shape_simple_fn((5, 30), || r.random_range(-1.0..1.0));
        let doubled = &clip * 2.0;
        let a = gradcam_saliency(&model, &[(0, &clip)], "t").unwrap();
        let b = gradcam_saliency(&model, &[(0, &doubled)], "t").unwrap();
        assert_eq!(a.importance, w.mapv(f64::abs));
        let am = crate::contrast::argmax(a.importance.iter().copied());
        assert_eq!(am, crate::contrast::argmax(b.importance.iter().copied()));
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let model = LinearReadout { weights: Array1::zeros(8) };
        let clip = Array2::ones((3, 8));
        let map = gradcam_saliency(&model, &[(0, &clip)], "t").unwrap();
        assert!(map.importance.iter().all(|&v| v == 0.0));
    }

    fn map_of(importance: Vec<f64>) -> SaliencyMap {
        SaliencyMap { importance: Array1::from(importance), target: "t".into(), subjects_averaged: 1 }
    }

    #[test]
    fn top_k_of_decreasing_importance() {
        let networks = NetworkMap::synthetic(50);
        let map = map_of((0..50).map(|i| 50.0 - i as f64).collect());
        let top = top_k_regions(&map, 20, &networks).unwrap();
        assert_eq!(top.regions.iter().map(|r| r.0).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn top_k_ties_prefer_low_indices() {
        let networks = NetworkMap::synthetic(50);
        let top = top_k_regions(&map_of(vec![1.0; 50]), 7, &networks).unwrap();
        assert_eq!(top.regions.iter().map(|r| r.0).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        assert!(top_k_regions(&map_of(vec![1.0; 50]), 51, &networks).is_err());
    }

    proptest! {
        #[test]
        fn top_k_histogram_sums_to_k(values in prop::collection::vec(0.0f64..1.0, 70), k in 0usize..70) {
            let networks = NetworkMap::synthetic(70);
            let top = top_k_regions(&map_of(values), k, &networks).unwrap();
            prop_assert_eq!(top.network_counts.values().sum::<usize>(), k);
            prop_assert_eq!(top.regions.len(), k);
        }

        #[test]
        fn spearman_is_bounded(x in prop::collection::vec(-5.0f64..5.0, 3..20), seed in 0u64..1000) {
            let mut r = Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| r.random_range(-1.0..1.0)).collect();
            if let Ok(rho) = spearman(&x, &y) {
                prop_assert!(rho.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 5.0]), vec![2.5, 1.0, 2.5, 4.0]);
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
    }

    /// Mean over the informative parcels of a clip's signal window.
    struct Probe {
        p: usize,
        weight: f64,
    }

    impl SemanticEvaluator for Probe {
        fn evaluate(&self, clips: &[BoldClip]) -> Result<BTreeMap<String, f64>> {
            let s: f64 = clips.iter().map(|c| c.data.column(self.p).sum() / c.data.nrows() as f64).sum::<f64>() / clips.len() as f64;
            Ok(BTreeMap::from([(SEMANTIC.to_string(), (s * self.weight).clamp(0.0, 1.0)), ("other".to_string(), s)]))
        }
    }

    #[test]
    fn ablation_of_signal_network_drops_accuracy() {
        let networks = NetworkMap::synthetic(70);
        let clips = vec![BoldClip { data: Array2::from_elem((3, 70), 1.0), source_trial: "a".into(), start_tr: 0 }];
        let probe = Probe { p: 2, weight: 0.8 };
        let visual = ablate_network(&probe, &probe, &clips, &networks, "Visual").unwrap();
        assert!(visual.relative_change() <= -0.5);
        assert_eq!(visual.deltas["other"], -1.0);
        let default = ablate_network(&probe, &probe, &clips, &networks, "Default").unwrap();
        assert!(default.relative_change().abs() < 0.1);
        assert!(ablate_network(&probe, &probe, &clips, &networks, "Cerebellum").is_err());
    }

    #[test]
    fn masking_twice_equals_masking_once() {
        let networks = NetworkMap::synthetic(70);
        let mut r = Rng::seed_from_u64(8);
        let clip = BoldClip { data: Array2::from_shape_simple_fn((3, 70), || r.random_range(-1.0..1.0)), source_trial: "a".into(), start_tr: 0 };
        let once = apply_network_mask(&clip, &networks, &["Visual", "Limbic"]).unwrap();
        let twice = apply_network_mask(&apply_network_mask(&clip, &networks, &["Visual"]).unwrap(), &networks, &["Limbic"]).unwrap();
        assert_eq!(once, twice);
        let probe = Probe { p: 2, weight: 1.0 };
        assert_eq!(probe.evaluate(&[once.clone()]).unwrap(), probe.evaluate(&[apply_network_mask(&once, &networks, &["Visual"]).unwrap()]).unwrap());
    }

    /// Decodes by matching the signal window against noiseless class
    /// responses and returning the matched class's image embedding.
    struct TemplateDecoder<'a> {
        world: &'a World,
    }

    impl ScenarioDecoder for TemplateDecoder<'_> {
        fn decode_embedding(&self, scenario: &Scenario, series: &Array2<f64>, _index: u64) -> Result<Array1<f64>> {
            let start = scenario.onset_tr + self.world.spec.delay;
            let window = series.slice(ndarray::s![start..start + self.world.spec.clip_length, ..]);
            let y = window.mean_axis(Axis(0)).unwrap();
            let best = crate::contrast::argmax(
                self.world.class_latents.rows().into_iter().map(|c| crate::metrics::pearson(&self.world.response(&c.to_owned()), &y).unwrap()),
            )
            .unwrap();
            Ok(self.world.embed(&self.world.class_latents.row(best).to_owned()))
        }

        fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>> {
            Ok(self.world.embed(&self.world.text_latent(tokens)))
        }
    }

    fn small_world(noise: f64) -> World {
        let mut spec = WorldSpec::with_parcels(140, 42);
        spec.n_classes = 12;
        spec.latent_dim = 128;
        spec.noise_sigma = noise;
        generate_world(&spec).unwrap()
    }

    fn class_scenarios(world: &World, n: usize) -> Vec<Scenario> {
        (0..n)
            .map(|c| {
                let target = world.class_latents.row(c).to_owned();
                let start = 1 + world.spec.delay;
                let mut series = Array2::zeros((world.spec.n_tr, world.spec.n_parcels));
                for t in start..start + world.spec.clip_length {
                    series.row_mut(t).assign(&world.response(&target));
                }
                Scenario {
                    spec: ScenarioSpec {
                        scenario_id: format!("sc{c:03}"),
                        description_tokens: world.class_labels[c].clone(),
                        target_latent: target,
                        n_repeats: 2,
                        distance_band: if c % 2 == 0 { DistanceBand::Near } else { DistanceBand::Far },
                    },
                    repeats: vec![series.clone(), series],
                    onset_tr: 1,
                }
            })
            .collect()
    }

    #[test]
    fn in_distribution_scenarios_decode() {
        let world = small_world(0.0);
        let scenarios = class_scenarios(&world, 10);
        let mut r = Rng::seed_from_u64(1);
        let res = zero_shot_eval(&TemplateDecoder { world: &world }, &scenarios, 500, &mut r).unwrap();
        assert!(res.accuracy >= 0.9, "accuracy {}", res.accuracy);
        assert!(res.permutation.p_value < 0.05);
        assert!(zero_shot_eval(&TemplateDecoder { world: &world }, &scenarios[..2], 10, &mut r).is_err());
    }

    /// Returns an unrelated random embedding for every recording.
    struct NullDecoder {
        seed: u64,
        dim: usize,
    }

    impl ScenarioDecoder for NullDecoder {
        fn decode_embedding(&self, _scenario: &Scenario, _series: &Array2<f64>, index: u64) -> Result<Array1<f64>> {
            let mut r = rng::indexed(self.seed, "null", index);
            Ok(Array1::from_shape_simple_fn(self.dim, || r.random_range(-1.0..1.0)))
        }

        fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>> {
            let mut r = rng::indexed(self.seed ^ 0xabc, "text", tokens[1] as u64);
            Ok(Array1::from_shape_simple_fn(self.dim, || r.random_range(-1.0..1.0)))
        }
    }

    #[test]
    fn null_pairing_is_rarely_significant() {
        let world = small_world(0.0);
        let scenarios = class_scenarios(&world, 12);
        let mut significant = 0;
        let mut mean_acc = 0.0;
        for rep in 0..50 {
            let mut r = Rng::seed_from_u64(100 + rep);
            let res = zero_shot_eval(&NullDecoder { seed: rep, dim: 16 }, &scenarios, 200, &mut r).unwrap();
            mean_acc += res.accuracy / 50.0;
            if res.permutation.p_value <= 0.05 {
                significant += 1;
            }
        }
        assert!(significant <= 5, "{significant} of 50 null runs significant");
        assert!((mean_acc - 0.5).abs() < 0.05, "mean null accuracy {mean_acc}");
    }

    /// Perfect on near scenarios, unrelated on far ones.
    struct BandDecoder<'a> {
        world: &'a World,
        seed: u64,
    }

    impl ScenarioDecoder for BandDecoder<'_> {
        fn decode_embedding(&self, scenario: &Scenario, series: &Array2<f64>, index: u64) -> Result<Array1<f64>> {
            match scenario.spec.distance_band {
                DistanceBand::Near => Ok(self.world.embed(&scenario.spec.target_latent)),
                DistanceBand::Far => NullDecoder { seed: self.seed, dim: self.world.spec.embed_dim }.decode_embedding(scenario, series, index),
            }
        }

        fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>> {
            Ok(self.world.embed(&self.world.text_latent(tokens)))
        }
    }

    /// Signal fades and noise grows with the scenario's mean cosine
    /// distance to the training latents.
    struct GradedDecoder<'a> {
        world: &'a World,
        train: &'a Array2<f64>,
    }

    impl ScenarioDecoder for GradedDecoder<'_> {
        fn decode_embedding(&self, scenario: &Scenario, _series: &Array2<f64>, index: u64) -> Result<Array1<f64>> {
            let text = self.text_embedding(&scenario.spec.description_tokens)?;
            let d = mean_cosine_distance(&text.clone().insert_axis(Axis(0)), self.train)?;
            let mut r = rng::indexed(9, "graded", index);
            let noise = Array1::from_shape_simple_fn(text.len(), || r.random_range(-1.0..1.0));
            let unit = |v: Array1<f64>| &v / v.dot(&v).sqrt();
            Ok(unit(text) * (1.1 - d).max(0.0) + unit(noise) * d)
        }

        fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>> {
            Ok(self.world.embed(&self.world.text_latent(tokens)))
        }
    }

    fn class_embeddings(world: &World) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = world.class_latents.rows().into_iter().map(|c| world.embed(&c.to_owned())).collect();
        stack_rows(&rows).unwrap()
    }

    #[test]
    fn accuracy_falling_with_distance_gives_strong_negative_correlation() {
        let world = small_world(0.1);
        let scenarios = crate::synthworld::generate_scenarios(&world, 12, 5).unwrap();
        let train = class_embeddings(&world);
        let mut r = Rng::seed_from_u64(2);
        let res = scale_analysis(&GradedDecoder { world: &world, train: &train }, &scenarios, &train, 2000, &mut r).unwrap();
        assert_eq!(res.scenarios.len(), 12);
        assert!(res.rank_correlation <= -0.8, "rho {}", res.rank_correlation);
        assert!(res.p_value < 0.05);
    }

    #[test]
    fn near_perfect_far_chance_is_negative_on_average() {
        // With near accuracies tied at 1 and far ones in random order, rho
        // is fixed by the band split only in expectation.
        let world = small_world(0.1);
        let scenarios = crate::synthworld::generate_scenarios(&world, 12, 5).unwrap();
        let train = class_embeddings(&world);
        let mut rhos = Vec::new();
        for seed in 0..20 {
            let mut r = Rng::seed_from_u64(seed);
            let res = scale_analysis(&BandDecoder { world: &world, seed }, &scenarios, &train, 200, &mut r).unwrap();
            let (near, far): (Vec<_>, Vec<_>) = res.scenarios.iter().partition(|s| s.band == DistanceBand::Near);
            assert!(near.iter().all(|s| s.accuracy == 1.0));
            assert!(far.iter().all(|s| s.accuracy < 1.0));
            rhos.push(res.rank_correlation);
        }
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        assert!(rhos.iter().all(|&r| r < -0.5), "{rhos:?}");
        assert!(mean <= -0.7, "mean rho {mean}");
    }

    #[test]
    fn identical_scenarios_are_degenerate() {
        let world = small_world(0.0);
        let one = class_scenarios(&world, 1).remove(0);
        let mut scenarios = vec![one; 6];
        for (i, s) in scenarios.iter_mut().enumerate() {
            s.spec.distance_band = if i < 3 { DistanceBand::Near } else { DistanceBand::Far };
        }
        let train = world.class_latents.dot(&world.semantic_proj.t());
        let mut r = Rng::seed_from_u64(2);
        let res = scale_analysis(&TemplateDecoder { world: &world }, &scenarios, &train, 100, &mut r);
        assert!(matches!(res, Err(Error::Degenerate(_))));
    }
}
