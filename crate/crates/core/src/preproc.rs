//! Parcellation, series conditioning, delay-aware clip segmentation and
//! network masking.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const NETWORK_LABELS: [&str; 7] =
    ["Visual", "Somatomotor", "DorsalAttention", "VentralAttention", "Limbic", "Frontoparietal", "Default"];

/// Boundaries of `n` contiguous, nearly equal bands over `p` items.
pub fn band_bounds(p: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|b| (b * p / n, (b + 1) * p / n)).collect()
}

/// Parcel-by-time matrix `[T × P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParcelTimeSeries {
    pub data: Array2<f64>,
    pub tr_seconds: f64,
    pub subject_id: usize,
}

/// Fixed-length window `[L × P]` cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct BoldClip {
    pub data: Array2<f64>,
    pub source_trial: String,
    pub start_tr: usize,
}

#[derive(Debug, Clone)]
pub struct ParcellationAtlas {
    /// `[P × n_voxels]`, rows sum to one.
    pub weights: Array2<f64>,
    pub parcel_names: Vec<String>,
}

impl ParcellationAtlas {
    /// Validates nonnegativity and normalizes each row to unit sum.
    pub fn new(weights: Array2<f64>, parcel_names: Vec<String>) -> Result<Self> {
        if parcel_names.len() != weights.nrows() {
            return Err(Error::dims("parcel names", weights.nrows(), parcel_names.len()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("atlas weights must be finite and nonnegative".into()));
        }
        let mut weights = weights;
        for (p, mut row) in weights.rows_mut().into_iter().enumerate() {
            let sum = row.sum();
            if sum <= 0.0 {
                return Err(Error::InvalidArgument(format!("parcel {p} has zero total weight")));
            }
            row /= sum;
        }
        Ok(Self { weights, parcel_names })
    }
}

/// Parcel-to-network assignment over exactly seven labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMap {
    pub assignment: Vec<usize>,
    pub labels: Vec<String>,
}

impl NetworkMap {
    /// Seven contiguous bands; the first band is the visual network.
    pub fn synthetic(n_parcels: usize) -> Self {
        let mut assignment = vec![0; n_parcels];
        for (b, (lo, hi)) in band_bounds(n_parcels, NETWORK_LABELS.len()).into_iter().enumerate() {
            assignment[lo..hi].iter_mut().for_each(|a| *a = b);
        }
        Self { assignment, labels: NETWORK_LABELS.iter().map(|s| s.to_string()).collect() }
    }

    pub fn n_parcels(&self) -> usize {
        self.assignment.len()
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownNetwork(label.to_string()))
    }

    pub fn label_of(&self, parcel: usize) -> &str {
        &self.labels[self.assignment[parcel]]
    }

    pub fn parcels_in(&self, label: &str) -> Result<Vec<usize>> {
        let k = self.label_index(label)?;
        Ok((0..self.n_parcels()).filter(|&p| self.assignment[p] == k).collect())
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> =
            (0..self.n_parcels()).map(|p| vec![p.to_string(), self.label_of(p).to_string()]).collect();
        io::write_tsv(path, &["parcel_index", "network_label"], &rows)
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let rows = io::read_delimited(path, '\t')?;
        let bad = |r: String| Error::Format { path: path.to_path_buf(), reason: r };
        let mut labels: Vec<String> = Vec::new();
        let mut assignment = vec![usize::MAX; rows.len()];
        for r in &rows {
            if r.len() != 2 {
                return Err(bad("expected 2 columns".into()));
            }
            let p: usize = r[0].parse().map_err(|_| bad(format!("bad parcel index `{}`", r[0])))?;
            if p >= assignment.len() {
                return Err(bad(format!("parcel index {p} out of range")));
            }
            let k = match labels.iter().position(|l| *l == r[1]) {
                Some(k) => k,
                None => {
                    labels.push(r[1].clone());
                    labels.len() - 1
                }
            };
            assignment[p] = k;
        }
        if assignment.contains(&usize::MAX) || labels.len() != NETWORK_LABELS.len() {
            return Err(bad("every parcel must be assigned to one of seven networks".into()));
        }
        Ok(Self { assignment, labels })
    }
}

/// `output[t, p] = Σ_v weights[p, v] · volume[t, v]`.
pub fn parcellate(volume_series: &Array2<f64>, atlas: &ParcellationAtlas, tr_seconds: f64, subject_id: usize) -> Result<ParcelTimeSeries> {
    if volume_series.ncols() != atlas.weights.ncols() {
        return Err(Error::dims("voxel count", atlas.weights.ncols(), volume_series.ncols()));
    }
    Ok(ParcelTimeSeries { data: volume_series.dot(&atlas.weights.t()), tr_seconds, subject_id })
}

/// Orthonormal nuisance regressors over `t` samples: constant, linear
/// trend, and DCT-II cosines whose frequency lies below `cutoff_hz`.
fn nuisance_basis(t: usize, tr_seconds: f64, cutoff_hz: f64) -> Vec<Array1<f64>> {
    let n = t as f64;
    let mut raw: Vec<Array1<f64>> = vec![Array1::ones(t), Array1::from_iter((0..t).map(|i| i as f64))];
    let mut k = 1;
    while (k as f64) / (2.0 * n * tr_seconds) < cutoff_hz && k < t {
        raw.push(Array1::from_iter(
            (0..t).map(|i| (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()),
        ));
        k += 1;
    }
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for mut v in raw {
        for b in &basis {
            let c = v.dot(b);
            v = &v - &(b * c);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 * n.sqrt() {
            basis.push(v / norm);
        }
    }
    basis
}

fn project_out(data: &Array2<f64>, basis: &[Array1<f64>]) -> Array2<f64> {
    let mut out = data.clone();
    for mut col in out.columns_mut() {
        for b in basis {
            let c = col.dot(b);
            col.scaled_add(-c, b);
        }
    }
    out
}

/// Removes each column's mean and linear trend.
pub fn detrend(data: &Array2<f64>) -> Array2<f64> {
    project_out(data, &nuisance_basis(data.nrows(), 1.0, 0.0))
}

/// Detrend, DCT high-pass below `highpass_cutoff_hz`, then per-column
/// z-score. Columns with no variance left are emitted as zeros.
pub fn condition_series(series: &ParcelTimeSeries, highpass_cutoff_hz: f64) -> Result<ParcelTimeSeries> {
    let t = series.data.nrows();
    if t < 8 {
        return Err(Error::InvalidArgument(format!("conditioning needs at least 8 TRs, got {t}")));
    }
    if series.tr_seconds <= 0.0 {
        return Err(Error::InvalidArgument("tr_seconds must be positive".into()));
    }
    let basis = nuisance_basis(t, series.tr_seconds, highpass_cutoff_hz);
    let mut out = project_out(&series.data, &basis);
    let mut constant = 0usize;
    for mut col in out.columns_mut() {
        let mean = col.sum() / t as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if var <= 1e-20 || var.sqrt() <= 1e-10 * scale.max(1e-300) {
            col.fill(0.0);
            constant += 1;
        } else {
            let sd = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    if constant > 0 {
        log::warn!("condition_series: {constant} constant column(s) emitted as zeros");
    }
    Ok(ParcelTimeSeries { data: out, tr_seconds: series.tr_seconds, subject_id: series.subject_id })
}

/// Cuts `[onset + delay, onset + delay + length)` for every onset.
pub fn segment_clips(
    series: &ParcelTimeSeries,
    source_trial: &str,
    onsets: &[usize],
    delay: usize,
    length: usize,
) -> Result<Vec<BoldClip>> {
    let n_tr = series.data.nrows();
    onsets
        .iter()
        .map(|&onset| {
            let start = onset + delay;
            if start + length > n_tr || length == 0 {
                return Err(Error::ClipOutOfRange { trial_id: source_trial.to_string(), onset, delay, length, n_tr });
            }
            Ok(BoldClip {
                data: series.data.slice(s![start..start + length, ..]).to_owned(),
                source_trial: source_trial.to_string(),
                start_tr: start,
            })
        })
        .collect()
}

/// Zeroes every column whose parcel belongs to one of `masked_networks`.
pub fn apply_network_mask(clip: &BoldClip, map: &NetworkMap, masked_networks: &[&str]) -> Result<BoldClip> {
    if clip.data.ncols() != map.n_parcels() {
        return Err(Error::dims("network map parcels", clip.data.ncols(), map.n_parcels()));
    }
    let masked: BTreeSet<usize> = masked_networks.iter().map(|l| map.label_index(l)).collect::<Result<_>>()?;
    let mut out = clip.clone();
    for (p, mut col) in out.data.columns_mut().into_iter().enumerate() {
        if masked.contains(&map.assignment[p]) {
            col.fill(0.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub trial_id: String,
    pub start_tr: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Writes `clips/<trial_id>.f32` files plus `clips/manifest.json`.
pub fn write_clips(dir: &Path, clips: &[BoldClip]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        io::write_f32(&dir.join(format!("{}.f32", c.source_trial)), &c.data)?;
        entries.push(ClipEntry {
            trial_id: c.source_trial.clone(),
            start_tr: c.start_tr,
            rows: c.data.nrows(),
            cols: c.data.ncols(),
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

pub fn read_clips(dir: &Path) -> Result<Vec<BoldClip>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact { stage: "preprocess".into(), path: path.clone() })?;
    let entries: Vec<ClipEntry> = serde_json::from_str(&text)?;
    entries
        .into_iter()
        .map(|e| {
            Ok(BoldClip {
                data: io::read_f32(&dir.join(format!("{}.f32", e.trial_id)), e.rows, e.cols)?,
                source_trial: e.trial_id,
                start_tr: e.start_tr,
            })
        })
        .collect()
}

/// Column means, used by callers that need per-parcel summaries.
pub fn column_means(data: &Array2<f64>) -> Array1<f64> {
    data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()))
}
