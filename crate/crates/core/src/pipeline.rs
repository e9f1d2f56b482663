//! Experiment stages over a run directory.
//!
//! Each stage reads the artifacts of its upstream stages, writes its own,
//! and appends a record to `run_manifest.json`. A stage's hash covers the
//! config sections it reads plus its upstream hashes; re-running a stage
//! whose hash and artifacts are unchanged is skipped as cached.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{
    ablate_network, elbow_curve, gradcam_saliency, kmeans_fit, label_frequencies, scale_analysis, top_k_regions, zero_shot_eval, AblationMode,
    AblationResult, InputGradient, ScenarioDecoder, SemanticEvaluator, SEMANTIC,
};
use crate::config::{hash_json, ColumnKind, ExperimentConfig, Mode};
use crate::contrast::{make_samples, train_contrastive, ContrastiveModel, ContrastiveSample, CurvePoint};
use crate::encoder::{FeatureRegistry, ImageEncoder, SslTrainer, TextEncoder};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{correlation_distance, feature_two_way, n_way_top1, pixcorr, ssim, MetricReport, TemplateClassifier};
use crate::params::ParamStore;
use crate::plot;
use crate::preproc::{apply_network_mask, condition_series, read_clips, segment_clips, write_clips, BoldClip, NetworkMap, ParcelTimeSeries};
use crate::prior::{train_prior, ImageDecoder, PriorModel};
use crate::rng;
use crate::synthworld::{
    generate_scenarios, generate_trials, generate_world, image_to_matrix, matrix_to_image, read_scenarios, read_trials, read_world, write_dataset,
    DistanceBand, Image, Scenario, SyntheticTrial, TrialSet, World, IMAGE_PIXELS,
};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "NEURODECODE_RUN_ROOT";

/// Report columns in table order.
pub const TABLE_COLUMNS: [&str; 9] = ["PixCorr", "SSIM", "AlexNet(2)", "AlexNet(5)", "Inception", "CLIP", "EffNet", "SwAV", "Top-1 Acc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Preprocess,
    Pretrain,
    Contrastive,
    Prior,
    Reconstruct,
    Evaluate,
    Cluster,
    Saliency,
    Ablate,
    Zeroshot,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Synth,
        Stage::Preprocess,
        Stage::Pretrain,
        Stage::Contrastive,
        Stage::Prior,
        Stage::Reconstruct,
        Stage::Evaluate,
        Stage::Cluster,
        Stage::Saliency,
        Stage::Ablate,
        Stage::Zeroshot,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Contrastive => "contrastive",
            Stage::Prior => "prior",
            Stage::Reconstruct => "reconstruct",
            Stage::Evaluate => "evaluate",
            Stage::Cluster => "cluster",
            Stage::Saliency => "saliency",
            Stage::Ablate => "ablate",
            Stage::Zeroshot => "zeroshot",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Synth => &[],
            Stage::Preprocess => &[Stage::Synth],
            Stage::Pretrain => &[Stage::Preprocess],
            Stage::Contrastive => &[Stage::Pretrain],
            Stage::Prior => &[Stage::Contrastive],
            Stage::Reconstruct => &[Stage::Prior],
            Stage::Evaluate => &[Stage::Reconstruct],
            Stage::Cluster => &[Stage::Synth],
            Stage::Saliency => &[Stage::Contrastive],
            Stage::Ablate => &[Stage::Prior],
            Stage::Zeroshot => &[Stage::Prior],
            Stage::Report => &[Stage::Evaluate],
        }
    }

    /// Config sections the stage reads.
    fn sections(self, c: &ExperimentConfig) -> Result<serde_json::Value> {
        let v = |x: &dyn erased::Ser| x.to_json();
        Ok(match self {
            Stage::Synth => json!({ "seed": c.seed, "world": v(&c.world)?, "data": v(&c.data)? }),
            Stage::Preprocess => json!({ "preproc": v(&c.preproc)? }),
            Stage::Pretrain => json!({ "mode": v(&c.mode)?, "subject": c.data.subject, "encoder": v(&c.encoder)?, "pretrain": v(&c.pretrain)? }),
            Stage::Contrastive => json!({ "contrastive": v(&c.contrastive)? }),
            Stage::Prior => json!({ "prior": v(&c.prior)?, "decoder": v(&c.decoder)?, "image_tokens": c.image_tokens }),
            Stage::Reconstruct | Stage::Report => json!({}),
            Stage::Evaluate => json!({ "metrics": v(&c.metrics)? }),
            Stage::Cluster | Stage::Saliency => json!({ "analysis": v(&c.analysis)? }),
            Stage::Ablate => json!({ "analysis": v(&c.analysis)?, "metrics": v(&c.metrics)? }),
            Stage::Zeroshot => json!({ "n_perm": c.metrics.n_perm }),
        })
    }

    /// Hash of the stage's config sections and its upstream hashes.
    pub fn hash(self, c: &ExperimentConfig) -> Result<String> {
        let upstream = self.upstream().iter().map(|u| u.hash(c)).collect::<Result<Vec<_>>>()?;
        hash_json(&json!({ "stage": self.name(), "config": self.sections(c)?, "upstream": upstream }))
    }
}

mod erased {
    use crate::error::Result;

    pub trait Ser {
        fn to_json(&self) -> Result<serde_json::Value>;
    }

    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> Result<serde_json::Value> {
            Ok(serde_json::to_value(self)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub stage_hash: String,
    pub config_hash: String,
    pub status: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub version: String,
}

/// Append-only log of stage executions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<StageRecord>,
}

impl RunManifest {
    /// Most recent completed record of `stage`.
    pub fn latest(&self, stage: Stage) -> Option<&StageRecord> {
        self.entries.iter().rev().find(|e| e.stage == stage && e.status == "done")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub record: StageRecord,
}

/// A run directory and its fixed layout.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `$NEURODECODE_RUN_ROOT/<name>`, or `runs/<name>` when unset.
    pub fn from_env(name: &str) -> Self {
        let base = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        Self::new(base.join(name))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn lock(&self) -> Result<RunLock> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.path("run.lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.path("run_manifest.json");
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path, reason: e.to_string() })
    }

    fn append(&self, record: StageRecord) -> Result<()> {
        let mut m = self.manifest()?;
        m.entries.push(record);
        let tmp = self.path("run_manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&m)?)?;
        std::fs::rename(tmp, self.path("run_manifest.json"))?;
        Ok(())
    }

    fn artifacts_present(&self, record: &StageRecord) -> bool {
        record.artifacts.iter().all(|a| self.path(a).exists())
    }

    /// Errors unless `stage` has a completed record matching its current
    /// hash with every artifact on disk.
    pub fn require(&self, manifest: &RunManifest, stage: Stage, cfg: &ExperimentConfig) -> Result<()> {
        let hash = stage.hash(cfg)?;
        match manifest.latest(stage) {
            Some(r) if r.stage_hash == hash && self.artifacts_present(r) => Ok(()),
            Some(r) => {
                let missing = r.artifacts.iter().find(|a| !self.path(a).exists()).map(|a| self.path(a));
                Err(Error::MissingArtifact { stage: stage.name().into(), path: missing.unwrap_or_else(|| self.path("run_manifest.json")) })
            }
            None => Err(Error::MissingArtifact { stage: stage.name().into(), path: self.path(stage_marker(stage)) }),
        }
    }
}

/// Primary artifact of each stage, named in missing-artifact errors.
fn stage_marker(stage: Stage) -> &'static str {
    match stage {
        Stage::Synth => "data/manifest.json",
        Stage::Preprocess => "clips/train/manifest.json",
        Stage::Pretrain => "models/pretrain.json",
        Stage::Contrastive => "models/contrastive.ckpt",
        Stage::Prior => "models/prior.ckpt",
        Stage::Reconstruct => "recon/index.json",
        Stage::Evaluate => "metrics.json",
        Stage::Cluster => "analysis/clusters.tsv",
        Stage::Saliency => "analysis/saliency.csv",
        Stage::Ablate => "analysis/ablation.csv",
        Stage::Zeroshot => "analysis/zeroshot.json",
        Stage::Report => "report/report.json",
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Runs one stage unless an identical run is already recorded.
pub fn run_stage(run: &RunDir, stage: Stage, config: &ExperimentConfig) -> Result<StageOutcome> {
    let cfg = config.resolved()?;
    let _lock = run.lock()?;
    let manifest = run.manifest()?;
    let stage_hash = stage.hash(&cfg)?;
    if stage != Stage::Report {
        if let Some(r) = manifest.latest(stage) {
            if r.stage_hash == stage_hash && run.artifacts_present(r) {
                log::info!("{}: cached ({})", stage.name(), &stage_hash[..12]);
                return Ok(StageOutcome { stage, status: StageStatus::Cached, record: r.clone() });
            }
        }
    }
    for &u in stage.upstream() {
        run.require(&manifest, u, &cfg)?;
    }
    let config_hash = cfg.hash()?;
    let configs = run.path("configs");
    std::fs::create_dir_all(&configs)?;
    std::fs::write(configs.join(format!("{config_hash}.json")), serde_json::to_string_pretty(&cfg)?)?;
    let started = unix_now();
    log::info!("{}: running ({})", stage.name(), &stage_hash[..12]);
    let ctx = Ctx { run, cfg: &cfg, config_hash: &config_hash, manifest: &manifest };
    let mut artifacts = match stage {
        Stage::Synth => ctx.synth()?,
        Stage::Preprocess => ctx.preprocess()?,
        Stage::Pretrain => ctx.pretrain()?,
        Stage::Contrastive => ctx.contrastive()?,
        Stage::Prior => ctx.prior()?,
        Stage::Reconstruct => ctx.reconstruct()?,
        Stage::Evaluate => ctx.evaluate()?,
        Stage::Cluster => ctx.cluster()?,
        Stage::Saliency => ctx.saliency()?,
        Stage::Ablate => ctx.ablate()?,
        Stage::Zeroshot => ctx.zeroshot()?,
        Stage::Report => ctx.report()?,
    };
    artifacts.sort();
    let record = StageRecord {
        stage,
        stage_hash,
        config_hash,
        status: "done".into(),
        started_unix: started,
        finished_unix: unix_now(),
        artifacts,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    run.append(record.clone())?;
    Ok(StageOutcome { stage, status: StageStatus::Ran, record })
}

/// Runs every stage in order.
pub fn run_all(run: &RunDir, config: &ExperimentConfig) -> Result<Vec<StageOutcome>> {
    Stage::ALL.into_iter().map(|s| run_stage(run, s, config)).collect()
}

/// Conditions a raw series and cuts the stimulus clip at `onset`.
pub fn stimulus_clip(series: &Array2<f64>, onset: usize, id: &str, subject: usize, cfg: &ExperimentConfig) -> Result<BoldClip> {
    let raw = ParcelTimeSeries { data: series.clone(), tr_seconds: cfg.world.tr_seconds, subject_id: subject };
    let conditioned = condition_series(&raw, cfg.preproc.highpass_hz)?;
    Ok(segment_clips(&conditioned, id, &[onset], cfg.world.delay, cfg.world.clip_length)?.remove(0))
}

fn in_scope(t: &SyntheticTrial, cfg: &ExperimentConfig) -> bool {
    cfg.mode == Mode::Universal || t.subject_id == cfg.data.subject
}

/// Trials and their preprocessed clips, restricted to the configured subject
/// in individual mode.
pub struct PreparedData {
    pub world: World,
    pub trials: TrialSet,
    pub train: Vec<(BoldClip, usize)>,
    pub test: Vec<(BoldClip, usize)>,
}

impl PreparedData {
    pub fn train_trials(&self) -> impl Iterator<Item = (&BoldClip, &SyntheticTrial)> {
        self.train.iter().map(|(c, i)| (c, &self.trials.train[*i]))
    }

    pub fn test_trials(&self) -> impl Iterator<Item = (&BoldClip, &SyntheticTrial)> {
        self.test.iter().map(|(c, i)| (c, &self.trials.test[*i]))
    }
}

/// Models produced by the contrastive and prior stages, plus the frozen
/// components they rely on.
pub struct Models {
    pub world: World,
    pub image_encoder: ImageEncoder,
    pub contrastive: ContrastiveModel,
    pub prior: PriorModel,
    pub decoder: ImageDecoder,
    pub classifier: TemplateClassifier,
    pub config: ExperimentConfig,
}

pub struct ContrastiveRun {
    pub model: ContrastiveModel,
    pub curve: Vec<CurvePoint>,
}

pub struct PriorRun {
    pub prior: PriorModel,
    pub decoder: ImageDecoder,
    pub prior_curve: Vec<f64>,
    pub decoder_curve: Vec<f64>,
}

pub fn contrastive_samples(image_encoder: &ImageEncoder, pairs: &[(&BoldClip, &SyntheticTrial)]) -> Result<Vec<ContrastiveSample>> {
    make_samples(image_encoder, pairs.iter().map(|(c, t)| (c.data.clone(), &t.image, t.label_text.clone(), t.subject_id)))
}

/// Trains the fMRI encoder, projector and meta-net contrastively.
pub fn fit_contrastive(cfg: &ExperimentConfig, world: &World, samples: &[ContrastiveSample], pretrained: Option<&ParamStore>) -> Result<ContrastiveRun> {
    let mut model = ContrastiveModel::new(cfg.encoder.clone(), TextEncoder::from_world(world), cfg.contrastive.n_prompts, cfg.contrastive.init_tau)?;
    if let Some(p) = pretrained {
        model.load_encoder(p)?;
    }
    let curve = train_contrastive(&mut model, samples, &cfg.contrastive)?;
    Ok(ContrastiveRun { model, curve })
}

/// Trains the diffusion prior on encoded clips and the image decoder on
/// ground-truth grids.
pub fn fit_prior(cfg: &ExperimentConfig, image_encoder: &ImageEncoder, contrastive: &ContrastiveModel, pairs: &[(&BoldClip, &SyntheticTrial)]) -> Result<PriorRun> {
    let clips: Vec<BoldClip> = pairs.iter().map(|(c, _)| (*c).clone()).collect();
    let grids = pairs.iter().map(|(_, t)| image_encoder.encode_grid(&t.image)).collect::<Result<Vec<_>>>()?;
    let mut prior_cfg = cfg.prior.clone();
    if cfg.mode == Mode::Universal {
        // Pooled training runs the prior for proportionally more steps too.
        prior_cfg.steps *= cfg.data.n_subjects.max(1);
    }
    let mut prior = PriorModel::new(prior_cfg, image_encoder.dim)?;
    let encode = |x: &[&Array2<f64>]| contrastive.embed_fmri(x);
    let prior_curve = train_prior(&mut prior, &clips, &grids, &encode)?;
    let mut decoder = ImageDecoder::new(cfg.image_tokens, image_encoder.dim, &cfg.decoder);
    let images: Vec<Image> = pairs.iter().map(|(_, t)| t.image.clone()).collect();
    let decoder_curve = decoder.train(&grids, &images, &cfg.decoder)?;
    Ok(PriorRun { prior, decoder, prior_curve, decoder_curve })
}

impl Models {
    pub fn assemble(cfg: &ExperimentConfig, world: World, contrastive: ContrastiveModel, prior: PriorRun) -> Result<Self> {
        let image_encoder = ImageEncoder::from_world(&world, cfg.image_tokens)?;
        let classifier = TemplateClassifier::from_world(&world);
        Ok(Self { world, image_encoder, contrastive, prior: prior.prior, decoder: prior.decoder, classifier, config: cfg.clone() })
    }

    /// Trains every model from scratch on `data`, optionally with a network
    /// masked out of every clip.
    pub fn train(cfg: &ExperimentConfig, data: &PreparedData, mask: Option<&str>, pretrained: Option<&ParamStore>) -> Result<Self> {
        let networks = NetworkMap::synthetic(cfg.world.n_parcels);
        let masked: Vec<(BoldClip, &SyntheticTrial)> = data
            .train_trials()
            .map(|(c, t)| Ok((match mask { Some(m) => apply_network_mask(c, &networks, &[m])?, None => c.clone() }, t)))
            .collect::<Result<_>>()?;
        let pairs: Vec<(&BoldClip, &SyntheticTrial)> = masked.iter().map(|(c, t)| (c, *t)).collect();
        let image_encoder = ImageEncoder::from_world(&data.world, cfg.image_tokens)?;
        let samples = contrastive_samples(&image_encoder, &pairs)?;
        let c = fit_contrastive(cfg, &data.world, &samples, pretrained)?;
        let p = fit_prior(cfg, &image_encoder, &c.model, &pairs)?;
        Self::assemble(cfg, data.world.clone(), c.model, p)
    }

    pub fn load(run: &RunDir, cfg: &ExperimentConfig) -> Result<Self> {
        let world = read_world(&run.path("data"))?;
        let mut contrastive = ContrastiveModel::new(cfg.encoder.clone(), TextEncoder::from_world(&world), cfg.contrastive.n_prompts, cfg.contrastive.init_tau)?;
        contrastive.store.load_values_from(&load_ckpt(run, "models/contrastive.ckpt", Stage::Contrastive)?)?;
        let image_encoder = ImageEncoder::from_world(&world, cfg.image_tokens)?;
        let mut prior = PriorModel::new(cfg.prior.clone(), image_encoder.dim)?;
        prior.store.load_values_from(&load_ckpt(run, "models/prior.ckpt", Stage::Prior)?)?;
        let decoder = ImageDecoder::from_store(load_ckpt(run, "models/decoder.ckpt", Stage::Prior)?, cfg.image_tokens, image_encoder.dim)?;
        let run = PriorRun { prior, decoder, prior_curve: vec![], decoder_curve: vec![] };
        Self::assemble(cfg, world, contrastive, run)
    }

    /// Reconstruction from one clip; the sampling stream is keyed by `id`.
    pub fn reconstruct(&self, clip: &Array2<f64>, id: &str) -> Result<Image> {
        let z = self.contrastive.embed_fmri(&[clip])?.row(0).to_owned();
        let mut r = rng::stream(self.config.seed, &format!("reconstruct/{id}"));
        Ok(self.prior.reconstruct(&z, &self.decoder, &self.image_encoder, &mut r)?.0.image)
    }

    pub fn reconstruct_clips(&self, clips: &[BoldClip]) -> Result<Vec<Image>> {
        clips.iter().map(|c| self.reconstruct(&c.data, &c.source_trial)).collect()
    }
}

fn load_ckpt(run: &RunDir, rel: &str, stage: Stage) -> Result<ParamStore> {
    let path = run.path(rel);
    if !path.exists() {
        return Err(Error::MissingArtifact { stage: stage.name().into(), path });
    }
    ParamStore::load(&path)
}

/// Semantic n-way accuracy plus low-level metrics of reconstructions
/// against fixed ground-truth images.
pub struct TrialEvaluator<'a> {
    pub models: &'a Models,
    pub truth: Vec<Image>,
}

impl SemanticEvaluator for TrialEvaluator<'_> {
    fn evaluate(&self, clips: &[BoldClip]) -> Result<BTreeMap<String, f64>> {
        let recon = self.models.reconstruct_clips(clips)?;
        let cfg = &self.models.config;
        let mut r = rng::stream(cfg.seed, "n-way");
        let top1 = n_way_top1(&self.models.classifier, &recon, &self.truth, cfg.metrics.n_way, cfg.metrics.n_trials, &mut r)?;
        let n = recon.len() as f64;
        let mut pc = 0.0;
        let mut ss = 0.0;
        for (a, b) in recon.iter().zip(&self.truth) {
            pc += pixcorr(a, b).unwrap_or(0.0) / n;
            ss += ssim(a, b)? / n;
        }
        Ok(BTreeMap::from([(SEMANTIC.to_string(), top1), ("PixCorr".to_string(), pc), ("SSIM".to_string(), ss)]))
    }
}

/// Gradient of the retrieval log-probability of each clip's own target
/// latent among all targets, at the model temperature.
pub struct DecodingTarget<'a> {
    pub model: &'a ContrastiveModel,
    pub targets: &'a Array2<f64>,
}

impl InputGradient for DecodingTarget<'_> {
    fn input_gradient(&self, clip: &Array2<f64>, index: usize) -> Result<Array2<f64>> {
        let mut tape = crate::autograd::Tape::new();
        let x = self.model.encoder.stack(&[clip])?;
        let input = tape.leaf(x);
        let o = self.model.encoder.forward(&mut tape, &self.model.store, input, 1);
        let z = self.model.project_graph(&mut tape, &self.model.store, o);
        let scaled = self.targets.t().to_owned() / self.model.tau();
        let logits = tape.leaf(scaled);
        let logits = tape.matmul(z, logits);
        let log_probs = tape.log_softmax_rows(logits);
        let mut select = Array2::zeros((1, self.targets.nrows()));
        select[[0, index]] = 1.0;
        let select = tape.leaf(select);
        let picked = tape.mul(log_probs, select);
        let score = tape.sum_all(picked);
        let grads = tape.backward(score);
        grads.wrt(input).cloned().ok_or_else(|| Error::Numerical("no gradient reached the input".into()))
    }
}

impl ScenarioDecoder for Models {
    fn decode_embedding(&self, scenario: &Scenario, series: &Array2<f64>, index: u64) -> Result<Array1<f64>> {
        let clip = stimulus_clip(series, scenario.onset_tr, &scenario.spec.scenario_id, 0, &self.config)?;
        let image = self.reconstruct(&clip.data, &format!("{}#{index}", scenario.spec.scenario_id))?;
        Ok(self.image_encoder.encode_image(&image)?.0)
    }

    fn text_embedding(&self, tokens: &[usize]) -> Result<Array1<f64>> {
        self.contrastive.embed_plain_text(tokens)
    }
}

/// Every report metric for reconstructions against ground truth.
pub fn compute_metrics(cfg: &ExperimentConfig, models_world: &World, recon: &[Image], truth: &[Image], config_hash: &str) -> Result<MetricReport> {
    let image_encoder = ImageEncoder::from_world(models_world, cfg.image_tokens)?;
    let registry = FeatureRegistry::builtin(&image_encoder, cfg.seed);
    let n = recon.len();
    let mut report = MetricReport::default();
    let mut pc = 0.0;
    let mut ss = 0.0;
    for (a, b) in recon.iter().zip(truth) {
        pc += pixcorr(a, b).unwrap_or(0.0);
        ss += ssim(a, b)?;
    }
    report.insert("PixCorr", pc / n as f64, None, n, config_hash)?;
    report.insert("SSIM", ss / n as f64, None, n, config_hash)?;
    for (name, col) in &cfg.metrics.columns {
        let fr = registry.extract_all(&col.extractor, recon)?;
        let ft = registry.extract_all(&col.extractor, truth)?;
        match col.kind {
            ColumnKind::TwoWay => report.insert(name, feature_two_way(&fr, &ft)?, Some(0.5), n * (n - 1), config_hash)?,
            ColumnKind::CorrelationDistance => report.insert(name, correlation_distance(&fr, &ft)?, None, n, config_hash)?,
        }
    }
    let classifier = TemplateClassifier::from_world(models_world);
    let mut r = rng::stream(cfg.seed, "n-way");
    let top1 = n_way_top1(&classifier, recon, truth, cfg.metrics.n_way, cfg.metrics.n_trials, &mut r)?;
    report.insert("Top-1 Acc", top1, Some(1.0 / cfg.metrics.n_way as f64), cfg.metrics.n_trials, config_hash)?;
    Ok(report)
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

struct Ctx<'a> {
    run: &'a RunDir,
    cfg: &'a ExperimentConfig,
    config_hash: &'a str,
    manifest: &'a RunManifest,
}

impl Ctx<'_> {
    fn data(&self) -> Result<PreparedData> {
        let dir = self.run.path("data");
        let world = read_world(&dir)?;
        let trials = read_trials(&dir, &world)?;
        let by_id = |clips: Vec<BoldClip>| -> BTreeMap<String, BoldClip> { clips.into_iter().map(|c| (c.source_trial.clone(), c)).collect() };
        let mut train_clips = by_id(read_clips(&self.run.path("clips/train"))?);
        let mut test_clips = by_id(read_clips(&self.run.path("clips/test"))?);
        let missing = |id: &str| Error::MissingArtifact { stage: "preprocess".into(), path: self.run.path(&format!("clips/{id}.f32")) };
        let mut train = Vec::new();
        for (i, t) in trials.train.iter().enumerate().filter(|(_, t)| in_scope(t, self.cfg)) {
            train.push((train_clips.remove(&t.trial_id).ok_or_else(|| missing(&t.trial_id))?, i));
        }
        let mut test = Vec::new();
        for (i, t) in trials.test.iter().enumerate().filter(|(_, t)| in_scope(t, self.cfg)) {
            test.push((test_clips.remove(&t.trial_id).ok_or_else(|| missing(&t.trial_id))?, i));
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config("no trials for the configured subject".into()));
        }
        Ok(PreparedData { world, trials, train, test })
    }

    fn pretrained(&self) -> Result<Option<ParamStore>> {
        if !self.cfg.pretrain.enabled {
            return Ok(None);
        }
        Ok(Some(load_ckpt(self.run, "models/pretrain.ckpt", Stage::Pretrain)?))
    }

    fn synth(&self) -> Result<Vec<String>> {
        let world = generate_world(&self.cfg.world)?;
        let d = &self.cfg.data;
        let trials = generate_trials(&world, d.n_train, d.n_test, d.n_subjects)?;
        let scenarios = generate_scenarios(&world, d.n_scenarios, d.scenario_repeats)?;
        let dir = self.run.path("data");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        write_dataset(&dir, &world, &trials, &scenarios)?;
        Ok(vec!["data/manifest.json".into(), "data/world.ckpt".into(), "data/labels.tsv".into()])
    }

    fn preprocess(&self) -> Result<Vec<String>> {
        let dir = self.run.path("data");
        let world = read_world(&dir)?;
        let trials = read_trials(&dir, &world)?;
        let clip = |t: &SyntheticTrial| stimulus_clip(&t.parcel_series, t.onset_tr, &t.trial_id, t.subject_id, self.cfg);
        let train = trials.train.iter().map(clip).collect::<Result<Vec<_>>>()?;
        let test = trials.test.iter().map(clip).collect::<Result<Vec<_>>>()?;
        for sub in ["clips/train", "clips/test"] {
            let p = self.run.path(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p)?;
            }
        }
        write_clips(&self.run.path("clips/train"), &train)?;
        write_clips(&self.run.path("clips/test"), &test)?;
        NetworkMap::synthetic(world.spec.n_parcels).write_tsv(&self.run.path("networks.tsv"))?;
        Ok(vec!["clips/train/manifest.json".into(), "clips/test/manifest.json".into(), "networks.tsv".into()])
    }

    fn pretrain(&self) -> Result<Vec<String>> {
        let p = &self.cfg.pretrain;
        let summary = self.run.path("models/pretrain.json");
        std::fs::create_dir_all(self.run.path("models"))?;
        if !p.enabled {
            std::fs::write(&summary, serde_json::to_string_pretty(&json!({ "enabled": false }))?)?;
            return Ok(vec!["models/pretrain.json".into()]);
        }
        let data = self.data()?;
        // Whole conditioned series give the longest next-TR windows.
        let windows = data
            .train_trials()
            .map(|(_, t)| {
                let raw = ParcelTimeSeries { data: t.parcel_series.clone(), tr_seconds: self.cfg.world.tr_seconds, subject_id: t.subject_id };
                Ok(condition_series(&raw, self.cfg.preproc.highpass_hz)?.data)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trainer = SslTrainer::new(self.cfg.encoder.clone(), p.lr, p.weight_decay)?;
        let mut r = rng::stream(self.cfg.seed, "pretrain-batches");
        let mut curve = Vec::with_capacity(p.steps);
        for _ in 0..p.steps {
            let idx = rand::seq::index::sample(&mut r, windows.len(), p.batch_size.min(windows.len()));
            let batch: Vec<&Array2<f64>> = idx.iter().map(|i| &windows[i]).collect();
            curve.push(trainer.ssl_pretrain_step(&batch)?);
        }
        trainer.store.save(&self.run.path("models/pretrain.ckpt"))?;
        let rows: Vec<Vec<String>> = curve.iter().enumerate().map(|(i, l)| vec![i.to_string(), f(*l)]).collect();
        io::write_csv(&self.run.path("curves/pretrain.csv"), &["step", "loss"], &rows)?;
        std::fs::write(&summary, serde_json::to_string_pretty(&json!({ "enabled": true, "steps": p.steps, "final_loss": curve.last() }))?)?;
        Ok(vec!["models/pretrain.json".into(), "models/pretrain.ckpt".into(), "curves/pretrain.csv".into()])
    }

    fn contrastive(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let image_encoder = ImageEncoder::from_world(&data.world, self.cfg.image_tokens)?;
        let train: Vec<_> = data.train_trials().collect();
        let test: Vec<_> = data.test_trials().collect();
        let samples = contrastive_samples(&image_encoder, &train)?;
        let run = fit_contrastive(self.cfg, &data.world, &samples, self.pretrained()?.as_ref())?;
        run.model.store.save(&self.run.path("models/contrastive.ckpt"))?;
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        let rows: Vec<Vec<String>> =
            run.curve.iter().map(|p| vec![p.step.to_string(), f(p.loss), f(p.tau), opt(p.brain_vision), opt(p.brain_language)]).collect();
        io::write_csv(&self.run.path("curves/contrastive.csv"), &["step", "loss", "tau", "brain_vision", "brain_language"], &rows)?;
        let test_samples = contrastive_samples(&image_encoder, &test)?;
        fn refs(s: &[ContrastiveSample]) -> Vec<&ContrastiveSample> {
            s.iter().collect()
        }
        let (tr_bv, tr_bl) = run.model.retrieval(&refs(&samples), &self.cfg.contrastive)?;
        let (te_bv, te_bl) = run.model.retrieval(&refs(&test_samples), &self.cfg.contrastive)?;
        let summary = json!({
            "train": { "brain_vision": tr_bv, "brain_language": tr_bl, "n": samples.len() },
            "test": { "brain_vision": te_bv, "brain_language": te_bl, "n": test_samples.len() },
            "final_tau": run.model.tau(),
            "steps": run.curve.len(),
        });
        std::fs::write(self.run.path("models/contrastive.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(vec!["models/contrastive.ckpt".into(), "models/contrastive.json".into(), "curves/contrastive.csv".into()])
    }

    fn prior(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let image_encoder = ImageEncoder::from_world(&data.world, self.cfg.image_tokens)?;
        let mut contrastive =
            ContrastiveModel::new(self.cfg.encoder.clone(), TextEncoder::from_world(&data.world), self.cfg.contrastive.n_prompts, self.cfg.contrastive.init_tau)?;
        contrastive.store.load_values_from(&load_ckpt(self.run, "models/contrastive.ckpt", Stage::Contrastive)?)?;
        let train: Vec<_> = data.train_trials().collect();
        let p = fit_prior(self.cfg, &image_encoder, &contrastive, &train)?;
        p.prior.store.save(&self.run.path("models/prior.ckpt"))?;
        p.decoder.store.save(&self.run.path("models/decoder.ckpt"))?;
        let rows = |c: &[f64]| c.iter().enumerate().map(|(i, l)| vec![i.to_string(), f(*l)]).collect::<Vec<_>>();
        io::write_csv(&self.run.path("curves/prior.csv"), &["step", "loss"], &rows(&p.prior_curve))?;
        io::write_csv(&self.run.path("curves/decoder.csv"), &["step", "loss"], &rows(&p.decoder_curve))?;
        Ok(vec!["models/prior.ckpt".into(), "models/decoder.ckpt".into(), "curves/prior.csv".into(), "curves/decoder.csv".into()])
    }

    fn reconstruct(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let models = Models::load(self.run, self.cfg)?;
        let dir = self.run.path("recon");
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let mut ids = Vec::new();
        for (clip, trial) in data.test_trials() {
            let image = models.reconstruct(&clip.data, &trial.trial_id)?;
            io::write_f32(&dir.join(format!("{}.f32", trial.trial_id)), &image_to_matrix(&image))?;
            save_png(&dir.join(format!("{}.png", trial.trial_id)), &image)?;
            ids.push(trial.trial_id.clone());
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&ids)?)?;
        Ok(vec!["recon/index.json".into()])
    }

    fn evaluate(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let text = std::fs::read_to_string(self.run.path("recon/index.json"))?;
        let ids: Vec<String> = serde_json::from_str(&text)?;
        let mut recon = Vec::new();
        let mut truth = Vec::new();
        for (_, trial) in data.test_trials() {
            if !ids.contains(&trial.trial_id) {
                return Err(Error::MissingArtifact { stage: "reconstruct".into(), path: self.run.path(&format!("recon/{}.f32", trial.trial_id)) });
            }
            let m = io::read_f32(&self.run.path(&format!("recon/{}.f32", trial.trial_id)), 1, IMAGE_PIXELS)?;
            recon.push(matrix_to_image(&m)?);
            truth.push(trial.image.clone());
        }
        let report = compute_metrics(self.cfg, &data.world, &recon, &truth, self.config_hash)?;
        std::fs::write(self.run.path("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(vec!["metrics.json".into()])
    }

    fn cluster(&self) -> Result<Vec<String>> {
        let dir = self.run.path("data");
        let world = read_world(&dir)?;
        let trials = read_trials(&dir, &world)?;
        let image_encoder = ImageEncoder::from_world(&world, self.cfg.image_tokens)?;
        let train: Vec<&SyntheticTrial> = trials.train.iter().filter(|t| in_scope(t, self.cfg)).collect();
        let mut latents = Array2::zeros((train.len(), image_encoder.dim));
        for (i, t) in train.iter().enumerate() {
            latents.row_mut(i).assign(&image_encoder.encode_image(&t.image)?.0);
        }
        let a = &self.cfg.analysis;
        let k = a.k.min(train.len());
        let model = kmeans_fit(&latents, k, self.cfg.seed, a.max_iter)?;
        let ks: Vec<usize> = (1..=a.k_max.min(train.len())).collect();
        let elbow = elbow_curve(&latents, &ks, self.cfg.seed)?;
        let labels: Vec<String> = train.iter().map(|t| world.vocab.render(&t.label_text)).collect();
        let tables = label_frequencies(&model, &labels)?;
        let rows: Vec<Vec<String>> =
            train.iter().zip(&model.assignments).zip(&labels).map(|((t, c), l)| vec![t.trial_id.clone(), c.to_string(), l.clone()]).collect();
        io::write_tsv(&self.run.path("analysis/clusters.tsv"), &["trial_id", "cluster", "label_text"], &rows)?;
        let rows: Vec<Vec<String>> = elbow.iter().map(|(k, s)| vec![k.to_string(), f(*s)]).collect();
        io::write_csv(&self.run.path("analysis/elbow.csv"), &["k", "ssd"], &rows)?;
        let mut rows = Vec::new();
        for (c, table) in tables.iter().enumerate() {
            let mut entries: Vec<(&String, &usize)> = table.iter().collect();
            entries.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            rows.extend(entries.into_iter().map(|(l, n)| vec![c.to_string(), l.clone(), n.to_string()]));
        }
        io::write_tsv(&self.run.path("analysis/cluster_labels.tsv"), &["cluster", "label_text", "count"], &rows)?;
        Ok(vec!["analysis/clusters.tsv".into(), "analysis/elbow.csv".into(), "analysis/cluster_labels.tsv".into()])
    }

    fn load_contrastive(&self, world: &World) -> Result<ContrastiveModel> {
        let mut m = ContrastiveModel::new(self.cfg.encoder.clone(), TextEncoder::from_world(world), self.cfg.contrastive.n_prompts, self.cfg.contrastive.init_tau)?;
        m.store.load_values_from(&load_ckpt(self.run, "models/contrastive.ckpt", Stage::Contrastive)?)?;
        Ok(m)
    }

    fn saliency(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let model = self.load_contrastive(&data.world)?;
        let image_encoder = ImageEncoder::from_world(&data.world, self.cfg.image_tokens)?;
        let pairs: Vec<_> = data.train_trials().collect();
        let mut targets = Array2::zeros((pairs.len(), image_encoder.dim));
        for (i, (_, t)) in pairs.iter().enumerate() {
            targets.row_mut(i).assign(&image_encoder.encode_image(&t.image)?.0);
        }
        let clips: Vec<(usize, &Array2<f64>)> = pairs.iter().map(|(c, t)| (t.subject_id, &c.data)).collect();
        let map = gradcam_saliency(&DecodingTarget { model: &model, targets: &targets }, &clips, "decoding")?;
        let networks = NetworkMap::synthetic(self.cfg.world.n_parcels);
        let top = top_k_regions(&map, self.cfg.analysis.top_k.min(map.importance.len()), &networks)?;
        let rows: Vec<Vec<String>> = map.importance.iter().enumerate().map(|(p, v)| vec![p.to_string(), networks.label_of(p).to_string(), format!("{v:.9e}")]).collect();
        io::write_csv(&self.run.path("analysis/saliency.csv"), &["parcel", "network", "importance"], &rows)?;
        let rows: Vec<Vec<String>> = top.regions.iter().enumerate().map(|(r, (p, n))| vec![(r + 1).to_string(), p.to_string(), n.clone()]).collect();
        io::write_csv(&self.run.path("analysis/top_regions.csv"), &["rank", "parcel", "network"], &rows)?;
        let informative = &data.world.spec.informative_set;
        let hits = top.regions.iter().filter(|(p, _)| informative.binary_search(p).is_ok()).count();
        let summary = json!({
            "target": map.target,
            "subjects_averaged": map.subjects_averaged,
            "top_k": top.regions.len(),
            "informative_fraction": if top.regions.is_empty() { 0.0 } else { hits as f64 / top.regions.len() as f64 },
            "network_counts": top.network_counts,
        });
        std::fs::write(self.run.path("analysis/saliency.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(vec!["analysis/saliency.csv".into(), "analysis/top_regions.csv".into(), "analysis/saliency.json".into()])
    }

    fn ablate(&self) -> Result<Vec<String>> {
        let data = self.data()?;
        let models = Models::load(self.run, self.cfg)?;
        let networks = NetworkMap::synthetic(self.cfg.world.n_parcels);
        let clips: Vec<BoldClip> = data.test_trials().map(|(c, _)| c.clone()).collect();
        let truth: Vec<Image> = data.test_trials().map(|(_, t)| t.image.clone()).collect();
        let full = TrialEvaluator { models: &models, truth: truth.clone() };
        let mut results: Vec<AblationResult> = Vec::new();
        for label in &self.cfg.analysis.ablation_networks {
            let res = match self.cfg.analysis.ablation_mode {
                AblationMode::MaskAtEvaluation => ablate_network(&full, &full, &clips, &networks, label)?,
                AblationMode::MaskThroughTraining => {
                    networks.label_index(label)?;
                    let retrained = Models::train(self.cfg, &data, Some(label), self.pretrained()?.as_ref())?;
                    let masked = TrialEvaluator { models: &retrained, truth: truth.clone() };
                    ablate_network(&full, &masked, &clips, &networks, label)?
                }
            };
            log::info!("ablate {label}: {:.3} -> {:.3}", res.full_brain_accuracy, res.semantic_accuracy);
            results.push(res);
        }
        let metric_names: Vec<String> = results.first().map(|r| r.deltas.keys().cloned().collect()).unwrap_or_default();
        let mut header = vec!["network", "full_brain_accuracy", "semantic_accuracy", "relative_change"];
        let delta_cols: Vec<String> = metric_names.iter().map(|m| format!("delta_{m}")).collect();
        header.extend(delta_cols.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = results
            .iter()
            .map(|r| {
                let mut row = vec![r.masked_network.clone(), f(r.full_brain_accuracy), f(r.semantic_accuracy), f(r.relative_change())];
                row.extend(metric_names.iter().map(|m| f(r.deltas[m])));
                row
            })
            .collect();
        io::write_csv(&self.run.path("analysis/ablation.csv"), &header, &rows)?;
        std::fs::write(self.run.path("analysis/ablation.json"), serde_json::to_string_pretty(&results)?)?;
        Ok(vec!["analysis/ablation.csv".into(), "analysis/ablation.json".into()])
    }

    fn zeroshot(&self) -> Result<Vec<String>> {
        let dir = self.run.path("data");
        let models = Models::load(self.run, self.cfg)?;
        let scenarios = read_scenarios(&dir, &models.world)?;
        let trials = read_trials(&dir, &models.world)?;
        let mut train_latents = Array2::zeros((trials.train.len(), models.image_encoder.dim));
        for (i, t) in trials.train.iter().enumerate() {
            train_latents.row_mut(i).assign(&models.image_encoder.encode_image(&t.image)?.0);
        }
        let n_perm = self.cfg.metrics.n_perm;
        let zs = zero_shot_eval(&models, &scenarios, n_perm, &mut rng::stream(self.cfg.seed, "zeroshot-perm"))?;
        let scale = scale_analysis(&models, &scenarios, &train_latents, n_perm, &mut rng::stream(self.cfg.seed, "scale-perm"))?;
        io::matrix_csv(&self.run.path("analysis/coefficients.csv"), &zs.matrix.values, &zs.matrix.row_ids, &zs.matrix.col_ids)?;
        let band = |b: DistanceBand| match b {
            DistanceBand::Near => "near",
            DistanceBand::Far => "far",
        };
        let rows: Vec<Vec<String>> = scale
            .scenarios
            .iter()
            .zip(&scenarios)
            .map(|(s, sc)| vec![s.scenario_id.clone(), band(s.band).into(), models.world.vocab.render(&sc.spec.description_tokens), f(s.mean_cosine_distance), f(s.accuracy)])
            .collect();
        io::write_csv(&self.run.path("analysis/scale.csv"), &["scenario_id", "band", "description", "mean_cosine_distance", "accuracy"], &rows)?;
        let summary = json!({
            "zero_shot": { "accuracy": zs.accuracy, "p_value": zs.permutation.p_value, "n_scenarios": scenarios.len(), "n_perm": n_perm },
            "scale_analysis": { "rank_correlation": scale.rank_correlation, "p_value": scale.p_value, "scenarios": scale.scenarios },
        });
        std::fs::write(self.run.path("analysis/zeroshot.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(vec!["analysis/zeroshot.json".into(), "analysis/scale.csv".into(), "analysis/coefficients.csv".into()])
    }

    fn read_json(&self, rel: &str) -> Result<Option<serde_json::Value>> {
        let p = self.run.path(rel);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&std::fs::read_to_string(p)?)?))
    }

    /// Optional analysis results are included only when their stage is
    /// current for this config.
    fn current(&self, stage: Stage) -> Result<bool> {
        Ok(self.run.require(self.manifest, stage, self.cfg).is_ok())
    }

    fn report(&self) -> Result<Vec<String>> {
        let out = self.run.path("report");
        std::fs::create_dir_all(&out)?;
        let metrics: MetricReport = serde_json::from_value(self.read_json("metrics.json")?.ok_or_else(|| Error::MissingArtifact {
            stage: "evaluate".into(),
            path: self.run.path("metrics.json"),
        })?)?;
        let mut table = serde_json::Map::new();
        let mut row = Vec::new();
        for c in TABLE_COLUMNS {
            let v = metrics.value(c).ok_or_else(|| Error::Config(format!("metrics lack report column {c}")))?;
            table.insert(c.to_string(), json!(v));
            row.push(f(v));
        }
        io::write_csv(&out.join("table.csv"), &TABLE_COLUMNS, &[row])?;
        let mut artifacts = vec!["report/report.json".to_string(), "report/table.csv".to_string()];
        let mut report = json!({
            "config_hash": self.config_hash,
            "mode": self.cfg.mode,
            "table": table,
            "metrics": metrics,
        });
        let section = |report: &mut serde_json::Value, key: &str, v: serde_json::Value| {
            report.as_object_mut().expect("object").insert(key.to_string(), v);
        };
        if let Some(v) = self.read_json("models/contrastive.json")? {
            section(&mut report, "retrieval", v);
        }
        let curve = |rel: &str, col: usize| -> Result<Vec<(f64, f64)>> {
            let rows = io::read_delimited(&self.run.path(rel), ',')?;
            Ok(rows.iter().filter_map(|r| Some((r[0].parse().ok()?, r.get(col)?.parse().ok()?))).collect())
        };
        if self.run.path("curves/contrastive.csv").exists() {
            plot::line_plot(&out.join("contrastive_loss.png"), &[(curve("curves/contrastive.csv", 1)?, plot::BLUE)])?;
            artifacts.push("report/contrastive_loss.png".into());
        }
        if self.run.path("curves/prior.csv").exists() {
            let mut series = vec![(curve("curves/prior.csv", 1)?, plot::ORANGE)];
            if self.run.path("curves/decoder.csv").exists() {
                series.push((curve("curves/decoder.csv", 1)?, plot::GREEN));
            }
            plot::line_plot(&out.join("prior_loss.png"), &series)?;
            artifacts.push("report/prior_loss.png".into());
        }
        if self.current(Stage::Cluster)? {
            let elbow = curve("analysis/elbow.csv", 1)?;
            plot::line_plot(&out.join("elbow.png"), &[(elbow.clone(), plot::BLUE)])?;
            artifacts.push("report/elbow.png".into());
            section(&mut report, "elbow", json!(elbow));
        }
        if self.current(Stage::Saliency)? {
            if let Some(v) = self.read_json("analysis/saliency.json")? {
                section(&mut report, "saliency", v);
            }
        }
        if self.current(Stage::Ablate)? {
            if let Some(v) = self.read_json("analysis/ablation.json")? {
                let results: Vec<AblationResult> = serde_json::from_value(v.clone())?;
                let values: Vec<f64> = results.iter().map(|r| r.semantic_accuracy).collect();
                plot::bar_plot(&out.join("ablation.png"), &values, plot::RED)?;
                artifacts.push("report/ablation.png".into());
                section(&mut report, "ablation", v);
            }
        }
        if self.current(Stage::Zeroshot)? {
            if let Some(v) = self.read_json("analysis/zeroshot.json")? {
                let rows = io::read_delimited(&self.run.path("analysis/scale.csv"), ',')?;
                let points: Vec<(f64, f64, [u8; 3])> = rows
                    .iter()
                    .filter_map(|r| {
                        let color = if r[1] == "near" { plot::BLUE } else { plot::ORANGE };
                        Some((r[3].parse().ok()?, r[4].parse().ok()?, color))
                    })
                    .collect();
                let n = plot::scatter_plot(&out.join("scale_scatter.png"), &points)?;
                artifacts.push("report/scale_scatter.png".into());
                section(&mut report, "scatter_points", json!(n));
                section(&mut report, "zero_shot", v);
            }
        }
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(artifacts)
    }
}

fn save_png(path: &Path, image: &Image) -> Result<()> {
    let (h, w, _) = image.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
