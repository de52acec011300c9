//! Experiment orchestration. Every stage reads the previous stage's output
//! from the run directory, so `run` and the individual stages agree.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/<dataset>/raw/<split>.json     generated slices (synthetic datasets)
//! data/<dataset>/pre/<split>.json     preprocessed slices
//! checkpoints/<hash>/                 fitted detectors, keyed by content hash
//! scores/<dataset>/<detector>/        difference maps of the test split
//! roc/<dataset>__<detector>.csv       thinned ROC curves
//! metrics.csv, metrics.json           one row per (dataset, detector)
//! report.json                         rows, failures, environment, map references
//! plots/*.png                         panels and ROC overlays
//! ```

mod config;
mod plot;

pub use config::{
    ArchitectureSpec, DatasetConfig, DetectorConfig, DetectorKind, ExperimentConfig, ManifestPaths, ReportConfig,
    SyntheticSpec,
};
pub use plot::{emit_plots, render_panel, render_roc, PALETTE};

use crate::baselines::{self, MeanModel, SpatialPrior};
use crate::checkpoint::{bundle_exists, content_hash};
use crate::data::{self, generate_healthy, inject_lesion, DatasetManifest, GroundTruth, ManifestEntry, Slice, Split};
use crate::error::{Error, Result};
use crate::eval::{self, DifferenceMap, GridSpec, MetricRow};
use crate::models::{self, InferenceOptions, TrainedModel};
use crate::preprocess::{self, resize_nearest, resize_nearest_array};
use crate::rng::child_seed;
use crate::supervised::{self, UNetModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 4] = ["train", "val", "test", "labeled"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Preprocess,
    Train,
    Score,
    Eval,
    Plot,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Eval => "eval",
            Stage::Plot => "plot",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: Stage,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<String>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Environment {
    fn of(cfg: &ExperimentConfig) -> Self {
        Environment {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
        }
    }
}

/// Where one detector's outputs for one dataset live (relative to the run
/// directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRef {
    pub dataset: String,
    pub detector: String,
    pub maps: PathBuf,
    pub roc: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub environment: Environment,
    pub rows: Vec<MetricRow>,
    pub maps: Vec<MapRef>,
    /// Preprocessed test manifest of each dataset (relative path).
    pub test_sets: Vec<(String, PathBuf)>,
    pub failures: Vec<Failure>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), message: e.to_string() })?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn row(&self, dataset: &str, detector: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.dataset == dataset && r.detector == detector)
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn raw(&self, dataset: &str) -> PathBuf {
        self.root.join("data").join(dataset).join("raw")
    }

    pub fn pre(&self, dataset: &str) -> PathBuf {
        self.root.join("data").join(dataset).join("pre")
    }

    pub fn checkpoint(&self, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(hash)
    }

    pub fn scores_rel(dataset: &str, detector: &str) -> PathBuf {
        Path::new("scores").join(dataset).join(detector)
    }

    pub fn roc_rel(dataset: &str, detector: &str) -> PathBuf {
        Path::new("roc").join(format!("{dataset}__{detector}.csv"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

type Items = Vec<(Slice, Option<GroundTruth>)>;

fn split_kind(split: &str) -> Split {
    match split {
        "val" => Split::Val,
        "test" => Split::Test,
        _ => Split::Train,
    }
}

fn write_split(dir: &Path, split: &str, items: &[(Slice, Option<GroundTruth>)], fingerprint: &str) -> Result<()> {
    let split_dir = dir.join(split);
    if split_dir.exists() {
        fs::remove_dir_all(&split_dir)?;
    }
    let mut entries = Vec::with_capacity(items.len());
    for (i, (s, gt)) in items.iter().enumerate() {
        let id = format!("{i:05}");
        data::store_slice(&split_dir, &id, s, gt.as_ref())?;
        entries.push(ManifestEntry {
            subject_id: s.subject_id.clone(),
            slice_file: format!("{split}/{id}.f32"),
            modality: s.modality,
            has_ground_truth: gt.is_some(),
        });
    }
    let manifest =
        DatasetManifest { split: split_kind(split), preprocessing_fingerprint: fingerprint.to_string(), entries };
    data::write_manifest(&dir.join(format!("{split}.json")), &manifest)
}

/// Items of a stored split; `None` when the split was never written.
fn read_split(dir: &Path, split: &str) -> Result<Option<Items>> {
    let path = dir.join(format!("{split}.json"));
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(data::read_manifest(&path)?.load(dir)?))
}

fn synth_split(cfg: &ExperimentConfig, ds: &DatasetConfig, spec: &SyntheticSpec, split: &str) -> Result<Items> {
    let n = match split {
        "train" => spec.train,
        "val" => spec.val,
        "test" => spec.test,
        _ => spec.labeled,
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    let tag = format!("{}/{split}", ds.name);
    let healthy = generate_healthy(child_seed(cfg.seed, &format!("synth/{tag}"), 0), n, spec.size, spec.modality)?;
    if matches!(split, "train" | "val") {
        return Ok(healthy.into_iter().map(|s| (s, None)).collect());
    }
    healthy
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (s, gt) = inject_lesion(s, &spec.lesion, child_seed(cfg.seed, &format!("lesion/{tag}"), i as u64))?;
            Ok((s, Some(gt)))
        })
        .collect()
}

fn record<T>(failures: &mut Vec<Failure>, stage: Stage, dataset: &str, detector: Option<&str>, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => Some(v),
        Err(e) => {
            log::error!("{stage} failed for {dataset}{}: {e}", detector.map(|d| format!("/{d}")).unwrap_or_default());
            failures.push(Failure { stage, dataset: dataset.into(), detector: detector.map(Into::into), error: e.to_string() });
            None
        }
    }
}

/// Generate the synthetic datasets' raw splits.
pub fn synth(cfg: &ExperimentConfig, layout: &Layout) -> Vec<Failure> {
    let mut failures = Vec::new();
    for ds in &cfg.datasets {
        let Some(spec) = &ds.synthetic else { continue };
        let r = (|| {
            let dir = layout.raw(&ds.name);
            for split in SPLITS {
                let items = synth_split(cfg, ds, spec, split)?;
                if !items.is_empty() {
                    write_split(&dir, split, &items, "raw")?;
                }
            }
            log::info!("synth: {} written to {}", ds.name, dir.display());
            Ok(())
        })();
        record(&mut failures, Stage::Synth, &ds.name, None, r);
    }
    failures
}

fn raw_split(layout: &Layout, ds: &DatasetConfig, split: &str) -> Result<Option<Items>> {
    match &ds.manifests {
        None => read_split(&layout.raw(&ds.name), split),
        Some(m) => {
            let path = match split {
                "train" => Some(&m.train),
                "val" => m.val.as_ref(),
                "test" => Some(&m.test),
                _ => m.labeled.as_ref(),
            };
            match path {
                None => Ok(None),
                Some(p) => {
                    let base = p.parent().unwrap_or(Path::new("."));
                    Ok(Some(data::read_manifest(p)?.load(base)?))
                }
            }
        }
    }
}

/// Crop every split with one dataset-wide box, normalize and resize.
pub fn preprocess(cfg: &ExperimentConfig, layout: &Layout) -> Vec<Failure> {
    let mut failures = Vec::new();
    for ds in &cfg.datasets {
        let r = (|| {
            let mut splits = Vec::new();
            for split in SPLITS {
                if let Some(items) = raw_split(layout, ds, split)? {
                    if !items.is_empty() {
                        splits.push((split, items));
                    }
                }
            }
            if !splits.iter().any(|(s, _)| *s == "train") || !splits.iter().any(|(s, _)| *s == "test") {
                return Err(Error::EmptyDataset(format!("{}: train and test splits are required", ds.name)));
            }
            let kept: Vec<Slice> = splits
                .iter()
                .flat_map(|(_, items)| items.iter().map(|(s, _)| s))
                .filter(|s| s.mask_count() >= cfg.preprocess.min_mask_pixels)
                .cloned()
                .collect();
            let bbox = preprocess::max_bounding_box(&kept)?;
            let dir = layout.pre(&ds.name);
            for (split, items) in splits {
                let p = preprocess::run_pipeline(items, &cfg.preprocess, Some(bbox))?;
                write_split(&dir, split, &p.items, &p.fingerprint)?;
            }
            fs::write(dir.join("bbox.json"), serde_json::to_vec_pretty(&bbox)?)?;
            log::info!("preprocess: {} cropped to {bbox:?}", ds.name);
            Ok(())
        })();
        record(&mut failures, Stage::Preprocess, &ds.name, None, r);
    }
    failures
}

/// Preprocessed split; empty when absent.
pub fn load_preprocessed(layout: &Layout, dataset: &str, split: &str) -> Result<Items> {
    Ok(read_split(&layout.pre(dataset), split)?.unwrap_or_default())
}

/// SHA-256 over shapes, pixels, masks and labels.
pub fn data_fingerprint(items: &[(Slice, Option<GroundTruth>)]) -> String {
    let mut h = Sha256::new();
    h.update((items.len() as u64).to_le_bytes());
    for (s, gt) in items {
        let (r, c) = s.dim();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for v in s.pixels.iter() {
            h.update(v.to_le_bytes());
        }
        h.update(s.mask.iter().map(|&b| b as u8).collect::<Vec<u8>>());
        match gt {
            Some(g) => h.update(g.labels.iter().map(|&b| b as u8 + 1).collect::<Vec<u8>>()),
            None => h.update([0u8]),
        }
    }
    hex::encode(&h.finalize()[..12])
}

fn at_size(items: &[(Slice, Option<GroundTruth>)], size: usize) -> Items {
    items
        .iter()
        .map(|(s, gt)| {
            if s.dim() == (size, size) {
                (s.clone(), gt.clone())
            } else {
                (resize_nearest(s, size), gt.as_ref().map(|g| preprocess::resize_labels(g, size)))
            }
        })
        .collect()
}

fn slices(items: &[(Slice, Option<GroundTruth>)]) -> Vec<Slice> {
    items.iter().map(|(s, _)| s.clone()).collect()
}

/// Training inputs of one detector, already at its input size.
struct FitData {
    train: Items,
    val: Items,
    labeled: Items,
}

fn fit_data(cfg: &ExperimentConfig, layout: &Layout, ds: &str, det: &DetectorConfig) -> Result<FitData> {
    let size = det.input_size(cfg.preprocess.target_size);
    let load = |split: &str| -> Result<Items> { Ok(at_size(&load_preprocessed(layout, ds, split)?, size)) };
    let (train, val, labeled) = match det.kind {
        DetectorKind::UNet => (Vec::new(), Vec::new(), load("labeled")?),
        DetectorKind::Model(_) => (load("train")?, load("val")?, Vec::new()),
        _ => (load("train")?, Vec::new(), Vec::new()),
    };
    if det.kind == DetectorKind::UNet && labeled.is_empty() {
        return Err(Error::EmptyDataset(format!("{ds}: the supervised reference needs a `labeled` split")));
    }
    if det.kind != DetectorKind::UNet && train.is_empty() {
        return Err(Error::EmptyDataset(format!("{ds}: no preprocessed training slices")));
    }
    Ok(FitData { train, val, labeled })
}

/// Content hash of everything that determines a fitted detector.
fn checkpoint_key(cfg: &ExperimentConfig, det: &DetectorConfig, fit: &FitData) -> Result<String> {
    let size = det.input_size(cfg.preprocess.target_size);
    let params = match det.kind {
        DetectorKind::Mean => serde_json::json!({ "sigma_map": det.sigma_map }),
        // the EM settings only matter at scoring time
        DetectorKind::Gmm => serde_json::json!({ "components": det.components() }),
        DetectorKind::UNet => serde_json::to_value(det.unet_config(cfg.seed))?,
        DetectorKind::Model(_) => serde_json::json!({
            "architecture": det.architecture(size)?,
            "train": det.train_config(cfg.seed),
        }),
    };
    let kind = if det.kind == DetectorKind::Gmm { "spatial_prior" } else { det.kind.name() };
    Ok(content_hash(&serde_json::json!({
        "kind": kind,
        "input_size": size,
        "params": params,
        "train": data_fingerprint(&fit.train),
        "val": data_fingerprint(&fit.val),
        "labeled": data_fingerprint(&fit.labeled),
    })))
}

fn fit_detector(cfg: &ExperimentConfig, layout: &Layout, det: &DetectorConfig, fit: &FitData, dir: &Path) -> Result<()> {
    match det.kind {
        DetectorKind::Mean => baselines::fit_mean_model(&slices(&fit.train), det.sigma_map)?.save(dir),
        DetectorKind::Gmm => baselines::build_spatial_prior(&slices(&fit.train), det.components())?.save(dir),
        DetectorKind::UNet => {
            let labeled: Vec<(Slice, GroundTruth)> =
                fit.labeled.iter().filter_map(|(s, g)| g.clone().map(|g| (s.clone(), g))).collect();
            supervised::train_unet(&labeled, &det.unet_config(cfg.seed))?.save(dir)
        }
        DetectorKind::Model(kind) => {
            let arch = det.architecture(det.input_size(cfg.preprocess.target_size))?;
            let diag = layout.root.join("diagnostics");
            models::train(kind, &arch, &slices(&fit.train), &slices(&fit.val), &det.train_config(cfg.seed), Some(&diag))?
                .save(dir)
        }
    }
}

/// Fit every detector on every dataset, reusing checkpoints whose key exists.
pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> Vec<Failure> {
    let mut failures = Vec::new();
    for ds in &cfg.datasets {
        for det in &cfg.detectors {
            let r = (|| {
                let fit = fit_data(cfg, layout, &ds.name, det)?;
                let key = checkpoint_key(cfg, det, &fit)?;
                let dir = layout.checkpoint(&key);
                if bundle_exists(&dir) {
                    log::info!("train: {}/{} reuses checkpoint {key}", ds.name, det.name);
                    return Ok(());
                }
                let partial = dir.with_extension("partial");
                if partial.exists() {
                    fs::remove_dir_all(&partial)?;
                }
                let start = std::time::Instant::now();
                fit_detector(cfg, layout, det, &fit, &partial)?;
                fs::rename(&partial, &dir)?;
                log::info!("train: {}/{} -> {key} in {:.1}s", ds.name, det.name, start.elapsed().as_secs_f64());
                Ok(())
            })();
            record(&mut failures, Stage::Train, &ds.name, Some(&det.name), r);
        }
    }
    failures
}

/// Index written next to a detector's stored maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreIndex {
    pub detector: String,
    pub kind: DetectorKind,
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub grid: GridSpec,
    pub maps: DatasetManifest,
}

/// Hash of the settings one metric row depends on.
fn row_config_hash(cfg: &ExperimentConfig, ds: &DatasetConfig, det: &DetectorConfig) -> String {
    content_hash(&serde_json::json!({
        "seed": cfg.seed,
        "preprocess": cfg.preprocess,
        "dataset": ds,
        "detector": det,
    }))
}

fn score_detector(dir: &Path, det: &DetectorConfig, seed: u64, test: &[Slice]) -> Result<Vec<DifferenceMap>> {
    match det.kind {
        DetectorKind::Mean => {
            let m = MeanModel::load(dir)?;
            test.iter().map(|s| baselines::score_mean(&m, s)).collect()
        }
        DetectorKind::Gmm => {
            let prior = SpatialPrior::load(dir)?;
            let em = det.em();
            test.iter().map(|s| Ok(baselines::outlier_map(&baselines::em_fit(s, &prior, &em)?))).collect()
        }
        DetectorKind::UNet => supervised::probability_maps(&UNetModel::load(dir)?, test),
        DetectorKind::Model(_) => {
            models::anomaly_maps(&TrainedModel::load(dir)?, test, &InferenceOptions { samples: None, seed })
        }
    }
}

/// Score the test split with every fitted detector and store the maps.
pub fn score(cfg: &ExperimentConfig, layout: &Layout) -> Vec<Failure> {
    let mut failures = Vec::new();
    for ds in &cfg.datasets {
        let test = load_preprocessed(layout, &ds.name, "test").and_then(|t| {
            if t.is_empty() {
                Err(Error::EmptyDataset(format!("{}: no preprocessed test split", ds.name)))
            } else {
                Ok(t)
            }
        });
        let Some(test) = record(&mut failures, Stage::Score, &ds.name, None, test) else { continue };
        for det in &cfg.detectors {
            let r = (|| {
                let fit = fit_data(cfg, layout, &ds.name, det)?;
                let key = checkpoint_key(cfg, det, &fit)?;
                let ckpt = layout.checkpoint(&key);
                if !bundle_exists(&ckpt) {
                    return Err(Error::Ingestion { path: ckpt, message: "checkpoint missing; run the train stage".into() });
                }
                let size = det.input_size(cfg.preprocess.target_size);
                let inputs = slices(&at_size(&test, size));
                let maps = score_detector(&ckpt, det, cfg.seed, &inputs)?;
                let rel = Layout::scores_rel(&ds.name, &det.name);
                let dir = layout.root.join(&rel);
                if dir.exists() {
                    fs::remove_dir_all(&dir)?;
                }
                let mut entries = Vec::with_capacity(maps.len());
                for (i, (map, (full, _))) in maps.iter().zip(&test).enumerate() {
                    let (h, w) = full.dim();
                    let scores = if map.scores.dim() == (h, w) {
                        map.scores.clone()
                    } else {
                        resize_nearest_array(&map.scores, h, w)
                    };
                    let map = DifferenceMap::masked(scores, &full.mask, det.name.clone())?;
                    let stored = Slice { pixels: map.scores.mapv(|v| v as f32), ..full.clone() };
                    let id = format!("{i:05}");
                    data::store_slice(&dir, &id, &stored, None)?;
                    entries.push(ManifestEntry {
                        subject_id: stored.subject_id.clone(),
                        slice_file: format!("{id}.f32"),
                        modality: stored.modality,
                        has_ground_truth: false,
                    });
                }
                let index = ScoreIndex {
                    detector: det.name.clone(),
                    kind: det.kind,
                    checkpoint_hash: key,
                    config_hash: row_config_hash(cfg, ds, det),
                    grid: det.grid(),
                    maps: DatasetManifest { split: Split::Test, preprocessing_fingerprint: String::new(), entries },
                };
                fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
                log::info!("score: {}/{} -> {} maps", ds.name, det.name, maps.len());
                Ok(())
            })();
            record(&mut failures, Stage::Score, &ds.name, Some(&det.name), r);
        }
    }
    failures
}

/// Stored maps of one detector as difference maps.
pub fn load_maps(dir: &Path) -> Result<(ScoreIndex, Vec<DifferenceMap>)> {
    let path = dir.join("index.json");
    let bytes = fs::read(&path).map_err(|e| Error::Ingestion { path: path.clone(), message: e.to_string() })?;
    let index: ScoreIndex =
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity { path: path.clone(), message: e.to_string() })?;
    let maps = index
        .maps
        .load(dir)?
        .into_iter()
        .map(|(s, _)| DifferenceMap::new(s.pixels.mapv(f64::from), s.mask, index.detector.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, maps))
}

/// Pooled AUC and maximal Dice (Dice at 0.5 for the supervised reference).
pub fn evaluate_maps(
    maps: &[DifferenceMap],
    gts: &[GroundTruth],
    kind: DetectorKind,
    grid: &GridSpec,
) -> Result<(eval::RocCurve, f64, eval::SweepResult)> {
    if maps.len() != gts.len() {
        return Err(Error::shape(&[gts.len()], &[maps.len()]));
    }
    let (scores, labels) = eval::pool(maps.iter().zip(gts))?;
    let curve = eval::roc(&scores, &labels)?;
    let auc = eval::auc(&curve);
    let grid = if kind == DetectorKind::UNet { GridSpec::Custom { lo: 0.5, hi: 0.5, points: 1 } } else { *grid };
    let sweep = eval::max_dice_sweep(&scores, &labels, &grid)?;
    Ok((curve, auc, sweep))
}

/// Metrics, ROC files and the report.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout) -> Result<Report> {
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut refs = Vec::new();
    let mut test_sets = Vec::new();
    fs::create_dir_all(layout.root.join("roc"))?;
    for ds in &cfg.datasets {
        let Some(test) = record(&mut failures, Stage::Eval, &ds.name, None, load_preprocessed(layout, &ds.name, "test"))
        else {
            continue;
        };
        test_sets.push((ds.name.clone(), Path::new("data").join(&ds.name).join("pre").join("test.json")));
        let gts: Option<Vec<GroundTruth>> = test.iter().map(|(_, g)| g.clone()).collect();
        let Some(gts) = gts else {
            record::<()>(&mut failures, Stage::Eval, &ds.name, None, Err(Error::Validation("test slices without labels".into())));
            continue;
        };
        for det in &cfg.detectors {
            let r = (|| {
                let rel = Layout::scores_rel(&ds.name, &det.name);
                let (index, maps) = load_maps(&layout.root.join(&rel))?;
                let (curve, auc, sweep) = evaluate_maps(&maps, &gts, det.kind, &index.grid)?;
                let roc_rel = Layout::roc_rel(&ds.name, &det.name);
                eval::write_roc_csv(&layout.root.join(&roc_rel), &curve, cfg.report.roc_points)?;
                refs.push(MapRef { dataset: ds.name.clone(), detector: det.name.clone(), maps: rel, roc: roc_rel });
                Ok(MetricRow {
                    detector: det.name.clone(),
                    dataset: ds.name.clone(),
                    auc,
                    mdsc: sweep.mdsc,
                    threshold: sweep.best_threshold,
                    checkpoint_hash: index.checkpoint_hash,
                    config_hash: index.config_hash,
                })
            })();
            if let Some(row) = record(&mut failures, Stage::Eval, &ds.name, Some(&det.name), r) {
                log::info!("eval: {}/{} auc {:.4} mdsc {:.4}", ds.name, det.name, row.auc, row.mdsc);
                rows.push(row);
            }
        }
    }
    eval::write_metrics_csv(&layout.metrics_csv(), &rows)?;
    eval::write_metrics_json(&layout.root.join("metrics.json"), &rows)?;
    let report = Report { environment: Environment::of(cfg), rows, maps: refs, test_sets, failures };
    write_report(layout, &report)?;
    Ok(report)
}

pub fn write_report(layout: &Layout, report: &Report) -> Result<()> {
    fs::write(layout.report(), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// All stages in order. Stage failures are collected in the report; the
/// error path is reserved for failures that leave no report at all.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Report> {
    cfg.validate()?;
    let layout = Layout::new(out);
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut failures = synth(cfg, &layout);
    failures.extend(preprocess(cfg, &layout));
    failures.extend(train(cfg, &layout));
    failures.extend(score(cfg, &layout));
    let mut report = evaluate(cfg, &layout)?;
    failures.append(&mut report.failures);
    report.failures = failures;
    if let Err(e) = emit_plots(&report, out, cfg.report.max_panels) {
        report.failures.push(Failure { stage: Stage::Plot, dataset: String::new(), detector: None, error: e.to_string() });
    }
    write_report(&layout, &report)?;
    Ok(report)
}
