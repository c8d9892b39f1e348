//! Dataset generation, experiment runs and parameter sweeps.
//!
//! Every image is processed independently with randomness derived from the
//! root seed and the image index, so outputs do not depend on the number of
//! worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{read_model, Denoiser};
use crate::diffusion::{median_purify, purify_tiled, PurifyConfig};
use crate::error::{Error, Result};
use crate::forensics::Detector;
use crate::forgerylab::{forged_sample, DatasetRecipe, ForgerySpec};
use crate::guidance::{ssim, GuidanceMetric, SsimParams};
use crate::io::{read_image, read_mask, write_image, write_mask};
use crate::metrics::{delta_report, psnr, score, weighted_confusion, DeltaReport, Mask};
use crate::schedule::NoiseSchedule;
use crate::{Image, Real};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Written into every summary so readers know how FP and FN were assigned.
pub const CONFUSION_CONVENTION: &str = "TP = sum(H*M), FN = sum((1-H)*M), FP = sum(H*(1-M)), TN = sum((1-H)*(1-M)); \
IoU, F1 and MCC are unchanged if FP and FN are exchanged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub index: u64,
    pub clean: String,
    pub forged: String,
    pub mask: String,
    pub spec: ForgerySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub recipe: DatasetRecipe,
    pub images: Vec<ManifestEntry>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        kind: "json",
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "json",
        detail: format!("{}: {e}", path.display()),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::param(format!("cannot start {jobs} worker threads: {e}")))
}

/// Writes `NNN_clean.png`, `NNN_forged.png`, `NNN_mask.png` and the manifest.
pub fn generate_dataset(dir: &Path, seed: u64, recipe: &DatasetRecipe, jobs: usize) -> Result<Manifest> {
    create_dir(dir)?;
    let images = thread_pool(jobs)?.install(|| {
        (0..recipe.count)
            .into_par_iter()
            .map(|i| {
                let id = format!("{i:03}");
                let s = forged_sample::<Real>(seed, i, recipe).map_err(|e| e.at_stage(&id, "generate"))?;
                let entry = ManifestEntry {
                    clean: format!("{id}_clean.png"),
                    forged: format!("{id}_forged.png"),
                    mask: format!("{id}_mask.png"),
                    index: i as u64,
                    spec: s.spec,
                    id,
                };
                write_image(&dir.join(&entry.clean), &s.clean)?;
                write_image(&dir.join(&entry.forged), &s.forged)?;
                write_mask(&dir.join(&entry.mask), &s.mask)?;
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        seed,
        recipe: *recipe,
        images,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}

/// Clean images of a dataset, in manifest order.
pub fn load_clean_images(dir: &Path) -> Result<Vec<Image>> {
    read_manifest(dir)?
        .images
        .iter()
        .map(|e| read_image(&dir.join(&e.clean)).map_err(|err| err.at_stage(&e.id, "load")))
        .collect()
}

/// Output kinds compared in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "orig")]
    Orig,
    #[serde(rename = "diff-cf")]
    DiffCf,
    #[serde(rename = "diff-cfg")]
    DiffCfg,
    #[serde(rename = "median")]
    Median,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Orig, Variant::DiffCf, Variant::DiffCfg, Variant::Median];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Orig => "orig",
            Variant::DiffCf => "diff-cf",
            Variant::DiffCfg => "diff-cfg",
            Variant::Median => "median",
        }
    }

    fn needs_model(&self) -> bool {
        matches!(self, Variant::DiffCf | Variant::DiffCfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    TStar,
    Scale,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::TStar => "t_star",
            SweepParam::Scale => "scale",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_star" | "t-star" => Ok(SweepParam::TStar),
            "scale" => Ok(SweepParam::Scale),
            other => Err(Error::param(format!("unknown sweep parameter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub t_star: usize,
    /// Sweeps over `t_star` purify with guidance when set.
    pub guided: bool,
    pub scale: f64,
    pub metric: GuidanceMetric,
    pub seed: u64,
    pub patch: usize,
    pub detectors: Vec<Detector>,
    pub variants: Vec<Variant>,
    pub median_kernel: usize,
    pub jobs: usize,
    /// Also store every variant's output as `<out>/images/<id>_<variant>.png`.
    pub save_images: bool,
    pub sweep: Option<SweepAxis>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: None,
            out: PathBuf::from("out"),
            t_star: 40,
            guided: false,
            scale: 1e6,
            metric: GuidanceMetric::default(),
            seed: 0,
            patch: 256,
            detectors: Detector::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            median_kernel: 3,
            jobs: 1,
            save_images: false,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn purify_config(&self, guided: bool) -> PurifyConfig {
        PurifyConfig {
            t_star: self.t_star,
            guided,
            base_scale: self.scale,
            metric: self.metric,
            seed: self.seed,
            clamp_each_step: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(Error::param("no detectors selected"));
        }
        if !self.variants.contains(&Variant::Orig) {
            return Err(Error::param("variant 'orig' is required as the reference"));
        }
        if self.patch == 0 {
            return Err(Error::param("patch size must be positive"));
        }
        if self.jobs == 0 {
            return Err(Error::param("jobs must be positive"));
        }
        Ok(())
    }
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    pub detector: Detector,
    pub variant: Variant,
    pub iou: f64,
    pub mcc: f64,
    pub f1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub psnr: f64,
    pub ssim: f64,
    /// Score deltas against `orig`, keyed by metric name.
    pub iou: DeltaReport,
    pub mcc: DeltaReport,
    pub f1: DeltaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub images: usize,
    pub confusion_convention: String,
    pub config: ExperimentConfig,
    pub variants: BTreeMap<Variant, VariantSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub summary: Summary,
}

struct Model {
    denoiser: Denoiser<Real>,
    schedule: NoiseSchedule,
}

fn load_model(cfg: &ExperimentConfig) -> Result<Option<Model>> {
    if !cfg.variants.iter().any(Variant::needs_model) {
        return Ok(None);
    }
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::param("diffusion variants need a model file"))?;
    let (net, header) = read_model::<Real>(path)?;
    Ok(Some(Model {
        denoiser: Denoiser::ConvNet(net),
        schedule: header.schedule()?,
    }))
}

/// `(psnr, ssim)` of 8-bit images mapped to `[0, 1]`.
pub fn image_quality(x: &Image, reference: &Image) -> Result<(f64, f64)> {
    let (a, b) = (x.to_unit_range(), reference.to_unit_range());
    Ok((psnr(&a, &b, 1.0)?, ssim(&a, &b, &SsimParams::unit_range())?))
}

fn process_image(
    dir: &Path,
    entry: &ManifestEntry,
    cfg: &ExperimentConfig,
    model: Option<&Model>,
) -> Result<Vec<ReportRow>> {
    let id = entry.id.as_str();
    let forged: Image = read_image(&dir.join(&entry.forged)).map_err(|e| e.at_stage(id, "load"))?;
    let mask: Mask = read_mask(&dir.join(&entry.mask)).map_err(|e| e.at_stage(id, "load"))?;
    let mut rows = Vec::with_capacity(cfg.variants.len() * cfg.detectors.len());
    for &variant in &cfg.variants {
        let purified = match variant {
            Variant::Orig => Ok(forged.clone()),
            Variant::Median => median_purify(&forged, cfg.median_kernel),
            Variant::DiffCf | Variant::DiffCfg => {
                let m = model.expect("model loaded for diffusion variants");
                let pc = cfg.purify_config(variant == Variant::DiffCfg);
                purify_tiled(&forged, entry.index, cfg.patch, &m.denoiser, &m.schedule, &pc)
            }
        };
        let out = purified.map_err(|e| e.at_stage(id, "purify"))?.quantize_u8();
        if cfg.save_images {
            let path = cfg.out.join("images").join(format!("{id}_{variant}.png"));
            write_image(&path, &out).map_err(|e| e.at_stage(id, "save"))?;
        }
        let (q_psnr, q_ssim) = image_quality(&out, &forged).map_err(|e| e.at_stage(id, "quality"))?;
        for &detector in &cfg.detectors {
            let heat = detector.run(&out).map_err(|e| e.at_stage(id, "detect"))?;
            let s = score(&weighted_confusion(&heat, &mask).map_err(|e| e.at_stage(id, "score"))?);
            rows.push(ReportRow {
                image_id: entry.id.clone(),
                detector,
                variant,
                iou: s.iou,
                mcc: s.mcc,
                f1: s.f1,
                psnr: q_psnr,
                ssim: q_ssim,
            });
        }
    }
    log::info!("image {id} done");
    Ok(rows)
}

type PerDetector = BTreeMap<String, BTreeMap<String, f64>>;

fn collect(rows: &[ReportRow], variant: Variant, metric: impl Fn(&ReportRow) -> f64) -> PerDetector {
    let mut out: PerDetector = BTreeMap::new();
    for r in rows.iter().filter(|r| r.variant == variant) {
        out.entry(r.detector.name().to_string())
            .or_default()
            .insert(r.image_id.clone(), metric(r));
    }
    out
}

fn summarize(rows: &[ReportRow], cfg: &ExperimentConfig, images: usize) -> Result<Summary> {
    let mut variants = BTreeMap::new();
    for &v in &cfg.variants {
        let quality: BTreeMap<&str, (f64, f64)> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| (r.image_id.as_str(), (r.psnr, r.ssim)))
            .collect();
        let n = quality.len().max(1) as f64;
        let deltas = |m: fn(&ReportRow) -> f64| delta_report(&collect(rows, Variant::Orig, m), &collect(rows, v, m));
        variants.insert(
            v,
            VariantSummary {
                psnr: quality.values().map(|q| q.0).sum::<f64>() / n,
                ssim: quality.values().map(|q| q.1).sum::<f64>() / n,
                iou: deltas(|r| r.iou)?,
                mcc: deltas(|r| r.mcc)?,
                f1: deltas(|r| r.f1)?,
            },
        );
    }
    Ok(Summary {
        images,
        confusion_convention: CONFUSION_CONVENTION.to_string(),
        config: cfg.clone(),
        variants,
    })
}

fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format {
        kind: "csv",
        detail: format!("{}: {e}", path.display()),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs every configured variant and detector over the dataset and writes
/// `report.csv` and `summary.json` into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let manifest = read_manifest(&cfg.dataset)?;
    let model = load_model(cfg)?;
    if cfg.save_images {
        create_dir(&cfg.out.join("images"))?;
    }
    if let Some(m) = &model {
        cfg.purify_config(false).validate(&m.schedule)?;
    }
    let per_image = thread_pool(cfg.jobs)?.install(|| {
        manifest
            .images
            .par_iter()
            .map(|e| process_image(&cfg.dataset, e, cfg, model.as_ref()))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<ReportRow> = per_image.into_iter().flatten().collect();
    let summary = summarize(&rows, cfg, manifest.images.len())?;
    create_dir(&cfg.out)?;
    write_report(&cfg.out.join(REPORT_CSV), &rows)?;
    write_json(&cfg.out.join(SUMMARY_JSON), &summary)?;
    Ok(ExperimentReport { rows, summary })
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub detector: Detector,
    pub delta_mcc: f64,
    pub delta_iou: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Runs one experiment per sweep value and writes `sweep.csv`.
///
/// A `t_star` sweep compares `orig` with Diff-CF (Diff-CFG when `guided` is
/// set); a `scale` sweep always uses Diff-CFG. Each value's full report goes
/// to `<out>/<param>_<value>/`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let axis = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::param("no sweep axis configured"))?;
    if axis.values.is_empty() {
        return Err(Error::param("sweep needs at least one value"));
    }
    let variant = match axis.param {
        SweepParam::Scale => Variant::DiffCfg,
        SweepParam::TStar if cfg.guided => Variant::DiffCfg,
        SweepParam::TStar => Variant::DiffCf,
    };
    let mut rows = Vec::new();
    for &value in &axis.values {
        let mut sub = cfg.clone();
        sub.sweep = None;
        sub.variants = vec![Variant::Orig, variant];
        match axis.param {
            SweepParam::TStar => {
                if !(value >= 0.0 && value.fract() == 0.0) {
                    return Err(Error::param(format!("t_star sweep value {value} is not a whole number")));
                }
                sub.t_star = value as usize;
            }
            SweepParam::Scale => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(Error::param(format!("scale sweep value {value} must be finite and >= 0")));
                }
                sub.scale = value;
            }
        }
        sub.out = cfg.out.join(format!("{}_{}", axis.param.name(), format_value(value)));
        log::info!("sweep {} = {value}", axis.param.name());
        let report = run_experiment(&sub)?;
        let s = &report.summary.variants[&variant];
        for d in &cfg.detectors {
            rows.push(SweepRow {
                param: axis.param.name().to_string(),
                value,
                detector: *d,
                delta_mcc: s.mcc.delta[d.name()],
                delta_iou: s.iou.delta[d.name()],
                psnr: s.psnr,
                ssim: s.ssim,
            });
        }
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join(SWEEP_CSV);
    let csv_err = |e: csv::Error| Error::Format {
        kind: "csv",
        detail: format!("{}: {e}", path.display()),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_recipe() -> DatasetRecipe {
        DatasetRecipe {
            count: 3,
            size: 64,
            region: 16,
            ..DatasetRecipe::default()
        }
    }

    fn no_model_config(dir: &Path, out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: dir.to_path_buf(),
            out: out.to_path_buf(),
            variants: vec![Variant::Orig, Variant::Median],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let m = generate_dataset(tmp.path(), 5, &small_recipe(), 2).unwrap();
        assert_eq!(m.images.len(), 3);
        assert_eq!(read_manifest(tmp.path()).unwrap(), m);
        let direct = forged_sample::<Real>(5, 1, &small_recipe()).unwrap();
        let loaded: Image = read_image(&tmp.path().join("001_forged.png")).unwrap();
        assert_eq!(loaded, direct.forged);
        assert_eq!(read_mask(&tmp.path().join("001_mask.png")).unwrap(), direct.mask);
        assert_eq!(load_clean_images(tmp.path()).unwrap().len(), 3);
    }

    #[test]
    fn report_layout_and_orig_deltas() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate_dataset(&data, 1, &small_recipe(), 1).unwrap();
        let cfg = no_model_config(&data, &tmp.path().join("out"));
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3 * 3 * 2);
        let orig = &r.summary.variants[&Variant::Orig];
        assert_eq!(orig.mcc.avg_w, 0.0);
        assert!(orig.mcc.delta.values().all(|&d| d == 0.0));
        assert_eq!(orig.psnr, 80.0);
        let text = fs::read_to_string(tmp.path().join("out").join(REPORT_CSV)).unwrap();
        assert!(text.starts_with("image_id,detector,variant,iou,mcc,f1,psnr,ssim\n"));
        assert_eq!(text.lines().count(), 1 + 18);
        let summary: Summary = read_json(&tmp.path().join("out").join(SUMMARY_JSON)).unwrap();
        assert_eq!(summary.images, 3);
    }

    #[test]
    fn job_count_does_not_change_report() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate_dataset(&data, 2, &small_recipe(), 1).unwrap();
        let mut cfg = no_model_config(&data, &tmp.path().join("a"));
        run_experiment(&cfg).unwrap();
        cfg.out = tmp.path().join("b");
        cfg.jobs = 3;
        run_experiment(&cfg).unwrap();
        let a = fs::read(tmp.path().join("a").join(REPORT_CSV)).unwrap();
        let b = fs::read(tmp.path().join("b").join(REPORT_CSV)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn configuration_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate_dataset(&data, 2, &small_recipe(), 1).unwrap();
        let mut cfg = no_model_config(&data, &tmp.path().join("o"));
        cfg.variants = vec![Variant::Orig, Variant::DiffCf];
        assert!(matches!(run_experiment(&cfg), Err(Error::Parameter(_))));
        cfg.variants = vec![Variant::Median];
        assert!(run_experiment(&cfg).is_err());
        cfg.variants = vec![Variant::Orig];
        cfg.dataset = tmp.path().join("missing");
        assert!(matches!(run_experiment(&cfg), Err(Error::Io { .. })));
        assert!(run_sweep(&no_model_config(&data, tmp.path())).is_err());
    }

    #[test]
    fn corrupt_image_is_tagged() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate_dataset(&data, 2, &small_recipe(), 1).unwrap();
        fs::write(data.join("002_forged.png"), b"not a png").unwrap();
        let err = run_experiment(&no_model_config(&data, &tmp.path().join("o"))).unwrap_err();
        match err {
            Error::Stage { image, stage, .. } => assert_eq!((image.as_str(), stage), ("002", "load")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("x".parse::<Variant>().is_err());
        assert_eq!("t_star".parse::<SweepParam>().unwrap(), SweepParam::TStar);
    }
}
