use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use domainpore::dataprep::{
    labelled_samples, samples_from_entries, save_image, synth_domain_pair, write_pores, DatasetEntry,
    DatasetManifest, LoadedEntry, Origin, SynthConfig,
};
use domainpore::detector::{self, MaximaOptions};
use domainpore::evalkit::{self, Counts, DetectionReport, ScoredImage};
use domainpore::fsutil::atomic_write;
use domainpore::porenet::{load_checkpoint, save_checkpoint, DomainHeadConfig, PoreNet, ResPoreConfig};
use domainpore::trainer::{self, FinetuneConfig, IterationLog, TrainConfig, LOG_HEADER};
use domainpore::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::Common;

fn prepare(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "threads".into(),
                reason: "must be at least 1".into(),
            });
        }
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&common.out).map_err(|e| Error::Io {
        path: common.out.clone(),
        source: e,
    })
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config {
        field: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn resolved<T: Serialize>(common: &Common, run: &T) -> Result<()> {
    write_json(&common.out.join("resolved_config.json"), run)
}

fn load_manifest(path: &Path, domain: Option<Origin>) -> Result<Vec<LoadedEntry>> {
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.load_entries(base, domain)
}

fn report_progress(log: &IterationLog) {
    if log.iter % 10 == 0 {
        eprintln!(
            "iter {:>6} epoch {:>3}  L_pore {:.6}  L_d_src {:.4}  L_d_tgt {:.4}  E {:.6}",
            log.iter, log.epoch, log.l_pore, log.l_d_src, log.l_d_tgt, log.e
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainArg {
    Source,
    Target,
    All,
}

impl DomainArg {
    fn origin(self) -> Option<Origin> {
        match self {
            DomainArg::Source => Some(Origin::Source),
            DomainArg::Target => Some(Origin::Target),
            DomainArg::All => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormatArg {
    Png,
    Pgm,
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Images per domain (overrides both configs).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<ImageFormatArg>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub seed: u64,
    pub format: ImageFormatArg,
    pub source: SynthConfig,
    pub target: SynthConfig,
}

impl Default for SynthRun {
    fn default() -> Self {
        SynthRun {
            seed: 0,
            format: ImageFormatArg::Png,
            source: SynthConfig::source(),
            target: SynthConfig::target(),
        }
    }
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let common = &args.common;
    let mut run: SynthRun = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(c) = args.count {
        run.source.count = c;
        run.target.count = c;
    }
    if let Some(f) = args.format {
        run.format = f;
    }
    run.source.validate()?;
    run.target.validate()?;
    prepare(common)?;
    resolved(common, &run)?;

    let (src, tgt) = synth_domain_pair(&run.source, &run.target, run.seed)?;
    let ext = match run.format {
        ImageFormatArg::Png => "png",
        ImageFormatArg::Pgm => "pgm",
    };
    let mut manifest = DatasetManifest::default();
    for (dir, prefix, origin, images) in [
        ("source", "src", Origin::Source, &src),
        ("target", "tgt", Origin::Target, &tgt),
    ] {
        for (i, im) in images.iter().enumerate() {
            let image = PathBuf::from(dir).join(format!("{prefix}_{i:03}.{ext}"));
            let pores = PathBuf::from(dir).join(format!("{prefix}_{i:03}.pores"));
            save_image(&im.pixels, &common.out.join(&image))?;
            write_pores(&im.pores, &common.out.join(&pores))?;
            manifest.entries.push(DatasetEntry {
                image,
                pores: Some(pores),
                domain: origin,
            });
        }
    }
    manifest.save(&common.out.join("manifest.json"))?;
    let count = |v: &[domainpore::dataprep::SynthImage]| v.iter().map(|i| i.pores.len()).sum::<usize>();
    write_json(
        &common.out.join("summary.json"),
        &json!({
            "command": "synth",
            "manifest": "manifest.json",
            "source_images": src.len(),
            "target_images": tgt.len(),
            "source_pores": count(&src),
            "target_pores": count(&tgt),
        }),
    )
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset manifest (source entries need pore files).
    #[arg(long)]
    manifest: PathBuf,
    /// Domain adaptation factor.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Channel width multiplier, e.g. `1/8`.
    #[arg(long)]
    width: Option<String>,
    /// Residual blocks per stage.
    #[arg(long)]
    blocks: Option<usize>,
    /// Stride of the overlapping training-patch grid.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub network: ResPoreConfig,
    /// Defaults to the standard head sized for the network's pore map.
    pub head: Option<DomainHeadConfig>,
    pub train: TrainConfig,
    pub patch_step: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            network: ResPoreConfig::default(),
            head: None,
            train: TrainConfig::default(),
            patch_step: 10,
        }
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let common = &args.common;
    let mut run: TrainRun = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        run.train.seed = s;
    }
    if let Some(v) = args.lambda {
        run.train.lambda = v;
    }
    if let Some(v) = args.lr {
        run.train.learning_rate = v;
    }
    if let Some(v) = args.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = &args.width {
        run.network.width_multiplier = v.parse()?;
    }
    if let Some(v) = args.blocks {
        run.network.blocks_per_stage = v;
    }
    if let Some(v) = args.step {
        run.patch_step = v;
    }
    if let Some(v) = args.checkpoint_every {
        run.train.checkpoint_every = v;
    }
    let head = run.head.clone().unwrap_or_else(|| DomainHeadConfig::for_map(&run.network));
    run.head = Some(head.clone());
    run.train.validate()?;
    let net = PoreNet::<f32>::build(run.network.clone(), head, run.train.seed)?;
    prepare(common)?;
    resolved(common, &run)?;

    let entries = load_manifest(&args.manifest, None)?;
    let size = run.network.input_size;
    let source = samples_from_entries(&entries, Origin::Source, size, run.patch_step)?;
    let target = samples_from_entries(&entries, Origin::Target, size, run.patch_step)?;
    eprintln!("training on {} source and {} target patches", source.len(), target.len());
    let outcome = trainer::train(net, &source, &target, &run.train, Some(&common.out), report_progress)?;
    let last = outcome.logs.last();
    write_json(
        &common.out.join("summary.json"),
        &json!({
            "command": "train",
            "checkpoint": "model.ckpt",
            "log": "train_log.csv",
            "source_patches": source.len(),
            "target_patches": target.len(),
            "iterations": outcome.logs.len(),
            "final_l_pore": last.map(|l| l.l_pore),
            "final_l_d_src": last.map(|l| l.l_d_src),
            "final_l_d_tgt": last.map(|l| l.l_d_tgt),
        }),
    )
}

// ---------------------------------------------------------------- finetune

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose selected entries supply labelled patches.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneRun {
    pub finetune: FinetuneConfig,
    pub patch_step: usize,
    pub domain: DomainArg,
}

impl Default for FinetuneRun {
    fn default() -> Self {
        FinetuneRun {
            finetune: FinetuneConfig::default(),
            patch_step: 10,
            domain: DomainArg::Target,
        }
    }
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let common = &args.common;
    let mut run: FinetuneRun = read_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        run.finetune.seed = s;
    }
    if let Some(v) = args.domain {
        run.domain = v;
    }
    if let Some(v) = args.epochs {
        run.finetune.epochs = v;
    }
    if let Some(v) = args.lr {
        run.finetune.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        run.finetune.batch_size = v;
    }
    if let Some(v) = args.step {
        run.patch_step = v;
    }
    prepare(common)?;
    resolved(common, &run)?;

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let entries = load_manifest(&args.manifest, run.domain.origin())?;
    let samples = labelled_samples(&entries, ckpt.net.arch.pore.input_size, run.patch_step)?;
    eprintln!("fine-tuning the output layer on {} patches", samples.len());
    let outcome = trainer::finetune_last_layer(&ckpt, &samples, &run.finetune, report_progress)?;
    let mut csv = format!("{LOG_HEADER}\n");
    for l in &outcome.logs {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    atomic_write(&common.out.join("finetune_log.csv"), csv.as_bytes())?;
    save_checkpoint(&outcome.checkpoint, &common.out.join("model.ckpt"))?;
    write_json(
        &common.out.join("summary.json"),
        &json!({
            "command": "finetune",
            "checkpoint": "model.ckpt",
            "patches": samples.len(),
            "iterations": outcome.logs.len(),
            "final_l_pore": outcome.logs.last().map(|l| l.l_pore),
        }),
    )
}

// ---------------------------------------------------------------- detect

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images to process (repeatable).
    #[arg(long, required_unless_present = "manifest")]
    image: Vec<PathBuf>,
    /// Process every image of a manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pore threshold th_p.
    #[arg(long)]
    th: Option<f32>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    dedup_plateaus: bool,
    /// Also write each pore map as a 16-bit PGM.
    #[arg(long)]
    dump_map: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectRun {
    pub th: f32,
    pub maxima: MaximaOptions,
    pub dump_map: bool,
}

impl Default for DetectRun {
    fn default() -> Self {
        DetectRun {
            th: 0.5,
            maxima: MaximaOptions::default(),
            dump_map: false,
        }
    }
}

pub fn detect(args: DetectArgs) -> Result<()> {
    let common = &args.common;
    let mut run: DetectRun = read_config(common.config.as_deref())?;
    if let Some(v) = args.th {
        run.th = v;
    }
    if let Some(v) = args.window {
        run.maxima.window = v;
    }
    run.maxima.dedup_plateaus |= args.dedup_plateaus;
    run.dump_map |= args.dump_map;
    prepare(common)?;
    resolved(common, &run)?;

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut images = Vec::new();
    for p in &args.image {
        images.push(domainpore::dataprep::load_image(p)?);
    }
    if let Some(m) = &args.manifest {
        images.extend(load_manifest(m, None)?.into_iter().map(|e| e.image));
    }
    let mut per_image = Vec::new();
    for img in &images {
        let found = detector::detect(&ckpt.net, &img.pixels, run.th, run.maxima)?;
        let pores = detector::coordinates(&found.pores);
        write_pores(&pores, &common.out.join(format!("{}.pores", img.id)))?;
        let scale = if run.dump_map {
            Some(detector::write_pgm16(&found.map, &common.out.join(format!("{}_map.pgm", img.id)))?)
        } else {
            None
        };
        per_image.push(json!({ "id": img.id, "pores": pores.len(), "map_scale": scale }));
    }
    write_json(
        &common.out.join("summary.json"),
        &json!({ "command": "detect", "th": run.th, "images": per_image }),
    )
}

// ---------------------------------------------------------------- eval / roc

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest with ground-truth pore files.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    #[arg(long)]
    th: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    dedup_plateaus: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub th: f64,
    pub maxima: MaximaOptions,
    pub domain: DomainArg,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            th: 0.5,
            maxima: MaximaOptions::default(),
            domain: DomainArg::Target,
        }
    }
}

struct Scored {
    ids: Vec<String>,
    gts: Vec<Vec<domainpore::dataprep::Pore>>,
    candidates: Vec<Vec<detector::Detection>>,
}

impl Scored {
    fn views(&self) -> Vec<ScoredImage<'_>> {
        self.candidates
            .iter()
            .zip(&self.gts)
            .map(|(c, g)| ScoredImage { candidates: c, gt: g })
            .collect()
    }
}

fn score(checkpoint: &Path, manifest: &Path, domain: DomainArg, opts: MaximaOptions) -> Result<Scored> {
    let ckpt = load_checkpoint(checkpoint)?;
    let entries = load_manifest(manifest, domain.origin())?;
    if entries.is_empty() {
        return Err(Error::Empty("evaluation image set"));
    }
    let mut gts = Vec::new();
    for e in &entries {
        gts.push(e.pores.clone().ok_or_else(|| Error::Config {
            field: "manifest".into(),
            reason: format!("image {} has no pore file", e.image.id),
        })?);
    }
    let images: Vec<_> = entries.iter().map(|e| &e.image.pixels).collect();
    let candidates = evalkit::score_images(&ckpt.net, &images, opts)?;
    Ok(Scored {
        ids: entries.iter().map(|e| e.image.id.clone()).collect(),
        gts,
        candidates,
    })
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let common = &args.common;
    let mut run: EvalRun = read_config(common.config.as_deref())?;
    if let Some(v) = args.th {
        run.th = v;
    }
    if let Some(v) = args.domain {
        run.domain = v;
    }
    if let Some(v) = args.window {
        run.maxima.window = v;
    }
    run.maxima.dedup_plateaus |= args.dedup_plateaus;
    prepare(common)?;
    resolved(common, &run)?;

    let scored = score(&args.checkpoint, &args.manifest, run.domain, run.maxima)?;
    let per_image: Vec<Counts> = scored.views().iter().map(|v| evalkit::counts_at(v, run.th)).collect();
    let report = DetectionReport::from_image_counts(&per_image, Some(run.th));
    let curve = evalkit::roc_sweep(&scored.views(), &[run.th])?;
    curve.write_csv(&common.out.join("report.csv"))?;
    let images: Vec<_> = scored
        .ids
        .iter()
        .zip(&per_image)
        .map(|(id, c)| json!({ "id": id, "counts": c, "rates": evalkit::Rates::from_counts(*c) }))
        .collect();
    write_json(&common.out.join("report.json"), &json!({ "report": report, "images": images }))?;
    write_json(
        &common.out.join("summary.json"),
        &json!({
            "command": "eval",
            "th": run.th,
            "r_t": report.micro.r_t,
            "r_f": report.micro.r_f,
            "f_score": report.micro.f_score,
            "f_score_macro": report.macro_.f_score,
        }),
    )
}

#[derive(Args, Debug)]
pub struct RocArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
    /// Threshold grid `start:end:step`.
    #[arg(long)]
    grid: Option<String>,
    /// R_F at which to report the operating point.
    #[arg(long)]
    target_rf: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    dedup_plateaus: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RocRun {
    pub grid: String,
    pub target_rf: f64,
    pub maxima: MaximaOptions,
    pub domain: DomainArg,
}

impl Default for RocRun {
    fn default() -> Self {
        RocRun {
            grid: "0.01:0.99:0.01".into(),
            target_rf: 0.19,
            maxima: MaximaOptions::default(),
            domain: DomainArg::Target,
        }
    }
}

pub fn roc(args: RocArgs) -> Result<()> {
    let common = &args.common;
    let mut run: RocRun = read_config(common.config.as_deref())?;
    if let Some(v) = args.grid {
        run.grid = v;
    }
    if let Some(v) = args.target_rf {
        run.target_rf = v;
    }
    if let Some(v) = args.domain {
        run.domain = v;
    }
    if let Some(v) = args.window {
        run.maxima.window = v;
    }
    run.maxima.dedup_plateaus |= args.dedup_plateaus;
    let grid = evalkit::parse_grid(&run.grid)?;
    prepare(common)?;
    resolved(common, &run)?;

    let scored = score(&args.checkpoint, &args.manifest, run.domain, run.maxima)?;
    let curve = evalkit::roc_sweep(&scored.views(), &grid)?;
    let op = evalkit::operating_point(&curve, run.target_rf)?;
    if op.out_of_range {
        eprintln!(
            "warning: R_F {} is outside the curve; nearest endpoint used (th_p {})",
            run.target_rf, op.th_p
        );
    }
    curve.write_csv(&common.out.join("roc.csv"))?;
    write_json(&common.out.join("roc.json"), &json!({ "curve": curve, "operating_point": op }))?;
    write_json(
        &common.out.join("summary.json"),
        &json!({ "command": "roc", "points": curve.points.len(), "operating_point": op }),
    )
}
