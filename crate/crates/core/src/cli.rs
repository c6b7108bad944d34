//! The `obbtext` command line.
//!
//! Every option can also be set through an `OBBTEXT_*` environment variable
//! (e.g. `OBBTEXT_SEED`, `OBBTEXT_IOU_THR`); explicit flags win.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::codec::{self, CategorySet, ParseWarning, ResponseDoc};
use crate::dataset::{self, ImageSizeSource, MergeStrategy};
use crate::formats;
use crate::metrics::{self, EvalConfig, Interpolation};
use crate::render;
use crate::report::{self, EvalDocument};

#[derive(Debug, Parser)]
#[command(
    name = "obbtext",
    version,
    about = "Oriented-box text codec and confidence-free detection metrics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serialize ground-truth annotations into `image_id<TAB>response` lines.
    Encode(EncodeArgs),
    /// Parse model responses back into a detections file.
    Decode(DecodeArgs),
    /// Score predictions against ground truth (mAP_nc, mF1, optional sweep).
    Eval(EvalArgs),
    /// Merge annotation directories into one corpus manifest.
    Merge(MergeArgs),
    /// Draw detections as SVG overlays, one file per image.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl std::str::FromStr for ImageSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got {s:?}"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| format!("invalid dimension {v:?} in {s:?}"))
        };
        Ok(Self {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

#[derive(Debug, Args)]
pub struct SizeArgs {
    /// Fixed image size for every image.
    #[arg(
        long,
        value_name = "WxH",
        env = "OBBTEXT_IMAGE_SIZE",
        default_value = "1024x1024",
        conflicts_with = "sizes"
    )]
    pub image_size: ImageSize,
    /// JSON sidecar `{"image_id": [width, height], ...}`.
    #[arg(long, value_name = "FILE", env = "OBBTEXT_SIZES")]
    pub sizes: Option<PathBuf>,
}

impl SizeArgs {
    fn source(&self) -> Result<ImageSizeSource> {
        Ok(match &self.sizes {
            Some(path) => ImageSizeSource::from_sidecar(path)?,
            None => ImageSizeSource::Fixed {
                width: self.image_size.width,
                height: self.image_size.height,
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Directory of DOTA-style `<image_id>.txt` annotation files.
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Category names, one per line.
    #[arg(long, env = "OBBTEXT_CATEGORIES")]
    pub categories: PathBuf,
    #[command(flatten)]
    pub size: SizeArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// `image_id<TAB>response` lines.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long, env = "OBBTEXT_CATEGORIES")]
    pub categories: PathBuf,
    #[command(flatten)]
    pub size: SizeArgs,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Warning report; defaults to `<out>.warnings.json`.
    #[arg(long)]
    pub warnings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Voc11,
    Allpoints,
}

impl From<InterpArg> for Interpolation {
    fn from(v: InterpArg) -> Self {
        match v {
            InterpArg::Voc11 => Interpolation::Voc11,
            InterpArg::Allpoints => Interpolation::AllPoints,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections file to score.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of DOTA-style `<image_id>.txt` annotation files.
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long, env = "OBBTEXT_CATEGORIES")]
    pub categories: PathBuf,
    #[command(flatten)]
    pub size: SizeArgs,
    /// Minimum IoU for a prediction to count as a match.
    #[arg(long, env = "OBBTEXT_IOU_THR", default_value_t = 0.5)]
    pub iou_thr: f64,
    /// Precision interpolation for AP.
    #[arg(long, value_enum, env = "OBBTEXT_INTERP", default_value = "voc11")]
    pub interp: InterpArg,
    /// Number of random-confidence runs.
    #[arg(long, env = "OBBTEXT_RUNS", default_value_t = 10)]
    pub runs: usize,
    /// Random run `i` is seeded with `seed + i`.
    #[arg(long, env = "OBBTEXT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Confidence used by the constant run.
    #[arg(long, env = "OBBTEXT_CONSTANT", default_value_t = 1.0)]
    pub constant: f64,
    /// Also sweep confidence thresholds (needs scored predictions).
    #[arg(long, env = "OBBTEXT_SWEEP")]
    pub sweep: bool,
    /// Comma-separated sweep thresholds; default 0.05..0.95 step 0.05.
    #[arg(long, value_delimiter = ',', requires = "sweep")]
    pub sweep_grid: Option<Vec<f64>>,
    /// Evaluate on a single thread.
    #[arg(long)]
    pub serial: bool,
    /// JSON report; stdout when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Per-class CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Sweep curve CSV.
    #[arg(long, requires = "sweep")]
    pub sweep_csv: Option<PathBuf>,
}

impl EvalArgs {
    pub fn config(&self) -> Result<EvalConfig> {
        let config = EvalConfig {
            iou_threshold: self.iou_thr,
            interpolation: self.interp.into(),
            n_random_runs: self.runs,
            base_seed: self.seed,
            constant_value: self.constant,
            sweep_grid: self.sweep_grid.clone().unwrap_or_else(metrics::default_sweep_grid),
            parallel: !self.serial,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Concat,
    Balanced,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Annotation directories; each directory name becomes the corpus name.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long, env = "OBBTEXT_CATEGORIES")]
    pub categories: PathBuf,
    #[arg(long, value_enum, env = "OBBTEXT_STRATEGY", default_value = "concat")]
    pub strategy: StrategyArg,
    /// Explicit repetition factors for the balanced strategy, one per directory.
    #[arg(long, value_delimiter = ',')]
    pub factors: Option<Vec<usize>>,
    #[command(flatten)]
    pub size: SizeArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub detections: PathBuf,
    /// Fixes the color of each category by its position in this file.
    #[arg(long, env = "OBBTEXT_CATEGORIES")]
    pub categories: Option<PathBuf>,
    #[command(flatten)]
    pub size: SizeArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_categories(path: &Path) -> Result<CategorySet> {
    CategorySet::from_lines(&read(path)?).with_context(|| format!("in {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode(a) => cmd_encode(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Render(a) => cmd_render(&a),
    }
}

pub fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let categories = load_categories(&args.categories)?;
    let corpus = dataset::load_dota(&args.gt_dir, &categories, &args.size.source()?)?;
    let mut out = String::new();
    for sample in &corpus.samples {
        let doc = codec::serialize(&sample.gts, &categories, sample.image_width, sample.image_height)
            .with_context(|| format!("encoding {}", sample.image_id))?;
        out.push_str(&formats::format_response_line(&sample.image_id, &doc.text));
        out.push('\n');
    }
    write(&args.out, &out)
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let categories = load_categories(&args.categories)?;
    let sizes = args.size.source()?;
    let responses = formats::parse_responses(&read(&args.responses)?)
        .with_context(|| format!("in {}", args.responses.display()))?;

    let mut images = Vec::with_capacity(responses.len());
    let mut detections = Vec::new();
    let mut warnings: BTreeMap<String, Vec<ParseWarning>> = BTreeMap::new();
    for (image_id, text) in responses {
        let (w, h) = sizes.size_of(&image_id)?;
        let report = codec::parse(&ResponseDoc::new(text, w, h), &categories);
        detections.extend(report.detections.into_iter().map(|mut d| {
            d.image_id = image_id.clone();
            d
        }));
        if !report.warnings.is_empty() {
            warnings.entry(image_id.clone()).or_default().extend(report.warnings);
        }
        images.push(image_id);
    }
    write(&args.out, &formats::write_detections(&images, &detections))?;

    let n_warnings: usize = warnings.values().map(Vec::len).sum();
    let warn_path = args.warnings.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".warnings.json");
        PathBuf::from(p)
    });
    write(&warn_path, &(serde_json::to_string_pretty(&warnings)? + "\n"))?;
    eprintln!(
        "decoded {} detections from {} responses ({} warnings, see {})",
        detections.len(),
        images.len(),
        n_warnings,
        warn_path.display()
    );
    Ok(())
}

/// Runs the evaluation behind `obbtext eval` and returns the report document.
pub fn eval_document(args: &EvalArgs) -> Result<EvalDocument> {
    let config = args.config()?;
    let categories = load_categories(&args.categories)?;
    let corpus = dataset::load_dota(&args.gt_dir, &categories, &args.size.source()?)?;
    let preds = formats::parse_detections(&read(&args.pred)?).with_context(|| format!("in {}", args.pred.display()))?;

    if args.sweep && !preds.all_scored() {
        bail!(
            "--sweep needs a confidence on every prediction; {} has unscored detections",
            args.pred.display()
        );
    }
    let known: std::collections::HashSet<&str> = corpus.samples.iter().map(|s| s.image_id.as_str()).collect();
    let unknown: Vec<&str> = preds
        .images
        .iter()
        .map(String::as_str)
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        bail!("predictions reference unknown image ids: {}", unknown.join(", "));
    }

    let predictions: Vec<_> = preds
        .detections
        .into_iter()
        .map(|mut d| {
            if let Some(name) = categories.resolve(&d.category) {
                d.category = name.to_string();
            }
            d
        })
        .collect();
    let gts = corpus.ground_truths();
    let eval = metrics::Evaluation::new(&predictions, &gts, config.iou_threshold, config.parallel);
    let metrics = metrics::MetricsReport::from_parts(eval.map_nc(&config), eval.f1_scores(config.parallel));
    let sweep = if args.sweep { Some(eval.sweep(&config)?) } else { None };
    Ok(EvalDocument { config, metrics, sweep })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let doc = eval_document(args)?;
    let json = doc.to_json();
    match &args.out {
        Some(path) => write(path, &json)?,
        None => print!("{json}"),
    }
    if let Some(path) = &args.csv {
        write(path, &report::class_csv(&doc.metrics))?;
    }
    if let (Some(path), Some(sweep)) = (&args.sweep_csv, &doc.sweep) {
        write(path, &report::sweep_csv(sweep))?;
    }
    eprintln!(
        "mAP_nc {:.4} ± {:.4}  mF1 {:.4}",
        doc.metrics.map_nc_mean, doc.metrics.map_nc_std, doc.metrics.mf1
    );
    Ok(())
}

pub fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let categories = load_categories(&args.categories)?;
    let sizes = args.size.source()?;
    let corpora = args
        .dirs
        .iter()
        .map(|d| dataset::load_dota(d, &categories, &sizes))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let strategy = match args.strategy {
        StrategyArg::Concat => MergeStrategy::Concat,
        StrategyArg::Balanced => MergeStrategy::Balanced,
    };
    let (_, manifest) = dataset::merge(&corpora, strategy, args.factors.as_deref())?;
    write(&args.out, &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let file = formats::parse_detections(&read(&args.detections)?)
        .with_context(|| format!("in {}", args.detections.display()))?;
    let palette_order: Vec<String> = match &args.categories {
        Some(p) => load_categories(p)?.names().to_vec(),
        None => {
            let mut names: Vec<String> = file.detections.iter().map(|d| d.category.clone()).collect();
            names.sort();
            names.dedup();
            names
        }
    };
    let sizes = args.size.source()?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for image in &file.images {
        let (w, h) = sizes.size_of(image)?;
        let dets: Vec<_> = file.for_image(image).collect();
        let svg = render::render_svg(&dets, w, h, &palette_order);
        write(&args.out_dir.join(format!("{}.svg", image.replace('/', "_"))), &svg)?;
    }
    Ok(())
}
