//! Subcommand implementations behind the `meltpool` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use meltpool_core::eval::predict_overlay;
use meltpool_core::geometry::{analyze_masks, StatsConfig, StatsReport};
use meltpool_core::imaging::{decode_overlay_lenient, downscale, encode_overlay, tile_image, to_model_range};
use meltpool_core::seed::{apply_corrections, merge_binary_into, seed_annotation, seed_binary, CorrectionConfig, SeedConfig};
use meltpool_core::synth::{generate_scene, SceneSpec};
use meltpool_core::workflow::{upscale_mask, AdvanceOptions, AnnotationStatus, Provenance, WorkflowConfig, Workspace};
use meltpool_core::{AnnotationMask, BinaryMask, ClassPalette, CorrectionPoint, NetworkCheckpoint, RawImage};
use serde::Serialize;

use crate::server::{router, AppState, PointInput};

#[derive(Debug, Parser)]
#[command(name = "meltpool", version, about = "Melt-pool segmentation workflow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Cut an image into a grid of square tiles.
    Preprocess(PreprocessArgs),
    /// Classical threshold segmentation, optionally corrected by points.
    Seed(SeedArgs),
    /// Create an empty workspace.
    Init(InitArgs),
    /// Add an image (and optionally its annotation) to a workspace.
    AddImage(AddImageArgs),
    /// Fix the validation split and train the first model.
    Train(WorkspaceArgs),
    /// Run a checkpoint on one image.
    Predict(PredictArgs),
    /// Rank the stored checkpoints on the validation tiles.
    Evaluate(WorkspaceArgs),
    /// Predict, review and retrain on a batch of images.
    Iterate(IterateArgs),
    /// Pool geometry statistics for an iteration or a set of masks.
    Stats(StatsArgs),
    /// Serve the HTTP API and the annotation UI bundle.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct WorkspaceArgs {
    #[arg(long, short)]
    pub workspace: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// JSON scene spec; the seed is overridden per scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    #[arg(long, default_value_t = 4)]
    pub rows: usize,
    #[arg(long, default_value_t = 8)]
    pub cols: usize,
    /// Box-filter factor applied to every tile.
    #[arg(long, default_value_t = 1)]
    pub downscale: usize,
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Class-label PNG output.
    #[arg(long)]
    pub out: PathBuf,
    /// Colored overlay PNG output.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// JSON list of `{kind, x, y}` correction points.
    #[arg(long)]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, short)]
    pub workspace: PathBuf,
    /// JSON workflow configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AddImageArgs {
    #[arg(long, short)]
    pub workspace: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value_t = 1)]
    pub rows: usize,
    #[arg(long, default_value_t = 1)]
    pub cols: usize,
    /// Full-image class-label PNG; its crops are stored as approved annotations.
    #[arg(long, conflicts_with = "seed")]
    pub mask: Option<PathBuf>,
    /// Store classical seed annotations for the new tiles.
    #[arg(long)]
    pub seed: bool,
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Colored overlay PNG output.
    #[arg(long)]
    pub out: PathBuf,
    /// Class-label PNG output at input resolution.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    #[arg(long, short)]
    pub workspace: PathBuf,
    /// Image ids of the new batch.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub batch: Vec<String>,
    #[arg(long)]
    pub auto_approve: bool,
    /// Seconds to wait for review before suspending.
    #[arg(long, default_value_t = 3600.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 500)]
    pub poll_ms: u64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, short, required_unless_present = "mask")]
    pub workspace: Option<PathBuf>,
    #[arg(long, requires = "workspace")]
    pub iteration: Option<usize>,
    /// Class-label PNGs analyzed directly instead of a workspace iteration.
    #[arg(long, num_args = 1..)]
    pub mask: Vec<PathBuf>,
    /// Writes report.json, pools.csv and histograms.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub workspace: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory with the built annotation UI.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Seed(a) => seed(a),
        Command::Init(a) => {
            let cfg = match &a.config {
                Some(p) => read_json(p)?,
                None => WorkflowConfig::default(),
            };
            Workspace::create(&a.workspace, cfg)?;
            println!("created workspace {}", a.workspace.display());
            Ok(())
        }
        Command::AddImage(a) => add_image(a),
        Command::Train(a) => {
            let mut ws = Workspace::open(&a.workspace)?;
            print_json(&ws.bootstrap()?)
        }
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => {
            let ws = Workspace::open(&a.workspace)?;
            print_json(&ws.rank_stored_checkpoints()?)
        }
        Command::Iterate(a) => {
            let mut ws = Workspace::open(&a.workspace)?;
            let opts = AdvanceOptions {
                auto_approve: a.auto_approve,
                timeout: Duration::from_secs_f64(a.timeout.max(0.0)),
                poll_interval: Duration::from_millis(a.poll_ms),
            };
            print_json(&ws.advance_iteration(&a.batch, &opts)?)
        }
        Command::Stats(a) => stats(a),
        Command::Serve(a) => serve(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut base: SceneSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    base.width = a.width.unwrap_or(base.width);
    base.height = a.height.unwrap_or(base.height);
    fs::create_dir_all(&a.out)?;
    for k in 0..a.count {
        let spec = SceneSpec { seed: a.seed + k, ..base.clone() };
        let (img, truth) = generate_scene(&spec)?;
        let stem = a.out.join(format!("scene-{:04}", spec.seed));
        img.save_png(stem.with_extension("png"))?;
        truth.mask.save_png(stem.with_extension("mask.png"))?;
        fs::write(stem.with_extension("truth.json"), serde_json::to_vec_pretty(&truth)?)?;
        println!("{} pools={} defects={}", stem.display(), truth.pools.len(), truth.defects.len());
    }
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let img = RawImage::load_png(&a.input)?;
    let stem = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let tiles = tile_image(&img, &stem, a.tile, (a.rows, a.cols))?;
    fs::create_dir_all(&a.out)?;
    for (k, t) in tiles.iter().enumerate() {
        let out = if a.downscale > 1 { downscale(&t.image, a.downscale)? } else { t.image.clone() };
        out.save_png(a.out.join(format!("{stem}-t{k:02}-r{}-c{}.png", t.origin.0, t.origin.1)))?;
    }
    println!("{} tiles written to {}", tiles.len(), a.out.display());
    Ok(())
}

fn seed(a: SeedArgs) -> Result<()> {
    let img = RawImage::load_png(&a.input)?;
    let cfg = SeedConfig::default();
    let binary = seed_binary(&img, &cfg)?;
    let mut mask = seed_annotation(&img, &binary, &cfg)?;
    if let Some(p) = &a.points {
        let inputs: Vec<PointInput> = read_json(p)?;
        let points: Vec<CorrectionPoint> = inputs.iter().map(|p| CorrectionPoint::new(p.kind, p.x, p.y)).collect();
        let interiors = BinaryMask::interiors_of(&mask);
        let fixed = apply_corrections(&interiors, &points, &CorrectionConfig::default())?;
        println!("regions {} -> {}", interiors.region_count(), fixed.region_count());
        mask = merge_binary_into(&mask, &fixed)?;
    }
    mask.save_png(&a.out)?;
    if let Some(o) = &a.overlay {
        encode_overlay(&mask, &ClassPalette::default()).save_png(o)?;
    }
    Ok(())
}

fn add_image(a: AddImageArgs) -> Result<()> {
    let mut ws = Workspace::open(&a.workspace)?;
    let img = RawImage::load_png(&a.input)?;
    let provenance = if a.synthetic { Provenance::Synthetic } else { Provenance::Raw };
    let tiles = ws.add_image(&a.id, &img, provenance, (a.rows, a.cols))?;
    if let Some(p) = &a.mask {
        let mask = AnnotationMask::load_png(p)?;
        if (mask.width, mask.height) != (img.width(), img.height()) {
            bail!("mask is {}x{}, image is {}x{}", mask.width, mask.height, img.width(), img.height());
        }
        let size = ws.config().tile_size;
        for t in &tiles {
            let (r, c) = ws.manifest().tile(t).expect("just added").origin;
            ws.set_annotation(t, &mask.crop(r, c, size, size)?, AnnotationStatus::Approved)?;
        }
    } else if a.seed {
        for t in &tiles {
            ws.seed_tile(t)?;
        }
    }
    print_json(&tiles)
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = NetworkCheckpoint::load(&a.checkpoint)?;
    let img = RawImage::load_png(&a.input)?;
    let n = ck.params.generator.config.input_size;
    if img.width() != img.height() || img.width() % n != 0 {
        bail!("input must be square with a side that is a multiple of {n}");
    }
    let f = img.width() / n;
    let small = if f > 1 { downscale(&img, f)? } else { img };
    let overlay = predict_overlay(&ck.params, &to_model_range(&small))?;
    let palette = ClassPalette::default();
    let mask = upscale_mask(&decode_overlay_lenient(&overlay, &palette), f);
    encode_overlay(&mask, &palette).save_png(&a.out)?;
    if let Some(m) = &a.mask {
        mask.save_png(m)?;
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let report: StatsReport = if !a.mask.is_empty() {
        let masks = a.mask.iter().map(AnnotationMask::load_png).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&AnnotationMask> = masks.iter().collect();
        analyze_masks(&refs, &StatsConfig { scale: a.scale, ..StatsConfig::default() })?
    } else {
        let mut ws = Workspace::open(a.workspace.as_ref().expect("required by clap"))?;
        let i = match a.iteration {
            Some(i) => i,
            None => ws.manifest().iterations.len().checked_sub(1).context("workspace has no iterations")?,
        };
        ws.run_statistics(i)?
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        report.write_pools_csv(fs::File::create(dir.join("pools.csv"))?)?;
        report.write_histograms_csv(fs::File::create(dir.join("histograms.csv"))?)?;
    }
    print_json(&serde_json::json!({
        "counts": report.counts,
        "area": { "mean": report.area.mean, "std_dev": report.area.std_dev, "skewness": report.area.skewness },
        "aspect": { "mean": report.aspect.mean, "std_dev": report.aspect.std_dev, "skewness": report.aspect.skewness },
    }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let ws = Workspace::open(&a.workspace)?;
    let app = router(AppState::new(ws), a.static_dir);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        println!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}
