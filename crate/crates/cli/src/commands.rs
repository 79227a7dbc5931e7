//! Subcommands of the `stylemap` binary.

use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use stylemap::autodiff::LrSchedule;
use stylemap::flow::{build_model, FlowConfig, Variant};
use stylemap::imaging::{encode_png, generate_synthetic, load_image, BitDepth, Direction, ImageBuffer, ImagePair, PairedDataset, Split, SynthSpec};
use stylemap::style::{apply_style, dataset_style_map, extract_style, style_grid, GridSpec, StyleMap};
use stylemap::training::{evaluate, train_with, EvalSummary};
use stylemap::{ModelContainer, StyleRecord, StyleVector, TrainConfig};

use crate::service;
use crate::InputError;

#[derive(Debug, Parser)]
#[command(name = "stylemap", version, about = "Learn, extract and apply global color styles")]
pub struct Cli {
    /// Worker threads for pixel-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a paired dataset.
    Train(TrainArgs),
    /// Extract the style of a (source, target) pair, or of every pair in a dataset.
    Extract(ExtractArgs),
    /// Render a source frame in a given style.
    Apply(ApplyArgs),
    /// Score a model on a dataset split.
    Eval(EvalArgs),
    /// Render a 2-D sweep through style space.
    Grid(GridArgs),
    /// Extract the style of every pair in a dataset.
    Stylemap(StylemapArgs),
    /// Generate a synthetic paired dataset with known ground truth.
    Synth(SynthArgs),
    /// Serve the interactive grading API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

/// Options shared by every command that reads a paired dataset.
#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directory with `source/` and `target/` frames, or with a `manifest.json`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Seed of the 80/20 train/test split when no manifest is present.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Swap the roles of source and target (inverse tone mapping).
    #[arg(long)]
    pub inverse: bool,
}

impl DatasetArgs {
    fn open(&self) -> Result<PairedDataset> {
        let direction = if self.inverse { Direction::InverseTm } else { Direction::ForwardTm };
        PairedDataset::open(&self.pairs, self.split_seed, direction)
            .map_err(|e| InputError(format!("cannot open dataset {}: {e}", self.pairs.display())).into())
    }

    fn load(&self, split: Option<Split>) -> Result<Vec<ImagePair>> {
        let ds = self.open()?;
        ds.load(split)
            .map_err(|e| InputError(format!("cannot load dataset {}: {e}", self.pairs.display())).into())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Style dimension: 2 (split), 3, or 4 (augmented).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=4))]
    pub variant: u8,
    /// PCC degree of the conditioning.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub degree: u8,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Halve the learning rate every this many epochs; 0 keeps it constant.
    #[arg(long, default_value_t = 20)]
    pub lr_step: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 28)]
    pub hidden_width: usize,
    /// Pixels sampled per frame and step.
    #[arg(long, default_value_t = 4096)]
    pub pixels_per_step: usize,
    /// Optimizer steps per epoch; 0 is one pass over the training frames.
    #[arg(long, default_value_t = 0)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub nll_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rec_weight: f64,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch report (JSON lines); defaults to `<out>.report.jsonl`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, requires = "target", conflicts_with = "pairs")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Batch mode: extract every pair of this dataset.
    #[arg(long, required_unless_present = "source")]
    pub pairs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub inverse: bool,
    /// Style record (JSON); in batch mode one record per line.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Style record file.
    #[arg(long, group = "style_choice")]
    pub style: Option<PathBuf>,
    /// Use the average style.
    #[arg(long, group = "style_choice")]
    pub zero: bool,
    /// Style values, comma separated.
    #[arg(long, group = "style_choice", value_delimiter = ',', allow_negative_numbers = true)]
    pub z: Option<Vec<f64>>,
    /// Bits per channel of the output PNG.
    #[arg(long, default_value_t = 8, value_parser = parse_depth)]
    pub depth: u8,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Print the summary as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Tiles per side.
    #[arg(long, default_value_t = 5)]
    pub res: usize,
    /// Grid centre; a single value is used for every dimension.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0")]
    pub center: Vec<f64>,
    /// Half-width of the sweep along each axis.
    #[arg(long, default_value_t = 2.0)]
    pub range: f64,
    /// Style dimensions swept by columns and rows.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub axes: Vec<usize>,
    /// Downscale the source to this width before rendering.
    #[arg(long)]
    pub thumb_width: Option<usize>,
    /// Mosaic PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every tile as `r<row>_c<col>.png` here.
    #[arg(long)]
    pub tiles_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StylemapArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Output file; `.csv` writes one row per pair, anything else JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(0..=4))]
    pub factors: u8,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    pub degree: u8,
    /// Draw latents around this many cluster centres.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    pub cluster_jitter: f64,
    /// Directory of base frames to grade instead of procedural ones.
    #[arg(long)]
    pub base_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Dataset whose training split feeds the style scatter; by default the
    /// scatter stored in the model file is served.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Largest accepted upload in MiB.
    #[arg(long, default_value_t = 64)]
    pub max_upload_mb: usize,
}

fn parse_depth(s: &str) -> std::result::Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("bit depth must be 8 or 16, got {s}")),
    }
}

fn bit_depth(bits: u8) -> BitDepth {
    if bits == 16 {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(InputError("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Train(a) => train_cmd(&a),
        Command::Extract(a) => extract_cmd(&a),
        Command::Apply(a) => apply_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Grid(a) => grid_cmd(&a),
        Command::Stylemap(a) => stylemap_cmd(&a),
        Command::Synth(a) => synth_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
    }
}

pub fn load_model(path: &Path) -> Result<(ModelContainer, String)> {
    let container = ModelContainer::load(path).map_err(|e| InputError(format!("cannot load model {}: {e}", path.display())))?;
    let id = container.model_id();
    Ok((container, id))
}

fn read_image(path: &Path) -> Result<ImageBuffer> {
    load_image(path).map_err(|e| InputError(format!("cannot read image {}: {e}", path.display())).into())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let ds = a.data.open()?;
    let load = |split| {
        ds.load(Some(split))
            .map_err(|e| InputError(format!("cannot load dataset {}: {e}", a.data.pairs.display())))
    };
    let train_pairs = load(Split::Train)?;
    let test_pairs = load(Split::Test)?;
    if train_pairs.is_empty() {
        bail!(InputError(format!("dataset {} has no training pairs", a.data.pairs.display())));
    }
    let variant = Variant::from_dim(a.variant as usize).expect("range checked by the parser");
    let mut model = build_model(FlowConfig::new(variant, a.degree, a.hidden_width, a.seed)).map_err(|e| InputError(e.to_string()))?;
    let config = TrainConfig {
        epochs: a.epochs,
        initial_lr: a.lr,
        schedule: if a.lr_step == 0 {
            LrSchedule::Constant
        } else {
            LrSchedule::Step {
                every: a.lr_step,
                factor: 0.5,
            }
        },
        pixels_per_step: a.pixels_per_step,
        steps_per_epoch: a.steps_per_epoch,
        nll_weight: a.nll_weight,
        rec_weight: a.rec_weight,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| InputError(e.to_string()))?;
    eprintln!(
        "training {}-D model ({} parameters) on {} pairs, {} held out",
        variant.latent_dim(),
        model.num_params(),
        train_pairs.len(),
        test_pairs.len()
    );
    let report = train_with(&mut model, &train_pairs, &[], &config, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  nll {:>9.4}  rec {:.5}  train {:>6.2} dB  {:.1} s",
            r.epoch,
            r.lr,
            r.nll,
            r.rec,
            r.train_psnr.unwrap_or(f64::NAN),
            r.wall_time_s
        );
    })?;

    let test = if test_pairs.is_empty() { None } else { Some(evaluate(&model, &test_pairs)?) };
    let styles = dataset_style_map(&model, "", &train_pairs)?;
    let metadata = json!({
        "config": config,
        "best_epoch": report.best_epoch,
        "best_score": report.best_score,
        "test": test.as_ref().map(|t| json!({"mean_db": t.mean_db, "p5_db": t.p5_db, "pairs": t.per_pair.len()})),
        "styles": styles.entries,
    });
    let container = ModelContainer::with_training(model, metadata);
    container.save(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.jsonl");
        PathBuf::from(p)
    });
    write_file(&report_path, report.without_timings().to_json_lines())?;

    println!("model {} written to {}", container.model_id(), a.out.display());
    match test {
        Some(t) => println!("test PSNR: mean {:.2} dB, 5th percentile {:.2} dB over {} pairs", t.mean_db, t.p5_db, t.per_pair.len()),
        None => println!("test PSNR: no test pairs"),
    }
    Ok(())
}

fn extract_cmd(a: &ExtractArgs) -> Result<()> {
    let (container, id) = load_model(&a.model)?;
    let model = &container.model;
    if let Some(dir) = &a.pairs {
        let data = DatasetArgs {
            pairs: dir.clone(),
            split_seed: a.split_seed,
            inverse: a.inverse,
        };
        let pairs = data.load(a.split.split())?;
        let map = dataset_style_map(model, &id, &pairs)?;
        let mut out = String::new();
        for e in &map.entries {
            let style = StyleVector::new(e.values.clone(), stylemap::Provenance::Extracted { frame: e.id.clone() })?;
            out.push_str(&serde_json::to_string(&style.to_record(&id))?);
            out.push('\n');
        }
        write_file(&a.out, out)?;
        println!("{} style records written to {}", map.entries.len(), a.out.display());
        return Ok(());
    }
    let (Some(src), Some(tgt)) = (&a.source, &a.target) else {
        bail!(InputError("give --source and --target, or --pairs".into()));
    };
    let source = read_image(src)?;
    let target = read_image(tgt)?;
    let frame = tgt.file_stem().and_then(|s| s.to_str()).unwrap_or("target");
    let style = extract_style(model, &source, &target, frame).map_err(|e| InputError(e.to_string()))?;
    write_file(&a.out, style.to_record(&id).to_json())?;
    println!("{:?}", style.values());
    Ok(())
}

/// Resolves the style requested on the command line.
fn requested_style(a: &ApplyArgs, dims: usize, model_id: &str) -> Result<StyleVector> {
    if let Some(path) = &a.style {
        let text = fs::read_to_string(path).map_err(|e| InputError(format!("cannot read style {}: {e}", path.display())))?;
        let record = StyleRecord::from_json(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        if !record.model_id.is_empty() && record.model_id != model_id {
            eprintln!("warning: style was extracted with model {}, applying with {model_id}", record.model_id);
        }
        return record.to_style().map_err(|e| InputError(e.to_string()).into());
    }
    if let Some(z) = &a.z {
        return StyleVector::manual(z.clone()).map_err(|e| InputError(e.to_string()).into());
    }
    if a.zero {
        return Ok(StyleVector::zero(dims)?);
    }
    bail!(InputError("give one of --style, --z or --zero".into()))
}

fn apply_cmd(a: &ApplyArgs) -> Result<()> {
    let (container, id) = load_model(&a.model)?;
    let model = &container.model;
    let style = requested_style(a, model.latent_dim(), &id)?;
    let source = read_image(&a.source)?;
    let rendered = apply_style(model, &source, &style).map_err(|e| InputError(e.to_string()))?;
    write_file(&a.out, encode_png(&rendered, bit_depth(a.depth))?)?;
    Ok(())
}

/// The table printed by `eval`.
pub fn format_summary(summary: &EvalSummary) -> String {
    let mut s = String::from("pair                     PSNR dB\n");
    for p in &summary.per_pair {
        let _ = writeln!(s, "{:<24} {:>8.2}", p.id, p.psnr.db());
    }
    let _ = writeln!(s, "{:<24} {:>8.2}", "mean", summary.mean_db);
    let _ = writeln!(s, "{:<24} {:>8.2}", "5th percentile", summary.p5_db);
    s
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (container, _) = load_model(&a.model)?;
    let pairs = a.data.load(a.split.split())?;
    if pairs.is_empty() {
        bail!(InputError(format!("split {:?} of {} is empty", a.split, a.data.pairs.display())));
    }
    let summary = evaluate(&container.model, &pairs)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print!("{}", format_summary(&summary));
    }
    Ok(())
}

fn grid_cmd(a: &GridArgs) -> Result<()> {
    let (container, _) = load_model(&a.model)?;
    let model = &container.model;
    let dims = model.latent_dim();
    let center = match a.center.as_slice() {
        [v] => vec![*v; dims],
        c => c.to_vec(),
    };
    let [ax, ay] = a.axes[..] else {
        bail!(InputError(format!("--axes takes two indices, got {}", a.axes.len())));
    };
    let spec = GridSpec {
        axes: (ax, ay),
        center,
        range: a.range,
        resolution: a.res,
        thumb_width: a.thumb_width,
    };
    let source = read_image(&a.source)?;
    let grid = style_grid(model, &source, &spec).map_err(|e| InputError(e.to_string()))?;
    write_file(&a.out, encode_png(&grid.mosaic()?, BitDepth::Eight)?)?;
    if let Some(dir) = &a.tiles_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for r in 0..a.res {
            for c in 0..a.res {
                write_file(&dir.join(format!("r{r}_c{c}.png")), encode_png(grid.tile(r, c), BitDepth::Eight)?)?;
            }
        }
    }
    Ok(())
}

/// CSV form of a style map: `id,z0,z1,...`.
pub fn style_map_csv(map: &StyleMap) -> String {
    let mut s = String::from("id");
    for k in 0..map.dims {
        let _ = write!(s, ",z{k}");
    }
    s.push('\n');
    for e in &map.entries {
        s.push_str(&e.id);
        for v in &e.values {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    s
}

fn stylemap_cmd(a: &StylemapArgs) -> Result<()> {
    let (container, id) = load_model(&a.model)?;
    let pairs = a.data.load(a.split.split())?;
    let map = dataset_style_map(&container.model, &id, &pairs)?;
    let text = if a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        style_map_csv(&map)
    } else {
        serde_json::to_string_pretty(&map)?
    };
    write_file(&a.out, text)?;
    println!("{} styles written to {}", map.entries.len(), a.out.display());
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        factors: a.factors as usize,
        pairs: a.pairs,
        width: a.width,
        height: a.height,
        degree: a.degree,
        clusters: a.clusters,
        cluster_jitter: a.cluster_jitter,
        base_dir: a.base_dir.clone(),
        seed: a.seed,
    };
    let data = generate_synthetic(&spec).map_err(|e| InputError(e.to_string()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let ds = data.write_to(&a.out)?;
    println!("{} pairs written to {}", ds.len(), a.out.display());
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let (container, id) = load_model(&a.model)?;
    let styles = match &a.pairs {
        Some(dir) => {
            let data = DatasetArgs {
                pairs: dir.clone(),
                split_seed: a.split_seed,
                inverse: false,
            };
            dataset_style_map(&container.model, &id, &data.load(Some(Split::Train))?)?.entries
        }
        None => service::stored_styles(&container),
    };
    let state = service::AppState::new(container.model, id, styles);
    let limit = a.max_upload_mb.saturating_mul(1 << 20);
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("cannot bind {}", a.addr))?;
        eprintln!("serving model {} on http://{}", state.model_id(), listener.local_addr()?);
        axum::serve(listener, service::router(state, limit))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("server error")
    })
}
