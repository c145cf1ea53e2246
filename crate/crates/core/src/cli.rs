//! Command-line front end: `synth`, `train`, `eval`, `predict`, `ablate`.
//!
//! Every command writes a [`RunManifest`] before doing any work and
//! rewrites it with artifact checksums once it finishes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{check_tile_dims, ImageTile};
use crate::data::{
    generate_scene, io, split_spatial, ClassSchema, DatasetDir, LabelMask, SceneSpec, Split,
    TileGrid, MANIFEST_FILE,
};
use crate::depth::{normalize_depth, FileProvider, InMemoryProvider, PseudoLabelProvider};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, ConfusionMatrix};
use crate::trainer::{
    evaluate, run_ablation, write_loss_log, Checkpoint, TrainConfig, Trainer, ALL_TOGGLES,
};

/// Split proportions of the LiuZhou benchmark (7047 : 4209 : 4071 pairs).
pub const LIUZHOU_RATIOS: [f64; 3] = [0.46, 0.27, 0.27];

pub const RUN_MANIFEST_FILE: &str = "run_manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";

const NORMAL_SCENE: (f64, f64) = (0.3, 50.0);
const SHADOW_STRESS_SCENE: (f64, f64) = (0.6, 25.0);

#[derive(Debug, Parser)]
#[command(name = "depthseg", version, about = "Depth-prompted land-cover segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with oracle depth.
    Synth(SynthArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Train every adapter/prompter combination and tabulate the deltas.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub tiles: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Denser buildings under a lower sun.
    #[arg(long)]
    pub shadow_stress: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_adapter: bool,
    #[arg(long)]
    pub no_prompter: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<tile_id>.png` index masks to score instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Report file (TOML).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Write an RGB rendering instead of class indices.
    #[arg(long)]
    pub color: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// What was run, on what, and what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Option<TrainConfig>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    /// sha256 of input files, then of outputs once written.
    pub checksums: BTreeMap<String, String>,
    pub complete: bool,
}

impl RunManifest {
    fn new(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            seed: None,
            config: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            checksums: BTreeMap::new(),
            complete: false,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run manifest serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(format!("bad run manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_toml())
    }

    fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.to_string(), path.to_path_buf());
        if path.is_file() {
            self.checksums.insert(format!("input.{key}"), file_sha256(path)?);
        }
        Ok(())
    }

    fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.to_string(), path.to_path_buf());
    }

    /// Checksums every listed output and marks the run complete.
    fn finish(&mut self, path: &Path) -> Result<()> {
        for (key, out) in &self.outputs {
            if out.is_file() {
                self.checksums.insert(format!("output.{key}"), file_sha256(out)?);
            }
        }
        self.complete = true;
        self.write(path)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Manifest path for commands whose output is a single file.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}.{RUN_MANIFEST_FILE}"))
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.class().exit_code()
        }
    }
}

pub fn execute(command: &Command, args: &[String]) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, args),
        Command::Train(a) => cmd_train(a, args),
        Command::Eval(a) => cmd_eval(a, args),
        Command::Predict(a) => cmd_predict(a, args),
        Command::Ablate(a) => cmd_ablate(a, args),
    }
}

/// Tile seed from the dataset seed and the tile's position.
fn tile_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

pub fn cmd_synth(a: &SynthArgs, args: &[String]) -> Result<()> {
    check_tile_dims(a.size, a.size).map_err(|e| Error::Config(e.to_string()))?;
    let grid = TileGrid::for_count(a.tiles);
    let assignment = split_spatial(grid, LIUZHOU_RATIOS, a.seed)?;

    create_dir(&a.out)?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let mut manifest = RunManifest::new("synth", args);
    manifest.seed = Some(a.seed);
    manifest.write(&manifest_path)?;

    let (density, elevation) = if a.shadow_stress {
        SHADOW_STRESS_SCENE
    } else {
        NORMAL_SCENE
    };
    let azimuth = ChaCha8Rng::seed_from_u64(a.seed).random_range(0.0..360.0);
    let labels = assignment.labels();
    let mut entries = Vec::with_capacity(a.tiles);
    for (i, split) in labels.into_iter().enumerate() {
        let id = format!("tile_{:03}_{:03}", i / grid.cols, i % grid.cols);
        let scene = generate_scene(&SceneSpec {
            seed: tile_seed(a.seed, i),
            size: a.size,
            building_density: density,
            sun_azimuth_deg: azimuth,
            sun_elevation_deg: elevation,
            ..SceneSpec::default()
        })?;
        let image = a.out.join("images").join(format!("{id}.png"));
        let mask = a.out.join("masks").join(format!("{id}.png"));
        let depth = a.out.join("depth").join(format!("{id}_depth.png"));
        io::write_rgb_png(&image, scene.tile.pixels())?;
        io::write_mask_png(&mask, &scene.mask)?;
        io::write_depth_png(&depth, &normalize_depth(&scene.height)?)?;
        manifest.output(&format!("images.{id}"), &image);
        manifest.output(&format!("masks.{id}"), &mask);
        manifest.output(&format!("depth.{id}"), &depth);
        entries.push((id, split));
    }
    let splits = a.out.join(MANIFEST_FILE);
    io::write_split_manifest(&splits, &entries)?;
    manifest.output("splits", &splits);
    log::info!("wrote {} tiles to {}", entries.len(), a.out.display());
    manifest.finish(&manifest_path)
}

/// Pseudo-labels from the dataset's `depth/` folder. A missing folder
/// yields an empty provider, so lookups fail with a missing-label error.
fn depth_provider(ds: &DatasetDir) -> Result<Box<dyn PseudoLabelProvider>> {
    let dir = ds.depth_dir();
    if dir.is_dir() {
        Ok(Box::new(FileProvider::open(&dir)?))
    } else {
        Ok(Box::new(InMemoryProvider::new()))
    }
}

fn load_config(path: &Path, no_adapter: bool, no_prompter: bool) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    if no_adapter {
        cfg.adapter_enabled = false;
    }
    if no_prompter {
        cfg.prompter_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let cfg = load_config(&a.config, a.no_adapter, a.no_prompter)?;
    let ds = DatasetDir::open(&a.data)?;

    create_dir(&a.out)?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let mut manifest = RunManifest::new("train", args);
    manifest.seed = Some(cfg.seed);
    manifest.config = Some(cfg.clone());
    manifest.input("config", &a.config)?;
    manifest.input("data", &a.data)?;
    manifest.input("splits", &a.data.join(MANIFEST_FILE))?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(LOSS_LOG_FILE);
    let cfg_path = a.out.join(CONFIG_FILE);
    manifest.output("checkpoint", &ckpt_path);
    manifest.output("loss_log", &log_path);
    manifest.output("config", &cfg_path);
    manifest.write(&manifest_path)?;
    write_text(&cfg_path, &cfg.to_toml())?;

    let samples = ds.load(Split::Train, false)?;
    let provider = depth_provider(&ds)?;
    let mut trainer = Trainer::new(&cfg, &samples, Some(provider.as_ref()))?;
    log::info!("training {} steps on {} tiles", trainer.total_steps(), samples.len());
    while !trainer.is_done() {
        let row = trainer.step()?;
        log::debug!("step {} lr {:e} total {:.5}", row.step, row.lr, row.total);
    }
    write_loss_log(&log_path, trainer.log())?;
    trainer.checkpoint()?.save(&ckpt_path)?;
    manifest.finish(&manifest_path)
}

/// Predicted masks read from `<dir>/<tile_id>.png`.
fn score_prediction_dir(dir: &Path, ds: &DatasetDir, split: Split) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(crate::data::NUM_CLASSES);
    for id in ds.ids(split) {
        let pred = io::read_mask_png(&dir.join(format!("{id}.png")))?;
        let gt = io::read_mask_png(&ds.mask_path(id))?;
        cm.accumulate(&pred, &gt)?;
    }
    Ok(cm)
}

pub fn cmd_eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    let ds = DatasetDir::open(&a.data)?;
    let manifest_path = sidecar_manifest(&a.out);
    let mut manifest = RunManifest::new("eval", args);
    manifest.input("data", &a.data)?;
    manifest.input("splits", &a.data.join(MANIFEST_FILE))?;
    if let Some(c) = &a.checkpoint {
        manifest.input("checkpoint", c)?;
    }
    if let Some(p) = &a.predictions {
        manifest.input("predictions", p)?;
    }
    manifest.output("report", &a.out);
    manifest.write(&manifest_path)?;

    let cm = match (&a.checkpoint, &a.predictions) {
        (Some(c), _) => {
            let ckpt = Checkpoint::load(c)?;
            manifest.seed = Some(ckpt.meta.seed);
            manifest.config = Some(ckpt.meta.config.clone());
            let model = ckpt.model()?;
            let samples = ds.load(a.split, false)?;
            evaluate(&model, &samples, ckpt.meta.config.batch_size())?
        }
        (None, Some(p)) => score_prediction_dir(p, &ds, a.split)?,
        (None, None) => return Err(Error::Config("need --checkpoint or --predictions".into())),
    };
    let report = compute_report(&cm)?;
    log::info!("{} mIoU {:.4} Kappa {:.4}", a.split, report.m_iou, report.kappa);
    write_text(&a.out, &report.to_toml())?;
    manifest.finish(&manifest_path)
}

pub fn cmd_predict(a: &PredictArgs, args: &[String]) -> Result<()> {
    let manifest_path = sidecar_manifest(&a.output);
    let mut manifest = RunManifest::new("predict", args);
    manifest.input("checkpoint", &a.checkpoint)?;
    manifest.input("image", &a.input)?;
    manifest.output("mask", &a.output);
    manifest.write(&manifest_path)?;

    let pixels = io::read_rgb_png(&a.input)?;
    let (h, w, _) = pixels.dim();
    check_tile_dims(h, w).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let id = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let tile = ImageTile::new(pixels, id)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    manifest.seed = Some(ckpt.meta.seed);
    manifest.config = Some(ckpt.meta.config.clone());
    let mask: LabelMask = ckpt.model()?.predict(&[&tile])?.remove(0);
    if a.color {
        io::write_color_png(&a.output, &ClassSchema::default().render(&mask))?;
    } else {
        io::write_mask_png(&a.output, &mask)?;
    }
    manifest.finish(&manifest_path)
}

pub fn cmd_ablate(a: &AblateArgs, args: &[String]) -> Result<()> {
    let base = load_config(&a.config, false, false)?;
    let ds = DatasetDir::open(&a.data)?;

    create_dir(&a.out)?;
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    let mut manifest = RunManifest::new("ablate", args);
    manifest.config = Some(base.clone());
    manifest.input("config", &a.config)?;
    manifest.input("data", &a.data)?;
    manifest.input("splits", &a.data.join(MANIFEST_FILE))?;
    let table_path = a.out.join("ablation.toml");
    let md_path = a.out.join("ablation.md");
    manifest.output("table", &table_path);
    manifest.output("markdown", &md_path);
    manifest.write(&manifest_path)?;

    let train_set = ds.load(Split::Train, false)?;
    let eval_set = ds.load(a.split, false)?;
    let provider = depth_provider(&ds)?;
    let table = run_ablation(&base, &ALL_TOGGLES, &a.seeds, &train_set, &eval_set, Some(provider.as_ref()))?;
    write_text(&table_path, &table.to_toml())?;
    write_text(&md_path, &table.render())?;
    println!("{}", table.render());
    manifest.finish(&manifest_path)
}
