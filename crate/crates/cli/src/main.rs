//! `partswap` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use partswap::eval::{attribute_edit, attribute_separation, mix_grid, mixing_error, GridSpec};
use partswap::model::load_checkpoint;
use partswap::synthdata::{export_ppm, generate, read_dataset, write_dataset, Attribute, Dataset, GenParams};
use partswap::training::{train, TrainConfig};
use partswap::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "partswap", version, about = "Part-wise latent mixing of face sprites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural sprite dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, metrics and config to a directory.
    Train(TrainArgs),
    /// Per-subspace mixing error over random groups of five sprites.
    EvalMixing(EvalMixingArgs),
    /// Per-subspace PCA and attribute class-mean distances.
    AnalyzeSubspaces(AnalyzeArgs),
    /// Shift one sprite along an attribute direction and export the result.
    EditAttribute(EditArgs),
    /// Export a grid of subspace swaps between two or three sprites.
    MixGrid(MixGridArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run configuration with optional `gen`, `train` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset file; overrides `train.dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replace the subspace layer by the identity and drop the entropy loss.
    #[arg(long)]
    no_isa: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalMixingArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One of mouth_open, dark_hair, pale_skin, large_eyes, thick_eyebrows, round_face.
    #[arg(long)]
    attr: String,
    #[arg(long)]
    index: usize,
    #[arg(long, allow_hyphen_values = true)]
    strength: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MixGridArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Two or three sprite indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    indices: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    gen: GenParams,
    train: TrainConfig,
    eval: EvalOptions,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalOptions {
    groups: usize,
    seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { groups: 100, seed: 0 }
    }
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let Some(path) = &self.config else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn sprite_index(ds: &Dataset, i: usize) -> Result<usize> {
    if i >= ds.len() {
        return Err(Error::Config(format!("index {i} out of range for {} sprites", ds.len())));
    }
    Ok(i)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut gen = a.config.load()?.gen;
            if let Some(c) = a.count {
                gen.count = c;
            }
            if let Some(s) = a.seed {
                gen.seed = s;
            }
            let ds = generate(&gen)?;
            write_dataset(&ds, &a.out)?;
            log::info!("wrote {} sprites to {}", ds.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = a.config.load()?.train;
            if a.no_isa {
                cfg.enable_isa = false;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.lr = v;
            }
            if a.max_steps.is_some() {
                cfg.max_steps = a.max_steps;
            }
            if let Some(d) = a.data {
                cfg.dataset = Some(d);
            }
            cfg.validate()?;
            let data = cfg
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("no dataset given (--data or train.dataset)".into()))?;
            let ds = read_dataset(&data)?;
            let out = train::<f32>(&cfg, &ds, Some(&a.out))?;
            log::info!("trained {} steps; outputs in {}", out.metrics.len(), a.out.display());
        }
        Command::EvalMixing(a) => {
            let opts = a.config.load()?.eval;
            let groups = a.groups.unwrap_or(opts.groups);
            let seed = a.seed.unwrap_or(opts.seed);
            let ck = load_checkpoint::<f32>(&a.ckpt)?;
            let ds = read_dataset(&a.data)?;
            let report = mixing_error(&ck.model, &ds, groups, seed)?;
            write_json(
                &a.out,
                &json!({
                    "per_subspace": report.per_subspace,
                    "mean": report.mean(),
                    "groups": report.groups,
                    "seed": seed,
                    "enable_isa": ck.model.isa_enabled(),
                }),
            )?;
        }
        Command::AnalyzeSubspaces(a) => {
            let ck = load_checkpoint::<f32>(&a.ckpt)?;
            let ds = read_dataset(&a.data)?;
            let analysis = attribute_separation(&ck.model, &ds)?;
            write_json(&a.out, &json!(analysis.distance_table()))?;
        }
        Command::EditAttribute(a) => {
            let attr = Attribute::from_name(&a.attr)
                .ok_or_else(|| Error::Config(format!("unknown attribute {:?}", a.attr)))?;
            let ck = load_checkpoint::<f32>(&a.ckpt)?;
            let ds = read_dataset(&a.data)?;
            let i = sprite_index(&ds, a.index)?;
            let img = attribute_edit(&ck.model, &ds, attr, &ds.sprites[i].image(), a.strength)?;
            export_ppm(&img, &a.out)?;
        }
        Command::MixGrid(a) => {
            if !(2..=3).contains(&a.indices.len()) {
                return Err(Error::Config(format!("--indices takes 2 or 3 values, got {}", a.indices.len())));
            }
            let ck = load_checkpoint::<f32>(&a.ckpt)?;
            let ds = read_dataset(&a.data)?;
            let images = a
                .indices
                .iter()
                .map(|&i| Ok(ds.sprites[sprite_index(&ds, i)?].image()))
                .collect::<Result<Vec<_>>>()?;
            let spec = GridSpec::default_for(images.len(), ck.model.layout().count())?;
            let grid = mix_grid(&ck.model, &images, &spec)?;
            export_ppm(&grid, &a.out)?;
        }
    }
    Ok(())
}

fn classify(e: &Error) -> (&'static str, u8) {
    match e {
        Error::MissingFile(_) => ("missing-file", 2),
        Error::Config(_) | Error::InsufficientData(_) => ("invalid-config", 3),
        Error::Diverged(_) | Error::IllConditioned(_) => ("diverged", 4),
        Error::Format(_) => ("invalid-format", 1),
        Error::Io { .. } => ("io", 1),
        Error::Shape { .. } => ("shape", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error kind=invalid-config: {line}");
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
