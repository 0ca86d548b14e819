use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use geomark::data::{self, DatasetManifest, Split, SplitCounts};
use geomark::evaluation::{self, ImperceptibilityReport, RobustnessCurve};
use geomark::message::BitMessage;
use geomark::networks::ModelBundle;
use geomark::noise::{self, NoiseKind, NoiseSpec};
use geomark::training::{self, RunOptions, TrainConfig};
use geomark::{Error, ErrorClass, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

mod run;

use run::{load_config, write_snapshot, OutputLock, SNAPSHOT_FILE};

#[derive(Parser, Debug)]
#[command(name = "geomark", version, about = "Blind image watermarking with learned networks and differentiable attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration file (train, eval).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, or output file for embed and attack.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Continue training from the checkpoint in --out.
    #[arg(long, global = true)]
    resume: bool,

    /// Override a configuration key, e.g. `--set network.channels=32`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Increase log verbosity.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a directory of images into train/val/test.
    Dataset {
        image_dir: PathBuf,
        /// Split sizes as TRAIN,VAL,TEST.
        #[arg(long, value_parser = parse_counts)]
        counts: SplitCounts,
        /// First fill IMAGE_DIR with this many procedural images.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 96)]
        synthetic_size: u32,
    },
    /// Train a model bundle.
    Train,
    /// Watermark one image.
    Embed {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Bitstring of L characters or 0x-prefixed hex.
        #[arg(long)]
        message: String,
    },
    /// Decode the message from an image.
    Extract {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Apply one attack to an image. `jpeg:quality=Q` uses a real codec,
    /// `jpeg_diff:quality=Q` the differentiable approximation.
    Attack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        spec: String,
    },
    /// Robustness sweeps and imperceptibility on a dataset split.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Merge evaluation outputs into combined plots and tables.
    Report { inputs: Vec<PathBuf> },
}

fn parse_counts(text: &str) -> std::result::Result<SplitCounts, String> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("counts must be TRAIN,VAL,TEST: {e}"))?;
    match parts[..] {
        [train, val, test] => Ok(SplitCounts { train, val, test }),
        _ => Err("counts must be TRAIN,VAL,TEST".into()),
    }
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 2,
        ErrorClass::Io => 3,
        ErrorClass::Divergence => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code(e.class()))
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("--out is required for this command".into()))
}

fn reject_config(cli: &Cli, command: &str) -> Result<()> {
    if cli.config.is_some() || !cli.set.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "`{command}` takes no configuration file or overrides"
        )));
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.resume && !matches!(cli.command, Command::Train) {
        return Err(Error::InvalidParameter("--resume only applies to train".into()));
    }
    match &cli.command {
        Command::Dataset {
            image_dir,
            counts,
            synthetic,
            synthetic_size,
        } => {
            reject_config(cli, "dataset")?;
            cmd_dataset(require_out(cli)?, image_dir, *counts, cli.seed.unwrap_or(0), *synthetic, *synthetic_size)
        }
        Command::Train => cmd_train(cli),
        Command::Embed { bundle, image, message } => {
            reject_config(cli, "embed")?;
            cmd_embed(bundle, image, message, require_out(cli)?)
        }
        Command::Extract { bundle, image } => {
            reject_config(cli, "extract")?;
            cmd_extract(bundle, image)
        }
        Command::Attack { image, spec } => {
            reject_config(cli, "attack")?;
            cmd_attack(image, spec, require_out(cli)?, cli.seed.unwrap_or(0))
        }
        Command::Eval { bundle, manifest } => cmd_eval(cli, bundle, manifest),
        Command::Report { inputs } => {
            reject_config(cli, "report")?;
            cmd_report(inputs, require_out(cli)?)
        }
    }
}

#[derive(Serialize)]
struct DatasetRun<'a> {
    command: &'static str,
    image_dir: &'a Path,
    counts: SplitCounts,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<usize>,
    synthetic_size: u32,
}

fn cmd_dataset(
    out: &Path,
    image_dir: &Path,
    counts: SplitCounts,
    seed: u64,
    synthetic: Option<usize>,
    synthetic_size: u32,
) -> Result<()> {
    let _lock = OutputLock::acquire(out)?;
    if let Some(count) = synthetic {
        data::write_synthetic_corpus(image_dir, count, synthetic_size, seed)?;
    }
    let (manifest, skipped) = data::build_splits(image_dir, counts, seed)?;
    for (name, reason) in &skipped.0 {
        eprintln!("warning: skipped {name}: {reason}");
    }
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    write_snapshot(
        &out.join(SNAPSHOT_FILE),
        &DatasetRun {
            command: "dataset",
            image_dir,
            counts,
            seed,
            synthetic,
            synthetic_size,
        },
    )?;
    println!(
        "wrote {} ({} train, {} val, {} test, {} skipped)",
        path.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        skipped.0.len()
    );
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let out = require_out(cli)?;
    let mut config: TrainConfig = load_config(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let manifest_path = config
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("`manifest` must name a dataset manifest".into()))?;
    // relative manifest paths are taken from the config file's directory
    let manifest_path = match (&cli.config, manifest_path.is_relative()) {
        (Some(cfg), true) => cfg.parent().unwrap_or(Path::new("")).join(manifest_path),
        _ => manifest_path,
    };
    config.manifest = Some(absolute(&manifest_path));
    let manifest = DatasetManifest::load(&manifest_path)?;

    let _lock = OutputLock::acquire(out)?;
    write_snapshot(&out.join(SNAPSHOT_FILE), &config)?;
    let options = RunOptions {
        out: Some(out.to_path_buf()),
        resume: cli.resume,
        stop_after: None,
    };
    let (bundle, log) = training::train(&config, &manifest, &options)?;
    let last = log.last_validation();
    println!(
        "trained {} steps ({}); bundle in {}",
        bundle.provenance.step,
        bundle.provenance.regime,
        out.join("bundle").display()
    );
    if let Some(v) = last {
        println!(
            "validation: clean accuracy {:.4}, attacked accuracy {:.4}, ssim {:.4}",
            v.clean_accuracy, v.attacked_accuracy, v.ssim
        );
    }
    Ok(())
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.toml");
    out.with_file_name(name)
}

#[derive(Serialize)]
struct EmbedRun<'a> {
    command: &'static str,
    bundle: &'a Path,
    image: &'a Path,
    message: String,
}

fn cmd_embed(bundle_dir: &Path, image: &Path, message: &str, out: &Path) -> Result<()> {
    let bundle = ModelBundle::load(bundle_dir)?;
    let message = BitMessage::parse(message, bundle.message_length())?;
    let cover = data::image_to_tensor(&data::load_rgb(image)?);
    let encoded = bundle.encode(&cover, &message)?;
    data::save_image(out, &encoded)?;
    write_snapshot(
        &sidecar(out),
        &EmbedRun {
            command: "embed",
            bundle: bundle_dir,
            image,
            message: message.to_string(),
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_extract(bundle_dir: &Path, image: &Path) -> Result<()> {
    let bundle = ModelBundle::load(bundle_dir)?;
    let img = data::image_to_tensor(&data::load_rgb(image)?);
    let soft = bundle.decode(&img)?;
    let bits = BitMessage::from_soft(soft.row(0));
    println!("bits: {bits}");
    println!("hex: {}", bits.to_hex());
    let confidences: Vec<String> = soft.row(0).iter().map(|v| format!("{v:.4}")).collect();
    println!("confidence: {}", confidences.join(" "));
    Ok(())
}

/// Kind token `jpeg` selects the real codec; everything else is a noise
/// layer spec.
enum Attack {
    RealJpeg(u8),
    Layer(NoiseSpec),
}

fn parse_attack(text: &str) -> Result<Attack> {
    let kind = text.split(':').next().unwrap_or("").trim();
    if kind.eq_ignore_ascii_case("jpeg") {
        let rest = &text.trim()[kind.len()..];
        return match NoiseSpec::from_str(&format!("jpeg_diff{rest}"))? {
            NoiseSpec::JpegDiff { quality } => Ok(Attack::RealJpeg(quality)),
            _ => unreachable!("jpeg_diff prefix"),
        };
    }
    Ok(Attack::Layer(NoiseSpec::from_str(text)?))
}

#[derive(Serialize)]
struct AttackRun<'a> {
    command: &'static str,
    image: &'a Path,
    spec: &'a str,
    seed: u64,
}

fn cmd_attack(image: &Path, spec: &str, out: &Path, seed: u64) -> Result<()> {
    let attack = parse_attack(spec).map_err(|e| match e {
        Error::SpecSyntax { spec, reason } => Error::SpecSyntax {
            spec,
            reason: format!("{reason}; valid kinds: jpeg (real codec), {}", NoiseKind::NAMES.join(", ")),
        },
        other => other,
    })?;
    let img = data::image_to_tensor(&data::load_rgb(image)?);
    let attacked = match attack {
        Attack::RealJpeg(q) => evaluation::real_jpeg(&img, q)?,
        Attack::Layer(spec) => noise::apply(&spec, &img, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    data::save_image(out, &attacked)?;
    write_snapshot(
        &sidecar(out),
        &AttackRun {
            command: "attack",
            image,
            spec,
            seed,
        },
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sweep {
    kind: NoiseKind,
    /// Parameter values; ignored for mirror and identity.
    #[serde(default)]
    grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    /// Label in tables and plots; defaults to the bundle's regime.
    model_id: Option<String>,
    split: Split,
    robustness_size: usize,
    imperceptibility_size: usize,
    max_images: Option<usize>,
    imperceptibility: bool,
    sweeps: Vec<Sweep>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model_id: None,
            split: Split::Test,
            robustness_size: 256,
            imperceptibility_size: 512,
            max_images: None,
            imperceptibility: true,
            sweeps: Vec::new(),
        }
    }
}

#[derive(Serialize)]
struct EvalRun<'a> {
    command: &'static str,
    bundle: PathBuf,
    manifest: PathBuf,
    seed: u64,
    eval: &'a EvalConfig,
}

fn load_split(manifest: &DatasetManifest, split: Split, size: usize, limit: Option<usize>) -> Result<Vec<geomark::ImageBatch>> {
    data::eval_images(manifest, split, size)
        .take(limit.unwrap_or(usize::MAX))
        .map(|r| r.map(|(_, img)| img))
        .collect()
}

fn cmd_eval(cli: &Cli, bundle_dir: &Path, manifest_path: &Path) -> Result<()> {
    let out = require_out(cli)?;
    let config: EvalConfig = load_config(cli.config.as_deref(), &cli.set)?;
    if config.sweeps.is_empty() && !config.imperceptibility {
        return Err(Error::Config("nothing to evaluate: no sweeps and imperceptibility off".into()));
    }
    for sweep in &config.sweeps {
        let parameterless = matches!(sweep.kind, NoiseKind::Identity | NoiseKind::Mirror);
        if sweep.grid.is_empty() && !parameterless {
            return Err(Error::Config(format!("sweep `{}` needs a nonempty grid", sweep.kind)));
        }
    }
    let seed = cli.seed.unwrap_or(0);
    let bundle = ModelBundle::load(bundle_dir)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let model_id = config.model_id.clone().unwrap_or_else(|| bundle.provenance.regime.clone());

    let _lock = OutputLock::acquire(out)?;
    write_snapshot(
        &out.join(SNAPSHOT_FILE),
        &EvalRun {
            command: "eval",
            bundle: absolute(bundle_dir),
            manifest: absolute(manifest_path),
            seed,
            eval: &config,
        },
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curves: Vec<RobustnessCurve> = Vec::new();
    if !config.sweeps.is_empty() {
        let images = load_split(&manifest, config.split, config.robustness_size, config.max_images)?;
        let messages: Vec<BitMessage> = images
            .iter()
            .map(|_| data::random_message(bundle.message_length(), &mut rng))
            .collect();
        for sweep in &config.sweeps {
            let grid = if sweep.grid.is_empty() { vec![0.0] } else { sweep.grid.clone() };
            let curve = evaluation::attack_sweep(&bundle, sweep.kind, &grid, &images, &messages, &model_id, &mut rng)?;
            println!("{}: {:?} -> {:?}", curve.kind, curve.grid, curve.accuracy);
            curves.push(curve);
        }
    }
    let mut reports: Vec<ImperceptibilityReport> = Vec::new();
    if config.imperceptibility {
        let images = load_split(&manifest, config.split, config.imperceptibility_size, config.max_images)?;
        let messages: Vec<BitMessage> = images
            .iter()
            .map(|_| data::random_message(bundle.message_length(), &mut rng))
            .collect();
        let report = evaluation::imperceptibility_report(&bundle, &images, &messages, &model_id)?;
        println!("mean ssim over {} images: {:.4}", report.ssim.len(), report.mean_ssim);
        reports.push(report);
    }
    let written = if curves.is_empty() {
        evaluation::write_imperceptibility_tables(&reports, out)?
    } else {
        evaluation::render_report(&curves, &reports, out)?
    };
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("report needs at least one evaluation directory".into()));
    }
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    for dir in inputs {
        curves.extend(read_json::<RobustnessCurve>(&dir.join("robustness.json"))?.unwrap_or_default());
        reports.extend(read_json::<ImperceptibilityReport>(&dir.join("imperceptibility.json"))?.unwrap_or_default());
    }
    let _lock = OutputLock::acquire(out)?;
    #[derive(Serialize)]
    struct ReportRun<'a> {
        command: &'static str,
        inputs: &'a [PathBuf],
    }
    write_snapshot(&out.join(SNAPSHOT_FILE), &ReportRun { command: "report", inputs })?;
    let written = if curves.is_empty() {
        evaluation::write_imperceptibility_tables(&reports, out)?
    } else {
        evaluation::render_report(&curves, &reports, out)?
    };
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}
