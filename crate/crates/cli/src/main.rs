use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use fdiwn_core::config::{parse_entries, parse_override, RunConfig};
use fdiwn_core::data::{crop_to_multiple, Dataset};
use fdiwn_core::image_io::{list_pngs, load_png, quantize, save_png};
use fdiwn_core::metrics::{score_rgb, EvalReport, ImageScore};
use fdiwn_core::network::{count_multi_adds, count_params, variant, Fdiwn, FdiwnConfig, VARIANTS};
use fdiwn_core::ops::{bicubic_downsample, bicubic_upsample};
use fdiwn_core::synth::synthetic_dataset;
use fdiwn_core::train::{RunOptions, Trainer};
use fdiwn_core::{weights, Tensor};

#[derive(Parser)]
#[command(name = "fdiwn", version, about = "Lightweight single-image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its loss log, checkpoints and final weights.
    Train(TrainArgs),
    /// Super-resolve one PNG image.
    Upscale(UpscaleArgs),
    /// Report Y-channel PSNR/SSIM over a directory of HR images.
    Eval(EvalArgs),
    /// Print parameter and multiply-accumulate counts of a model.
    Inspect(InspectArgs),
    /// Train ablated variants side by side and compare them.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

/// Experiment settings shared by `train`, `inspect` and `ablate`.
#[derive(Args)]
struct ExperimentArgs {
    /// Desk-scale preset (smoke, overfit, tiny, paper).
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` overrides, applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ExperimentArgs {
    fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut entries = Vec::new();
        if let Some(p) = &self.preset {
            entries.push(("preset".to_string(), p.clone()));
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            entries.extend(parse_entries(&text, &path.display().to_string())?);
        }
        for o in &self.overrides {
            entries.push(parse_override(o)?);
        }
        if let Some(s) = self.scale {
            entries.push(("scale".to_string(), s.to_string()));
        }
        if let Some(s) = self.seed {
            entries.push(("seed".to_string(), s.to_string()));
        }
        if self.preset.is_some() && self.config.is_some() {
            let file_preset = entries.iter().skip(1).any(|(k, _)| k == "preset");
            if file_preset {
                bail!("--preset conflicts with the `preset` entry of the config file");
            }
        }
        Ok(entries)
    }

    fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_entries(&self.entries()?)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Output directory for `loss.csv`, `checkpoints/` and `model.fdwn`.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Must match the scale stored in the weight file.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    input: PathBuf,
}

#[derive(Args)]
#[group(skip)]
#[command(group(ArgGroup::new("source").required(true).multiple(false)))]
struct EvalArgs {
    #[arg(long, group = "source")]
    weights: Option<PathBuf>,
    /// Score plain bicubic upsampling instead of a model.
    #[arg(long, group = "source")]
    bicubic: bool,
    /// Score the HR images against themselves.
    #[arg(long, group = "source")]
    identity: bool,
    #[arg(long)]
    scale: usize,
    /// Precomputed LR images with the same file names as the HR images.
    #[arg(long)]
    lr_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    hr_dir: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Read the architecture from a weight file instead.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    weights: Option<PathBuf>,
    /// Output resolution as WIDTHxHEIGHT.
    #[arg(long, default_value = "1280x720")]
    resolution: String,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated variant names, or `all`.
    variants: String,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Held-out synthetic images used for scoring.
    #[arg(long, default_value_t = 5)]
    eval_images: usize,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Directory for per-variant weights and loss logs.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Upscale(a) => upscale(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let scale = cfg.preset.model.scale;
    Ok(match &cfg.data_dir {
        Some(dir) => Dataset::from_dir(dir, scale)?,
        None => cfg.preset.dataset()?,
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.exp.run_config()?;
    let ds = load_dataset(&cfg)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let file = weights::load(path)?;
            if file.config != cfg.preset.model {
                bail!("checkpoint architecture [{}] differs from the requested [{}]", file.config, cfg.preset.model);
            }
            Trainer::resume(file, cfg.preset.train)?
        }
        None => Trainer::new(cfg.preset.model, cfg.preset.train)?,
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let log_path = args.out.join("loss.csv");
    let log_file = if trainer.step == 0 {
        File::create(&log_path)
    } else {
        File::options().append(true).create(true).open(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let ckpt_dir = args.out.join("checkpoints");
    eprintln!("training [{}] on {} images for {} steps", cfg.preset.model, ds.len(), cfg.steps);
    let losses = trainer.run(
        &ds,
        cfg.steps,
        RunOptions {
            log: Some(&mut log),
            checkpoint_dir: Some(ckpt_dir.clone()),
            checkpoint_every: cfg.checkpoint_every,
            time_limit: None,
        },
    )?;
    trainer.save_checkpoint(&ckpt_dir.join(format!("step{:07}.fdwn", trainer.step)))?;
    let model_path = args.out.join("model.fdwn");
    trainer.save_weights(&model_path)?;
    let last = losses.last().copied().unwrap_or(f32::NAN);
    println!("step {} loss {last:.6}; weights written to {}", trainer.step, model_path.display());
    Ok(())
}

fn upscale(args: UpscaleArgs) -> Result<()> {
    let file = weights::load(&args.weights)?;
    if let Some(r) = args.scale {
        if r != file.config.scale {
            bail!("--scale {r} does not match the x{} weights in {}", file.config.scale, args.weights.display());
        }
    }
    let model = Fdiwn::from_params(file.config, &file.params)?;
    let lr = load_png(&args.input)?;
    let sr = model.infer(&file.params, &lr)?;
    save_png(&sr, &args.out)?;
    let s = sr.shape();
    println!("{} ({}x{})", args.out.display(), s.w, s.h);
    Ok(())
}

enum Source {
    Model(Fdiwn, fdiwn_core::ModelParams),
    Bicubic,
    Identity,
}

fn eval(args: EvalArgs) -> Result<()> {
    let r = args.scale;
    let source = if let Some(path) = &args.weights {
        let file = weights::load(path)?;
        if file.config.scale != r {
            bail!("--scale {r} does not match the x{} weights in {}", file.config.scale, path.display());
        }
        Source::Model(Fdiwn::from_params(file.config, &file.params)?, file.params)
    } else if args.bicubic {
        Source::Bicubic
    } else {
        Source::Identity
    };
    let paths = list_pngs(&args.hr_dir)?;
    if paths.is_empty() {
        bail!("no PNG images in {}", args.hr_dir.display());
    }
    let mut report = EvalReport::new(r, r);
    for path in &paths {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let hr = crop_to_multiple(&load_png(path)?, r)?;
        let score = score_image(&name, &hr, &source, r, args.lr_dir.as_deref())?;
        report.images.push(score);
    }
    let text = match args.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv(),
    };
    emit(&text, args.out.as_deref())
}

fn score_image(name: &str, hr: &Tensor, source: &Source, r: usize, lr_dir: Option<&Path>) -> Result<ImageScore> {
    let lr = match lr_dir {
        Some(dir) => {
            let lr = load_png(&dir.join(name))?;
            let (hs, ls) = (hr.shape(), lr.shape());
            if ls.h * r != hs.h || ls.w * r != hs.w {
                bail!("{name}: LR {}x{} does not match HR {}x{} at x{r}", ls.w, ls.h, hs.w, hs.h);
            }
            lr
        }
        None => bicubic_downsample(hr, r)?,
    };
    let sr = match source {
        Source::Model(model, params) => quantize(&model.infer(params, &lr)?),
        Source::Bicubic => quantize(&bicubic_upsample(&lr, r)?),
        Source::Identity => hr.clone(),
    };
    Ok(score_rgb(name, &sr, hr, r)?)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            std::io::stdout().flush()?;
            Ok(())
        }
    }
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s.split_once(['x', 'X']).with_context(|| format!("resolution `{s}` is not WIDTHxHEIGHT"))?;
    let w: usize = w.trim().parse().with_context(|| format!("bad width in `{s}`"))?;
    let h: usize = h.trim().parse().with_context(|| format!("bad height in `{s}`"))?;
    Ok((w, h))
}

fn inspect(args: InspectArgs) -> Result<()> {
    let (w, h) = parse_resolution(&args.resolution)?;
    let cfg = match &args.weights {
        Some(path) => {
            if !args.exp.overrides.is_empty() {
                bail!("overrides cannot be combined with --weights");
            }
            weights::load(path)?.config
        }
        None => args.exp.run_config()?.preset.model,
    };
    let (_, params) = Fdiwn::new(cfg, 0)?;
    let n = count_params(&params);
    let macs = count_multi_adds(&cfg, h, w)?;
    let text = match args.format {
        Format::Text => format!(
            "model: {cfg}\nparameters: {n} ({:.1}K)\nmulti-adds at {w}x{h}: {macs} ({:.2}G)\n",
            n as f64 / 1e3,
            macs as f64 / 1e9
        ),
        Format::Csv => format!("config,params,multi_adds\n\"{cfg}\",{n},{macs}\n"),
    };
    emit(&text, None)
}

struct AblationRow {
    name: String,
    params: usize,
    macs: u64,
    final_loss: f32,
    report: EvalReport,
}

fn ablate(args: AblateArgs) -> Result<()> {
    let names: Vec<&str> = if args.variants == "all" {
        VARIANTS.iter().map(|v| v.0).collect()
    } else {
        args.variants.split(',').map(str::trim).collect()
    };
    let ablations = names.iter().map(|n| variant(n)).collect::<Result<Vec<_>, _>>()?;
    let base = args.exp.run_config()?;
    let scale = base.preset.model.scale;
    let ds = load_dataset(&base)?;
    let size = base.preset.data.size;
    let held_out = synthetic_dataset(base.preset.data.seed ^ 0x5eed, args.eval_images, size, size);
    let mut rows = Vec::new();
    for (name, ablation) in names.iter().zip(ablations) {
        let model_cfg = FdiwnConfig { ablation, ..base.preset.model };
        let mut trainer = Trainer::new(model_cfg, base.preset.train)?;
        let mut log_buf = Vec::new();
        let losses = trainer.run(&ds, base.steps, RunOptions { log: Some(&mut log_buf), ..Default::default() })?;
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(format!("{name}.csv")), &log_buf)?;
            trainer.save_weights(&dir.join(format!("{name}.fdwn")))?;
        }
        let mut report = EvalReport::new(scale, scale);
        for (i, hr) in held_out.iter().enumerate() {
            let hr = crop_to_multiple(hr, scale)?;
            let source = Source::Model(trainer.model.clone(), trainer.params.clone());
            report.images.push(score_image(&format!("heldout{i}"), &hr, &source, scale, None)?);
        }
        rows.push(AblationRow {
            name: name.to_string(),
            params: count_params(&trainer.params),
            macs: trainer.model.macs(size / scale, size / scale),
            final_loss: losses.last().copied().unwrap_or(f32::NAN),
            report,
        });
    }
    let mut text = String::new();
    match args.format {
        Format::Text => {
            text.push_str(&format!(
                "{:<22} {:>10} {:>14} {:>10} {:>10} {:>8}\n",
                "variant", "params", "multi-adds", "loss", "PSNR", "SSIM"
            ));
            for r in &rows {
                text.push_str(&format!(
                    "{:<22} {:>10} {:>14} {:>10.5} {:>10.4} {:>8.5}\n",
                    r.name,
                    r.params,
                    r.macs,
                    r.final_loss,
                    r.report.mean_psnr(),
                    r.report.mean_ssim()
                ));
            }
        }
        Format::Csv => {
            text.push_str("variant,params,multi_adds,final_loss,psnr,ssim\n");
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.name,
                    r.params,
                    r.macs,
                    r.final_loss,
                    r.report.mean_psnr(),
                    r.report.mean_ssim()
                ));
            }
        }
    }
    emit(&text, None)
}
