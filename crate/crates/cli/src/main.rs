use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use staindiff::codec::ImageRgb;
use staindiff::config::{Provenance, RunConfig};
use staindiff::denoiser::{load_checkpoint, Unet};
use staindiff::error::{Error, ErrorKind, Result};
use staindiff::metrics::evaluate;
use staindiff::sampler::{generate, inversion_roundtrip_mae, translate_batch, SamplerConfig};
use staindiff::schedule::{plan_csv, EtaSchedule, NoiseSchedule};
use staindiff::synth::{file_stem, read_dataset, read_manifest, write_dataset};
use staindiff::trainer::{load_train_data, train_on, TrainSetup};

/// Desk-scale diffusion toolkit for paired stain translation.
#[derive(Debug, Parser)]
#[command(name = "staindiff", version)]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.epochs=4 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired-stain dataset.
    Synth(SynthArgs),
    /// Train the denoiser jointly on generation and translation.
    Train(TrainArgs),
    /// Translate a source image (or every source of a dataset directory).
    Translate(TranslateArgs),
    /// Sample a source-stain image from pure noise.
    Generate(GenerateArgs),
    /// Invert and reconstruct sources; prints the latent MAE.
    InvertRoundtrip(RoundtripArgs),
    /// Score translated images against dataset targets.
    Eval(EvalArgs),
    /// Noise-schedule utilities.
    Schedule {
        #[command(subcommand)]
        command: ScheduleCommand,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Probability of a generation-task batch.
    #[arg(long)]
    p_gen: Option<f64>,
    /// SNR cap of the loss weighting.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training dataset directory.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    #[arg(long, default_value_t = 50)]
    progress_every: usize,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    /// DDIM inversion steps.
    #[arg(long)]
    inv_steps: Option<usize>,
    /// Denoising steps over the trailing plan.
    #[arg(long)]
    den_steps: Option<usize>,
    /// 0, constant:<v> or cosine:<start>.
    #[arg(long, value_parser = parse_eta)]
    eta: Option<EtaSchedule>,
    /// Seed of the per-image noise streams.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    /// Trained denoiser checkpoint.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// A PNG, or a dataset directory whose sources are all translated.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output PNG, or a directory when the input is a dataset.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Trained denoiser checkpoint.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PNG")]
    output: PathBuf,
    #[arg(long)]
    den_steps: Option<usize>,
    #[arg(long, value_parser = parse_eta)]
    eta: Option<EtaSchedule>,
}

#[derive(Debug, Args)]
struct RoundtripArgs {
    /// Trained denoiser checkpoint.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// A PNG or a dataset directory.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Inversion and reconstruction steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of translated images named <id>.png.
    #[arg(long, value_name = "DIR")]
    pred: PathBuf,
    /// Dataset directory holding the ground-truth targets.
    #[arg(long, value_name = "DIR")]
    gt: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ScheduleCommand {
    /// Print the trailing plan as CSV.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
struct DumpArgs {
    /// Training timesteps.
    #[arg(long = "T")]
    t: Option<usize>,
    /// Plan length.
    #[arg(long, default_value_t = 10)]
    steps: usize,
}

fn parse_eta(s: &str) -> std::result::Result<EtaSchedule, String> {
    let (kind, value) = match s.split_once(':') {
        Some(kv) => kv,
        None if s.trim() == "0" => ("constant", "0"),
        None => return Err(format!("expected 0, constant:<v> or cosine:<start>, got {s}")),
    };
    let v: f64 = value.parse().map_err(|e| format!("{value}: {e}"))?;
    match kind {
        "constant" => EtaSchedule::constant(v),
        "cosine" => EtaSchedule::cosine(v),
        _ => return Err(format!("unknown eta schedule {kind}")),
    }
    .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.kind() {
                ErrorKind::Usage => ("usage", 1),
                ErrorKind::Data => ("data", 2),
                ErrorKind::Numerical => ("numerical", 3),
            };
            eprintln!("error[{tag}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth(a) => {
            if let Some(s) = a.seed {
                cfg.synth.seed = s;
            }
            if let Some(s) = a.size {
                cfg.synth.size = s;
            }
            let m = write_dataset(&cfg.synth, a.n, &a.out, &cfg.provenance())?;
            println!("wrote {} pairs to {}", m.ids.len(), a.out.display());
            Ok(())
        }
        Command::Train(a) => cmd_train(cfg, a),
        Command::Translate(a) => cmd_translate(cfg, a),
        Command::Generate(a) => {
            let (model, schedule) = load_model(&cfg, &a.checkpoint)?;
            let mut sc = cfg.sampler;
            if let Some(n) = a.den_steps {
                sc.denoise_steps = n;
            }
            if let Some(e) = a.eta {
                sc.eta = e;
            }
            let img = generate(&model, &schedule, &cfg.codec, a.size, a.size, &sc, a.seed)?;
            write_png(&img, &a.output, &cfg.provenance())
        }
        Command::InvertRoundtrip(a) => {
            let (model, schedule) = load_model(&cfg, &a.checkpoint)?;
            let sources = read_sources(&a.input)?.1;
            let steps = a.steps.unwrap_or(cfg.sampler.inversion_steps);
            let mae = inversion_roundtrip_mae(&model, &schedule, &cfg.codec, &sources, steps)?;
            println!("{mae}");
            Ok(())
        }
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Schedule {
            command: ScheduleCommand::Dump(a),
        } => {
            if let Some(t) = a.t {
                cfg.schedule.num_timesteps = t;
            }
            print!("{}", plan_csv(&cfg.schedule.build()?, a.steps, &cfg.sampler.eta)?);
            Ok(())
        }
    }
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { t.$field = v; } )* };
    }
    apply!(epochs, batch_size, learning_rate, warmup_steps, p_gen, gamma, weight_decay, beta1, beta2, adam_eps, grad_clip, seed, checkpoint_every);
    if let Some(d) = a.data {
        t.dataset_dir = d;
    }
    if let Some(d) = a.checkpoint_dir {
        t.checkpoint_dir = d;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let setup = TrainSetup {
        train: cfg.train.clone(),
        model: cfg.model,
        schedule: cfg.schedule.build()?,
        codec: cfg.codec,
        provenance: cfg.provenance(),
    };
    let data = load_train_data(&setup)?;
    let total = setup.train.total_steps(data.len());
    let every = a.progress_every;
    let mut report = |r: &staindiff::trainer::StepRecord| {
        if every > 0 && (r.step.is_multiple_of(every) || r.step + 1 == total) {
            eprintln!("step {}/{total} task={:?} loss={:.5} lr={:.2e}", r.step, r.task, r.loss, r.lr);
        }
    };
    let out = train_on(&setup, &data, a.resume.as_deref(), &mut report)?;
    fs::write(setup.train.checkpoint_dir.join("config.toml"), cfg.to_toml_string())
        .map_err(|e| Error::Io { path: setup.train.checkpoint_dir.display().to_string(), source: e })?;
    println!("{}", out.final_checkpoint.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Unet<f32>, NoiseSchedule)> {
    let ck = load_checkpoint(path)?;
    let schedule = cfg.schedule.build()?;
    if let Ok(meta) = serde_json::from_str::<serde_json::Value>(&ck.meta) {
        if let Some(t) = meta.get("schedule_timesteps").and_then(|v| v.as_u64()) {
            if t as usize != schedule.num_timesteps() {
                return Err(Error::Data(format!(
                    "checkpoint was trained with T={t}, config has T={}",
                    schedule.num_timesteps()
                )));
            }
        }
    }
    Ok((ck.to_model()?, schedule))
}

/// A single PNG, or every source of a dataset directory with its ids.
fn read_sources(input: &Path) -> Result<(Vec<u64>, Vec<ImageRgb>)> {
    if input.is_dir() {
        let pairs = read_dataset(input)?;
        Ok(pairs.into_iter().map(|p| (p.image_id, p.source)).unzip())
    } else {
        Ok((vec![0], vec![ImageRgb::read_png(input)?]))
    }
}

fn write_png(img: &ImageRgb, path: &Path, prov: &Provenance) -> Result<()> {
    let text = prov.png_text();
    let text: Vec<(&str, &str)> = text.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    img.write_png(path, &text)
}

fn sampler_config(cfg: &RunConfig, a: &SamplerArgs) -> SamplerConfig {
    let mut sc = cfg.sampler;
    if let Some(n) = a.inv_steps {
        sc.inversion_steps = n;
    }
    if let Some(n) = a.den_steps {
        sc.denoise_steps = n;
    }
    if let Some(e) = a.eta {
        sc.eta = e;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    sc
}

fn cmd_translate(mut cfg: RunConfig, a: TranslateArgs) -> Result<()> {
    cfg.sampler = sampler_config(&cfg, &a.sampler);
    let (model, schedule) = load_model(&cfg, &a.checkpoint)?;
    let (ids, sources) = read_sources(&a.input)?;
    let run = translate_batch(&model, &schedule, &cfg.codec, &sources, &cfg.sampler)?;
    if run.diagnostics.clamped_steps > 0 {
        eprintln!("note: {} sampler hops clamped a negative variance term", run.diagnostics.clamped_steps);
    }
    let prov = cfg.provenance();
    if a.input.is_dir() {
        fs::create_dir_all(&a.output).map_err(|e| Error::Io { path: a.output.display().to_string(), source: e })?;
        for (id, img) in ids.iter().zip(&run.outputs) {
            write_png(img, &a.output.join(format!("{}.png", file_stem(*id))), &prov)?;
        }
        println!("translated {} images into {}", run.outputs.len(), a.output.display());
    } else {
        write_png(&run.outputs[0], &a.output, &prov)?;
    }
    Ok(())
}

fn cmd_eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let manifest = read_manifest(&a.gt)?;
    let gt_pairs = read_dataset(&a.gt)?;
    let mut pred = Vec::with_capacity(manifest.ids.len());
    for id in &manifest.ids {
        pred.push(ImageRgb::read_png(a.pred.join(format!("{}.png", file_stem(*id))))?);
    }
    let gt: Vec<ImageRgb> = gt_pairs.into_iter().map(|p| p.target).collect();
    let (mut report, _) = evaluate(&pred, &gt, &manifest.ids, &cfg.metrics, &cfg.provenance())?;
    report.config = cfg.canonical_json();
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io { path: p.display().to_string(), source: e }),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::Io { path: "<stdout>".into(), source: e }),
    }
}
