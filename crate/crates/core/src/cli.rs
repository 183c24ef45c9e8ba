//! Command-line front end. [`run`] maps outcomes to exit codes: 0 success,
//! 1 validation failure, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analytics::{analyze_usage, read_traces, write_traces, TracingField};
use crate::attention::PeMode;
use crate::config::{resolve_config, Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::flow::{sample, SamplerConfig, Solver};
use crate::model::DiTMoE;
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, save_checkpoint, MetricsWriter, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "dsmoe", version, about = "Sparse diffusion transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on the synthetic dataset, writing metrics and checkpoints.
    Train(TrainArgs),
    /// Generate images as PPM files.
    Sample(SampleArgs),
    /// Summarize expert usage from routing traces.
    Analyze(AnalyzeArgs),
    /// Print total and activated parameter counts.
    CountParams(ModelArgs),
    /// Check a configuration and print the report.
    ValidateConfig(ModelArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Config file or preset name (e.g. presets/dsmoe-s-e16).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pe: Option<PeMode>,
    #[arg(long)]
    pub ablation: Vec<Ablation>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Steps to run in this invocation.
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Resume from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training hyperparameters as TOML.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also keep `checkpoint-<step>.dsmk` every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 1.0)]
    pub cfg_scale: f64,
    /// Guidance interval on t as LO,HI.
    #[arg(long, value_parser = parse_interval)]
    pub cfg_interval: Option<(f64, f64)>,
    #[arg(long, default_value = "heun")]
    pub solver: Solver,
    #[arg(long, default_value_t = 50)]
    pub ode_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_scale: f64,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "samples")]
    pub out: PathBuf,
    /// Use the raw training weights instead of the EMA shadow.
    #[arg(long)]
    pub raw_weights: bool,
    /// Also record routing traces to this file.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Trace file written by `sample --traces`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Generate traces by sampling every class from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Images per class when generating traces.
    #[arg(long, default_value_t = 4)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad bound {lo:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad bound {hi:?}"))?;
    Ok((lo, hi))
}

/// Either a clean validation failure or a runtime error.
enum Failure {
    Invalid(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn model_config(args: &ModelArgs) -> std::result::Result<ModelConfig, Failure> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Failure::Invalid("--config is required".into()))?;
    let mut cfg = resolve_config(path)?;
    if let Some(pe) = args.pe {
        cfg.pe_mode = pe;
    }
    for &a in &args.ablation {
        cfg.apply_ablation(a).map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    let report = cfg.validate();
    if !report.is_ok() {
        return Err(Failure::Invalid(report.to_string()));
    }
    Ok(cfg)
}

fn human(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.3}B", n as f64 / 1e9)
    } else {
        format!("{:.1}M", n as f64 / 1e6)
    }
}

fn count_params(args: &ModelArgs, out: &mut impl Write) -> Outcome {
    let cfg = model_config(args)?;
    let c = cfg.count_parameters()?;
    writeln!(
        out,
        "{:<16} L={:<3} D={:<5} S={:<5} heads={:<3} {:<8} activated={:>9} total={:>9} ({} / {})",
        cfg.name,
        cfg.blocks,
        cfg.hidden,
        cfg.intermediate,
        cfg.heads,
        cfg.expert_spec,
        human(c.activated),
        human(c.total),
        c.activated,
        c.total
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn validate_config(args: &ModelArgs, out: &mut impl Write) -> Outcome {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Failure::Invalid("--config is required".into()))?;
    let mut cfg = resolve_config(path)?;
    if let Some(pe) = args.pe {
        cfg.pe_mode = pe;
    }
    for &a in &args.ablation {
        if let Err(e) = cfg.apply_ablation(a) {
            writeln!(out, "violation: {e}").map_err(|e| Error::io("<stdout>", e))?;
            return Err(Failure::Invalid(String::new()));
        }
    }
    let report = cfg.validate();
    writeln!(out, "{report}").map_err(|e| Error::io("<stdout>", e))?;
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::Invalid(String::new()))
    }
}

fn train(args: &TrainArgs, out: &mut impl Write) -> Outcome {
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut trainer = match &args.checkpoint {
        Some(path) => Trainer::from_bundle(&load_checkpoint(path)?)?,
        None => {
            let cfg = model_config(&args.model)?;
            let mut tc = match &args.train_config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    toml::from_str::<TrainConfig>(&text).map_err(|e| Error::ConfigParse {
                        path: p.display().to_string(),
                        message: e.to_string(),
                    })?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = args.seed {
                tc.seed = s;
            }
            if let Some(lr) = args.lr {
                tc.lr = lr;
            }
            if let Some(b) = args.batch_size {
                tc.batch_size = b;
            }
            tc.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
            Trainer::new(cfg, tc)?
        }
    };
    let layers = trainer.model.config().moe_blocks().len();
    let mut metrics = MetricsWriter::open(&args.out.join("metrics.csv"), layers, trainer.config.flush_every)?;
    for _ in 0..args.steps {
        let m = trainer.step()?;
        metrics.write(&m)?;
        if let Some(every) = args.checkpoint_every {
            if every > 0 && m.step % every == 0 {
                let p = args.out.join(format!("checkpoint-{}.dsmk", m.step));
                save_checkpoint(&trainer.to_bundle(), &p)?;
            }
        }
        if m.step % trainer.config.flush_every == 0 {
            writeln!(out, "step {} loss {:.6} grad_norm {:.4}", m.step, m.loss, m.grad_norm)
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    metrics.flush()?;
    let final_path = args.out.join("checkpoint.dsmk");
    save_checkpoint(&trainer.to_bundle(), &final_path)?;
    writeln!(out, "wrote {}", final_path.display()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn sampler_config(a: &SamplerArgs) -> std::result::Result<SamplerConfig, Failure> {
    let c = SamplerConfig {
        solver: a.solver,
        steps: a.ode_steps,
        cfg_scale: a.cfg_scale,
        cfg_interval: a.cfg_interval,
        noise_scale: a.noise_scale,
    };
    c.validate().map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(c)
}

fn load_model(checkpoint: Option<&Path>, model: Option<&ModelArgs>, seed: u64, raw: bool) -> std::result::Result<DiTMoE, Failure> {
    match checkpoint {
        Some(path) => {
            let bundle = load_checkpoint(path)?;
            let trainer = Trainer::from_bundle(&bundle)?;
            Ok(if raw { trainer.model } else { trainer.ema_model()? })
        }
        None => match model {
            Some(m) if m.config.is_some() => Ok(DiTMoE::new(model_config(m)?, seed)?),
            _ => Err(Failure::Invalid("either --checkpoint or --config is required".into())),
        },
    }
}

/// Binary PPM (P6) of one `[C×H×W]` image mapped from `[−1, 1]` to
/// `0..=255`. One channel is replicated to grey; beyond three channels only
/// the first three are written.
pub fn to_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::InvalidShape(format!("PPM expects [C×H×W], got {:?}", img.shape()))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let px = |v: f64| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = if c >= 3 { ch } else { 0 };
                out.push(px(img.data()[(src * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

fn sample_cmd(args: &SampleArgs, out: &mut impl Write) -> Outcome {
    let sc = sampler_config(&args.sampler)?;
    let mut model = load_model(args.checkpoint.as_deref(), Some(&args.model), args.seed, args.raw_weights)?;
    let cfg = model.config().clone();
    if args.num_samples == 0 {
        return Err(Failure::Invalid("--num-samples must be at least 1".into()));
    }
    let classes: Vec<usize> = match args.class {
        Some(k) if k >= cfg.num_classes => {
            return Err(Failure::Invalid(format!("class {k} outside 0..{}", cfg.num_classes)))
        }
        Some(k) => vec![k; args.num_samples],
        None => (0..args.num_samples).map(|i| i % cfg.num_classes).collect(),
    };
    let (h, w) = cfg.image_size();
    let shape = [cfg.in_channels, h, w];
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (images, traces) = if args.traces.is_some() {
        let mut field = TracingField::new(&mut model);
        let x = sample(&mut field, &classes, &shape, &sc, &mut rng)?;
        (x, Some(field.traces))
    } else {
        (sample(&mut model, &classes, &shape, &sc, &mut rng)?, None)
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let per = images.numel() / classes.len();
    let mut manifest = String::from("file,class,seed,solver,ode_steps,cfg_scale,cfg_interval,weights\n");
    let interval = sc.cfg_interval.map(|(a, b)| format!("{a};{b}")).unwrap_or_else(|| "none".into());
    let weights = if args.checkpoint.is_none() {
        "init"
    } else if args.raw_weights {
        "raw"
    } else {
        "ema"
    };
    for (i, &k) in classes.iter().enumerate() {
        let img = Tensor::new(shape, images.data()[i * per..(i + 1) * per].to_vec())?;
        let name = format!("sample_{i:04}.ppm");
        let p = args.out.join(&name);
        fs::write(&p, to_ppm(&img)?).map_err(|e| Error::io(&p, e))?;
        manifest.push_str(&format!(
            "{name},{k},{},{},{},{},{interval},{weights}\n",
            args.seed, sc.solver, sc.steps, sc.cfg_scale
        ));
    }
    let mp = args.out.join("manifest.csv");
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    if let (Some(path), Some(traces)) = (&args.traces, traces) {
        write_traces(path, cfg.experts()?.routed, &traces)?;
    }
    writeln!(out, "wrote {} samples to {}", classes.len(), args.out.display()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn analyze(args: &AnalyzeArgs, out: &mut impl Write) -> Outcome {
    let (routed, traces) = match (&args.traces, &args.checkpoint) {
        (Some(p), None) => read_traces(p)?,
        (None, Some(_)) => {
            let sc = sampler_config(&args.sampler)?;
            let mut model = load_model(args.checkpoint.as_deref(), None, args.seed, false)?;
            let cfg = model.config().clone();
            let classes: Vec<usize> = (0..cfg.num_classes)
                .flat_map(|c| std::iter::repeat_n(c, args.num_samples))
                .collect();
            let (h, w) = cfg.image_size();
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let mut field = TracingField::new(&mut model);
            sample(&mut field, &classes, &[cfg.in_channels, h, w], &sc, &mut rng)?;
            (cfg.experts()?.routed, field.traces)
        }
        _ => return Err(Failure::Invalid("pass exactly one of --traces or --checkpoint".into())),
    };
    let report = analyze_usage(&traces, routed)?;
    report.write(&args.out)?;
    if !report.unused.is_empty() {
        writeln!(out, "unused expert: {:?}", report.unused).map_err(|e| Error::io("<stdout>", e))?;
    }
    writeln!(out, "wrote usage tables to {}", args.out.display()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

/// Executes a parsed command, printing to `out` and diagnostics to `err`.
pub fn execute(cli: &Cli, out: &mut impl Write, err: &mut impl Write) -> i32 {
    let outcome = match &cli.command {
        Command::Train(a) => train(a, out),
        Command::Sample(a) => sample_cmd(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::CountParams(a) => count_params(a, out),
        Command::ValidateConfig(a) => validate_config(a, out),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(msg)) => {
            if !msg.is_empty() {
                let _ = writeln!(err, "{msg}");
            }
            EXIT_INVALID
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli, out, err),
        Err(e) => {
            let _ = write!(err, "{e}");
            if e.use_stderr() {
                EXIT_RUNTIME
            } else {
                let _ = write!(out, "{e}");
                EXIT_OK
            }
        }
    }
}
