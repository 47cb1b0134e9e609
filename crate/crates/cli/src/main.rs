use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bcnet::checkpoint::Checkpoint;
use bcnet::customize::CustomizeParams;
use bcnet::data::{load_pairs, write_synthetic_dataset, DegradeParams};
use bcnet::image_io::{read_png, write_png, BitDepth};
use bcnet::quantizer::{build_gamut, ColorGamut, GamutParams};
use bcnet::trainer::{ablation_run, evaluate, evaluate_passthrough, train, Ablation, TrainConfig};
use bcnet::Image;
use clap::{Args, Parser, Subcommand};

/// Low-light enhancement by separate brightening and colorization.
#[derive(Debug, Parser)]
#[command(name = "bcnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, loss.csv and run.json under --out.
    Train(TrainArgs),
    /// Enhance one PNG image.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on paired low/high directories.
    Eval(EvalArgs),
    /// Train one ablated variant and report it against the baseline.
    Ablate(AblateArgs),
    /// Print or regenerate the chroma gamut fixture.
    Gamut(GamutArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Write a synthetic low/high dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                TrainConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            config.max_steps = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saturation gain; 0 leaves colours as predicted.
    #[arg(long, default_value_t = 0.0)]
    omega: f64,
    /// Weight of the reference style in [0, 1]; defaults to 0.7 with --reference.
    #[arg(long)]
    gamma: Option<f64>,
    /// Reference PNG whose colour statistics guide the result.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Write 16-bit PNG output.
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "passthrough")]
    checkpoint: Option<PathBuf>,
    /// Score the low-light inputs directly instead of a model's outputs.
    #[arg(long, conflicts_with = "checkpoint")]
    passthrough: bool,
    #[arg(long)]
    low: PathBuf,
    #[arg(long)]
    high: PathBuf,
    /// Directory for report.json and enhanced images.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// One of no_decouple, no_share, no_lam, no_cem, no_lq.
    #[arg(long)]
    name: Ablation,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GamutArgs {
    /// Rebuild the gamut from the colour-space scan instead of reading the shipped fixture.
    #[arg(long)]
    regenerate: bool,
    /// Write the fixture to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail unless the regenerated gamut equals the shipped fixture.
    #[arg(long, requires = "regenerate")]
    check: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Largest accepted image side in pixels.
    #[arg(long, default_value_t = bcnet_service::DEFAULT_MAX_SIDE)]
    max_side: u32,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Ok(Checkpoint::load(path, &ColorGamut::shipped())?)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    let pairs = config.data.load::<f32>()?;
    let out = train(config, pairs, ColorGamut::shipped(), Some(&args.out))?;
    let s = &out.summary;
    println!("trained {} steps, loss {:.5} -> {:.5}", s.steps_run, s.first_loss, s.last_loss);
    if let Some(report) = &s.eval {
        print!("{}", report.to_table());
    }
    println!("checkpoint: {}", args.out.join("final.ckpt").display());
    Ok(())
}

fn run_enhance(args: EnhanceArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let img: Image = read_png(&args.input)?;
    let reference = args.reference.as_deref().map(read_png).transpose()?;
    let gamma = args.gamma.unwrap_or(if reference.is_some() { bcnet::customize::DEFAULT_GAMMA } else { 0.0 });
    let params = CustomizeParams { omega: args.omega, gamma, reference, ..Default::default() };
    let out = ck.model.enhance(&img, &params)?;
    let depth = if args.sixteen_bit { BitDepth::Sixteen } else { BitDepth::Eight };
    write_png(&out.rgb, &args.output, depth)?;
    println!("wrote {} (omega {}, gamma {gamma})", args.output.display(), args.omega);
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let pairs = load_pairs::<f32>(&args.low, &args.high)?.materialize()?;
    let dump = args.out.as_ref().map(|d| d.join("images"));
    let report = match &args.checkpoint {
        Some(path) => evaluate(&load_checkpoint(path)?.model, &pairs, dump.as_deref())?,
        None => evaluate_passthrough(&pairs)?,
    };
    print!("{}", report.to_table());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let pairs = base.data.load::<f32>()?;
    let r = ablation_run(args.name, &base, pairs, ColorGamut::shipped(), Some(&args.out))?;
    println!(
        "{}: {} parameters (baseline {}), encoder parameters {} (baseline {})",
        r.ablation, r.parameters, r.baseline_parameters, r.encoder_parameters, r.baseline_encoder_parameters
    );
    if let Some(report) = &r.outcome.summary.eval {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_gamut(args: GamutArgs) -> Result<()> {
    let gamut = if args.regenerate { build_gamut(&GamutParams::default())? } else { ColorGamut::shipped() };
    let text = gamut.to_fixture();
    if args.check && text != ColorGamut::shipped().to_fixture() {
        bail!(bcnet::Error::GamutMismatch { expected: ColorGamut::shipped().fingerprint(), found: gamut.fingerprint() });
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            eprintln!("{} bins, sha256 {}", gamut.len(), gamut.fingerprint());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run_serve(args: ServeArgs) -> Result<()> {
    let limits = bcnet_service::Limits { max_side: args.max_side, ..Default::default() };
    let state = bcnet_service::AppState::new(ColorGamut::shipped(), limits);
    if let Some(path) = &args.model {
        let id = state.load_model(path)?;
        println!("model {id} loaded from {}", path.display());
    }
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(bcnet_service::serve(addr, state))?;
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let manifest = write_synthetic_dataset(&args.out, args.count, args.size, args.seed, &DegradeParams::default())?;
    println!("wrote {} pairs to {}", manifest.pairs.len(), args.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<bcnet::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Enhance(a) => run_enhance(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Gamut(a) => run_gamut(a),
        Command::Serve(a) => run_serve(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
