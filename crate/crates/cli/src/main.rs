use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use retina_xai::pipeline::{run_stage, PipelineConfig, PipelineError, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Synth,
    Split,
    Train,
    Eval,
    Explain,
    XaiIou,
    MaskExp,
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::Split => vec![Stage::Split],
            Command::Train => vec![Stage::Train],
            Command::Eval => vec![Stage::Eval],
            Command::Explain => vec![Stage::Explain],
            Command::XaiIou => vec![Stage::XaiIou],
            Command::MaskExp => vec![Stage::MaskExp],
            Command::Report => vec![Stage::Report],
            Command::All => Stage::ALL.to_vec(),
        }
    }
}

/// Multi-task fundus classification with Grad-CAM validation.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    command: Command,
    /// JSON pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: &Args) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    for stage in args.command.stages() {
        log::info!("running {stage}");
        for path in run_stage(stage, &cfg)? {
            log::debug!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
