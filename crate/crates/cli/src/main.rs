use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use kanrecon_cli::commands::{self, ReconOptions, Source};
use kanrecon_cli::{CliError, CliResult, RunConfig};

/// KAN-based conditional diffusion for undersampled MRI, on synthetic phantoms.
#[derive(Parser, Debug)]
#[command(name = "kanrecon", version)]
struct Cli {
    /// JSON run configuration; omitted fields take the defaults listed below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the data, mask and training seeds with ones derived from this.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image reconstruction.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Write a per-image sampler trace CSV.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and evaluation phantom datasets.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train the denoiser; writes a checkpoint and `<ckpt>.loss.csv`.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
    },
    /// Reconstruct the evaluation set into `<out>/af<N>/`.
    Reconstruct {
        #[arg(long, default_value = "model.ckpt")]
        ckpt: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "recon")]
        out: PathBuf,
        /// Only write ground truth and zero-filled baselines.
        #[arg(long)]
        zero_filled_only: bool,
    },
    /// Score reconstructions; writes `<report>.csv` and `<report>.json`.
    Eval {
        #[arg(long, default_value = "recon")]
        out: PathBuf,
        #[arg(long, default_value = "report")]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Source::Recon)]
        source: Source,
    },
    /// Train and score the full model and each component-removed variant.
    Ablate {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let opts = ReconOptions {
        trace: cli.trace,
        threads: cli.threads,
        zero_filled_only: false,
    };
    match cli.command {
        Command::GenData { out } => {
            let s = commands::gen_data(&cfg, &out)?;
            println!("wrote {} training images to {}", s.n_train, s.train.display());
            println!("wrote {} evaluation images to {}", s.n_eval, s.eval.display());
        }
        Command::Train { data, ckpt } => {
            let losses = commands::train_model(&cfg, &data, &ckpt)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("trained {} epochs: loss {first:.5} -> {last:.5}", losses.len());
            }
            println!("checkpoint {}", ckpt.display());
        }
        Command::Reconstruct {
            ckpt,
            data,
            out,
            zero_filled_only,
        } => {
            let opts = ReconOptions { zero_filled_only, ..opts };
            let n = commands::reconstruct(&cfg, Some(&ckpt), &data, &out, opts)?;
            println!("wrote {n} images under {}", out.display());
        }
        Command::Eval { out, report, source } => {
            let reports = commands::evaluate(&cfg, &out, source)?;
            let (csv, json) = commands::write_reports(&report, &reports)?;
            for r in &reports {
                println!("{}", r.csv_row());
            }
            println!("reports {} {}", csv.display(), json.display());
        }
        Command::Ablate { data, out } => {
            let rows = commands::ablate(&cfg, &data, &out, opts)?;
            println!("{}", commands::ABLATION_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KANRECON_LOG", "info")).init();
    let help = format!(
        "Exit codes: 0 ok, 2 config, 3 io, 4 non-finite loss, 5 checkpoint mismatch, \
         6 missing reconstructions.\nLog level: KANRECON_LOG=error|info|debug.\n\n\
         Default configuration:\n{}",
        RunConfig::default().to_json()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
