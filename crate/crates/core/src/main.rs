use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stereo_consistency::cli::{self, Resolved};
use stereo_consistency::Result;

/// Stereo feature-consistency experiments on synthetic random-dot stereo.
#[derive(Parser, Debug)]
#[command(name = "stereo-consistency", version)]
struct Args {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and STEREO_CONSISTENCY_OUTPUT).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Corpus directory (default: <output>/data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// `section.field=value` overrides, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Loss ablation: baseline, C, C+M, W, C+W or C+M+W.
    #[arg(long, global = true)]
    ablation: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out corpora.
    GenData,
    /// Train and write checkpoint plus step log.
    Train,
    /// Metrics on the held-out split under every evaluation style.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Feature-consistency report, per-channel inconsistency, V and mask.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plot-ready tables from eval summaries and diagnose channel files.
    Plot {
        /// `summary.csv` files written by eval.
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
        /// `diagnose/per_channel.csv` files.
        #[arg(long = "channels")]
        channels: Vec<PathBuf>,
        /// Output directory for the tables (default: <output>/plot).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn run(args: Args) -> Result<()> {
    let r: Resolved = cli::resolve_config(
        args.config.as_deref(),
        args.output.as_deref(),
        args.data_dir.as_deref(),
        &args.overrides,
        args.ablation.as_deref(),
    )?;
    match args.command {
        Command::GenData => {
            let dir = cli::cmd_gen_data(&r)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Train => {
            let path = cli::cmd_train(&r)?;
            println!("checkpoint written to {} (config {})", path.display(), r.cfg.hash());
        }
        Command::Eval { checkpoint } => {
            for r in cli::cmd_eval(&r, checkpoint.as_deref())? {
                let cos = r.mean_cosine.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
                println!("{:<12} cosine {cos:>7}  >3px {:6.2}%  D1 {:6.2}%", r.style, r.err_gt_3px, r.d1_all);
            }
        }
        Command::Diagnose { checkpoint } => {
            let d = cli::cmd_diagnose(&r, checkpoint.as_deref())?;
            for c in &d.cosine {
                let cos = c.mean_cosine.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
                println!("{:<12} cosine {cos}", c.style);
            }
            for (stage, _, mask) in &d.variance {
                println!("stage {stage}: {} of {} covariance entries selected", mask.count(), mask.channels.pow(2));
            }
        }
        Command::Plot { summaries, channels, out } => {
            let out = out.unwrap_or_else(|| r.cfg.output_dir.join("plot"));
            for p in cli::cmd_plot(&summaries, &channels, &out)? {
                println!("{}", p.display());
            }
        }
        Command::ShowConfig => print!("{}", r.cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
