use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccra_core::cli::{
    cmd_forward, cmd_gradcheck, cmd_heatmap, cmd_params, cmd_variants, seed_override, CliError,
    HeatmapFormat, MapSelect, SEED_ENV,
};

#[derive(Parser)]
#[command(
    name = "ccra",
    version,
    about = "Text-conditioned cross-layer attention toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a forward pass and write fused features, logits and attention maps.
    Forward {
        #[arg(long)]
        config: PathBuf,
        /// L×N×d tensor file; synthesized from the seed when absent.
        #[arg(long)]
        visual: Option<PathBuf>,
        /// T×d tensor file; synthesized from the seed when absent.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides CCRA_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic and finite-difference gradients per parameter group.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export one attention map as a square PGM image or CSV grid.
    Heatmap {
        /// wlp.ct (with a layer index) or wp.ct (with "patch").
        #[arg(long)]
        map: PathBuf,
        /// Layer index or "patch".
        #[arg(long)]
        select: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pgm")]
        format: String,
    },
    /// Run all integration orders on one input and compare them.
    Variants {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print trainable parameter counts per group.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let env_seed = env_seed.as_deref();
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Forward {
            config,
            visual,
            text,
            out,
            seed,
        } => cmd_forward(
            &config,
            visual.as_deref(),
            text.as_deref(),
            &out,
            seed_override(seed, env_seed)?,
            &mut stdout,
        ),
        Command::Gradcheck {
            config,
            eps,
            tol,
            seed,
        } => cmd_gradcheck(
            &config,
            eps,
            tol,
            seed_override(seed, env_seed)?,
            &mut stdout,
        ),
        Command::Heatmap {
            map,
            select,
            out,
            format,
        } => {
            let select: MapSelect = select.parse()?;
            let format: HeatmapFormat = format.parse()?;
            cmd_heatmap(&map, select, &out, format)
        }
        Command::Variants { config, out, seed } => {
            cmd_variants(&config, &out, seed_override(seed, env_seed)?, &mut stdout)
        }
        Command::Params { config } => cmd_params(&config, &mut stdout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ccra: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
