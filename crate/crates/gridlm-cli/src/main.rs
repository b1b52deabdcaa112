//! `gridlm`: train topographic grid language models and run the full
//! contrast / clustering / spatial-statistics pipeline on them.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use clap::{Parser, Subcommand};
use gridlm_cli::commands::{
    self, ActivationsArgs, CliError, ClustersArgs, ContrastArgs, MoranArgs, ProfileArgs,
    SmoothArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "gridlm",
    version,
    about = "Topographic grid language models: training, contrasts, clusters, spatial statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (topographic or baseline) from a JSON run config.
    Train(TrainArgs),
    /// Contrast two stimulus conditions into per-hook t-maps (CSV + PGM).
    Contrast(ContrastArgs),
    /// Grow significance clusters on a stat-map CSV.
    Clusters(ClustersArgs),
    /// Moran's I spatial autocorrelation of a map (optionally islands-only).
    Moran(MoranArgs),
    /// Smooth a finished map for visualization (non-canonical; the readout
    /// simulation belongs in `contrast --fwhm`).
    Smooth(SmoothArgs),
    /// Mean absolute activation per cluster and condition.
    Profile(ProfileArgs),
    /// Export pooled per-stimulus unit activations per hook.
    Activations(ActivationsArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let out = commands::cmd_train(&args)?;
            println!(
                "trained {} steps{} -> {}",
                out.steps_completed,
                if out.early_stopped { " (early stop)" } else { "" },
                out.checkpoint.display()
            );
        }
        Command::Contrast(args) => {
            let out = commands::cmd_contrast(&args)?;
            for (hook, path) in &out.maps {
                println!("{hook}: {}", path.display());
            }
        }
        Command::Clusters(args) => {
            let out = commands::cmd_clusters(&args)?;
            println!("{} cluster(s) -> {}", out.clusters.len(), out.clusters_json.display());
        }
        Command::Moran(args) => {
            let out = commands::cmd_moran(&args)?;
            println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
        }
        Command::Smooth(args) => {
            let out = commands::cmd_smooth(&args)?;
            println!("visual-only smoothed map -> {}", out.smoothed_csv.display());
        }
        Command::Profile(args) => {
            let out = commands::cmd_profile(&args)?;
            println!("{} profile row(s) -> {}", out.rows.len(), out.profile_csv.display());
        }
        Command::Activations(args) => {
            let out = commands::cmd_activations(&args)?;
            for (hook, path) in &out.files {
                println!("{hook}: {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("gridlm: {e}");
        std::process::exit(e.exit_code());
    }
}
