//! Pseudo-label mining command line.

mod backends;
mod evalcmd;
mod minecmd;
mod reportcmd;
mod synthcmd;
mod traincmd;
mod util;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "plmine",
    about = "Mine, fuse, evaluate, and visualize pseudo labels for open-vocabulary detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine pseudo labels from a dataset with a scoring backend.
    Mine(minecmd::MineArgs),
    /// Evaluate a pseudo-label file against ground truth.
    EvalPl(evalcmd::EvalArgs),
    /// Merge miner and teacher label files through one threshold + NMS pass.
    FusePl(minecmd::FuseArgs),
    /// Train the toy detector on ground truth plus pseudo labels.
    TrainToy(traincmd::TrainArgs),
    /// Render overlays and a static HTML report for a pseudo-label file.
    Report(reportcmd::ReportArgs),
    /// Generate a synthetic dataset, label space, and split manifests.
    MakeSynth(synthcmd::SynthArgs),
    /// Store oracle embeddings for every region the miner will score.
    Precompute(minecmd::PrecomputeArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Mine(args) => minecmd::run_mine(args),
        Command::EvalPl(args) => evalcmd::run_eval(args).map(|_| ()),
        Command::FusePl(args) => minecmd::run_fuse(args),
        Command::TrainToy(args) => traincmd::run_train(args).map(|_| ()),
        Command::Report(args) => reportcmd::run_report(args),
        Command::MakeSynth(args) => synthcmd::run_synth(args),
        Command::Precompute(args) => minecmd::run_precompute(args),
    };
    if let Err(e) = outcome {
        log::error!("{e:#}");
        std::process::exit(1);
    }
}
