use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod context;

use commands::{dataset, ingest, model, qc, round, service, synth};

#[derive(Debug, Parser)]
#[command(name = "histoloop", version, about = "Human-in-the-loop tissue annotation and patch classification for whole-slide images")]
struct Cli {
    /// Data root holding slides, sessions, the label store, models and rounds.
    #[arg(long, global = true, env = "HISTOLOOP_DATA_ROOT", default_value = "data")]
    root: PathBuf,

    /// Log filter, e.g. `info` or `histoloop_core=debug`.
    #[arg(long, global = true, env = "HISTOLOOP_LOG", default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Grid a slide, apply the white filter and store the foreground patches.
    Tile(ingest::TileArgs),
    /// Embed the foreground patches of a tiled slide.
    Embed(ingest::EmbedArgs),
    /// Open (or resume) the annotation session of a slide.
    Annotate(service::AnnotateArgs),
    /// Run the annotation service over the data root.
    Serve(service::ServeArgs),
    /// Label store maintenance.
    #[command(subcommand)]
    Dataset(dataset::DatasetCommand),
    /// Train a patch classifier from a TOML job file.
    Train(model::TrainArgs),
    /// Predict every foreground tile of one or more slides.
    Predict(model::PredictArgs),
    /// Write GeoJSON, heatmaps and an overlay for predicted slides.
    Export(model::ExportArgs),
    /// Review rounds over the unlabeled pool.
    #[command(subcommand)]
    Round(round::RoundCommand),
    /// Foreground masks, Dice evaluation, bag manifests and mapped accuracy.
    #[command(subcommand)]
    Qc(qc::QcCommand),
    /// Render synthetic slides with known tile classes.
    Synth(synth::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let root = cli.root;
    let result = match cli.command {
        Command::Tile(a) => ingest::tile(&root, a),
        Command::Embed(a) => ingest::embed(a),
        Command::Annotate(a) => service::annotate(&root, a),
        Command::Serve(a) => service::serve(&root, a),
        Command::Dataset(c) => dataset::run(&root, c),
        Command::Train(a) => model::train(&root, a),
        Command::Predict(a) => model::predict(&root, a),
        Command::Export(a) => model::export(&root, a),
        Command::Round(c) => round::run(&root, c),
        Command::Qc(c) => qc::run(&root, c),
        Command::Synth(a) => synth::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
