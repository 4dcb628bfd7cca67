use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use icl_bench::corpus::RecordIndex;
use icl_bench::gateway::Backend;
use icl_bench::runner::{self, Experiment, Overrides, RunnerError};

#[derive(Parser)]
#[command(name = "icl-bench", version, about = "In-context learning benchmark for vision-language models on histopathology tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the gateway backend from the config.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    /// Overrides the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the config, manifest and embedding store.
    Ingest(Common),
    /// Draw the balanced test set into testset.json.
    Testset(Common),
    /// Select shots for every grid cell into shots.jsonl.
    Shots(Common),
    /// Run the full grid and write run.jsonl, summary.json and reports.
    Run(Common),
    /// Recompute summary.json from an existing run.jsonl.
    Eval(Common),
    /// Render report.csv and report.md from summary.json.
    Report(Common),
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: icl_bench::gateway::GatewayError| e.to_string())
}

fn load(common: &Common) -> Result<Experiment, RunnerError> {
    let exp = runner::validate_config_with(
        &common.config,
        &Overrides {
            backend: common.backend,
            out_dir: common.out.clone(),
        },
    )?;
    log::info!("config {} ({})", common.config.display(), exp.config_hash);
    Ok(exp)
}

fn ingest(exp: &Experiment) {
    let index = RecordIndex::new(exp.records.clone());
    println!("config hash  {}", exp.config_hash);
    println!("dataset      {}", exp.dataset);
    println!("records      {}", index.len());
    for label in exp.vocab.keys() {
        println!("  {label:<6} {}", index.with_label(label).count());
    }
    println!(
        "store        {} vectors, dim {}, model {}",
        exp.store.len(),
        exp.store.dim(),
        exp.store.model_id()
    );
    let cells: Vec<String> = exp.cells.iter().map(|(s, k)| format!("{s}:{k}")).collect();
    println!("grid         {}", cells.join(" "));
}

fn execute(command: Command) -> Result<(), RunnerError> {
    match command {
        Command::Ingest(c) => ingest(&load(&c)?),
        Command::Testset(c) => {
            let exp = load(&c)?;
            let ts = runner::write_test_set(&exp, exp.out_dir())?;
            println!(
                "{} test tiles -> {}",
                ts.tile_ids.len(),
                exp.out_dir().join(runner::TESTSET_FILE).display()
            );
        }
        Command::Shots(c) => {
            let exp = load(&c)?;
            let n = runner::write_shot_sets(&exp, exp.out_dir())?;
            println!("{n} shot sets -> {}", exp.out_dir().join(runner::SHOTS_FILE).display());
        }
        Command::Run(c) => {
            let exp = load(&c)?;
            let gateway = runner::build_gateway(&exp)?;
            let record = runner::run_experiment(&exp, &gateway)?;
            let failed = record.entries.iter().filter(|e| e.error.is_some()).count();
            println!("{} items, {failed} failed, {} network requests", record.entries.len(), gateway.network_calls());
            print!("{}", icl_bench::evalstat::render_markdown(&record.summaries));
        }
        Command::Eval(c) => {
            let exp = load(&c)?;
            let summaries = runner::evaluate_log(&exp, &exp.out_dir().join(runner::RUN_LOG), exp.out_dir())?;
            print!("{}", icl_bench::evalstat::render_markdown(&summaries));
        }
        Command::Report(c) => {
            let exp = load(&c)?;
            let summaries = runner::report_from_summary(&exp.out_dir().join(runner::SUMMARY_FILE), exp.out_dir())?;
            print!("{}", icl_bench::evalstat::render_markdown(&summaries));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
