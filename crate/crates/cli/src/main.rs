//! `kpzlab`: batch runner for the mollified KPZ experiments.
//!
//! Every computing subcommand writes `<out>/<name>.<csv|json>` plus
//! `<out>/<name>.manifest.json`. Exit codes: 0 success, 2 configuration
//! error, 3 invariant violation, 4 numeric instability.

mod commands;
mod failure;
mod manifest;
mod plot;
mod settings;
mod table;

use clap::{Args, Parser, Subcommand};
use commands::Outcome;
use failure::Failure;
use kpz_core::ExperimentConfig;
use manifest::RunManifest;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use table::Format;

#[derive(Parser, Debug)]
#[command(name = "kpzlab", version, about = "Polymer, lattice and tiling experiments for the mollified KPZ equation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML file of `key = value` settings (dotted keys for nested tables).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lattice.spacing=0.125`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo partition function.
    Partition(commands::PartitionArgs),
    /// Pair and overlap covariance estimators at separations along e₁.
    Covariance(commands::CovarianceArgs),
    /// Log-log decay fit of the overlap covariance.
    Powerlaw(commands::PowerlawArgs),
    /// Martingale increments along a horizon grid.
    Plateau(commands::PlateauArgs),
    /// Dyadic tiling: sandwich check, discretized mean, L² gap per level.
    Tiling(commands::TilingArgs),
    /// Lattice solver against the polymer representation.
    She(commands::SheArgs),
    /// Gap between h_ε and its stationary proxy along ε.
    Theorem1(commands::Theorem1Args),
    /// Point-mass start through the bridge representation.
    NarrowWedge(commands::WedgeArgs),
    /// Lower tail and negative moments of log Z.
    Tails(commands::TailsArgs),
    /// Bridge partition function against the product of its end windows.
    Split(commands::SplitArgs),
    /// Scaling of the discretized noise against test functions.
    NoiseCheck(commands::NoiseCheckArgs),
    /// Print the normalized configuration, or every violated constraint.
    Validate,
    /// Render two columns of a result CSV as SVG.
    Plot(plot::PlotArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Partition(_) => "partition",
            Command::Covariance(_) => "covariance",
            Command::Powerlaw(_) => "powerlaw",
            Command::Plateau(_) => "plateau",
            Command::Tiling(_) => "tiling",
            Command::She(_) => "she",
            Command::Theorem1(_) => "theorem1",
            Command::NarrowWedge(_) => "narrow-wedge",
            Command::Tails(_) => "tails",
            Command::Split(_) => "split",
            Command::NoiseCheck(_) => "noise-check",
            Command::Validate => "validate",
            Command::Plot(_) => "plot",
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    settings::load(common.config.as_deref(), &overrides)
}

fn execute(command: &Command, config: &ExperimentConfig) -> Result<Outcome, Failure> {
    match command {
        Command::Partition(a) => commands::partition(config, a),
        Command::Covariance(a) => commands::covariance(config, a),
        Command::Powerlaw(a) => commands::powerlaw(config, a),
        Command::Plateau(a) => commands::plateau(config, a),
        Command::Tiling(a) => commands::tiling(config, a),
        Command::She(a) => commands::she(config, a),
        Command::Theorem1(a) => commands::theorem1(config, a),
        Command::NarrowWedge(a) => commands::narrow_wedge(config, a),
        Command::Tails(a) => commands::tails(config, a),
        Command::Split(a) => commands::split(config, a),
        Command::NoiseCheck(a) => commands::noise_check(config, a),
        Command::Validate | Command::Plot(_) => unreachable!("handled before dispatch"),
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> Result<(), Failure> {
    let path = dir.join(name);
    File::create(&path)?.write_all(bytes)?;
    manifest.outputs.push(path);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Plot(a) = &cli.command {
        let out = plot::plot(a)?;
        println!("{}", out.display());
        return Ok(());
    }
    let config = resolve(&cli.common)?;
    if let Command::Validate = cli.command {
        let v = commands::violations(&config);
        if !v.is_empty() {
            v.write(std::io::stderr(), Format::Csv, &settings::content_hash(&config))?;
            return Err(Failure::config(format!("{} constraint(s) violated", v.len())));
        }
        print!("{}", settings::normalized(&config));
        return Ok(());
    }
    config.validate()?;
    let name = cli.command.name();
    let hash = settings::content_hash(&config);
    let outcome = execute(&cli.command, &config)?;

    std::fs::create_dir_all(&cli.common.out)?;
    let mut manifest = RunManifest::new(name, std::env::args().skip(1).collect(), config, hash.clone());
    let mut rows = vec![];
    outcome.table.write(&mut rows, cli.common.format, &hash)?;
    write_file(&cli.common.out, &format!("{name}.{}", cli.common.format.extension()), &rows, &mut manifest)?;
    for (file, bytes) in &outcome.attachments {
        write_file(&cli.common.out, file, bytes, &mut manifest)?;
    }
    let m = serde_json::to_vec_pretty(&manifest)?;
    File::create(cli.common.out.join(format!("{name}.manifest.json")))?.write_all(&m)?;
    std::io::stdout().write_all(&rows)?;
    match outcome.violation {
        Some(v) => Err(Failure::invariant(v)),
        None => Ok(()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(f) = run(cli) {
        eprintln!("kpzlab: {}", f.message);
        std::process::exit(f.code);
    }
}
