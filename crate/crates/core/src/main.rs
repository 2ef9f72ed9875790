use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use cdegan::config::ExperimentConfig;
use cdegan::data::RngStream;
use cdegan::evolution::{self, Checkpoint, PopulationState, Streams};
use cdegan::metrics::{kde_grid, mode_coverage, CsvSink, MetricsSink};
use cdegan::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cdegan",
    version,
    about = "Cooperative dual evolution GAN on the 2-D ring benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a population and write metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// KEY=VALUE, dotted keys reach nested tables. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print mode coverage of the best generator in a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump a batch of real, noise or generated points as CSV.
    Sample {
        #[arg(long, value_enum, default_value_t = Kind::Real)]
        kind: Kind,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Needed for `--kind fake`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write `kde.csv` and `samples.csv` for the best generator in a checkpoint.
    PlotData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        #[arg(long, default_value_t = 0.1)]
        bandwidth: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Real,
    Noise,
    Fake,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Spec(_) | Error::Contract(_) => 2,
        Error::Diverged { .. }
        | Error::NonFinite { .. }
        | Error::Domain { .. }
        | Error::Shape { .. } => 3,
        Error::Io { .. } | Error::Csv(_) | Error::Checkpoint(_) => 4,
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(".lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        Ok(Self(path))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_points<W: Write>(out: W, points: &cdegan::autodiff::Tensor) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for i in 0..points.rows() {
        w.write_record(points.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| io_err(Path::new("<csv>"), e))
}

fn load_best(dir: &Path) -> Result<(PopulationState, usize)> {
    let ck = Checkpoint::load(dir)?;
    let best = ck.manifest.best_generator;
    let pop = ck.into_population()?;
    if best >= pop.g_parents.len() {
        return Err(Error::Checkpoint(
            "best generator index out of range".into(),
        ));
    }
    Ok((pop, best))
}

fn positive(n: usize) -> Result<usize> {
    if n == 0 {
        Err(Error::config("n", "must be at least 1"))
    } else {
        Ok(n)
    }
}

fn train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    mut overrides: Vec<String>,
) -> Result<()> {
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    let mut cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let dir = cfg.out_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    let t = &cfg.train;

    let metrics_path = dir.join("metrics.csv");
    let mut csv = CsvSink::new(
        create(&metrics_path)?,
        t.g_parents * t.g_offspring,
        t.d_parents * t.d_offspring,
    )?;
    let ck_dir = dir.join("checkpoint");
    let pop = {
        let mut sinks: [&mut dyn MetricsSink; 1] = [&mut csv];
        evolution::train(t, &mut sinks, Some(&ck_dir))
    };
    csv.into_inner()?;
    let pop = pop?;

    let best = pop.best_generator();
    let samples = evolution::generate(
        &pop,
        best,
        t.eval_samples,
        &mut Streams::new(t.seed).root().child("summary"),
    )?;
    let report = mode_coverage(&samples, &t.dataset, t.threshold_sigmas)?;
    let summary = json!({
        "covered_modes": report.covered_modes,
        "hq_ratio": report.hq_ratio,
        "iterations": pop.iteration,
        "config": cfg,
    });
    let path = dir.join("summary.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| io_err(&path, e))?;
    println!("{}", summary["covered_modes"]);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
            overrides,
        } => train(config, seed, out_dir, overrides),
        Command::Eval {
            checkpoint,
            n,
            seed,
        } => {
            let n = positive(n)?;
            let (pop, best) = load_best(&checkpoint)?;
            let samples =
                evolution::generate(&pop, best, n, &mut RngStream::new(seed).child("eval"))?;
            let report = mode_coverage(&samples, &pop.config.dataset, pop.config.threshold_sigmas)?;
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::Sample {
            kind,
            n,
            seed,
            checkpoint,
            config,
            overrides,
            out,
        } => {
            let n = positive(n)?;
            let mut rng = RngStream::new(seed).child("sample");
            let points = match (kind, checkpoint) {
                (Kind::Fake, Some(dir)) => {
                    let (pop, best) = load_best(&dir)?;
                    evolution::generate(&pop, best, n, &mut rng)?
                }
                (Kind::Fake, None) => {
                    return Err(Error::config(
                        "checkpoint",
                        "--kind fake needs --checkpoint",
                    ))
                }
                (kind, _) => {
                    let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
                    match kind {
                        Kind::Real => cfg.train.dataset.sample(n, &mut rng)?,
                        _ => cfg.train.noise().sample(n, &mut rng)?,
                    }
                }
            };
            match out {
                Some(p) => write_points(create(&p)?, &points),
                None => write_points(io::stdout().lock(), &points),
            }
        }
        Command::PlotData {
            checkpoint,
            out_dir,
            n,
            seed,
            resolution,
            bandwidth,
        } => {
            let n = positive(n)?;
            let (pop, best) = load_best(&checkpoint)?;
            let samples =
                evolution::generate(&pop, best, n, &mut RngStream::new(seed).child("plot"))?;
            let grid = kde_grid(
                &samples,
                resolution,
                bandwidth,
                pop.config.dataset.radius + 0.5,
            )?;
            fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
            grid.write_csv(create(&out_dir.join("kde.csv"))?)?;
            write_points(create(&out_dir.join("samples.csv"))?, &samples)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged {
                checkpoint: Some(p),
                ..
            } = &e
            {
                eprintln!("last good checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
