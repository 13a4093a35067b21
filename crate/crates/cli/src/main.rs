//! `vstab`: command-line front end of the stability evaluation engine.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! failures while running.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use vstab_core::metrics::{normalize_partial, read_metric_table};
use vstab_core::panel::{write_panel, FrequencyLabel, PanelSchema};
use vstab_core::pipeline::{self, RunConfig};
use vstab_core::report::{emit_table, PlotData, TableLayout, ValueColumn};
use vstab_core::synth::{generate, SynthSpec};
use vstab_core::FrequencyProfile;

#[derive(Parser, Debug)]
#[command(name = "vstab", version, about = "Forecast stability under retraining schedules")]
struct Cli {
    /// Where results are written; overrides the config file.
    #[arg(long, global = true, env = "VSTAB_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Worker threads; overrides the config file.
    #[arg(long, global = true, env = "VSTAB_THREADS")]
    threads: Option<usize>,

    /// Seed for synthetic data; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a run config and the dataset it points to.
    Validate { config: PathBuf },
    /// Write a synthetic panel as long-format CSV.
    Generate {
        #[arg(long, default_value_t = 50)]
        n_series: usize,
        #[arg(long, default_value_t = 200)]
        length: usize,
        #[arg(long, value_enum, default_value_t = Freq::Daily)]
        frequency: Freq,
        #[arg(long, default_value_t = 0.3)]
        zero_inflation: f64,
        #[arg(long, default_value_t = 5.0)]
        base_level: f64,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Run { config: PathBuf },
    /// Re-emit tables and plot data from a stored raw metric table.
    Report {
        /// A `metrics_raw.csv` written by `run`.
        table: PathBuf,
        #[arg(long)]
        baseline_r: usize,
        #[arg(long, value_enum, default_value_t = Layout::MethodsByScenario)]
        layout: Layout,
        #[arg(long, value_enum, default_value_t = Values::Normalized)]
        values: Values,
        #[arg(long, default_value_t = 3)]
        decimals: u32,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Freq {
    Daily,
    Weekly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Layout {
    Long,
    MethodsByScenario,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Values {
    Raw,
    Normalized,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<vstab_core::Error>() {
        Some(err) if err.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(cli: &Cli, path: &Path) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Validate { config } => {
            let cfg = load_config(&cli, config)?;
            let pre = pipeline::preflight(&cfg)?;
            println!(
                "ok: {} of {} series retained (length >= {}), {} forecast cells",
                pre.retained.n_series, pre.loaded.n_series, pre.required_length, pre.cells
            );
        }
        Command::Generate {
            n_series,
            length,
            frequency,
            zero_inflation,
            base_level,
            out,
        } => {
            let label = match frequency {
                Freq::Daily => FrequencyLabel::Daily,
                Freq::Weekly => FrequencyLabel::Weekly,
            };
            let freq = FrequencyProfile::from_label(label).expect("built-in frequency");
            let spec = SynthSpec {
                zero_inflation: *zero_inflation,
                base_level: *base_level,
                ..SynthSpec::new(*n_series, *length, freq, cli.seed.unwrap_or(0))
            };
            let panel = generate(&spec)?;
            let schema = PanelSchema::default();
            match out {
                Some(path) => {
                    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                    write_panel(&panel, &schema, BufWriter::new(file))?;
                }
                None => write_panel(&panel, &schema, io::stdout().lock())?,
            }
        }
        Command::Run { config } => {
            let cfg = load_config(&cli, config)?;
            // warnings reach stderr through the logger
            let manifest = pipeline::run(&cfg)?;
            println!(
                "wrote {} files to {}",
                manifest.files.len() + 1,
                cfg.output_dir.display()
            );
        }
        Command::Report {
            table,
            baseline_r,
            layout,
            values,
            decimals,
        } => {
            let file = File::open(table).with_context(|| format!("opening {}", table.display()))?;
            let stored = read_metric_table(file, *baseline_r)?;
            let (normalized, failures) = normalize_partial(&stored)?;
            for e in failures {
                log::warn!("{e}");
            }
            let layout = match layout {
                Layout::Long => TableLayout::Long,
                Layout::MethodsByScenario => TableLayout::MethodsByScenario,
            };
            let values = match values {
                Values::Raw => ValueColumn::Raw,
                Values::Normalized => ValueColumn::Normalized,
            };
            match &cli.output_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    let name = match layout {
                        TableLayout::Long => "metrics_long.csv",
                        TableLayout::MethodsByScenario => "metrics_normalized.csv",
                    };
                    let f = File::create(dir.join(name))?;
                    emit_table(&normalized, layout, values, *decimals, BufWriter::new(f))?;
                    let mut plot = BufWriter::new(File::create(dir.join("plot_data.json"))?);
                    serde_json::to_writer_pretty(&mut plot, &PlotData::from_table(&normalized))?;
                    writeln!(plot)?;
                }
                None => emit_table(&normalized, layout, values, *decimals, io::stdout().lock())?,
            }
        }
    }
    Ok(())
}
