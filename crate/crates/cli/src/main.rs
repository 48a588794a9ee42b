//! Command-line driver: trace runs, workload generation, energy
//! calibration, and the reference reduction table.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use bulkdram::energy::calibrate_per_command;
use bulkdram::energy::REFERENCE_TABLE;
use bulkdram::harness::reproduce_reference_table;
use bulkdram::workloads;
use bulkdram::{report, DeviceConfig, Mechanism, ReportFormat};

#[derive(Parser)]
#[command(
    name = "bulkdram",
    version,
    about = "Command-level DRAM simulator with in-DRAM bulk operations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override single config entries (repeatable), e.g. --set tRAS=35.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<DeviceConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let body = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                body.parse::<DeviceConfig>()?
            }
            None => DeviceConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Baseline,
    Rowclone,
    #[value(name = "rowclone-zi")]
    RowcloneZi,
    Idao,
}

impl From<MechanismArg> for Mechanism {
    fn from(m: MechanismArg) -> Mechanism {
        match m {
            MechanismArg::Baseline => Mechanism::Baseline,
            MechanismArg::Rowclone => Mechanism::Rowclone,
            MechanismArg::RowcloneZi => Mechanism::RowcloneZi,
            MechanismArg::Idao => Mechanism::Idao,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run a trace and print the report.
    Run {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "rowclone")]
        mechanism: MechanismArg,
        #[arg(long, value_enum, default_value = "json")]
        report: ReportArg,
        /// Write the command log as CSV.
        #[arg(long)]
        cmdlog: Option<PathBuf>,
        /// Dump all allocated DRAM rows as hex.
        #[arg(long)]
        dump_state: Option<PathBuf>,
    },
    /// Generate a synthetic workload trace.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Fit and print the per-command energy constants.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Print the reduction table: measured values next to the built-in
    /// reference figures.
    Table3 {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum GenCommand {
    /// Copy-on-write fork benchmark: init writes, then N page updates.
    Forkbench {
        /// Array size in bytes (multiple of 4096).
        #[arg(long)]
        s: u64,
        /// Number of pages the child updates.
        #[arg(long)]
        n: u64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bitmap range queries: pairwise ORs over per-bin bitmaps.
    Bitmap {
        #[arg(long)]
        bins: u64,
        #[arg(long)]
        queries: u64,
        #[arg(long, default_value = "1")]
        rows_per_bitmap: u64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Least-squares fit of per-command energies to the reference table.
    Energy,
}

fn write_out(path: &Option<PathBuf>, body: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            trace,
            config,
            mechanism,
            report: fmt,
            cmdlog,
            dump_state,
        } => {
            let cfg = config.load()?;
            let body = fs::read_to_string(&trace)
                .with_context(|| format!("reading trace {}", trace.display()))?;
            let parsed = bulkdram::trace::parse_trace_with_lines(&body)?;
            let ops: Vec<_> = parsed.iter().map(|&(_, op)| op).collect();
            let outcome =
                bulkdram::run_trace(&ops, &cfg, mechanism.into()).map_err(|e| match e {
                    bulkdram::Error::TraceExec { index, source } => anyhow::anyhow!(
                        "trace line {}: {source}",
                        parsed.get(index).map_or(0, |&(line, _)| line)
                    ),
                    other => other.into(),
                })?;
            if let Some(path) = cmdlog {
                let mut file = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                bulkdram::sched::export_csv(outcome.engine.log(), &mut file)?;
            }
            if let Some(path) = dump_state {
                let mut file = fs::File::create(&path)
                    .with_context(|| format!("creating {}", path.display()))?;
                outcome.engine.dump_state(&mut file)?;
            }
            let fmt = match fmt {
                ReportArg::Json => ReportFormat::Json,
                ReportArg::Csv => ReportFormat::Csv,
                ReportArg::Text => ReportFormat::Text,
            };
            print!("{}", report(&outcome.stats, fmt));
        }
        Command::Gen(GenCommand::Forkbench {
            s,
            n,
            seed,
            config,
            out,
        }) => {
            let cfg = config.load()?;
            let ops = workloads::gen_forkbench(&cfg, s, n, seed)?;
            write_out(&out, &bulkdram::format_trace(&ops))?;
        }
        Command::Gen(GenCommand::Bitmap {
            bins,
            queries,
            rows_per_bitmap,
            seed,
            config,
            out,
        }) => {
            let cfg = config.load()?;
            let ops = workloads::gen_bitmap_trace(&cfg, bins, rows_per_bitmap, queries, seed)?;
            write_out(&out, &bulkdram::format_trace(&ops))?;
        }
        Command::Calibrate(CalibrateCommand::Energy) => {
            let cal = calibrate_per_command(&REFERENCE_TABLE)?;
            let c = cal.constants;
            println!("fitted per-command energies (uJ):");
            println!("  ACTIVATE        {:.6}", c.e_act);
            println!("  PRECHARGE       {:.6}", c.e_pre);
            println!("  column IO/line  {:.6}", c.e_col_io);
            println!("  TRANSFER/line   {:.6}", c.e_transfer);
            println!("  MULTI_ACTIVATE  {:.6}", c.e_multi_act);
            println!("residuals against the reference table (no row omitted):");
            for r in &cal.residuals {
                println!(
                    "  {:>6} {:>17}: fitted {:.4} uJ vs {:.4} uJ ({:+.1}%)",
                    r.op.name(),
                    r.mechanism.name(),
                    r.fitted_uj,
                    r.target_uj,
                    100.0 * r.relative_error
                );
            }
        }
        Command::Table3 { config } => {
            let cfg = config.load()?;
            let rows = reproduce_reference_table(&cfg)?;
            println!(
                "{:>6} {:>17} | {:>11} {:>10} | {:>11} {:>10} | {:>9} {:>9} | {:>9} {:>9}",
                "op",
                "mechanism",
                "latency_ns",
                "energy_uJ",
                "ref_lat_ns",
                "ref_e_uJ",
                "lat_ratio",
                "e_ratio",
                "ref_lat_x",
                "ref_e_x"
            );
            for r in rows {
                println!(
                    "{:>6} {:>17} | {:>11} {:>10.4} | {:>11} {:>10} | {:>9.2} {:>9.2} | {:>9} {:>9}",
                    r.op.name(),
                    r.mechanism.name(),
                    r.measured_latency_ns,
                    r.measured_energy_uj,
                    r.reference.latency_ns,
                    r.reference.energy_uj,
                    r.measured_latency_ratio,
                    r.measured_energy_ratio,
                    r.reference.latency_reduction,
                    r.reference.energy_reduction
                );
            }
            println!("(ratio columns are measured quotients; ref_*_x are the published reduction factors)");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let doc = serde_json::json!({ "error": format!("{err:#}") });
            let _ = writeln!(std::io::stderr(), "{doc}");
            ExitCode::FAILURE
        }
    }
}
