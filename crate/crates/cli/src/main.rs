use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use systolic_sca::experiment::{self, AttackKind, ExperimentConfig, SampleStrategy, VerifyThresholds, OUT_DIR_ENV};
use systolic_sca::stats::Reduction;
use systolic_sca::trace_io::read_trace_set;
use systolic_sca::Error;

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "systolic-sca", version, about = "Power side-channel experiments on a simulated systolic array")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Measurement SNR; omit for noiseless traces.
    #[arg(long, global = true)]
    snr: Option<f64>,
    #[arg(long, global = true)]
    traces: Option<usize>,
    /// Use inputs tuned to the given array row instead of random ones.
    #[arg(long, global = true, value_name = "ROW")]
    tuned: Option<usize>,
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trace set and write it to <out>/traces.bin.
    GenTraces {
        /// Also write <out>/traces.csv.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Recover all weights by correlation power analysis.
    Cpa {
        /// Recorded trace sets: one shared set, or one per array row.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    #[command(subcommand)]
    Template(TemplateCommand),
    /// Repeat an attack across the configured SNR grid.
    NoiseSweep {
        #[arg(long, value_enum, default_value = "cpa")]
        attack: AttackArg,
        #[command(flatten)]
        common: Common,
    },
    /// Correlate two trace sets.
    Verify {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "energy")]
        reduction: ReductionArg,
        /// Fail unless PCC reaches this value.
        #[arg(long)]
        min_pcc: Option<f64>,
        /// Fail unless |PCC| and |SCC| stay below this value.
        #[arg(long)]
        max_abs: Option<f64>,
    },
    /// Summarise the outputs found in the output directory as Markdown.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum TemplateCommand {
    /// Build templates for one PE on a device whose weights we control.
    Profile {
        #[arg(long)]
        allow_weight_setting: bool,
        /// Target PE as ROW,COL.
        #[arg(long, value_parser = parse_pe)]
        target: Option<[usize; 2]>,
        #[command(flatten)]
        common: Common,
    },
    /// Profile and attack every PE of a simulated victim.
    Attack {
        #[arg(long)]
        allow_weight_setting: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Cpa,
    Template,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Energy,
    PerPoint,
}

fn parse_pe(s: &str) -> Result<[usize; 2], String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(r)?, p(c)?])
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    if c.snr.is_some() {
        cfg.snr = c.snr;
    }
    if let Some(t) = c.traces {
        cfg.traces = t;
    }
    if let Some(column) = c.tuned {
        cfg.samples = SampleStrategy::Tuned { column };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidParameter(_) | Error::Json(_) | Error::PeOutOfRange { .. } | Error::DimensionMismatch { .. }) => {
            EXIT_CONFIG
        }
        Some(Error::Io(_) | Error::Exists(_) | Error::Format(_) | Error::Version { .. } | Error::Empty(_)) => EXIT_IO,
        _ => EXIT_FAILED,
    }
}

fn print_json<T: Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Returns whether the command succeeded; errors carry their own exit code.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenTraces { csv, common } => {
            let mut cfg = load_config(&common)?;
            cfg.csv |= csv;
            let r = experiment::cmd_gen_traces(&cfg, common.overwrite)?;
            println!("{}  {}", r.file_digest, cfg.out_dir().join(&r.file).display());
            Ok(true)
        }
        Command::Cpa { inputs, common } => {
            let cfg = load_config(&common)?;
            let sets = inputs
                .iter()
                .map(|p| read_trace_set(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let summary = experiment::cmd_cpa(&cfg, (!sets.is_empty()).then_some(&sets[..]), common.overwrite)?;
            print_json(&summary)?;
            Ok(summary.correct.is_none() || summary.success())
        }
        Command::Template(TemplateCommand::Profile { allow_weight_setting, target, common }) => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = target {
                cfg.template.profile_target = t;
            }
            cfg.validate()?;
            print_json(&experiment::cmd_template_profile(&cfg, allow_weight_setting, common.overwrite)?)?;
            Ok(true)
        }
        Command::Template(TemplateCommand::Attack { allow_weight_setting, common }) => {
            let cfg = load_config(&common)?;
            let summary = experiment::cmd_template_attack(&cfg, allow_weight_setting, common.overwrite)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&summary)?;
            Ok(summary.success())
        }
        Command::NoiseSweep { attack, common } => {
            let mut cfg = load_config(&common)?;
            cfg.attack = match attack {
                AttackArg::Cpa => AttackKind::Cpa,
                AttackArg::Template => AttackKind::Template,
            };
            let rows = experiment::cmd_noise_sweep(&cfg, common.overwrite)?;
            print!("{}", experiment::sweep_csv(&rows));
            Ok(true)
        }
        Command::Verify { a, b, reduction, min_pcc, max_abs } => {
            let reduction = match reduction {
                ReductionArg::Energy => Reduction::PerSampleEnergy,
                ReductionArg::PerPoint => Reduction::PerPointMax,
            };
            let (a, b) = (read_trace_set(&a)?, read_trace_set(&b)?);
            let r = experiment::verify(&a, &b, reduction, VerifyThresholds { min_pcc, max_abs })?;
            print_json(&r)?;
            Ok(r.pass)
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let path = experiment::cmd_report(&cfg.out_dir(), common.overwrite)?;
            println!("{}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
