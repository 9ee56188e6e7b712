use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use onavos::config::ExperimentConfig;
use onavos::harness::{self, RunArgs, Variant};
use onavos::synth::load_split;
use onavos::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "onavos", version, about = "Online adaptive video object segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value`); defaults to the toy profile.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the config file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, value_name = "N", default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and eval splits as PPM/PGM directories.
    Generate(Common),
    /// Run the enabled pipeline stages and write a metrics report.
    Run(Common),
    /// Compare online-adaptation variants on the same data and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variant to add (repeatable): a built-in name or
        /// `label:key=value;key=value`. Defaults to all built-ins.
        #[arg(long = "variant", value_name = "VARIANT")]
        variants: Vec<String>,
        /// Only the base row.
        #[arg(long, conflicts_with = "variants")]
        no_variants: bool,
    },
    /// Score existing mask directories against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predictions laid out as `<seq>/00001.pgm ...`.
        #[arg(long, value_name = "DIR")]
        pred: PathBuf,
        /// Ground-truth split laid out as `<seq>/{frames,masks}/`.
        #[arg(long, value_name = "DIR")]
        gt: PathBuf,
    },
    /// Print the architecture and parameter summary of a checkpoint.
    InspectCheckpoint {
        #[arg(value_name = "PATH")]
        path: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, PathBuf, RunArgs)> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    let out = cfg.output.clone();
    Ok((cfg, out, RunArgs { force: c.force, jobs: c.jobs }))
}

fn write_if(out: Option<&Path>, name: &str, body: &str, force: bool) -> Result<()> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        let p = dir.join(name);
        if p.exists() && !force {
            return Err(Error::OutputExists(p));
        }
        std::fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })?;
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let (cfg, out, args) = load_config(&c)?;
            let (train, eval) = harness::cmd_generate(&cfg, &out, &args)?;
            println!("train split: {}\neval split:  {}", train.display(), eval.display());
        }
        Command::Run(c) => {
            let (cfg, out, args) = load_config(&c)?;
            let run = harness::cmd_run(&cfg, &out, &args)?;
            print!("{}", run.report.to_table());
            println!("report: {}", out.join("report.csv").display());
        }
        Command::Ablate { common, variants, no_variants } => {
            let (cfg, out, args) = load_config(&common)?;
            let variants = if no_variants {
                Vec::new()
            } else if variants.is_empty() {
                Variant::builtins()
            } else {
                variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()?
            };
            let table = harness::cmd_ablate(&cfg, &variants, &out, &args)?;
            print!("{}", table.to_table());
        }
        Command::Eval { common, pred, gt } => {
            let (cfg, _, args) = load_config(&common)?;
            let report = harness::cmd_eval(&pred, &load_split(&gt)?, &cfg)?;
            print!("{}", report.to_table());
            write_if(common.out.as_deref(), "report.csv", &report.to_csv(), args.force)?;
        }
        Command::InspectCheckpoint { path } => print!("{}", harness::describe_checkpoint(&checkpoint::load(&path)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let usage = matches!(e, Error::Config { .. } | Error::UnknownKey(_) | Error::UnknownVariant(_));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
