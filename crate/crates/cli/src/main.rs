// Copyright 2026 The OSKT Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oskt_cli::commands::{self, Run, Targets};
use oskt_cli::{CliError, ExperimentConfig, Precision, Result};
use oskt_core::expansion::chain_width_schedule;

#[derive(Parser)]
#[command(
    name = "oskt",
    version,
    about = "Weight-chain knowledge transfer on a toy retrieval benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

impl Common {
    fn run(&self) -> Result<Run> {
        let cfg = ExperimentConfig::load(&self.config)?;
        Run::new(cfg, self.seed, self.out.clone(), self.precision)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference teacher on the pretraining scene.
    TrainTeacher(Common),
    /// Cluster and refine the configured weight chains.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Build students from a chain container.
    Expand {
        #[arg(long)]
        chain: PathBuf,
        /// Comma-separated uniform widths.
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "ratio",
            required_unless_present = "ratio"
        )]
        widths: Vec<usize>,
        /// Fraction of the teacher width for every unit.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        precision: Precision,
    },
    /// Fine-tune a student on the downstream scene.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
    },
    /// Evaluate a model container on the downstream scene.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// OSKT against scratch students for every configured width and seed.
    Compare(Common),
    /// Geometric chain widths from A towards B in S steps.
    Schedule { a: usize, b: usize, s: usize },
    /// Summarize a container.
    Inspect { path: PathBuf },
}

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::Single => commands::$f::<f32>($($arg),*),
            Precision::Double => commands::$f::<f64>($($arg),*),
        }
    };
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn apply_thread_cap() -> Result<()> {
    let Ok(value) = std::env::var("OSKT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("OSKT_THREADS={value} is not a positive integer")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::debug!("OSKT_THREADS={n} ignored in a sequential build");
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    apply_thread_cap()?;
    match cli.command {
        Command::TrainTeacher(c) => {
            let run = c.run()?;
            print_paths(&dispatch!(run.config.precision, train_teacher(&run))?);
        }
        Command::Refine { common, teacher } => {
            let run = common.run()?;
            print_paths(&dispatch!(run.config.precision, refine(&run, &teacher))?);
        }
        Command::Expand {
            chain,
            widths,
            ratio,
            out,
            precision,
        } => {
            let targets = match ratio {
                Some(r) => Targets::Ratio(r),
                None => Targets::Widths(widths),
            };
            print_paths(&dispatch!(precision, expand_chain(&chain, &targets, &out))?);
        }
        Command::Finetune { common, student } => {
            let run = common.run()?;
            print_paths(&dispatch!(run.config.precision, finetune(&run, &student))?);
        }
        Command::Eval { common, model } => {
            let run = common.run()?;
            for (seed, report) in dispatch!(run.config.precision, eval(&run, &model))? {
                let cmc: Vec<String> = report.cmc.iter().map(|(k, v)| format!("rank{k} {v:.4}")).collect();
                println!("seed {seed}: mAP {:.4} {}", report.map, cmc.join(" "));
            }
        }
        Command::Compare(c) => {
            let run = c.run()?;
            let rows = dispatch!(run.config.precision, compare(&run))?;
            println!("width,method,seed,mAP,rank1");
            for r in rows {
                println!("{},{},{},{:.4},{:.4}", r.width, r.method, r.seed, r.map, r.rank1);
            }
        }
        Command::Schedule { a, b, s } => {
            let widths = chain_width_schedule(a, b, s)?;
            let text: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
            println!("{}", text.join(","));
        }
        Command::Inspect { path } => print!("{}", commands::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
