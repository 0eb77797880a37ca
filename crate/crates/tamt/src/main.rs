// Copyright 2026 The tamt Authors
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

use clap::{Args, Parser, Subcommand};
use tamt::analysis::export_all;
use tamt::config::ExperimentSpec;
use tamt::format::{load_mask, save_mask};
use tamt::runner::{finetune_one, prepare, run, search_one, Report, RunOptions};
use tamt::trace::write_trace;
use tamt::{Error, Result};
use tamt_core::Method;

#[derive(Parser)]
#[command(name = "tamt", version, about = "Task-agnostic mask training on a miniature encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment config in TOML; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set search.mask_lr=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Progress lines on stderr.
    #[arg(short, long)]
    verbose: bool,
}

impl SpecArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.clone(),
                source,
            })?),
            None => None,
        };
        ExperimentSpec::with_overrides(text.as_deref(), &self.set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Prints the effective experiment config.
    Config(SpecArgs),
    /// Builds the corpus cache, the pretrained weights and the task files.
    Pretrain(SpecArgs),
    /// Searches one mask and writes it with its trace.
    Search {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        method: Method,
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mask file to write; the trace goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tunes one mask on one task and prints the best dev metric.
    Finetune {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training examples; the config's main size when omitted.
        #[arg(long)]
        train_size: Option<usize>,
    },
    /// Runs every missing cell of the experiment, resuming earlier output.
    Sweep(SpecArgs),
    /// Writes the analysis exports of a finished output directory.
    Analyze {
        dir: PathBuf,
        /// Export directory; defaults to `<dir>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(command: Command) -> Result<ExitCode> {
    match command {
        Command::Config(args) => print!("{}", args.spec()?.to_toml()),
        Command::Pretrain(args) => {
            let spec = args.spec()?;
            let mut timings = Vec::new();
            let p = prepare(&spec, &mut timings)?;
            println!(
                "corpus: {} train / {} dev sequences, vocabulary {}",
                p.train.len(),
                p.dev.len(),
                p.vocab().len()
            );
            for (phase, ms) in timings {
                println!("{phase}: {ms} ms");
            }
        }
        Command::Search {
            spec,
            method,
            sparsity,
            seed,
            out,
        } => {
            let s = spec.spec()?;
            let p = prepare(&s, &mut Vec::new())?;
            let (ckpt, trace) = search_one(&s, &p, method, sparsity, seed, spec.verbose)?;
            save_mask(&ckpt, &out)?;
            write_trace(&out.with_extension("csv"), &trace)?;
            if let Some(last) = trace.last() {
                println!(
                    "{method} S={sparsity} seed={seed}: dev MLM {:.4}, dev KD {:.4}",
                    last.dev_mlm_loss, last.dev_kd_loss
                );
            }
        }
        Command::Finetune {
            spec,
            mask,
            task,
            seed,
            train_size,
        } => {
            let s = spec.spec()?;
            let p = prepare(&s, &mut Vec::new())?;
            let ckpt = load_mask(&mask)?;
            let (metric, value) = finetune_one(&s, &p, &ckpt, &task, seed, train_size)?;
            println!("{task} {metric} {value}");
        }
        Command::Sweep(args) => {
            let spec = args.spec()?;
            let report = run(&spec, RunOptions { verbose: args.verbose })?;
            println!("{} records, {} failures", report.records.len(), report.failures.len());
            if !report.failures.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Analyze { dir, out } => {
            let report = Report::load(&dir)?;
            let out = out.unwrap_or_else(|| dir.join("analysis"));
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            for name in export_all(&report, &out)? {
                println!("{}", out.join(name).display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
