//! Command-line front end: data generation, training, evaluation,
//! comparison and dataset summaries.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad arguments, config
//! or input files), 2 on runtime errors (I/O, numerical failures).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use countgrpo::runner::{self, COMPARISON_FILE};
use countgrpo::scenes::{self, OUT_OF_DOMAIN_TAG};
use countgrpo::{Error, ExperimentConfig, PolicyParams, Regime};

#[derive(Parser, Debug)]
#[command(
    name = "countgrpo",
    version,
    about = "Group-relative policy optimisation for count answers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/test suite as JSON-lines files.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for train.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one regime and write its run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `regime` from the config (sft, grpo_binary, fgrpr).
        #[arg(long, value_parser = parse_regime)]
        regime: Option<Regime>,
        /// Overrides `steps` from the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a JSON-lines test file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config supplying max_len and the out-of-domain tags.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Domain tag(s) reported as out-of-domain; defaults to the config's test-only domains.
        #[arg(long = "ood-tag")]
        ood_tags: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the JSON report; the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare completed runs by domain and count range.
    Compare {
        #[arg(required = true, num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file, or a directory to receive comparison.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise count statistics of JSON-lines scene files.
    Summarize {
        #[arg(required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON summary here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown regime {s:?}; expected sft, grpo_binary or fgrpr"))
}

fn load_config(path: Option<&Path>) -> countgrpo::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_json_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, contents: &str) -> countgrpo::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> countgrpo::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> countgrpo::Result<()> {
    match cli.command {
        Command::GenerateData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = scenes::generate_suite(&cfg.suite, cfg.seed)?;
            create_dir(&out)?;
            scenes::save_jsonl(&out.join("train.jsonl"), &data.train)?;
            scenes::save_jsonl(&out.join("test.jsonl"), &data.test)?;
            let mut all = data.train;
            all.extend(data.test);
            let summary = scenes::summarize(&all)?;
            write(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            print!("{}", summary.render_table());
        }
        Command::Train {
            config,
            seed,
            out,
            regime,
            steps,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(r) = regime {
                cfg.regime = r;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let run = runner::run_experiment(&cfg)?;
            print!("{}", run.report.render_table());
            println!("run written to {}", run.output_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            ood_tags,
            seed: _,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let params = PolicyParams::load(&checkpoint)?;
            let test = scenes::load_jsonl(&data)?;
            let ood = if !ood_tags.is_empty() {
                ood_tags
            } else if config.is_some() {
                cfg.suite.test_only_tags()
            } else {
                vec![OUT_OF_DOMAIN_TAG.to_string()]
            };
            let report = runner::evaluate_checkpoint(&params, &test, cfg.grammar(), &ood)?;
            if let Some(o) = out {
                write(&o, &report.to_json()?)?;
            }
            print!("{}", report.render_table());
        }
        Command::Compare { run_dirs, out, .. } => {
            let table = runner::compare(&run_dirs)?.render();
            let target = match out {
                Some(o) if o.is_dir() => o.join(COMPARISON_FILE),
                Some(o) => o,
                None => PathBuf::from(COMPARISON_FILE),
            };
            write(&target, &table)?;
            print!("{table}");
        }
        Command::Summarize { data, out, json, .. } => {
            let mut all = Vec::new();
            for path in &data {
                all.extend(scenes::load_jsonl(path)?);
            }
            let summary = scenes::summarize(&all)?;
            let rendered = serde_json::to_string_pretty(&summary)?;
            if let Some(o) = out {
                write(&o, &rendered)?;
            }
            if json {
                println!("{rendered}");
            } else {
                print!("{}", summary.render_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
