use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ticketlab::data::{synth_generate, ImbalanceProfile, SubgroupProfile, SynthConfig};
use ticketlab::evaluation::{gap_analysis, SubgroupReport};
use ticketlab::experiment::{
    evaluate_checkpoint, resume, run_lth_with, write_reports, ExperimentConfig, LevelRecord, Observer, RunLedger,
    RunOptions,
};
use ticketlab::model::Network;
use ticketlab::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "ticketlab", version, about = "Lottery-ticket pruning with subgroup audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (flat `key = value`); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, same as `--set output.dir=DIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {o:?}: expected KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lesion dataset (PPM images plus metadata.csv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1600)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        /// uniform | isic-like
        #[arg(long, default_value = "isic-like")]
        imbalance: String,
        /// balanced | isic-like
        #[arg(long, default_value = "isic-like")]
        subgroups: String,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Run the full pruning loop into a fresh output directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Stop after this level; the run can be continued with `resume`.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue an interrupted run; refuses if the config changed.
    Resume {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Level label used in the emitted tables.
        #[arg(long, default_value_t = 0)]
        level: usize,
        /// Print the full JSON report instead of a summary.
        #[arg(long)]
        json: bool,
    },
    /// Rebuild subgroup, true-positive, gap and confusion tables from a ledger.
    Report {
        ledger: PathBuf,
        /// Directory for the tables; defaults to the ledger's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gap analysis of a subgroup table (`subgroup,L0,...` CSV).
    Gaps { table: PathBuf },
}

struct Progress;

impl Observer for Progress {
    fn level_finished(&mut self, r: &LevelRecord, _net: &Network) {
        eprintln!(
            "L{}  sparsity {:.4}  loss {:.4}  train {}  test {}",
            r.level,
            r.sparsity,
            r.train_loss.last().copied().unwrap_or(f64::NAN),
            r.train_accuracy,
            r.test_accuracy
        );
    }
}

fn summary(ledger: &RunLedger) {
    let state = if ledger.complete { "complete" } else { "incomplete" };
    println!("{state}: {} of {} levels", ledger.levels.len(), ledger.rounds);
    for r in &ledger.levels {
        println!("L{}\t{:.4}\t{}", r.level, r.sparsity, r.test_accuracy);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            n,
            classes,
            imbalance,
            subgroups,
            image_size,
            test_fraction,
        } => {
            let cfg = SynthConfig {
                seed,
                n,
                classes,
                imbalance: imbalance.parse::<ImbalanceProfile>()?,
                subgroups: subgroups.parse::<SubgroupProfile>()?,
                image_size,
                test_fraction,
            };
            let m = synth_generate(&cfg, &out)?;
            print!("{}", m.class_histogram());
            println!("wrote {} images and metadata.csv to {}", m.len(), out.display());
        }
        Command::Run { config, stop_after } => {
            let cfg = config.load()?;
            let ledger = run_lth_with(&cfg, RunOptions { stop_after }, &mut Progress)?;
            summary(&ledger);
        }
        Command::Resume { config } => {
            let cfg = config.load()?;
            let before = RunLedger::read(&cfg.output_dir.join("ledger.json"))
                .map(|l| l.complete)
                .unwrap_or(false);
            let ledger = resume(&cfg, RunOptions::default(), &mut Progress)?;
            if before {
                println!("run already complete, nothing to do");
            }
            summary(&ledger);
        }
        Command::Eval {
            config,
            checkpoint,
            level,
            json,
        } => {
            let cfg = config.load()?;
            let report = evaluate_checkpoint(&cfg, &checkpoint, level)?;
            if json {
                println!("{}", report.to_json()?);
            } else {
                let m = &report.levels[0];
                println!("accuracy {} over {} samples", m.accuracy, m.evaluated);
                print!("{}", m.confusion.to_csv());
            }
        }
        Command::Report { ledger, out } => {
            let l = RunLedger::read(&ledger)?;
            let dir = out.unwrap_or_else(|| ledger.parent().map(Path::to_path_buf).unwrap_or_default());
            let report = write_reports(&l, &dir)?;
            print!("{}", report.subgroups.to_csv());
            println!();
            print!("{}", report.tp_table.to_csv());
        }
        Command::Gaps { table } => {
            let text = std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
            let gaps = gap_analysis(&SubgroupReport::from_csv(&text)?)?;
            print!("{}", gaps.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
