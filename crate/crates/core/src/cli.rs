//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{FusionStrategy, RunConfig};
use crate::data::{read_dataset, write_dataset, SyntheticClip};
use crate::error::{Error, Result};
use crate::experiment::{ablation, ablation_csv, all_subsets, split_clips, splits};
use crate::model::MultiFuser;
use crate::suite::gradient_suite;
use crate::train::{evaluate, train_with, AdamState, Evaluation};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const REPORT_CSV: &str = "report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "multifuser", version, about = "Multimodal fusion transformer on synthetic clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Override one config key; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Sets model, data and train seeds at once.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset (train then eval samples) to OUT/data.
    GenData,
    /// Train, then write the checkpoint and per-epoch report.
    Train {
        /// Read clips from a dataset directory instead of generating them.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from a checkpoint until train.epochs is reached.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every block and the full model.
    Gradcheck,
    /// Train and evaluate every modality subset under every strategy.
    Ablate {
        /// Comma-separated strategies (default: all).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<FusionStrategy>,
        /// Subsets such as `0+1`, comma-separated (default: all non-empty).
        #[arg(long, value_delimiter = ',')]
        subsets: Vec<String>,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let run = match resolve(&cli) {
        Ok(run) => run,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match dispatch(&cli, &run) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` entries.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        run.apply_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        run.set_seed(seed);
    }
    for s in &cli.sets {
        run.apply_override(s)?;
    }
    run.validate()?;
    Ok(run)
}

fn dispatch(cli: &Cli, run: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cli.out)?;
    fs::write(cli.out.join(RESOLVED_CONFIG), run.to_flat_text())?;
    match &cli.command {
        Command::GenData => gen_data(&cli.out, run),
        Command::Train { data, resume } => train(&cli.out, run, data.as_deref(), resume.as_deref()),
        Command::Eval { checkpoint, data } => eval(run, checkpoint, data.as_deref()),
        Command::Gradcheck => gradcheck(run),
        Command::Ablate { strategies, subsets } => ablate(&cli.out, run, strategies, subsets),
    }
}

fn gen_data(out: &Path, run: &RunConfig) -> Result<()> {
    let s = splits(run)?;
    let dir = out.join("data");
    let clips: Vec<SyntheticClip> = s.train.into_iter().chain(s.eval).collect();
    write_dataset(&dir, &s.spec, &clips)?;
    println!(
        "wrote {} clips ({} train, {} eval) to {}",
        clips.len(),
        run.data.train_samples,
        run.data.eval_samples,
        dir.display()
    );
    Ok(())
}

fn load_splits(run: &RunConfig, data: Option<&Path>) -> Result<(Vec<SyntheticClip>, Vec<SyntheticClip>)> {
    match data {
        Some(dir) => {
            let (spec, clips) = read_dataset(dir)?;
            if spec.dims != crate::data::ClipDims::of_model(&run.model) {
                return Err(Error::Config(format!(
                    "dataset dims {:?} do not match the model config",
                    spec.dims
                )));
            }
            split_clips(clips, run)
        }
        None => {
            let s = splits(run)?;
            Ok((s.train, s.eval))
        }
    }
}

fn print_eval(tag: &str, e: &Evaluation) {
    println!("{tag}: top1 {:.4}  mean1 {:.4}", e.top1, e.mean1);
}

fn train(out: &Path, run: &RunConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let (train_set, eval_set) = load_splits(run, data)?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let (model, state) = load_checkpoint(path)?;
            if model.config() != &run.model {
                return Err(Error::Config("checkpoint model config differs from the run config".into()));
            }
            (model, state)
        }
        None => {
            let model = MultiFuser::new(run.model.clone())?;
            let state = AdamState::new(model.store());
            (model, state)
        }
    };
    println!(
        "{} model, {} parameters, {} train / {} eval clips",
        run.model.fusion,
        model.census(),
        train_set.len(),
        eval_set.len()
    );
    let report = train_with(&mut model, &mut state, &train_set, &run.train, |e| println!("{e}"))?;
    let csv = report.to_csv();
    let path = out.join(REPORT_CSV);
    match fs::read_to_string(&path) {
        // A resumed run appends its epochs to the earlier report.
        Ok(old) if resume.is_some() => fs::write(&path, old + csv.split_once('\n').map_or("", |(_, rows)| rows))?,
        _ => fs::write(&path, csv)?,
    }
    save_checkpoint(&out.join(CHECKPOINT), &model, &state)?;
    print_eval("train", &evaluate(&model, &train_set)?);
    print_eval("eval", &evaluate(&model, &eval_set)?);
    println!("checkpoint written to {}", out.join(CHECKPOINT).display());
    Ok(())
}

fn eval(run: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let mut run = run.clone();
    run.model = model.config().clone();
    let (_, eval_set) = load_splits(&run, data)?;
    let e = evaluate(&model, &eval_set)?;
    print_eval("eval", &e);
    println!("confusion (rows: true class, columns: predicted):");
    for row in &e.confusion {
        println!("  {}", row.iter().map(|v| format!("{v:>5}")).collect::<String>());
    }
    Ok(())
}

fn gradcheck(run: &RunConfig) -> Result<()> {
    let entries = gradient_suite(run.model.seed)?;
    let mut failed = 0;
    for e in &entries {
        let r = &e.report;
        println!(
            "{:<20} max rel error {:.3e}  ({} entries)  {}",
            e.name,
            r.max_rel_error,
            r.entries_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if let Some(w) = r.failures.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)) {
            println!(
                "  worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            );
        }
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient checks over tolerance")));
    }
    Ok(())
}

fn parse_subset(s: &str, m: usize) -> Result<Vec<usize>> {
    let subset: Vec<usize> = s
        .split('+')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad subset `{s}`"))))
        .collect::<Result<_>>()?;
    if subset.is_empty() || subset.iter().any(|&v| v >= m) {
        return Err(Error::Config(format!("subset `{s}` invalid for {m} modalities")));
    }
    Ok(subset)
}

fn ablate(out: &Path, run: &RunConfig, strategies: &[FusionStrategy], subsets: &[String]) -> Result<()> {
    let strategies = if strategies.is_empty() {
        FusionStrategy::ALL.to_vec()
    } else {
        strategies.to_vec()
    };
    let subsets = if subsets.is_empty() {
        all_subsets(run.model.modalities)
    } else {
        subsets
            .iter()
            .map(|s| parse_subset(s, run.model.modalities))
            .collect::<Result<_>>()?
    };
    let rows = ablation(run, &subsets, &strategies, |r| {
        println!(
            "{:<8} {:<9} top1 {:.4}  mean1 {:.4}  (train top1 {:.4}, {} parameters)",
            r.subset_label(),
            r.strategy,
            r.top1,
            r.mean1,
            r.train_top1,
            r.census
        );
    })?;
    fs::write(out.join(ABLATION_CSV), ablation_csv(&rows))?;
    Ok(())
}
