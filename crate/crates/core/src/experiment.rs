//! Runs built from a [`RunConfig`]: dataset splits, one training run, and the
//! modality-subset by fusion-strategy ablation grid.

use std::fmt::Write as _;

use crate::config::{FusionStrategy, ModelConfig, RunConfig};
use crate::data::{gen_dataset, ClipDims, DatasetSpec, SyntheticClip};
use crate::error::{Error, Result};
use crate::model::{budget_matched, MultiFuser};
use crate::train::{evaluate, train_with, AdamState, EpochReport, Evaluation, TrainReport};

/// The dataset spec a run draws from: train and eval samples in one stream,
/// train first.
pub fn dataset_spec(run: &RunConfig) -> DatasetSpec {
    DatasetSpec {
        dims: ClipDims::of_model(&run.model),
        classes: run.model.classes,
        samples: run.data.train_samples + run.data.eval_samples,
        noise_std: run.data.noise_std,
        seed: run.data.seed,
    }
}

pub struct Splits {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticClip>,
    pub eval: Vec<SyntheticClip>,
}

pub fn splits(run: &RunConfig) -> Result<Splits> {
    let spec = dataset_spec(run);
    let mut train = gen_dataset(&spec)?;
    let eval = train.split_off(run.data.train_samples);
    Ok(Splits { spec, train, eval })
}

/// Splits a dataset read from disk into the run's train and eval parts.
pub fn split_clips(mut clips: Vec<SyntheticClip>, run: &RunConfig) -> Result<(Vec<SyntheticClip>, Vec<SyntheticClip>)> {
    if clips.len() < run.data.train_samples + 1 {
        return Err(Error::Config(format!(
            "dataset has {} samples, run needs {} train plus at least one eval",
            clips.len(),
            run.data.train_samples
        )));
    }
    let eval = clips.split_off(run.data.train_samples);
    Ok((clips, eval))
}

pub struct RunOutcome {
    pub model: MultiFuser,
    pub optimizer: AdamState,
    pub report: TrainReport,
    pub train_eval: Evaluation,
    pub eval: Evaluation,
}

/// Trains a fresh model of `config` and evaluates it on both splits.
pub fn run_training(
    config: &ModelConfig,
    run: &RunConfig,
    train: &[SyntheticClip],
    eval: &[SyntheticClip],
    on_epoch: impl FnMut(&EpochReport),
) -> Result<RunOutcome> {
    let mut model = MultiFuser::new(config.clone())?;
    let mut optimizer = AdamState::new(model.store());
    let report = train_with(&mut model, &mut optimizer, train, &run.train, on_epoch)?;
    Ok(RunOutcome {
        train_eval: evaluate(&model, train)?,
        eval: evaluate(&model, eval)?,
        model,
        optimizer,
        report,
    })
}

fn select(clips: &[SyntheticClip], keep: &[usize]) -> Result<Vec<SyntheticClip>> {
    clips.iter().map(|c| c.select_modalities(keep)).collect()
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub subset: Vec<usize>,
    pub strategy: FusionStrategy,
    pub top1: f64,
    pub mean1: f64,
    pub train_top1: f64,
    pub census: usize,
}

impl AblationRow {
    pub fn subset_label(&self) -> String {
        self.subset.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")
    }
}

pub const ABLATION_HEADER: &str = "subset,strategy,top1,mean1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{:?},{:?}", r.subset_label(), r.strategy, r.top1, r.mean1).unwrap();
    }
    out
}

/// Every non-empty subset of `0..m`, by size then lexicographically.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (1u32..(1 << m))
        .map(|mask| (0..m).filter(|&i| mask >> i & 1 == 1).collect())
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    out
}

/// Trains and evaluates `strategy` on the modalities in `subset`. Early fusion
/// gets the depth that matches the parallel model's parameter count.
pub fn ablation_cell(
    run: &RunConfig,
    data: &Splits,
    subset: &[usize],
    strategy: FusionStrategy,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<AblationRow> {
    let base = ModelConfig {
        modalities: subset.len(),
        ..run.model.clone()
    };
    let config = budget_matched(&base, strategy);
    let train = select(&data.train, subset)?;
    let eval = select(&data.eval, subset)?;
    let out = run_training(&config, run, &train, &eval, on_epoch)?;
    Ok(AblationRow {
        subset: subset.to_vec(),
        strategy,
        top1: out.eval.top1,
        mean1: out.eval.mean1,
        train_top1: out.train_eval.top1,
        census: out.model.census(),
    })
}

pub fn ablation(
    run: &RunConfig,
    subsets: &[Vec<usize>],
    strategies: &[FusionStrategy],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let data = splits(run)?;
    let mut rows = Vec::new();
    for subset in subsets {
        for &strategy in strategies {
            let row = ablation_cell(run, &data, subset, strategy, |_| {})?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_enumerate_in_order() {
        assert_eq!(
            all_subsets(3),
            vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]]
        );
    }

    #[test]
    fn splits_are_disjoint_prefixes() {
        let mut run = RunConfig::default();
        run.model.height = 16;
        run.model.width = 16;
        run.data.train_samples = 5;
        run.data.eval_samples = 3;
        let s = splits(&run).unwrap();
        assert_eq!((s.train.len(), s.eval.len()), (5, 3));
        let all = gen_dataset(&dataset_spec(&run)).unwrap();
        assert_eq!(s.eval[0], all[5]);
    }

    #[test]
    fn csv_has_contract_columns() {
        let row = AblationRow {
            subset: vec![0, 2],
            strategy: FusionStrategy::Late,
            top1: 0.5,
            mean1: 0.25,
            train_top1: 1.0,
            census: 10,
        };
        assert_eq!(ablation_csv(&[row]), "subset,strategy,top1,mean1\n0+2,late,0.5,0.25\n");
    }
}
