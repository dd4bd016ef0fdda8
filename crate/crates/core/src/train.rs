//! AdamW training loop, evaluation metrics and the per-epoch report.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::SyntheticClip;
use crate::error::{Error, Result};
use crate::model::MultiFuser;
use crate::params::ParamStore;

/// First and second moment estimates, laid out like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.numel()]).collect();
        AdamState {
            step: 0,
            epoch: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Checks that the moment buffers fit `store`.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let fits = |buf: &Vec<Vec<f64>>| {
            buf.len() == store.len() && buf.iter().zip(store.entries()).all(|(b, e)| b.len() == e.numel())
        };
        if !fits(&self.m) || !fits(&self.v) {
            return Err(Error::Contract("optimizer state does not match the parameter layout".into()));
        }
        Ok(())
    }

    /// One AdamW step with decoupled weight decay.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], tc: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - tc.beta1.powi(t);
        let c2 = 1.0 - tc.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(i);
            for j in 0..p.len() {
                m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * g[j];
                v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= tc.learning_rate * (m_hat / (v_hat.sqrt() + tc.eps) + tc.weight_decay * p[j]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy of the logits seen during the epoch, before each update.
    pub top1: f64,
    pub mean1: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,top1,mean1";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?}", e.epoch, e.loss, e.top1, e.mean1).unwrap();
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>3}  loss {:.6}  top1 {:.4}  mean1 {:.4}",
            self.epoch, self.loss, self.top1, self.mean1
        )
    }
}

/// Classification metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    /// Mean per-class recall over the classes present in the labels.
    pub mean1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics(labels: &[usize], predictions: &[usize], classes: usize) -> Result<Evaluation> {
    if labels.len() != predictions.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "metrics: {} labels and {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= classes || p >= classes {
            return Err(Error::Contract(format!("metrics: class index out of range ({y}, {p})")));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        top1: correct as f64 / labels.len() as f64,
        mean1: recalls.iter().sum::<f64>() / recalls.len() as f64,
        confusion,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn evaluate(model: &MultiFuser, data: &[SyntheticClip]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("evaluate: empty dataset".into()));
    }
    let mut labels = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for clip in data {
        labels.push(clip.label);
        predictions.push(argmax(&model.logits(clip)?));
    }
    metrics(&labels, &predictions, model.config().classes)
}

fn first_non_finite(store: &ParamStore) -> Option<String> {
    store
        .entries()
        .iter()
        .find_map(|e| e.value.iter().position(|v| !v.is_finite()).map(|i| format!("{}[{i}]", e.name)))
}

/// Sample order for `epoch` (0-based), fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs one epoch and advances `state.epoch`.
pub fn train_epoch(
    model: &mut MultiFuser,
    state: &mut AdamState,
    data: &[SyntheticClip],
    tc: &TrainConfig,
) -> Result<EpochReport> {
    if data.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    state.check(model.store())?;
    let order = epoch_order(data.len(), tc.seed, state.epoch);
    let mut total_loss = 0.0;
    let mut labels = Vec::with_capacity(data.len());
    let mut predictions = Vec::with_capacity(data.len());
    for batch in order.chunks(tc.batch_size) {
        let mut sum: Vec<Vec<f64>> = model.store().entries().iter().map(|e| vec![0.0; e.numel()]).collect();
        for &i in batch {
            let clip = &data[i];
            let g = match model.gradient(clip) {
                Ok(g) if g.loss.is_finite() => g,
                Ok(_) | Err(Error::Numeric(_)) => {
                    let culprit = first_non_finite(model.store()).unwrap_or_else(|| "none (activation overflow)".into());
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {}; first non-finite parameter: {culprit}",
                        state.epoch + 1
                    )));
                }
                Err(e) => return Err(e),
            };
            total_loss += g.loss;
            labels.push(clip.label);
            predictions.push(argmax(&g.logits));
            for (acc, gi) in sum.iter_mut().zip(&g.grads) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        sum.iter_mut().flatten().for_each(|v| *v *= scale);
        state.update(model.store_mut(), &sum, tc);
        if let Some(culprit) = first_non_finite(model.store()) {
            return Err(Error::Diverged(format!(
                "parameter {culprit} became non-finite at step {}",
                state.step
            )));
        }
    }
    state.epoch += 1;
    let m = metrics(&labels, &predictions, model.config().classes)?;
    Ok(EpochReport {
        epoch: state.epoch,
        loss: total_loss / data.len() as f64,
        top1: m.top1,
        mean1: m.mean1,
    })
}

/// Trains until `state.epoch == tc.epochs`, calling `on_epoch` after each.
pub fn train_with(
    model: &mut MultiFuser,
    state: &mut AdamState,
    data: &[SyntheticClip],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport> {
    tc.validate()?;
    let mut report = TrainReport::default();
    while state.epoch < tc.epochs {
        let e = train_epoch(model, state, data, tc)?;
        on_epoch(&e);
        report.epochs.push(e);
    }
    Ok(report)
}

/// Trains from a fresh optimizer state.
pub fn train(model: &mut MultiFuser, data: &[SyntheticClip], tc: &TrainConfig) -> Result<(AdamState, TrainReport)> {
    let mut state = AdamState::new(model.store());
    let report = train_with(model, &mut state, data, tc, |_| {})?;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FusionStrategy, ModelConfig};
    use crate::data::{gen_dataset, ClipDims, DatasetSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            modalities: 2,
            frames: 2,
            height: 16,
            width: 16,
            channels: 1,
            patch: 8,
            dim: 8,
            heads: 2,
            layers: 2,
            synth_layers: 1,
            classes: 4,
            fusion: FusionStrategy::Parallel,
            conv_kernel: 3,
            init_std: 0.02,
            seed: 1,
        }
    }

    fn data(c: &ModelConfig, n: usize, seed: u64) -> Vec<SyntheticClip> {
        gen_dataset(&DatasetSpec {
            dims: ClipDims::of_model(c),
            classes: 4,
            samples: n,
            noise_std: 0.05,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn hand_enumerated_metrics() {
        let e = metrics(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(e.top1, 2.0 / 3.0);
        assert_eq!(e.mean1, 0.75);
        assert_eq!(e.confusion, vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let e = metrics(&labels, &[0; 40], 4).unwrap();
        assert_eq!((e.top1, e.mean1), (0.25, 0.25));
        let perfect = metrics(&labels, &labels, 4).unwrap();
        assert_eq!((perfect.top1, perfect.mean1), (1.0, 1.0));
    }

    #[test]
    fn mean1_skips_absent_classes_and_ignores_frequency() {
        let a = metrics(&[0, 0, 2, 2], &[0, 1, 2, 2], 4).unwrap();
        assert_eq!(a.mean1, 0.75);
        let b = metrics(&[0, 0, 0, 0, 2], &[0, 0, 1, 1, 2], 4).unwrap();
        assert_eq!(b.mean1, 0.75);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let c = tiny();
        let train_set = data(&c, 6, 2);
        let mut model = MultiFuser::new(c).unwrap();
        let before = model.store().clone();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &tc).unwrap();
        for (a, b) in before.entries().iter().zip(model.store().entries()) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }

    #[test]
    fn overfits_a_single_sample() {
        let c = tiny();
        let one = data(&c, 1, 3);
        let mut model = MultiFuser::new(c).unwrap();
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 1,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let (_, report) = train(&mut model, &one, &tc).unwrap();
        let losses = report.losses();
        assert!(losses[..6].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(*losses.last().unwrap() < 0.01, "{losses:?}");
    }

    #[test]
    fn same_seed_same_trace() {
        let c = tiny();
        let train_set = data(&c, 8, 4);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = MultiFuser::new(c.clone()).unwrap();
            train(&mut model, &train_set, &tc).unwrap().1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_names_a_parameter() {
        let c = tiny();
        let train_set = data(&c, 2, 5);
        let mut model = MultiFuser::new(c).unwrap();
        let n = model.store().get("layer0.inter.expert0.query").unwrap().numel();
        let mut bad = vec![0.0; n];
        bad[3] = f64::NAN;
        model.store_mut().set("layer0.inter.expert0.query", bad).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match train(&mut model, &train_set, &tc) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("layer0.inter.expert0.query[3]"), "{msg}"),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn shuffles_differ_by_epoch_and_repeat_by_seed() {
        assert_eq!(epoch_order(20, 7, 3), epoch_order(20, 7, 3));
        assert_ne!(epoch_order(20, 7, 3), epoch_order(20, 7, 4));
        let mut o = epoch_order(20, 7, 0);
        o.sort_unstable();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }
}
