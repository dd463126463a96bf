//! Nested incremental training and evaluation.
//!
//! One outer iteration trains the nested chain W25 → W50 → W75 → W100 and
//! then retrains the upper models U25 → U50 as stand-alone networks. All six
//! models are views over the same store, so the weight copies between
//! models are implicit. Repeating the outer loop reconciles the chain and
//! the upper models on their shared diagonal blocks.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::freeze::{freeze_mask, FreezeMask, FreezePolicy};
use crate::model::params::{FluidParams, ParamSet};
use crate::model::{backward, forward_train, NetView, SubnetId, SubnetSpec};
use crate::ops::softmax_xent;
use crate::optim::{sgd_step, Hyper};
use crate::tensor::argmax_rows;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub n_iters: usize,
    pub chain: Vec<SubnetId>,
    pub upper: Vec<SubnetId>,
    pub hyper: Hyper,
    pub lr_decay: f64,
    pub policy: FreezePolicy,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            n_iters: 3,
            chain: SubnetId::CHAIN.to_vec(),
            upper: SubnetId::UPPER.to_vec(),
            hyper: Hyper::default(),
            lr_decay: 0.5,
            policy: FreezePolicy::FreezeInherited,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.n_iters == 0 {
            return Err(Error::Input("n_iters must be at least 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Input(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        for pair in self.chain.windows(2) {
            let (small, big) = (pair[0].spec().channels(), pair[1].spec().channels());
            let nested = big.start <= small.start && small.end <= big.end && big.len() > small.len();
            if !nested {
                return Err(Error::Input(format!(
                    "chain is not strictly nested at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(u) = self.upper.iter().find(|u| self.chain.contains(u)) {
            return Err(Error::Input(format!("{u} appears in both chain and upper lists")));
        }
        Ok(())
    }

    /// Training order inside one outer iteration.
    pub fn order(&self) -> Vec<SubnetId> {
        self.chain.iter().chain(&self.upper).copied().collect()
    }

    /// Per-epoch shuffle seed for (iteration, spec).
    pub fn shuffle_seed(&self, iteration: usize, spec: SubnetId) -> u64 {
        let mut z = self
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(((iteration as u64) << 8) | (spec.index() as u64 + 1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub epochs: usize,
    pub batches: usize,
    /// Mean loss over the first epoch's batches.
    pub first_epoch_loss: Option<f64>,
    /// Mean loss over the last epoch's batches.
    pub final_loss: Option<f64>,
}

/// Runs `hyper.epochs_per_step` epochs of mini-batch SGD on one sub-network.
/// Only units marked trainable in `mask` change.
pub fn train_one_step(
    params: &mut FluidParams,
    spec: &SubnetSpec,
    mask: &FreezeMask,
    dataset: &Dataset,
    hyper: &Hyper,
    shuffle_seed: u64,
) -> Result<StepStats> {
    hyper.validate()?;
    let masks = mask.element_masks();
    for unit in mask.trainable_units() {
        params.velocity.map_unit(unit, |_| 0.0);
    }
    let mut grads = ParamSet::zeros();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stats = StepStats {
        epochs: 0,
        batches: 0,
        first_epoch_loss: None,
        final_loss: None,
    };
    let mut batch_index = 0usize;
    for epoch in 0..hyper.epochs_per_step {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let (x, y) = dataset.gather(chunk)?;
            let view = NetView::of_spec(&params.weights, spec);
            let cache = forward_train(&view, &x)?;
            let (loss, dlogits) = softmax_xent(&cache.logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} in {} at batch {batch_index}",
                    spec.id
                )));
            }
            for slot in crate::model::TensorSlot::all() {
                grads.tensor_mut(slot).data_mut().fill(0.0);
            }
            backward(&view, spec, &cache, &dlogits, &mut grads)?;
            for (slot, frozen) in &masks {
                sgd_step(
                    params.weights.tensor_mut(*slot),
                    grads.tensor(*slot),
                    params.velocity.tensor_mut(*slot),
                    hyper,
                    frozen,
                )?;
            }
            sum += f64::from(loss);
            count += 1;
            batch_index += 1;
        }
        let mean = (count > 0).then(|| sum / count as f64);
        if epoch == 0 {
            stats.first_epoch_loss = mean;
        }
        stats.final_loss = mean;
        stats.epochs += 1;
        stats.batches += count;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub spec: SubnetId,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    /// Test accuracy of this spec measured after the iteration completed.
    pub test_accuracy: Option<f64>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub wall_time_s: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,spec,epochs,final_loss,test_accuracy,elapsed_s\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                e.iteration,
                e.spec,
                e.epochs,
                opt(e.final_loss),
                opt(e.test_accuracy),
                e.elapsed_s
            );
        }
        s
    }

    /// Accuracy logged for `spec` at the last iteration.
    pub fn final_accuracy(&self, spec: SubnetId) -> Option<f64> {
        self.entries.iter().rev().find(|e| e.spec == spec).and_then(|e| e.test_accuracy)
    }
}

/// A training failure with the log gathered up to that point.
#[derive(Debug, thiserror::Error)]
#[error("training failed after {} log entries: {source}", log.entries.len())]
pub struct TrainFailure {
    pub log: TrainLog,
    #[source]
    pub source: Error,
}

pub fn nested_incremental_train(
    params: &mut FluidParams,
    train: &Dataset,
    test: Option<&Dataset>,
    schedule: &TrainSchedule,
) -> Result<TrainLog, TrainFailure> {
    nested_incremental_train_with(params, train, test, schedule, |_| {})
}

/// As [`nested_incremental_train`], reporting each log entry as it is produced.
pub fn nested_incremental_train_with(
    params: &mut FluidParams,
    train: &Dataset,
    test: Option<&Dataset>,
    schedule: &TrainSchedule,
    mut progress: impl FnMut(&TrainLogEntry),
) -> Result<TrainLog, TrainFailure> {
    let start = Instant::now();
    let mut log = TrainLog::default();
    if let Err(source) = schedule.validate() {
        return Err(TrainFailure { log, source });
    }
    let mut hyper = schedule.hyper;
    for iteration in 0..schedule.n_iters {
        let first = log.entries.len();
        for id in schedule.order() {
            let spec = id.spec();
            let mask = freeze_mask(&spec, schedule.policy, iteration);
            let seed = schedule.shuffle_seed(iteration, id);
            match train_one_step(params, &spec, &mask, train, &hyper, seed) {
                Ok(stats) => log.entries.push(TrainLogEntry {
                    iteration,
                    spec: id,
                    epochs: stats.epochs,
                    final_loss: stats.final_loss,
                    test_accuracy: None,
                    elapsed_s: start.elapsed().as_secs_f64(),
                }),
                Err(source) => {
                    log.wall_time_s = start.elapsed().as_secs_f64();
                    return Err(TrainFailure { log, source });
                }
            }
        }
        for entry in &mut log.entries[first..] {
            if let Some(test) = test {
                match evaluate(params, &entry.spec.spec(), test) {
                    Ok(acc) => entry.test_accuracy = Some(acc),
                    Err(source) => {
                        log.wall_time_s = start.elapsed().as_secs_f64();
                        return Err(TrainFailure { log, source });
                    }
                }
            }
            entry.elapsed_s = start.elapsed().as_secs_f64();
            progress(entry);
        }
        hyper.learning_rate *= schedule.lr_decay;
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

pub const EVAL_BATCH: usize = 250;

/// Fraction of test samples whose argmax logit equals the label.
pub fn evaluate(params: &FluidParams, spec: &SubnetSpec, testset: &Dataset) -> Result<f64> {
    evaluate_view(&NetView::of_spec(&params.weights, spec), testset, EVAL_BATCH)
}

pub fn evaluate_view(view: &NetView<'_>, testset: &Dataset, batch_size: usize) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let mut start = 0;
    while start < testset.len() {
        let end = (start + batch_size).min(testset.len());
        let (x, y) = testset.batch(start, end)?;
        let logits = view.forward(&x)?;
        correct += argmax_rows(&logits)
            .into_iter()
            .zip(y)
            .filter(|(p, &l)| *p == usize::from(l))
            .count();
        start = end;
    }
    Ok(correct as f64 / testset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tensor::Tensor;

    fn toy_dataset(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 1, 28, 28], |i| {
            let s = i / 784;
            let p = i % 784;
            if (p + s * 37) % (7 + s % 10) == 0 { 1.0 } else { 0.0 }
        });
        let labels = (0..n).map(|s| (s % 10) as u8).collect();
        Dataset::new(images, labels).unwrap()
    }

    #[test]
    fn all_frozen_mask_changes_nothing() {
        let mut p = init_params(1);
        let before = p.weights.clone();
        let data = toy_dataset(20);
        let hyper = Hyper { batch_size: 8, epochs_per_step: 2, ..Hyper::default() };
        let stats = train_one_step(&mut p, &SubnetId::W50.spec(), &FreezeMask::all_frozen(), &data, &hyper, 3).unwrap();
        assert_eq!(stats.batches, 6);
        assert_eq!(p.weights, before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = init_params(1);
        let before = p.weights.clone();
        let data = toy_dataset(8);
        let spec = SubnetId::U25.spec();
        let mask = freeze_mask(&spec, FreezePolicy::Joint, 0);
        let hyper = Hyper { learning_rate: 0.0, batch_size: 8, ..Hyper::default() };
        let stats = train_one_step(&mut p, &spec, &mask, &data, &hyper, 0).unwrap();
        assert!(stats.final_loss.unwrap() > 0.0);
        assert_eq!(p.weights, before);
    }

    #[test]
    fn schedule_order_and_validation() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        use SubnetId::*;
        assert_eq!(s.order(), vec![W25, W50, W75, W100, U25, U50]);
        let bad = TrainSchedule { chain: vec![W50, W25], ..TrainSchedule::default() };
        assert!(bad.validate().is_err());
        let overlap = TrainSchedule { upper: vec![W100], ..TrainSchedule::default() };
        assert!(overlap.validate().is_err());
        assert!(TrainSchedule { n_iters: 0, ..TrainSchedule::default() }.validate().is_err());
    }

    #[test]
    fn degenerate_schedule_logs_six_entries() {
        let mut p = init_params(2);
        let before = p.weights.clone();
        let data = toy_dataset(10);
        let schedule = TrainSchedule {
            n_iters: 1,
            hyper: Hyper { epochs_per_step: 0, ..Hyper::default() },
            ..TrainSchedule::default()
        };
        let log = nested_incremental_train(&mut p, &data, Some(&data), &schedule).unwrap();
        assert_eq!(log.entries.len(), 6);
        assert!(log.entries.iter().all(|e| e.epochs == 0 && e.test_accuracy.is_some()));
        assert_eq!(p.weights, before);
        assert!(log.to_csv().starts_with("iteration,spec,"));
    }

    #[test]
    fn shuffle_seeds_differ_per_step() {
        let s = TrainSchedule::default();
        let mut seen = std::collections::BTreeSet::new();
        for it in 0..3 {
            for id in SubnetId::ALL {
                assert!(seen.insert(s.shuffle_seed(it, id)));
            }
        }
    }
}
