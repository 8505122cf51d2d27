//! Minibatch training of the full pipeline, evaluation, the random-patch
//! sampling baseline and the slot-budget sweep.

use rayon::prelude::*;

use super::adam::{adam_step, adam_update, AdamState};
use super::synthetic::{Dataset, SyntheticSplits};
use crate::error::{Error, Result};
use crate::gradients::{backward, forward};
use crate::losses::{entropy_loss, switch_loss, LossBreakdown, LossConstants};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{axpy, log_sum_exp, softmax_into, DenseMatrix};
use crate::rng::RngState;
use crate::router::RoutingStats;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub top_k: usize,
    pub constants: LossConstants,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            top_k: 2,
            constants: LossConstants::default(),
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.constants.validate()?;
        if self.top_k == 0 || self.top_k > self.model.slots {
            return Err(Error::InvalidConfig(format!(
                "top_k must be in 1..={}, got {}",
                self.model.slots, self.top_k
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Accuracy, pooled routing statistics and loss over a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<T> {
    pub accuracy: f64,
    pub stats: RoutingStats<T>,
    pub loss: LossBreakdown<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub loss: LossBreakdown<f64>,
    pub mean_prob: Vec<f64>,
    pub load_fraction: Vec<f64>,
    pub max_load: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// Loss or parameters went non-finite during this epoch; the report
    /// stops at the last good epoch.
    Diverged {
        epoch: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Initial record followed by one record per completed epoch.
    pub records: Vec<EpochRecord>,
    pub test_accuracy: f64,
    pub status: TrainStatus,
}

impl TrainReport {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("initial record always present")
    }

    pub fn final_max_load(&self) -> f64 {
        self.last().max_load
    }

    pub fn max_load_trajectory(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_load).collect()
    }

    pub fn epochs_completed(&self) -> usize {
        self.records.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    pub params: ModelParams<T>,
}

const EVAL_CHUNK: usize = 32;

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs the model over `data` without touching `params`.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    top_k: usize,
    constants: &LossConstants,
) -> Result<Evaluation<T>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluate over an empty dataset".into()));
    }
    let k = params.config.slots;
    let mut prob_sum = vec![T::zero(); k];
    let mut counts = vec![0usize; k];
    let mut z_sum = T::zero();
    let mut ce_sum = T::zero();
    let mut correct = 0usize;
    let mut patches = 0usize;
    let items = data.items();
    let labels = data.labels();
    for (chunk, ys) in items.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let tape = forward(params, chunk, ys, top_k, constants)?;
        for item in &tape.items {
            for row in item.probs.row_iter() {
                prob_sum.iter_mut().zip(row).for_each(|(acc, &p)| *acc += p);
            }
            counts
                .iter_mut()
                .zip(item.table.slot_counts())
                .for_each(|(c, add)| *c += add);
            for row in item.logits.row_iter() {
                let lse = log_sum_exp(row);
                z_sum += lse * lse;
            }
        }
        for (item, &y) in tape.items.iter().zip(ys) {
            ce_sum += log_sum_exp(&item.class_logits) - item.class_logits[y];
            correct += usize::from(argmax(&item.class_logits) == y);
        }
        patches += tape.stats.patches;
    }
    let n = T::from_usize_lossy(patches);
    let stats = RoutingStats {
        mean_prob: prob_sum.iter().map(|&v| v / n).collect(),
        // exact integer counts, so a slot chosen by every patch reads 1/top_k
        load_fraction: counts
            .iter()
            .map(|&c| T::from_usize_lossy(c) / T::from_usize_lossy(patches * top_k))
            .collect(),
        patches,
        top_k,
    };
    let task = ce_sum / T::from_usize_lossy(data.len());
    let switch = switch_loss(&stats);
    let entropy = entropy_loss(&stats, T::c(constants.epsilon))?;
    let z = T::c(constants.alpha) * z_sum / n;
    let lambda = T::c(constants.lambda);
    let loss = LossBreakdown {
        task,
        switch,
        entropy,
        z,
        total: task + lambda * (switch + T::c(constants.entropy_coeff) * entropy + z),
        lambda,
    };
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        stats,
        loss,
    })
}

fn record<T: Scalar>(epoch: usize, train: &Evaluation<T>, val_accuracy: f64) -> EpochRecord {
    let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let l = &train.loss;
    EpochRecord {
        epoch,
        loss: LossBreakdown {
            task: l.task.as_f64(),
            switch: l.switch.as_f64(),
            entropy: l.entropy.as_f64(),
            z: l.z.as_f64(),
            total: l.total.as_f64(),
            lambda: l.lambda.as_f64(),
        },
        mean_prob: f(&train.stats.mean_prob),
        load_fraction: f(&train.stats.load_fraction),
        max_load: train.stats.max_load().as_f64(),
        train_accuracy: train.accuracy,
        val_accuracy,
    }
}

fn is_divergence(err: &Error) -> bool {
    matches!(err, Error::NumericalFailure { .. } | Error::InvalidInput(_))
}

/// Minibatch Adam on the full objective. Deterministic given
/// `config.seed`: it drives parameter init and the per-epoch shuffles.
pub fn train<T: Scalar>(
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    test_set: &Dataset<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let root = RngState::new(config.seed);
    let mut params = ModelParams::init(&config.model, &mut root.split(0))?;
    let mut order_rng = root.split(1);
    let mut adam = AdamState::for_params(&params, config.lr);
    let (top_k, constants) = (config.top_k, &config.constants);

    let val_acc = |p: &ModelParams<T>| -> Result<f64> {
        if val_set.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(evaluate(p, val_set, top_k, constants)?.accuracy)
        }
    };
    let init = evaluate(&params, train_set, top_k, constants)?;
    let mut records = vec![record(0, &init, val_acc(&params)?)];
    let mut status = TrainStatus::Completed;

    let items = train_set.items();
    let labels = train_set.labels();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 1..=config.epochs {
        let last_good = params.clone();
        order_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<_> = batch.iter().map(|&i| items[i]).collect();
            let ys: Vec<_> = batch.iter().map(|&i| labels[i]).collect();
            let step = forward(&params, &xs, &ys, top_k, constants).and_then(|tape| {
                if !tape.loss.is_finite() {
                    return Err(Error::NumericalFailure {
                        layer: "loss",
                        detail: "non-finite training loss".into(),
                    });
                }
                backward(&tape, constants)
            });
            let outcome = step.and_then(|g| {
                let mut next = params.clone();
                adam_step(&mut next, &g, &mut adam)?;
                Ok(next)
            });
            match outcome {
                Ok(next) => params = next,
                Err(e) if is_divergence(&e) => {
                    params = last_good;
                    status = TrainStatus::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let snapshot = match evaluate(&params, train_set, top_k, constants) {
            Ok(ev) if ev.loss.is_finite() => ev,
            Ok(_) => {
                params = last_good;
                status = TrainStatus::Diverged { epoch };
                break;
            }
            Err(e) if is_divergence(&e) => {
                params = last_good;
                status = TrainStatus::Diverged { epoch };
                break;
            }
            Err(e) => return Err(e),
        };
        records.push(record(epoch, &snapshot, val_acc(&params)?));
    }

    let test_accuracy = if test_set.is_empty() {
        f64::NAN
    } else {
        evaluate(&params, test_set, top_k, constants)?.accuracy
    };
    Ok(TrainOutcome {
        report: TrainReport {
            config: config.clone(),
            records,
            test_accuracy,
            status,
        },
        params,
    })
}

/// Mean of `count` patches drawn without replacement (all of them when the
/// bag is smaller).
fn sampled_mean<T: Scalar>(x: &DenseMatrix<T>, count: usize, rng: &mut RngState) -> Vec<T> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    rng.shuffle(&mut idx);
    let take = count.min(x.rows());
    let mut mean = vec![T::zero(); x.cols()];
    let w = T::one() / T::from_usize_lossy(take);
    for &j in &idx[..take] {
        axpy(w, x.row(j), &mut mean);
    }
    mean
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingBaselineConfig {
    /// Patches kept per bag, the baseline's token budget.
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Random-patch sampling baseline: mean-pool `samples` random patches and
/// classify with a linear head trained by Adam on cross-entropy. Training
/// draws a fresh sample every epoch; the test sample is fixed by the seed.
/// Returns test accuracy.
pub fn sampling_baseline<T: Scalar>(
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    classes: usize,
    config: &SamplingBaselineConfig,
) -> Result<f64> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::InvalidInput("sampling baseline needs non-empty splits".into()));
    }
    let dim = train_set.bags[0].features.cols();
    let root = RngState::new(config.seed);
    let mut init = root.split(0);
    let std = 1.0 / (dim as f64).sqrt();
    // flat layout: dim × classes weight, then classes bias
    let n_weight = dim * classes;
    let mut theta: Vec<T> = (0..n_weight)
        .map(|_| T::c(std * init.standard_normal()))
        .chain((0..classes).map(|_| T::zero()))
        .collect();
    let mut adam = AdamState::<T>::new(theta.len(), config.lr);
    let logits_of = |theta: &[T], z: &[T]| {
        let mut out = theta[n_weight..].to_vec();
        for (d, &v) in z.iter().enumerate() {
            axpy(v, &theta[d * classes..(d + 1) * classes], &mut out);
        }
        out
    };

    let mut sample_rng = root.split(2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..config.epochs {
        let feats: Vec<Vec<T>> = train_set
            .bags
            .iter()
            .map(|b| sampled_mean(&b.features, config.samples, &mut sample_rng))
            .collect();
        sample_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grad = vec![T::zero(); theta.len()];
            let inv_b = T::one() / T::from_usize_lossy(batch.len());
            for &i in batch {
                let z = &feats[i];
                let mut d = vec![T::zero(); classes];
                softmax_into(&logits_of(&theta, z), &mut d);
                d[train_set.bags[i].label] -= T::one();
                d.iter_mut().for_each(|v| *v *= inv_b);
                for (r, &zv) in z.iter().enumerate() {
                    axpy(zv, &d, &mut grad[r * classes..(r + 1) * classes]);
                }
                axpy(T::one(), &d, &mut grad[n_weight..]);
            }
            adam_update(&mut theta, &grad, &mut adam)?;
        }
    }

    let mut test_rng = root.split(3);
    let correct = test_set
        .bags
        .iter()
        .filter(|b| {
            let z = sampled_mean(&b.features, config.samples, &mut test_rng);
            argmax(&logits_of(&theta, &z)) == b.label
        })
        .count();
    Ok(correct as f64 / test_set.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub slots: usize,
    pub test_accuracy: f64,
    pub val_accuracy: f64,
    pub final_max_load: f64,
}

/// Trains one model per slot budget on the same data and reports accuracy.
pub fn slot_budget_sweep<T: Scalar>(
    splits: &SyntheticSplits<T>,
    base: &TrainConfig,
    budgets: &[usize],
) -> Result<Vec<SweepRow>> {
    budgets
        .par_iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.model.slots = k;
            let out = train(&splits.train, &splits.val, &splits.test, &cfg)?;
            Ok(SweepRow {
                slots: k,
                test_accuracy: out.report.test_accuracy,
                val_accuracy: out.report.last().val_accuracy,
                final_max_load: out.report.final_max_load(),
            })
        })
        .collect()
}
