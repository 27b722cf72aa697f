//! Epoch loop with Adam, per-epoch validation and early stopping.

use rand::seq::SliceRandom;

use crate::config::ModelConfig;
use crate::data::{
    make_eval_instances, make_training_instances, EvalInstance, PreparedDataset, SplitKind, TrainingSet, EVAL_NEGATIVES,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, DEFAULT_KS};
use crate::model::{LossBreakdown, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::tape::Tape;

/// The cut-off monitored for early stopping.
pub const MONITOR_K: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub val_ndcg: f64,
}

pub enum TrainEvent<'a, T> {
    Epoch(&'a EpochRecord),
    /// Validation improved; `model` is the new best snapshot.
    NewBest {
        record: &'a EpochRecord,
        model: &'a Model<T>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub config: ModelConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    /// Parameters from the best validation epoch.
    pub best: Model<T>,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch\tranking\trule\tlength\tparams\ttotal\tval_ndcg@10";

impl EpochRecord {
    /// One `history.tsv` row, without the newline.
    pub fn tsv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.epoch, l.ranking, l.rule, l.length, l.params, l.total, self.val_ndcg
        )
    }
}

impl<T> TrainRun<T> {
    pub fn history_tsv(&self) -> String {
        let mut s = format!("{HISTORY_HEADER}\n");
        for r in &self.history {
            s.push_str(&r.tsv_row());
            s.push('\n');
        }
        s
    }
}

/// Everything training needs from a prepared dataset.
pub struct TrainingData {
    pub train: TrainingSet,
    pub validation: Vec<EvalInstance>,
}

impl TrainingData {
    pub fn new(data: &PreparedDataset, config: &ModelConfig) -> Result<Self> {
        let train = make_training_instances(&data.split, config.n_max, config.seed)?;
        if train.is_empty() {
            return Err(Error::Config("dataset yields no training instances".into()));
        }
        let validation = make_eval_instances(
            &data.split,
            SplitKind::Validation,
            config.n_max,
            EVAL_NEGATIVES,
            data.data_seed()?,
        )?;
        if validation.is_empty() {
            return Err(Error::Config("dataset has no validation instances".into()));
        }
        Ok(TrainingData { train, validation })
    }
}

/// One optimisation step on a batch; returns its loss terms.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    batch: &[&crate::data::TrainingInstance],
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.loss(&mut tape, batch)?;
    let breakdown = Model::breakdown(&tape, &vars)?;
    let grads = tape.backward(vars.total)?;
    adam.step(model.params_mut(), &grads)?;
    Ok(breakdown)
}

pub fn train<T: Scalar>(
    config: &ModelConfig,
    num_users: usize,
    num_items: usize,
    data: &mut TrainingData,
    mut on_event: impl FnMut(TrainEvent<'_, T>) -> Result<()>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    let mut model: Model<T> = Model::new(config.clone(), num_users, num_items)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut best = model.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..config.epochs {
        data.train.resample_negatives(config.seed, epoch as u64)?;
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64, 0));

        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| &data.train.instances[i]).collect();
            let b = train_step(&mut model, &mut adam, &batch).map_err(|e| match e {
                Error::NonFinite { term } => Error::NonFinite {
                    term: format!(
                        "{term} (epoch {epoch}, batch {batches}); best checkpoint is from epoch {best_epoch}"
                    ),
                },
                other => other,
            })?;
            sum.ranking += b.ranking;
            sum.rule += b.rule;
            sum.length += b.length;
            sum.params += b.params;
            sum.total += b.total;
            batches += 1;
        }
        let n = batches as f64;
        let loss = LossBreakdown {
            ranking: sum.ranking / n,
            rule: sum.rule / n,
            length: sum.length / n,
            params: sum.params / n,
            total: sum.total / n,
        };
        let val_ndcg = evaluate(&model, &data.validation, &[MONITOR_K])?.ndcg(MONITOR_K);
        let record = EpochRecord { epoch, loss, val_ndcg };
        log::info!(
            "epoch {epoch}: loss {:.4} (ranking {:.4}) val ndcg@{MONITOR_K} {val_ndcg:.4}",
            loss.total,
            loss.ranking
        );
        on_event(TrainEvent::Epoch(&record))?;
        if val_ndcg > best_val {
            best_val = val_ndcg;
            best_epoch = epoch;
            since_best = 0;
            best = model.clone();
            on_event(TrainEvent::NewBest {
                record: &record,
                model: &best,
            })?;
        } else {
            since_best += 1;
        }
        history.push(record);
        if since_best >= config.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainRun {
        config: config.clone(),
        history,
        best_epoch,
        best_val_ndcg: best_val,
        best,
        stopped_early,
    })
}

/// Test metrics of a trained model on the prepared dataset's test targets.
pub fn test_metrics<T: Scalar>(model: &Model<T>, data: &PreparedDataset) -> Result<MetricsReport> {
    let inst = make_eval_instances(
        &data.split,
        SplitKind::Test,
        model.config().n_max,
        EVAL_NEGATIVES,
        data.data_seed()?,
    )?;
    evaluate(model, &inst, &DEFAULT_KS)
}
