use rand::seq::index;
use rand::Rng;

use crate::data::split::{SplitDataset, SplitKind};
use crate::error::{Error, Result};
use crate::logic::Polarity;
use crate::rng::{self, Purpose};

/// `(item, polarity)` literals in chronological order.
pub type History = Vec<(usize, Polarity)>;

pub const EVAL_NEGATIVES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: usize,
    pub history: History,
    pub positive_target: usize,
    pub negative_sample: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalInstance {
    pub user: usize,
    pub kind: SplitKind,
    pub history: History,
    pub target: usize,
    /// `candidates[0]` is the target, followed by the sampled negatives.
    pub candidates: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub instances: Vec<TrainingInstance>,
    /// Users that contribute no instance at all.
    pub users_without_instances: usize,
    /// Sorted positively-interacted items per user, excluded from negative sampling.
    positives: Vec<Vec<usize>>,
    num_items: usize,
}

fn history_before(split: &SplitDataset, user: usize, pos: usize, n_max: usize) -> History {
    let events = &split.sequences[user].events;
    events[pos.saturating_sub(n_max)..pos]
        .iter()
        .map(|e| (e.item, e.polarity))
        .collect()
}

fn sorted_positives(split: &SplitDataset, user: usize) -> Vec<usize> {
    let mut p: Vec<usize> = split.sequences[user].positive_items().into_iter().collect();
    p.sort_unstable();
    p
}

/// One instance per positive training event that has at least one earlier
/// event. Negatives are drawn for epoch 0; call
/// [`TrainingSet::resample_negatives`] for later epochs.
pub fn make_training_instances(split: &SplitDataset, n_max: usize, seed: u64) -> Result<TrainingSet> {
    if n_max == 0 {
        return Err(Error::contract("n_max must be at least 1"));
    }
    let mut instances = Vec::new();
    let mut users_without_instances = 0;
    let mut positives = Vec::with_capacity(split.num_users());
    for (user, seq) in split.sequences.iter().enumerate() {
        let before = instances.len();
        for (pos, (event, kind)) in seq.events.iter().zip(split.assignment(user)).enumerate() {
            if pos == 0 || *kind != SplitKind::Train || !event.polarity.is_positive() {
                continue;
            }
            instances.push(TrainingInstance {
                user,
                history: history_before(split, user, pos, n_max),
                positive_target: event.item,
                negative_sample: usize::MAX,
            });
        }
        if instances.len() == before {
            users_without_instances += 1;
        }
        positives.push(sorted_positives(split, user));
    }
    if users_without_instances > 0 {
        log::info!("{users_without_instances} users contribute no training instance");
    }
    let mut set = TrainingSet {
        instances,
        users_without_instances,
        positives,
        num_items: split.num_items(),
    };
    set.resample_negatives(seed, 0)?;
    Ok(set)
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Uniform negatives among items the user never rated positively, from a
    /// stream keyed by `(seed, epoch, user)`.
    pub fn resample_negatives(&mut self, seed: u64, epoch: u64) -> Result<()> {
        let mut current: Option<(usize, rand_chacha::ChaCha8Rng)> = None;
        for inst in &mut self.instances {
            let positives = &self.positives[inst.user];
            if positives.len() >= self.num_items {
                return Err(Error::Config(format!(
                    "user {} rated every item positively; no negative to sample",
                    inst.user
                )));
            }
            if current.as_ref().map(|(u, _)| *u) != Some(inst.user) {
                current = Some((
                    inst.user,
                    rng::stream(seed, Purpose::TrainNegatives, epoch, inst.user as u64),
                ));
            }
            let rng = &mut current.as_mut().unwrap().1;
            inst.negative_sample = loop {
                let v = rng.random_range(0..self.num_items);
                if positives.binary_search(&v).is_err() {
                    break v;
                }
            };
        }
        Ok(())
    }
}

/// Ranking instances for every user's validation or test event: the target
/// plus `num_negatives` distinct items the user never rated positively.
pub fn make_eval_instances(
    split: &SplitDataset,
    kind: SplitKind,
    n_max: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<Vec<EvalInstance>> {
    if kind == SplitKind::Train {
        return Err(Error::contract(
            "evaluation instances come from validation or test events",
        ));
    }
    if n_max == 0 {
        return Err(Error::contract("n_max must be at least 1"));
    }
    let mut out = Vec::new();
    for user in 0..split.num_users() {
        let Some(pos) = split.holdout(user, kind) else {
            continue;
        };
        let target = split.sequences[user].events[pos].item;
        let positives = sorted_positives(split, user);
        let pool: Vec<usize> = (0..split.num_items())
            .filter(|v| positives.binary_search(v).is_err())
            .collect();
        if pool.len() < num_negatives {
            return Err(Error::Config(format!(
                "user {} (`{}`): only {} candidate negatives, need {num_negatives}",
                user,
                split.users.raw(user).unwrap_or("?"),
                pool.len()
            )));
        }
        let mut rng = rng::stream(seed, Purpose::EvalCandidates, kind as u64, user as u64);
        let mut candidates = Vec::with_capacity(num_negatives + 1);
        candidates.push(target);
        candidates.extend(
            index::sample(&mut rng, pool.len(), num_negatives)
                .into_iter()
                .map(|i| pool[i]),
        );
        out.push(EvalInstance {
            user,
            kind,
            history: history_before(split, user, pos, n_max),
            target,
            candidates,
        });
    }
    Ok(out)
}
