use std::collections::{HashMap, HashSet};

use crate::data::parse::{RawInteraction, RATING_MAX, RATING_MIN};
use crate::error::{Error, Result};
use crate::logic::Polarity;

/// Dense ids assigned in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    dense: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.dense.get(raw) {
            return id;
        }
        let id = self.raw.len();
        self.raw.push(raw.to_string());
        self.dense.insert(raw.to_string(), id);
        id
    }

    pub fn from_raw(raw: Vec<String>) -> Result<Self> {
        let mut map = IdMap::new();
        for r in raw {
            if map.dense.contains_key(&r) {
                return Err(Error::Parse {
                    location: "id map".into(),
                    detail: format!("duplicate raw id `{r}`"),
                });
            }
            map.intern(&r);
        }
        Ok(map)
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.dense.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        self.raw.get(dense).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.raw.iter().enumerate().map(|(i, s)| (i, s.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub item: usize,
    pub polarity: Polarity,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    /// Chronological; equal timestamps keep file order.
    pub events: Vec<Event>,
}

impl UserSequence {
    pub fn positive_items(&self) -> HashSet<usize> {
        self.events
            .iter()
            .filter(|e| e.polarity.is_positive())
            .map(|e| e.item)
            .collect()
    }

    pub fn interacted_items(&self) -> HashSet<usize> {
        self.events.iter().map(|e| e.item).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SequencedData {
    pub users: IdMap,
    pub items: IdMap,
    /// Indexed by dense user id.
    pub sequences: Vec<UserSequence>,
    /// Events repeating an earlier (user, item, timestamp); they are kept.
    pub exact_repeats: usize,
}

impl SequencedData {
    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }
}

/// Positive iff `rating >= threshold`. Users and items get dense ids in
/// first-appearance order; each user's events are stably sorted by timestamp.
pub fn binarize_and_sequence(raw: &[RawInteraction], threshold: f64) -> Result<SequencedData> {
    if !(RATING_MIN..=RATING_MAX).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside rating scale [{RATING_MIN}, {RATING_MAX}]"
        )));
    }
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut sequences: Vec<UserSequence> = Vec::new();
    for r in raw {
        let u = users.intern(&r.user_id);
        let v = items.intern(&r.item_id);
        if u == sequences.len() {
            sequences.push(UserSequence {
                user: u,
                events: Vec::new(),
            });
        }
        sequences[u].events.push(Event {
            item: v,
            polarity: Polarity::from_positive(r.rating >= threshold),
            timestamp: r.timestamp,
        });
    }
    let mut exact_repeats = 0;
    for seq in &mut sequences {
        // stable: equal timestamps stay in file order
        seq.events.sort_by_key(|e| e.timestamp);
        let mut seen = HashSet::new();
        exact_repeats += seq
            .events
            .iter()
            .filter(|e| !seen.insert((e.item, e.timestamp)))
            .count();
    }
    Ok(SequencedData {
        users,
        items,
        sequences,
        exact_repeats,
    })
}
