use std::fmt;
use std::str::FromStr;

use crate::data::sequence::{IdMap, SequencedData, UserSequence};
use crate::error::{Error, Result};

/// A user's earliest this-many interactions always stay in training, and users
/// with fewer interactions get no held-out events.
pub const GUARANTEED_TRAIN: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        })
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub users: IdMap,
    pub items: IdMap,
    pub sequences: Vec<UserSequence>,
    assignment: Vec<Vec<SplitKind>>,
}

impl SplitDataset {
    /// Rebuilds a split from stored assignments, checking the split invariants.
    pub fn from_assignment(
        users: IdMap,
        items: IdMap,
        sequences: Vec<UserSequence>,
        assignment: Vec<Vec<SplitKind>>,
    ) -> Result<Self> {
        let split = SplitDataset {
            users,
            items,
            sequences,
            assignment,
        };
        split.validate()?;
        Ok(split)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Parse {
                location: "split".into(),
                detail: msg,
            })
        };
        if self.assignment.len() != self.sequences.len() || self.sequences.len() != self.users.len() {
            return bad("user count mismatch between sequences, assignment and id map".into());
        }
        for (u, (seq, asg)) in self.sequences.iter().zip(&self.assignment).enumerate() {
            if seq.user != u || seq.events.len() != asg.len() {
                return bad(format!("user {u}: assignment does not cover its events"));
            }
            if seq.events.iter().any(|e| e.item >= self.items.len()) {
                return bad(format!("user {u}: item id out of range"));
            }
            let mut seen_val = 0;
            let mut seen_test = 0;
            for (i, (e, k)) in seq.events.iter().zip(asg).enumerate() {
                if *k != SplitKind::Train {
                    if !e.polarity.is_positive() {
                        return bad(format!("user {u}: held-out event {i} is not positive"));
                    }
                    if i < GUARANTEED_TRAIN {
                        return bad(format!("user {u}: held-out event {i} is among the earliest five"));
                    }
                }
                seen_val += (*k == SplitKind::Validation) as usize;
                seen_test += (*k == SplitKind::Test) as usize;
            }
            if seen_val > 1 || seen_test > 1 || (seen_val == 1 && seen_test == 0) {
                return bad(format!("user {u}: malformed held-out set"));
            }
        }
        Ok(())
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    /// Interactions / (users x items).
    pub fn density(&self) -> f64 {
        self.num_interactions() as f64 / (self.num_users() as f64 * self.num_items() as f64)
    }

    pub fn assignment(&self, user: usize) -> &[SplitKind] {
        &self.assignment[user]
    }

    pub fn indices(&self, user: usize, kind: SplitKind) -> Vec<usize> {
        self.assignment[user]
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Position of the user's validation or test event, if any.
    pub fn holdout(&self, user: usize, kind: SplitKind) -> Option<usize> {
        self.assignment[user].iter().position(|&k| k == kind)
    }

    pub fn count(&self, kind: SplitKind) -> usize {
        self.assignment.iter().flatten().filter(|&&k| k == kind).count()
    }
}

/// Leave-one-out: for each user with at least five interactions the latest
/// positive outside the earliest five goes to test, the second-latest to
/// validation, and everything else stays in train.
pub fn leave_one_out_split(data: SequencedData) -> Result<SplitDataset> {
    if data.sequences.is_empty() {
        return Err(Error::contract("leave_one_out_split needs at least one user sequence"));
    }
    let mut assignment = Vec::with_capacity(data.sequences.len());
    let mut no_holdout = 0;
    for seq in &data.sequences {
        let n = seq.events.len();
        let mut asg = vec![SplitKind::Train; n];
        if n >= GUARANTEED_TRAIN {
            let mut eligible = (GUARANTEED_TRAIN..n)
                .rev()
                .filter(|&i| seq.events[i].polarity.is_positive());
            match eligible.next() {
                Some(test) => {
                    asg[test] = SplitKind::Test;
                    if let Some(val) = eligible.next() {
                        asg[val] = SplitKind::Validation;
                    }
                }
                None => {
                    no_holdout += 1;
                    log::info!(
                        "user {}: no positive interaction after the earliest five; no test/validation",
                        seq.user
                    );
                }
            }
        }
        assignment.push(asg);
    }
    if no_holdout > 0 {
        log::info!("{no_holdout} users with >= {GUARANTEED_TRAIN} interactions have no held-out positive");
    }
    Ok(SplitDataset {
        users: data.users,
        items: data.items,
        sequences: data.sequences,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sequence::Event;
    use crate::logic::Polarity;

    /// One user with the given polarities (true = positive) at timestamps 0, 1, ...
    fn single_user(pattern: &[bool]) -> SequencedData {
        let mut users = IdMap::new();
        users.intern("u");
        let mut items = IdMap::new();
        let events = pattern
            .iter()
            .enumerate()
            .map(|(i, &p)| Event {
                item: items.intern(&format!("i{i}")),
                polarity: Polarity::from_positive(p),
                timestamp: i as i64,
            })
            .collect();
        SequencedData {
            users,
            items,
            sequences: vec![UserSequence { user: 0, events }],
            exact_repeats: 0,
        }
    }

    #[test]
    fn short_history_stays_in_train() {
        let s = leave_one_out_split(single_user(&[true; 4])).unwrap();
        assert_eq!(s.assignment(0), &[SplitKind::Train; 4]);
    }

    #[test]
    fn two_late_positives() {
        let s = leave_one_out_split(single_user(&[false, true, false, true, false, true, true])).unwrap();
        assert_eq!(s.holdout(0, SplitKind::Test), Some(6));
        assert_eq!(s.holdout(0, SplitKind::Validation), Some(5));
        assert_eq!(s.indices(0, SplitKind::Train), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn single_late_positive_goes_to_test() {
        let s = leave_one_out_split(single_user(&[false, false, false, false, false, true])).unwrap();
        assert_eq!(s.holdout(0, SplitKind::Test), Some(5));
        assert_eq!(s.holdout(0, SplitKind::Validation), None);
    }

    #[test]
    fn trailing_negatives_stay_in_train() {
        let s = leave_one_out_split(single_user(&[true, true, true, true, true, true, false, true, false])).unwrap();
        assert_eq!(s.holdout(0, SplitKind::Test), Some(7));
        assert_eq!(s.holdout(0, SplitKind::Validation), Some(5));
        assert_eq!(s.assignment(0)[8], SplitKind::Train);
    }

    #[test]
    fn no_eligible_positive() {
        let s = leave_one_out_split(single_user(&[true, true, true, true, true, false, false])).unwrap();
        assert_eq!(s.count(SplitKind::Test), 0);
        assert_eq!(s.count(SplitKind::Validation), 0);
    }
}
