//! Compiles an interaction history into a disjunctive logic query.
//!
//! A history `H = {v1, v2, ...}` with ratings `R` becomes
//! `Pos(u,v1) ∨ Neg(u,v2) ∨ ... → v?`: one binary predicate per event, kept
//! in chronological order. Only rules whose consequent is a positive
//! interaction are ever produced, so the consequent is the bare target item.
//!
//! [`expand_full`] enumerates the complete disjunction over every nonempty
//! conjunction of literals (`2^n - 1` terms). It exists to test the compact
//! form against and is never fed to the network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest history [`expand_full`] accepts.
pub const MAX_EXPANSION_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        self == Polarity::Pos
    }

    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Polarity::Pos
        } else {
            Polarity::Neg
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Literal {
    pub user: usize,
    pub item: usize,
    pub polarity: Polarity,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.polarity {
            Polarity::Pos => "Pos",
            Polarity::Neg => "Neg",
        };
        write!(f, "{p}(u{},v{})", self.user, self.item)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryExpression {
    literals: Vec<Literal>,
    implied_target: Option<usize>,
}

impl QueryExpression {
    pub fn literals(&self) -> &[Literal] {
        &self.literals
    }

    pub fn len(&self) -> usize {
        self.literals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.literals.is_empty()
    }

    pub fn implied_target(&self) -> Option<usize> {
        self.implied_target
    }

    pub fn with_target(mut self, item: usize) -> Self {
        self.implied_target = Some(item);
        self
    }
}

impl fmt::Display for QueryExpression {
    /// `Pos(u0,v1) ∨ Neg(u0,v2) → v?`, or `→ v7` once a target is attached.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, lit) in self.literals.iter().enumerate() {
            if i > 0 {
                write!(f, " ∨ ")?;
            }
            write!(f, "{lit}")?;
        }
        match self.implied_target {
            Some(v) => write!(f, " → v{v}"),
            None => write!(f, " → v?"),
        }
    }
}

/// Every nonempty conjunction of the history literals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FullExpansion {
    terms: Vec<Vec<Literal>>,
}

impl FullExpansion {
    pub fn terms(&self) -> &[Vec<Literal>] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// The single-literal terms, in expansion order.
    pub fn singletons(&self) -> Vec<Literal> {
        self.terms.iter().filter(|t| t.len() == 1).map(|t| t[0]).collect()
    }
}

impl fmt::Display for FullExpansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, term) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " ∨ ")?;
            }
            if term.len() == 1 {
                write!(f, "{}", term[0])?;
            } else {
                let parts: Vec<String> = term.iter().map(|l| l.to_string()).collect();
                write!(f, "({})", parts.join(" ∧ "))?;
            }
        }
        write!(f, " → v?")
    }
}

pub fn build_query(history: &[(usize, Polarity)], user: usize, n_max: usize) -> Result<QueryExpression> {
    build_query_counted(history, user, n_max).map(|(q, _)| q)
}

/// [`build_query`] that also reports how many literal constructions it performed.
pub fn build_query_counted(
    history: &[(usize, Polarity)],
    user: usize,
    n_max: usize,
) -> Result<(QueryExpression, usize)> {
    if history.is_empty() {
        return Err(Error::contract("build_query needs at least one history event"));
    }
    if history.len() > n_max {
        return Err(Error::contract(format!(
            "history of {} events exceeds n_max = {n_max}",
            history.len()
        )));
    }
    let mut steps = 0;
    let mut literals = Vec::with_capacity(history.len());
    for &(item, polarity) in history {
        literals.push(Literal { user, item, polarity });
        steps += 1;
    }
    let query = QueryExpression {
        literals,
        implied_target: None,
    };
    Ok((query, steps))
}

/// Singletons first, then by ascending size, lexicographic by event position within a size.
pub fn expand_full(history: &[(usize, Polarity)], user: usize) -> Result<FullExpansion> {
    let n = history.len();
    if n == 0 {
        return Err(Error::contract("expand_full needs at least one history event"));
    }
    if n > MAX_EXPANSION_LEN {
        return Err(Error::contract(format!(
            "expand_full is limited to {MAX_EXPANSION_LEN} events, got {n}"
        )));
    }
    let literals: Vec<Literal> = history
        .iter()
        .map(|&(item, polarity)| Literal { user, item, polarity })
        .collect();
    let mut terms = Vec::with_capacity((1usize << n) - 1);
    for size in 1..=n {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            terms.push(combo.iter().map(|&i| literals[i]).collect());
            // advance to the next combination in lexicographic order
            let mut pos = size;
            while pos > 0 && combo[pos - 1] == n - size + pos - 1 {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            combo[pos - 1] += 1;
            for j in pos..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(FullExpansion { terms })
}

/// Number of terms in the full expansion of an `n`-literal history: `2^n - 1`.
pub fn term_count(n: u32) -> Result<u64> {
    if !(1..=62).contains(&n) {
        return Err(Error::contract(format!("term_count defined for 1 ≤ n ≤ 62, got {n}")));
    }
    Ok((1u64 << n) - 1)
}
