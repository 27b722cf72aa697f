//! Ranking metrics and the 101-candidate evaluation protocol.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{EvalInstance, SplitKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 2] = [5, 10];

/// Instances scored per forward pass.
const EVAL_CHUNK: usize = 256;

/// 0-based rank of `scores[0]` after a descending sort, counting every other
/// candidate with an equal score as ranked above it.
pub fn target_rank<T: Scalar>(scores: &[T]) -> Result<usize> {
    let (&target, others) = scores
        .split_first()
        .ok_or_else(|| Error::contract("cannot rank an empty candidate list"))?;
    if !target.is_finite() {
        return Err(Error::NonFinite {
            term: "target score".into(),
        });
    }
    Ok(others.iter().filter(|&&s| s >= target || s.is_nan()).count())
}

/// Mean NDCG@K (gain `ln 2 / ln(rank + 2)` inside the top K) and HR@K.
pub fn ndcg_hr(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::contract("ndcg_hr needs at least one rank"));
    }
    let mut gain = 0.0;
    let mut hits = 0usize;
    for &r in ranks {
        if r < k {
            gain += std::f64::consts::LN_2 / ((r + 2) as f64).ln();
            hits += 1;
        }
    }
    let n = ranks.len() as f64;
    Ok((gain / n, hits as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricAtK {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub split: SplitKind,
    pub n_instances: usize,
    pub at: Vec<MetricAtK>,
}

impl MetricsReport {
    pub fn from_ranks(split: SplitKind, ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let at = ks
            .iter()
            .map(|&k| {
                let (ndcg, hr) = ndcg_hr(ranks, k)?;
                Ok(MetricAtK { k, ndcg, hr })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport {
            split,
            n_instances: ranks.len(),
            at,
        })
    }

    pub fn get(&self, k: usize) -> Option<&MetricAtK> {
        self.at.iter().find(|m| m.k == k)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.get(k).map_or(f64::NAN, |m| m.ndcg)
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.get(k).map_or(f64::NAN, |m| m.hr)
    }

    /// Element-wise mean of reports over the same split and K list.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::contract("no reports to average"))?;
        let n = reports.len() as f64;
        let mut at = first.at.clone();
        for (i, m) in at.iter_mut().enumerate() {
            let mut ndcg = 0.0;
            let mut hr = 0.0;
            for r in reports {
                let other =
                    r.at.get(i)
                        .filter(|o| o.k == m.k && r.split == first.split)
                        .ok_or_else(|| Error::contract("reports disagree on split or K list"))?;
                ndcg += other.ndcg;
                hr += other.hr;
            }
            m.ndcg = ndcg / n;
            m.hr = hr / n;
        }
        Ok(MetricsReport {
            split: first.split,
            n_instances: first.n_instances,
            at,
        })
    }
}

/// Ranks of every instance's target among its candidates. Chunks are scored
/// in parallel against the same immutable model; output keeps instance order.
pub fn rank_targets<T: Scalar>(model: &Model<T>, instances: &[EvalInstance]) -> Result<Vec<usize>> {
    let per_chunk = instances
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let users: Vec<usize> = chunk.iter().map(|i| i.user).collect();
            let histories: Vec<_> = chunk.iter().map(|i| i.history.as_slice()).collect();
            let candidates: Vec<&[usize]> = chunk.iter().map(|i| i.candidates.as_slice()).collect();
            model
                .score_candidates(&users, &histories, &candidates)?
                .iter()
                .map(|scores| target_rank(scores))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_chunk.concat())
}

pub fn evaluate<T: Scalar>(model: &Model<T>, instances: &[EvalInstance], ks: &[usize]) -> Result<MetricsReport> {
    let first = instances
        .first()
        .ok_or_else(|| Error::contract("no evaluation instances"))?;
    let ranks = rank_targets(model, instances)?;
    MetricsReport::from_ranks(first.kind, &ranks, ks)
}

pub const METRICS_CSV_HEADER: &str = "seed,split,K,ndcg,hr,n_instances";

/// CSV rows for `(seed label, report)` pairs; the label is usually a seed or `mean`.
pub fn metrics_csv(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for (seed, r) in rows {
        for m in &r.at {
            let _ = writeln!(
                s,
                "{seed},{},{},{:.6},{:.6},{}",
                r.split, m.k, m.ndcg, m.hr, r.n_instances
            );
        }
    }
    s
}

pub fn metrics_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!(
        "{:<8} {:<10} {:>3} {:>8} {:>8} {:>6}\n",
        "seed", "split", "K", "NDCG", "HR", "N"
    );
    for (seed, r) in rows {
        for m in &r.at {
            let _ = writeln!(
                s,
                "{:<8} {:<10} {:>3} {:>8.4} {:>8.4} {:>6}",
                seed, r.split, m.k, m.ndcg, m.hr, r.n_instances
            );
        }
    }
    s
}
