use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// MovieLens 100k `u.data`: `user \t item \t rating \t timestamp`.
    Ml100k,
    /// Amazon review 5-core dumps: one JSON object per line.
    Amazon5Core,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::Ml100k => "ml100k",
            DatasetFormat::Amazon5Core => "amazon5core",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml100k" => Ok(DatasetFormat::Ml100k),
            "amazon5core" | "amazon" => Ok(DatasetFormat::Amazon5Core),
            other => Err(Error::Config(format!(
                "unknown dataset format `{other}` (expected ml100k or amazon5core)"
            ))),
        }
    }
}

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub interactions: Vec<RawInteraction>,
    /// One message per skipped line.
    pub warnings: Vec<String>,
}

impl ParseOutcome {
    pub fn skipped(&self) -> usize {
        self.warnings.len()
    }
}

#[derive(Deserialize)]
struct AmazonReview {
    #[serde(rename = "reviewerID")]
    reviewer: String,
    asin: String,
    overall: f64,
    #[serde(rename = "unixReviewTime")]
    review_time: i64,
}

fn parse_ml100k_line(line: &str) -> std::result::Result<RawInteraction, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let rating: f64 = fields[2]
        .trim()
        .parse()
        .map_err(|e| format!("bad rating `{}`: {e}", fields[2]))?;
    let timestamp: i64 = fields[3]
        .trim()
        .parse()
        .map_err(|e| format!("bad timestamp `{}`: {e}", fields[3]))?;
    Ok(RawInteraction {
        user_id: fields[0].trim().to_string(),
        item_id: fields[1].trim().to_string(),
        rating,
        timestamp,
    })
}

fn parse_amazon_line(line: &str) -> std::result::Result<RawInteraction, String> {
    let review: AmazonReview = serde_json::from_str(line).map_err(|e| e.to_string())?;
    Ok(RawInteraction {
        user_id: review.reviewer,
        item_id: review.asin,
        rating: review.overall,
        timestamp: review.review_time,
    })
}

fn validate(raw: RawInteraction) -> std::result::Result<RawInteraction, String> {
    if raw.user_id.is_empty() || raw.item_id.is_empty() {
        return Err("empty user or item id".into());
    }
    if !(RATING_MIN..=RATING_MAX).contains(&raw.rating) {
        return Err(format!("rating {} outside [{RATING_MIN}, {RATING_MAX}]", raw.rating));
    }
    if raw.timestamp < 0 {
        return Err(format!("negative timestamp {}", raw.timestamp));
    }
    Ok(raw)
}

/// Reads every line of `source`, keeping well-formed interactions in file order.
/// Blank lines are ignored; malformed lines are skipped with a warning.
pub fn parse_dataset<R: BufRead>(format: DatasetFormat, source: R, source_name: &str) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (lineno, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            DatasetFormat::Ml100k => parse_ml100k_line(line),
            DatasetFormat::Amazon5Core => parse_amazon_line(line),
        }
        .and_then(validate);
        match parsed {
            Ok(raw) => out.interactions.push(raw),
            Err(msg) => {
                log::warn!("{source_name}:{}: skipped: {msg}", lineno + 1);
                out.warnings.push(format!("line {}: {msg}", lineno + 1));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ml100k_line() {
        let out = parse_dataset(DatasetFormat::Ml100k, "196\t242\t3\t881250949\n".as_bytes(), "u.data").unwrap();
        assert_eq!(
            out.interactions,
            vec![RawInteraction {
                user_id: "196".into(),
                item_id: "242".into(),
                rating: 3.0,
                timestamp: 881250949,
            }]
        );
        assert_eq!(out.skipped(), 0);
    }

    #[test]
    fn empty_stream() {
        let out = parse_dataset(DatasetFormat::Ml100k, "".as_bytes(), "empty").unwrap();
        assert!(out.interactions.is_empty());
        assert_eq!(out.skipped(), 0);
    }

    #[test]
    fn malformed_lines_are_skipped_and_counted() {
        let text = "1\t2\t4\t10\nbroken line\n1\t3\t9\t11\n2\t3\t5\t-4\n2\t4\t5\t12\n";
        let out = parse_dataset(DatasetFormat::Ml100k, text.as_bytes(), "u.data").unwrap();
        assert_eq!(out.interactions.len(), 2);
        assert_eq!(out.skipped(), 3);
        assert!(out.warnings[0].starts_with("line 2"));
    }

    #[test]
    fn amazon_json_lines() {
        let text = r#"{"overall": 5.0, "verified": true, "reviewTime": "11 9, 2012", "reviewerID": "A2M1CU2IRZG0K9", "asin": "0005089549", "unixReviewTime": 1352419200}
{"overall": "oops"}
"#;
        let out = parse_dataset(DatasetFormat::Amazon5Core, text.as_bytes(), "reviews.json").unwrap();
        assert_eq!(out.interactions.len(), 1);
        assert_eq!(out.interactions[0].user_id, "A2M1CU2IRZG0K9");
        assert_eq!(out.interactions[0].item_id, "0005089549");
        assert_eq!(out.interactions[0].timestamp, 1352419200);
        assert_eq!(out.skipped(), 1);
    }
}
