use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::PathBuf;

use nlq4rec::data::{
    load_prepared, make_eval_instances, make_training_instances, parse_dataset, prepare, DatasetFormat, PrepareOptions,
    SplitKind, EVAL_NEGATIVES,
};

fn ml100k_path() -> Option<PathBuf> {
    let p = std::env::var_os("NLQ4REC_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/ml-100k/u.data"));
    if p.exists() {
        Some(p)
    } else {
        eprintln!(
            "skipping: ML100k u.data not found at {} (set NLQ4REC_ML100K)",
            p.display()
        );
        None
    }
}

fn opts() -> PrepareOptions {
    PrepareOptions {
        format: DatasetFormat::Ml100k,
        threshold: 4.0,
        seed: 2024,
    }
}

#[test]
fn parse_ml100k_line() {
    let out = parse_dataset(DatasetFormat::Ml100k, Cursor::new("196\t242\t3\t881250949\n"), "t").unwrap();
    let r = &out.interactions[0];
    assert_eq!(
        (r.user_id.as_str(), r.item_id.as_str(), r.rating, r.timestamp),
        ("196", "242", 3.0, 881250949)
    );
    let empty = parse_dataset(DatasetFormat::Ml100k, Cursor::new(""), "t").unwrap();
    assert!(empty.interactions.is_empty() && empty.warnings.is_empty());
    let bad = parse_dataset(DatasetFormat::Ml100k, Cursor::new("1\t2\tx\t3\n1\t2\t4\t5\n"), "t").unwrap();
    assert_eq!((bad.interactions.len(), bad.skipped()), (1, 1));
}

#[test]
fn synthetic_round_trip_and_idempotence() {
    let mut text = String::new();
    for u in 0..6 {
        for i in 0..(3 + 2 * u) {
            let rating = 1 + (u * 7 + i * 3) % 5;
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                100 + u,
                10 + (i * 5 + u) % 17,
                rating,
                1000 + i * 10
            ));
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("u.data");
    fs::write(&src, &text).unwrap();
    let a = prepare(&src, &dir.path().join("a"), &opts()).unwrap();
    let b = prepare(&src, &dir.path().join("b"), &opts()).unwrap();
    for f in [
        "interactions.tsv",
        "split.tsv",
        "users.map",
        "items.map",
        "manifest.txt",
    ] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(a.manifest_hash, b.manifest_hash);
    let reloaded = load_prepared(&dir.path().join("a")).unwrap();
    assert_eq!(reloaded.split.sequences, a.split.sequences);
    for u in 0..a.split.num_users() {
        assert_eq!(reloaded.split.assignment(u), a.split.assignment(u));
    }
    assert!(a.manifest.get("dedup_policy").is_some());
    assert_eq!(a.manifest.get("threshold"), Some("4"));
}

#[test]
fn corrupt_prepared_dir_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("u.data");
    fs::write(&src, "1\t1\t5\t1\n1\t2\t5\t2\n").unwrap();
    let out = dir.path().join("p");
    prepare(&src, &out, &opts()).unwrap();
    fs::write(out.join("split.tsv"), "0\t0\ttrain\n").unwrap();
    assert!(load_prepared(&out).is_err());
}

#[test]
fn ml100k_protocol() {
    let Some(src) = ml100k_path() else { return };
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(&src, dir.path(), &opts()).unwrap();
    let s = &p.split;
    assert_eq!(
        (s.num_users(), s.num_items(), s.num_interactions()),
        (943, 1682, 100_000)
    );
    assert_eq!(format!("{:.2}%", 100.0 * s.density()), "6.30%");

    for u in 0..s.num_users() {
        let mut seen = HashSet::new();
        for k in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
            for i in s.indices(u, k) {
                assert!(seen.insert(i), "user {u}: event {i} in two splits");
                if k != SplitKind::Train {
                    assert!(s.sequences[u].events[i].polarity.is_positive());
                }
            }
        }
        assert_eq!(seen.len(), s.sequences[u].events.len());
    }

    let seed = p.data_seed().unwrap();
    for kind in [SplitKind::Validation, SplitKind::Test] {
        let a = make_eval_instances(s, kind, 10, EVAL_NEGATIVES, seed).unwrap();
        let b = make_eval_instances(s, kind, 10, EVAL_NEGATIVES, seed).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for inst in &a {
            assert_eq!(inst.candidates.len(), 101);
            assert_eq!(inst.candidates[0], inst.target);
            let positives = s.sequences[inst.user].positive_items();
            let hits: Vec<_> = inst.candidates.iter().filter(|c| positives.contains(c)).collect();
            assert_eq!(hits, vec![&inst.target]);
            assert_eq!(inst.candidates.iter().collect::<HashSet<_>>().len(), 101);
            assert!(!inst.history.is_empty() && inst.history.len() <= 10);
        }
    }

    let mut t = make_training_instances(s, 10, 1).unwrap();
    let first: Vec<usize> = t.instances.iter().map(|i| i.negative_sample).collect();
    for inst in &t.instances {
        let positives = s.sequences[inst.user].positive_items();
        assert!(positives.contains(&inst.positive_target));
        assert!(!positives.contains(&inst.negative_sample));
        assert!((1..=10).contains(&inst.history.len()));
    }
    t.resample_negatives(1, 1).unwrap();
    let second: Vec<usize> = t.instances.iter().map(|i| i.negative_sample).collect();
    assert_ne!(first, second);
    t.resample_negatives(1, 0).unwrap();
    assert_eq!(t.instances.iter().map(|i| i.negative_sample).collect::<Vec<_>>(), first);
}
