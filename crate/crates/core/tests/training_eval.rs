use std::fs;

use nlq4rec::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use nlq4rec::data::{
    make_eval_instances, prepare, DatasetFormat, EvalInstance, PrepareOptions, PreparedDataset, SplitKind,
};
use nlq4rec::eval::{evaluate, metrics_csv, ndcg_hr, target_rank, MetricsReport, METRICS_CSV_HEADER};
use nlq4rec::train::{train, TrainEvent, TrainingData};
use nlq4rec::{Model, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight from the definitions: sort, locate the target, sum discounted gains.
fn brute_force(ranks: &[usize], k: usize) -> (f64, f64) {
    let mut ndcg = 0.0;
    let mut hr = 0.0;
    for &r in ranks {
        // position i (0-based) in a list of length 101 where only the target is relevant
        let list: Vec<bool> = (0..101).map(|i| i == r).collect();
        let dcg: f64 = list
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &rel)| if rel { 1.0 / ((i + 2) as f64).log2() } else { 0.0 })
            .sum();
        ndcg += dcg;
        hr += if list.iter().take(k).any(|&x| x) { 1.0 } else { 0.0 };
    }
    (ndcg / ranks.len() as f64, hr / ranks.len() as f64)
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let len = rng.random_range(1..40);
        let ranks: Vec<usize> = (0..len).map(|_| rng.random_range(0..101)).collect();
        let k = rng.random_range(1..=20);
        let (n, h) = ndcg_hr(&ranks, k).unwrap();
        let (bn, bh) = brute_force(&ranks, k);
        assert!((n - bn).abs() < 1e-12 && h == bh, "{ranks:?} K={k}");
        let (n5, h5) = ndcg_hr(&ranks, 5).unwrap();
        let (n10, h10) = ndcg_hr(&ranks, 10).unwrap();
        assert!(n5 <= n10 && h5 <= h10);
        assert!((0.0..=1.0).contains(&n) && (0.0..=1.0).contains(&h));
    }
}

#[test]
fn perfect_and_hopeless_rankings() {
    assert_eq!(ndcg_hr(&[0; 7], 5).unwrap(), (1.0, 1.0));
    assert_eq!(ndcg_hr(&[10, 55, 100], 10).unwrap(), (0.0, 0.0));
    assert_eq!(target_rank(&[1.0f32, 0.2, 0.3]).unwrap(), 0);
    assert_eq!(target_rank(&[0.1f32, 0.2, 0.3]).unwrap(), 2);
}

/// Small synthetic world: each user mostly likes items from one of two
/// blocks, in a fixed rotating order.
fn synthetic(dir: &std::path::Path) -> PreparedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut text = String::new();
    let items = 130;
    for u in 0..24 {
        let block = u % 2;
        for t in 0..14 {
            let item = if rng.random_bool(0.8) {
                block * 65 + (u * 3 + t * 7) % 65
            } else {
                rng.random_range(0..items)
            };
            let rating = if item / 65 == block { 5 } else { 2 };
            text.push_str(&format!("{u}\t{item}\t{rating}\t{}\n", 1000 + t));
        }
    }
    // make sure every item id exists
    for i in 0..items {
        text.push_str(&format!("999\t{i}\t1\t{}\n", i));
    }
    let src = dir.join("u.data");
    fs::write(&src, text).unwrap();
    prepare(
        &src,
        &dir.join("prepared"),
        &PrepareOptions {
            format: DatasetFormat::Ml100k,
            threshold: 4.0,
            seed: 5,
        },
    )
    .unwrap()
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        n_max: 4,
        lr: 1e-2,
        batch_size: 16,
        epochs: 6,
        patience: 3,
        seed,
        ..Default::default()
    }
}

fn run(data: &PreparedDataset, cfg: &ModelConfig) -> (Vec<nlq4rec::train::EpochRecord>, MetricsReport, Model<f32>) {
    let mut td = TrainingData::new(data, cfg).unwrap();
    let run = train::<f32>(cfg, data.split.num_users(), data.split.num_items(), &mut td, |_| Ok(())).unwrap();
    let test = nlq4rec::train::test_metrics(&run.best, data).unwrap();
    (run.history, test, run.best)
}

#[test]
fn training_is_deterministic_and_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let cfg = tiny_config(4);
    let (h1, m1, _) = run(&data, &cfg);
    let (h2, m2, _) = run(&data, &cfg);
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(metrics_csv(&[("4".into(), &m1)]), metrics_csv(&[("4".into(), &m2)]));

    // patience 1 with a learning rate of zero: validation never improves after epoch 0
    let frozen = ModelConfig {
        lr: 0.0,
        patience: 1,
        epochs: 50,
        ..tiny_config(4)
    };
    let mut td = TrainingData::new(&data, &frozen).unwrap();
    let mut events = 0;
    let r = train::<f32>(&frozen, data.split.num_users(), data.split.num_items(), &mut td, |e| {
        if let TrainEvent::Epoch(_) = e {
            events += 1;
        }
        Ok(())
    })
    .unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.history.len(), 2);
    assert_eq!(events, 2);
    assert_eq!(r.best_epoch, 0);
}

#[test]
fn evaluation_is_read_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    for variant in [
        Variant::Full,
        Variant::NoQuery,
        Variant::NoEncoder,
        Variant::NoPredicate,
    ] {
        let cfg = ModelConfig {
            variant,
            ..tiny_config(1)
        };
        let m: Model<f32> = Model::new(cfg, data.split.num_users(), data.split.num_items()).unwrap();
        let inst: Vec<EvalInstance> = make_eval_instances(&data.split, SplitKind::Test, 4, 100, 5).unwrap();
        let before = m.params().fingerprint();
        let a = evaluate(&m, &inst, &[5, 10]).unwrap();
        let b = evaluate(&m, &inst, &[5, 10]).unwrap();
        assert_eq!(before, m.params().fingerprint());
        assert_eq!(a, b);
        assert!(a.ndcg(5) <= a.ndcg(10) && a.hr(5) <= a.hr(10));
    }
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let m: Model<f32> = Model::new(
        ModelConfig {
            variant: Variant::NoQuery,
            ..tiny_config(2)
        },
        5,
        9,
    )
    .unwrap();
    let path = dir.path().join("best.ckpt");
    save_checkpoint(&path, &m, "abc").unwrap();
    let (back, meta) = load_checkpoint::<f32>(&path, Some("abc")).unwrap();
    assert_eq!(meta.config, *m.config());
    assert_eq!((meta.num_users, meta.num_items), (5, 9));
    for ((_, a), (_, b)) in m.params().iter().zip(back.params().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        let bits = |t: &nlq4rec::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }

    let err = load_checkpoint::<f32>(&path, Some("other")).unwrap_err().to_string();
    assert!(err.contains("abc") && err.contains("other"), "{err}");

    let bytes = encode(&m, "abc");
    let err = decode::<f32>(&bytes[..bytes.len() - 10]).unwrap_err().to_string();
    assert!(err.contains("expected") && err.contains("found"), "{err}");

    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    let err = decode::<f32>(&wrong_version).unwrap_err().to_string();
    assert!(err.contains("version 9"), "{err}");

    assert!(decode::<f32>(b"garbage").is_err());
}

#[test]
fn csv_layout() {
    let r = MetricsReport::from_ranks(SplitKind::Test, &[0, 3, 50, 7], &[5, 10]).unwrap();
    let csv = metrics_csv(&[("1".into(), &r)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("1,test,10,") && lines[2].ends_with(",0.750000,4"));
    let mean = MetricsReport::mean(&[r.clone(), r.clone()]).unwrap();
    assert_eq!(mean, r);
}
