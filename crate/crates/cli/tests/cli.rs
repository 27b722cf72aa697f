use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nlq4rec(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlq4rec"))
        .args(args)
        .env("NLQ4REC_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

/// 20 users split between two item blocks, ratings 5 inside the block and 2 outside.
fn raw_dataset(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for u in 0..20usize {
        let block = u % 2;
        for t in 0..12usize {
            let item = if (u + t) % 5 == 0 {
                (u * 11 + t) % 60
            } else {
                block * 30 + (u * 3 + t * 7) % 30
            };
            let rating = if item / 30 == block { 5 } else { 2 };
            text.push_str(&format!("{u}\t{item}\t{rating}\t{}\n", 500 + t));
        }
    }
    for i in 0..150 {
        text.push_str(&format!("99\t{i}\t1\t{i}\n"));
    }
    let path = dir.join("u.data");
    fs::write(&path, text).unwrap();
    path
}

fn prepared(root: &Path) -> PathBuf {
    let raw = raw_dataset(root);
    let out = root.join("prepared");
    ok(&nlq4rec(
        &[
            "prepare",
            "--dataset",
            "ml100k",
            "--input",
            raw.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        root,
    ));
    out
}

const TINY: [&str; 14] = [
    "--d",
    "8",
    "--heads",
    "2",
    "--layers",
    "1",
    "--n-max",
    "4",
    "--lr",
    "0.01",
    "--batch-size",
    "16",
    "--epochs",
    "3",
];

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nlq4rec(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(nlq4rec(&["train", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(
        nlq4rec(&["sweep", "--param", "z", "--values", "1"], dir.path())
            .status
            .code(),
        Some(2)
    );
    let help = nlq4rec(&["--help"], dir.path());
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("gradcheck"));
}

#[test]
fn failed_runs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = nlq4rec(&["train", "--data", missing.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing"));
    let data = prepared(dir.path());
    let out = nlq4rec(
        &["train", "--data", data.to_str().unwrap(), "--d", "10", "--heads", "4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        nlq4rec(
            &["ablate", "--data", data.to_str().unwrap(), "--variant", "full"],
            dir.path()
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn train_evaluate_and_reproduce_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = prepared(root);
    let prepare_again = root.join("again");
    let raw = root.join("u.data");
    ok(&nlq4rec(
        &[
            "prepare",
            "--dataset",
            "ml100k",
            "--input",
            raw.to_str().unwrap(),
            "--out",
            prepare_again.to_str().unwrap(),
        ],
        root,
    ));
    for f in [
        "interactions.tsv",
        "split.tsv",
        "users.map",
        "items.map",
        "manifest.txt",
    ] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(prepare_again.join(f)).unwrap(),
            "{f}"
        );
    }

    // no --out: the run lands under the output root
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--seed", "1"];
    args.extend(TINY);
    ok(&nlq4rec(&args, root));
    let run = root.join("full-d8-l1-n4-lp1e-5");
    for f in [
        "config.txt",
        "metrics.csv",
        "metrics.txt",
        "seed-1/history.tsv",
        "seed-1/best.ckpt",
        "seed-1/run.txt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("seed-1/history.tsv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("seed,split,K,ndcg,hr,n_instances\n"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("1,test,")).count(), 2);

    // the echoed config alone reproduces the metrics exactly
    let replay = root.join("replay");
    ok(&nlq4rec(
        &[
            "train",
            "--config",
            run.join("config.txt").to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ],
        root,
    ));
    let seed_rows = |p: &Path| fs::read_to_string(p.join("seed-1/metrics.csv")).unwrap();
    assert_eq!(seed_rows(&run), seed_rows(&replay));
    assert_eq!(
        fs::read_to_string(run.join("seed-1/history.tsv")).unwrap(),
        fs::read_to_string(replay.join("seed-1/history.tsv")).unwrap()
    );

    // evaluate the checkpoint: same test rows as training reported
    let ckpt = run.join("seed-1/best.ckpt");
    let table = ok(&nlq4rec(
        &[
            "evaluate",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        root,
    ));
    assert!(table.contains("test"));
    let eval = fs::read_to_string(run.join("seed-1/eval-metrics.csv")).unwrap();
    let test_part = |csv: &str| -> Vec<String> {
        csv.lines()
            .filter(|l| l.contains(",test,"))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(test_part(&eval), test_part(&seed_rows(&run)));

    // reuse skips training and reports the same numbers
    let mut again = args.clone();
    again.push("--reuse");
    let before = fs::metadata(run.join("seed-1/best.ckpt")).unwrap().modified().unwrap();
    ok(&nlq4rec(&again, root));
    assert_eq!(
        fs::metadata(run.join("seed-1/best.ckpt")).unwrap().modified().unwrap(),
        before
    );
    assert_eq!(seed_rows(&run), seed_rows(&replay));

    // a checkpoint from another dataset is refused
    let other = root.join("other");
    ok(&nlq4rec(
        &[
            "prepare",
            "--dataset",
            "ml100k",
            "--input",
            raw.to_str().unwrap(),
            "--out",
            other.to_str().unwrap(),
            "--seed",
            "9",
        ],
        root,
    ));
    let out = nlq4rec(
        &[
            "evaluate",
            "--data",
            other.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        root,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn sweep_and_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = prepared(root);
    let out = root.join("sweep");
    let mut args = vec![
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--param",
        "n",
        "--values",
        "2,3",
        "--seed",
        "1,2",
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
    ];
    args.extend(&TINY[..12]);
    ok(&nlq4rec(&args, root));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,seed,split,K,ndcg,hr,n_instances");
    for value in ["2", "3"] {
        for seed in ["1", "2", "mean"] {
            let prefix = format!("n,{value},{seed},test,10,");
            assert_eq!(lines.iter().filter(|l| l.starts_with(&prefix)).count(), 1, "{prefix}");
        }
    }
    assert!(fs::read_to_string(out.join("n-3/seed-2/config.txt"))
        .unwrap()
        .contains("n_max = 3"));

    let mut args = vec![
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--variant",
        "q",
        "--seed",
        "3",
        "--epochs",
        "1",
    ];
    args.extend(&TINY[..12]);
    ok(&nlq4rec(&args, root));
    let cfg = fs::read_to_string(root.join("q-d8-l1-n4-lp1e-5/config.txt")).unwrap();
    assert!(cfg.contains("variant = q"));
}

#[test]
fn gradcheck_passes_on_fresh_models() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&nlq4rec(&["gradcheck"], dir.path()));
    for v in ["full", "q", "e", "p"] {
        assert!(stdout.lines().any(|l| l.starts_with(v)), "{stdout}");
    }
}
