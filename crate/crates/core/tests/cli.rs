use std::fs;
use std::path::{Path, PathBuf};

use selmix::classifier::LinearModel;
use selmix::cli::{evaluation_json, run};
use selmix::data::load_dataset;

const BASE: &str = "metric = mean_recall\ncycles = 3\nsgd_steps = 10\nK = 4\nd = 6\nn1 = 150\nrho = 10\nseed = 5\n";

fn cli(args: &[&Path]) -> i32 {
    let mut all = vec!["selmix".as_ref()];
    all.extend(args.iter().map(|p| p.as_os_str()));
    run(all)
}

fn words(args: &[&str]) -> i32 {
    run(std::iter::once("selmix").chain(args.iter().copied()))
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, config).unwrap();
    let data = dir.path().join("data");
    (dir, cfg, data)
}

fn manifest_counts(data: &Path) -> Vec<u64> {
    let text = fs::read_to_string(data.join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["class_counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .collect()
}

#[test]
fn gen_data_follows_the_imbalance_profile() {
    let (_dir, cfg, data) = setup("K = 10\nn1 = 1500\nrho = 100\n");
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    let counts = manifest_counts(&data);
    assert_eq!(counts[0], 1500);
    assert_eq!(counts[9], 15);
    let train = load_dataset(data.join("train.csv"), Some(10)).unwrap();
    assert_eq!(
        train
            .class_counts()
            .iter()
            .map(|&c| c as u64)
            .collect::<Vec<_>>(),
        counts
    );

    let (_dir, cfg, data) = setup("K = 6\nn1 = 40\nrho = 1\n");
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    assert_eq!(manifest_counts(&data), vec![40; 6]);
}

#[test]
fn zero_learning_rate_leaves_the_model_alone() {
    let (dir, cfg, data) = setup(&format!("{BASE}lr = 0\n"));
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    let out = dir.path().join("out");
    assert_eq!(cli(&["train".as_ref(), &cfg, &data, &out]), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(summary["psi"], first["psi"]);
    assert_eq!(summary["initial"], summary["final"]);
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let (dir, cfg, data) = setup(BASE);
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let uniform = ["--policy", "uniform"];
    for out in [&a, &b] {
        assert_eq!(cli(&["train".as_ref(), &cfg, &data, out]), 0);
        let mut args = vec!["train", cfg.to_str().unwrap(), data.to_str().unwrap()];
        let u = out.join("uniform");
        args.push(u.to_str().unwrap());
        args.extend(uniform);
        assert_eq!(words(&args), 0);
    }
    for file in [
        "history.jsonl",
        "final_model.csv",
        "summary.json",
        "uniform/history.jsonl",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn bad_inputs_are_usage_errors() {
    let (dir, cfg, data) = setup(BASE);
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    let out = dir.path().join("out");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "metric = mean_recall\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(cli(&["train".as_ref(), &bad, &data, &out]), 2);

    let missing = dir.path().join("nope.cfg");
    assert_eq!(cli(&["train".as_ref(), &missing, &data, &out]), 2);
    assert_eq!(
        cli(&["train".as_ref(), &cfg, &dir.path().join("nodata"), &out]),
        2
    );

    let args = [
        "train",
        cfg.to_str().unwrap(),
        data.to_str().unwrap(),
        out.to_str().unwrap(),
    ];
    assert_eq!(words(&[&args[..], &["--policy", "roulette"]].concat()), 2);
    assert_eq!(words(&["simulate-policy", "--generator", "chaos"]), 2);
    assert_eq!(words(&["no-such-command"]), 2);
}

#[test]
fn zero_model_scores_one_over_k() {
    let (dir, cfg, data) = setup(BASE);
    assert_eq!(cli(&["gen-data".as_ref(), &cfg, &data]), 0);
    let model = dir.path().join("zero.csv");
    LinearModel::zeros(6, 4).save(&model).unwrap();
    let val = data.join("val.csv");
    assert_eq!(cli(&["eval".as_ref(), &model, &val]), 0);
    let ds = load_dataset(&val, Some(4)).unwrap();
    let v = evaluation_json(&LinearModel::zeros(6, 4), &ds, None).unwrap();
    assert!((v["mean_recall"].as_f64().unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn simulation_and_checks_run() {
    assert_eq!(
        words(&["simulate-policy", "-k", "3", "-t", "200", "--seeds", "2"]),
        0
    );
    assert_eq!(
        words(&["check-theory", "convergence", "--horizon", "200"]),
        0
    );
}
