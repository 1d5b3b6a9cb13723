// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use headprobe::activation_store::{ActivationSet, TapKind};
use headprobe::cli::{main_with, RunManifest, Settings};
use headprobe::fixtures::{label_table_for, toy_reviews};
use headprobe::report::read_comparisons;

struct Env {
    dir: tempfile::TempDir,
}

const SMALL_MODEL: &str = "[model]\nn_layers = 3\nn_heads = 2\nmodel_dim = 8\nmlp_hidden_dim = 16\nmax_context = 320\n";

impl Env {
    fn new(n_reviews: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let table = label_table_for(&toy_reviews(n_reviews, 3), 3).unwrap();
        table.write_to_path(&dir.path().join("labels.jsonl")).unwrap();
        std::fs::write(dir.path().join("small.toml"), SMALL_MODEL).unwrap();
        Env { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    /// Runs in-process; returns exit code, run directory (first stdout line),
    /// and the full stdout and stderr.
    fn run(&self, args: &[&str]) -> (i32, PathBuf, String, String) {
        let mut argv = vec!["headprobe".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(argv, &mut out, &mut err);
        let out = String::from_utf8(out).unwrap();
        let run_dir = PathBuf::from(out.lines().next().unwrap_or_default());
        (code, run_dir, out, String::from_utf8(err).unwrap())
    }

    fn ok(&self, args: &[&str]) -> PathBuf {
        let (code, dir, out, err) = self.run(args);
        assert_eq!(code, 0, "{args:?}\nstdout:\n{out}\nstderr:\n{err}");
        dir
    }
}

fn file_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

fn assert_same_tree(a: &Path, b: &Path) {
    assert_eq!(file_names(a), file_names(b));
    for name in file_names(a) {
        assert!(
            std::fs::read(a.join(&name)).unwrap() == std::fs::read(b.join(&name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn builtin_extraction_echoes_shapes() {
    let env = Env::new(10);
    let dir = env.ok(&["--out-root", &env.p("out"), "extract", "--labels", &env.p("labels.jsonl")]);
    for tap in TapKind::ALL {
        let set = ActivationSet::read_from_path(&dir.join(format!("activations_{tap}.hprb"))).unwrap();
        assert_eq!((set.n_samples(), set.n_layers()), (10, 6));
        assert_eq!(set.sample_ids()[0], "review-000000");
    }
    let head = ActivationSet::read_from_path(&dir.join("activations_head.hprb")).unwrap();
    assert_eq!((head.n_heads(), head.dim()), (8, 16));
    assert!(dir.join("manifest.json").is_file());
}

#[test]
fn tap_selection_and_repeat_determinism() {
    let env = Env::new(12);
    let args = |root: &str| {
        vec![
            "--config".to_string(),
            env.p("small.toml"),
            "--out-root".into(),
            env.p(root),
            "extract".into(),
            "--labels".into(),
            env.p("labels.jsonl"),
            "--taps".into(),
            "post_attn,post_mlp".into(),
        ]
    };
    let a = env.ok(&args("a").iter().map(String::as_str).collect::<Vec<_>>());
    let b = env.ok(&args("b").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        file_names(&a),
        ["activations_post_attn.hprb", "activations_post_mlp.hprb", "extraction.json", "manifest.json"]
    );
    assert_eq!(a.file_name(), b.file_name());
    assert_same_tree(&a, &b);
}

#[test]
fn probe_filters_constructs() {
    let env = Env::new(40);
    let ex = env.ok(&[
        "--config",
        &env.p("small.toml"),
        "--out-root",
        &env.p("out"),
        "extract",
        "--labels",
        &env.p("labels.jsonl"),
        "--taps",
        "head",
    ]);
    let acts = ex.join("activations_head.hprb").display().to_string();
    let one = env.ok(&[
        "--out-root",
        &env.p("out"),
        "probe",
        "--activations",
        &acts,
        "--labels",
        &env.p("labels.jsonl"),
        "--construct",
        "trustworthiness",
    ]);
    let sweeps: Vec<String> = file_names(&one).into_iter().filter(|n| n.starts_with("sweep_")).collect();
    assert_eq!(sweeps, ["sweep_trustworthiness.csv", "sweep_trustworthiness.json"]);

    let all = env.ok(&[
        "--out-root",
        &env.p("out"),
        "probe",
        "--activations",
        &acts,
        "--labels",
        &env.p("labels.jsonl"),
        "--all-constructs",
    ]);
    let csvs = file_names(&all).into_iter().filter(|n| n.starts_with("sweep_") && n.ends_with(".csv")).count();
    assert_eq!(csvs, 32);
    let best = std::fs::read_to_string(all.join("best_cells.csv")).unwrap();
    assert_eq!(best.lines().count(), 33);
}

#[test]
fn finetune_probe_report_pipeline_and_replay() {
    let env = Env::new(40);
    let labels = env.p("labels.jsonl");
    let cfg = env.p("small.toml");
    let root = env.p("out");
    let common = ["--config", cfg.as_str(), "--out-root", root.as_str()];
    fn with<'a>(common: &[&'a str], rest: &[&'a str]) -> Vec<&'a str> {
        common.iter().chain(rest).copied().collect()
    }

    let ft = env.ok(&with(&common, &["finetune", "--labels", &labels, "--construct", "trustworthiness", "--epochs", "2", "--rank", "2"]));
    let adapters = ft.join("adapters.hprm").display().to_string();
    let base_ex = env.ok(&with(&common, &["extract", "--labels", &labels, "--taps", "post_mlp"]));
    let ft_ex = env.ok(&with(&common, &["extract", "--labels", &labels, "--taps", "post_mlp", "--adapters", &adapters]));
    assert_ne!(base_ex, ft_ex);
    let probe = |ex: &Path| {
        let acts = ex.join("activations_post_mlp.hprb").display().to_string();
        env.ok(&with(&common, &["probe", "--activations", &acts, "--labels", &labels, "--construct", "trustworthiness"]))
    };
    let (pb, pf) = (probe(&base_ex), probe(&ft_ex));
    let report = env.ok(&with(&common, &[
        "report",
        "--compare",
        &pb.display().to_string(),
        &pf.display().to_string(),
        "--labels",
        &labels,
        "--construct",
        "trustworthiness",
        "--adapters",
        &adapters,
    ]));
    let names = file_names(&report);
    for f in ["comparison.json-lines", "layer_curves.csv", "generation_eval.csv", "generation_table.md", "manifest.json"] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
    }
    let cmp = read_comparisons(&std::fs::read_to_string(report.join("comparison.json-lines")).unwrap()).unwrap();
    assert_eq!(cmp.len(), 1);
    assert_eq!(cmp[0].target, "trustworthiness");
    assert_eq!(cmp[0].base_curve.len(), 3);
    assert!((-1.0..=1.0).contains(&cmp[0].rank_correlation));
    let table = std::fs::read_to_string(report.join("generation_table.md")).unwrap();
    assert!(table.contains("| base |") && table.contains("| fine_tuned |"));

    // Every stage replays byte-for-byte, with a different thread count.
    for (dir, workers) in [(&ft, "3"), (&base_ex, "2"), (&pb, "3"), (&report, "2")] {
        let manifest = dir.join("manifest.json").display().to_string();
        let again = env.ok(&["--workers", workers, "--out-root", &env.p("replay"), "replay", &manifest]);
        assert_eq!(again.file_name(), dir.file_name());
        assert_same_tree(dir, &again);
    }
}

#[test]
fn probe_outputs_ignore_worker_count() {
    let env = Env::new(40);
    let ex = env.ok(&[
        "--config",
        &env.p("small.toml"),
        "--out-root",
        &env.p("out"),
        "extract",
        "--labels",
        &env.p("labels.jsonl"),
        "--taps",
        "head",
    ]);
    let acts = ex.join("activations_head.hprb").display().to_string();
    let run = |workers: &str, root: &str| {
        env.ok(&[
            "--workers",
            workers,
            "--out-root",
            &env.p(root),
            "probe",
            "--activations",
            &acts,
            "--labels",
            &env.p("labels.jsonl"),
            "--construct",
            "trustworthiness",
            "--construct",
            "helpfulness",
            "--kind",
            "mlp",
            "--max-iter",
            "20",
        ])
    };
    assert_same_tree(&run("1", "w1"), &run("3", "w3"));
}

#[test]
fn flags_beat_config_and_config_beats_defaults() {
    let env = Env::new(12);
    std::fs::write(env.path("seeded.toml"), format!("seed = 7\n{SMALL_MODEL}\n[extract]\ntaps = [\"post_mlp\"]\n")).unwrap();
    let from_config = env.ok(&["--config", &env.p("seeded.toml"), "--out-root", &env.p("o"), "extract", "--labels", &env.p("labels.jsonl")]);
    let m = RunManifest::read(&from_config.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 7);
    match &m.settings {
        Settings::Extract(s) => assert_eq!(s.taps, [TapKind::PostMlpResidual]),
        other => panic!("{other:?}"),
    }
    let from_flags = env.ok(&[
        "--seed",
        "9",
        "--config",
        &env.p("seeded.toml"),
        "--out-root",
        &env.p("o"),
        "extract",
        "--labels",
        &env.p("labels.jsonl"),
        "--taps",
        "head",
    ]);
    let m = RunManifest::read(&from_flags.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 9);
    match &m.settings {
        Settings::Extract(s) => assert_eq!(s.taps, [TapKind::HeadPreProjection]),
        other => panic!("{other:?}"),
    }
    std::fs::write(env.path("typo.toml"), "[extract]\ntapz = [\"head\"]\n").unwrap();
    let (code, _, _, err) = env.run(&["--config", &env.p("typo.toml"), "extract", "--labels", &env.p("labels.jsonl")]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn seed_comes_from_environment_when_not_given() {
    let env = Env::new(12);
    let run = |seed_env: Option<&str>| {
        let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_headprobe"));
        cmd.args(["--config", &env.p("small.toml"), "--out-root", &env.p("o"), "extract", "--labels", &env.p("labels.jsonl"), "--taps", "post_mlp"]);
        cmd.env_remove("HEADPROBE_SEED");
        if let Some(s) = seed_env {
            cmd.env("HEADPROBE_SEED", s);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().lines().next().unwrap());
        RunManifest::read(&dir.join("manifest.json")).unwrap().seed
    };
    assert_eq!(run(None), 42);
    assert_eq!(run(Some("1234")), 1234);
}

#[test]
fn exit_codes() {
    let env = Env::new(12);
    let (code, _, out, _) = env.run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("selftest"));
    assert_eq!(env.run(&["probe", "--labels", &env.p("labels.jsonl")]).0, 1);
    assert_eq!(env.run(&["nonsense"]).0, 1);
    assert_eq!(env.run(&["--workers", "0", "--out-root", &env.p("o"), "selftest", "--seeds", "1"]).0, 1);

    std::fs::write(env.path("broken.hprb"), b"HPRBnot really").unwrap();
    let (code, _, _, err) = env.run(&[
        "--out-root",
        &env.p("o"),
        "probe",
        "--activations",
        &env.p("broken.hprb"),
        "--labels",
        &env.p("labels.jsonl"),
        "--construct",
        "trustworthiness",
    ]);
    assert_eq!(code, 2, "{err}");
    let (code, _, _, err) = env.run(&["--out-root", &env.p("o"), "diff", "--activations", &env.p("missing.hprb"), "--labels", &env.p("labels.jsonl"), "--construct", "trust"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn replay_refuses_changed_inputs() {
    let env = Env::new(12);
    let dir = env.ok(&["--config", &env.p("small.toml"), "--out-root", &env.p("o"), "extract", "--labels", &env.p("labels.jsonl"), "--taps", "post_mlp"]);
    let table = label_table_for(&toy_reviews(12, 4), 4).unwrap();
    table.write_to_path(&env.path("labels.jsonl")).unwrap();
    let (code, _, _, err) = env.run(&["--out-root", &env.p("r"), "replay", &dir.join("manifest.json").display().to_string()]);
    assert_ne!(code, 0);
    assert!(err.contains("no longer matches"), "{err}");
}

#[test]
fn selftest_reports_each_check() {
    let env = Env::new(4);
    let (code, dir, out, _) = env.run(&["--out-root", &env.p("o"), "selftest", "--seeds", "3"]);
    assert!(out.contains("PASS diff_map localizes planted cell: 3/3"), "{out}");
    assert!(out.contains("probe sweep localizes planted cell"));
    let rows = std::fs::read_to_string(dir.join("selftest.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert_eq!(code == 0, out.matches("FAIL").count() == 0);
}
