//! End-to-end tests of the command-line interface: exit codes, atomic
//! outputs, config handling and help coverage.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn driu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driu"))
        .args(args)
        .output()
        .unwrap()
}

fn driu_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driu"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn synth_dataset(dir: &Path) -> std::path::PathBuf {
    let ds = dir.join("ds");
    let out = driu(&["synth", "--out", ds.to_str().unwrap(), "--count", "4", "--size", "32"]);
    assert!(out.status.success());
    ds
}

#[test]
fn help_enumerates_every_flag() {
    let top = String::from_utf8(driu(&["--help"]).stdout).unwrap();
    for sub in ["train", "infer", "eval", "synth", "gradcheck"] {
        assert!(top.contains(sub), "top help missing subcommand {}", sub);
    }
    let expect: &[(&str, &[&str])] = &[
        (
            "train",
            &[
                "--data", "--layout", "--task", "--out", "--log", "--config", "--base-lr",
                "--momentum", "--iterations", "--decay-factor", "--decay-interval", "--seed",
                "--width-scale", "--augment", "--fov",
            ],
        ),
        ("infer", &["--weights", "--image", "--task", "--out", "--width-scale"]),
        ("eval", &["--pred-dir", "--data", "--layout", "--task", "--out-prefix", "--fov"]),
        ("synth", &["--seed", "--count", "--size", "--out"]),
        ("gradcheck", &["--seed", "--width-scale", "--inject-fault"]),
    ];
    for (sub, flags) in expect {
        let help = String::from_utf8(driu(&[sub, "--help"]).stdout).unwrap();
        for flag in *flags {
            assert!(help.contains(flag), "{} --help missing {}", sub, flag);
        }
    }
}

#[test]
fn missing_dataset_exits_2_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    let log = dir.path().join("l.csv");
    let out = driu(&[
        "train",
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--task",
        "vessel",
        "--out",
        weights.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!weights.exists());
    assert!(!log.exists());
    assert!(String::from_utf8(out.stderr).unwrap().contains("error"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "iterations = 3\nlearning_rate = 0.1\n").unwrap();
    let out = driu(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--task",
        "vessel",
        "--out",
        dir.path().join("w.bin").to_str().unwrap(),
        "--log",
        dir.path().join("l.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("learning_rate"));
}

#[test]
fn flag_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# desk run\niterations = 3\nseed = 5\naugment = off\n").unwrap();
    let log = dir.path().join("l.csv");
    let out = driu(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--task",
        "vessel",
        "--out",
        dir.path().join("w.bin").to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--iterations",
        "5",
    ]);
    assert!(out.status.success());
    // header + 5 rows: the flag wins over the file's 3
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 6);
}

#[test]
fn infer_size_contract_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path());
    let weights = dir.path().join("w.bin");
    assert!(driu(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--task",
        "vessel",
        "--iterations",
        "3",
        "--out",
        weights.to_str().unwrap(),
        "--log",
        dir.path().join("l.csv").to_str().unwrap(),
    ])
    .status
    .success());

    let image = ds.join("images").join("synth0000.ppm");
    let prob_path = dir.path().join("p.pgm");
    assert!(driu(&[
        "infer",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--task",
        "both",
        "--out",
        prob_path.to_str().unwrap(),
    ])
    .status
    .success());
    for task in ["vessel", "disc"] {
        let p = dir.path().join(format!("p.{}.pgm", task));
        let prob = driu::data::read_probmap(&fs::read(&p).unwrap()).unwrap();
        assert_eq!(prob.shape(), &[1, 32, 32]);
        assert!(prob.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    // architecture mismatch names the first offending tensor
    let out = driu(&[
        "infer",
        "--weights",
        weights.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--task",
        "vessel",
        "--width-scale",
        "16",
        "--out",
        dir.path().join("q.pgm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("shape"), "got: {}", err);
    assert!(!dir.path().join("q.pgm").exists());
}

#[test]
fn eval_outputs_and_missing_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(dir.path());
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();

    // a missing map is a usage error listing the ids
    let out = driu_in(
        dir.path(),
        &[
            "eval",
            "--pred-dir",
            preds.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--task",
            "vessel",
            "--out-prefix",
            "run_",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("synth0002") && err.contains("synth0003"));

    // perfect predictions: copy the gold masks as probability maps
    for s in driu::data::load_dataset(&ds, driu::data::Layout::Generic, driu::net::Task::Vessel)
        .unwrap()
        .test
    {
        let prob = driu::tensor::Tensor::<f32>::from_vec(
            &[1, s.gold.height(), s.gold.width()],
            s.gold
                .foreground()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        fs::write(
            preds.join(format!("{}.pgm", s.id)),
            driu::data::write_probmap(&prob).unwrap(),
        )
        .unwrap();
    }
    let out = driu_in(
        dir.path(),
        &[
            "eval",
            "--pred-dir",
            preds.to_str().unwrap(),
            "--data",
            ds.to_str().unwrap(),
            "--task",
            "vessel",
            "--out-prefix",
            "run_",
        ],
    );
    assert!(out.status.success());
    let pr = fs::read_to_string(dir.path().join("run_pr.csv")).unwrap();
    assert!(pr.starts_with("threshold,tp,fp,fn,precision,recall,f\n"));
    assert_eq!(pr.lines().count(), 256);
    let summary = fs::read_to_string(dir.path().join("run_summary.txt")).unwrap();
    assert!(summary.contains("ods_f = 1.000000"), "got: {}", summary);
    assert!(summary.contains("boundary_median = 0.000000"));
    assert!(dir.path().join("run_boundary.csv").exists());
    // no second annotations → no human-points file
    assert!(!dir.path().join("run_human.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let ok = driu(&["gradcheck", "--seed", "4"]);
    assert!(ok.status.success());
    let stdout = String::from_utf8(ok.stdout).unwrap();
    for op in ["conv2d", "relu", "maxpool2x2", "bilinear_resize", "concat_channels", "balanced_bce", "end_to_end"] {
        assert!(stdout.contains(op), "report missing {}", op);
    }
    let again = driu(&["gradcheck", "--seed", "4"]);
    assert_eq!(stdout, String::from_utf8(again.stdout).unwrap());

    let bad = driu(&["gradcheck", "--seed", "4", "--inject-fault", "maxpool2x2"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stderr)
        .unwrap()
        .contains("maxpool2x2"));
}

#[test]
fn synth_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(driu(&["synth", "--out", out.to_str().unwrap(), "--count", "2", "--size", "32", "--seed", "9"])
            .status
            .success());
    }
    for rel in ["split.txt", "images/synth0000.ppm", "gt_vessel/synth0001.pgm", "fov/synth0000.pgm"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{} differs", rel);
    }
}
