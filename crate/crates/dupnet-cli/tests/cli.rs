//! End-to-end checks of the command-line surface: output formats, exit
//! codes, and cross-path consistency.

use std::path::Path;
use std::process::{Command, Output};

fn dupnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dupnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn analyze_prints_reference_totals() {
    let out = dupnet(&["analyze", "tinier-yolo"]);
    assert!(out.status.success());
    let text = stdout_str(&out);
    let overall = text.lines().find(|l| l.starts_with("Overall")).unwrap();
    assert!(overall.contains("107.9"), "{overall}");
    assert!(overall.contains("240.85"), "{overall}");

    for (preset, mflops, kb) in [("dupnet", "62.6", "36.9"), ("dupnet-l", "95.7", "45.4")] {
        let out = dupnet(&["analyze", preset, "--csv"]);
        assert!(out.status.success());
        let text = stdout_str(&out);
        let overall = text.lines().find(|l| l.starts_with("Overall,")).unwrap();
        let fields: Vec<&str> = overall.split(',').collect();
        let got_mflops: f64 = fields[2].parse().unwrap();
        let got_kb: f64 = fields[4].parse().unwrap();
        assert!((got_mflops - mflops.parse::<f64>().unwrap()).abs() < 0.2, "{preset}");
        assert!((got_kb - kb.parse::<f64>().unwrap()).abs() < 0.2, "{preset}");
    }
}

#[test]
fn parse_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[conv]\nfilters=3\n").unwrap();
    let out = dupnet(&["analyze", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no [net] section"));

    let out = dupnet(&["analyze", "not-a-preset"]);
    assert_eq!(out.status.code(), Some(1));

    let out = dupnet(&["analyze"]);
    assert_eq!(out.status.code(), Some(1)); // missing argument is a usage error
}

#[test]
fn synthdata_is_deterministic_and_labels_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = dupnet(&[
            "synthdata",
            d.to_str().unwrap(),
            "--num",
            "6",
            "--seed",
            "3",
            "--min-objects",
            "2",
            "--max-objects",
            "2",
        ]);
        assert!(out.status.success());
    }
    for i in 0..6 {
        let img = format!("img{i:05}.pgm");
        let lbl = format!("img{i:05}.txt");
        assert_eq!(
            std::fs::read(a.join(&img)).unwrap(),
            std::fs::read(b.join(&img)).unwrap(),
            "{img} differs between identical runs"
        );
        let labels = std::fs::read_to_string(a.join(&lbl)).unwrap();
        // requested object count respected, coordinates normalized
        assert_eq!(labels.lines().count(), 2, "{lbl}");
        for line in labels.lines() {
            let fields: Vec<f64> = line
                .split_whitespace()
                .skip(1)
                .map(|f| f.parse().unwrap())
                .collect();
            assert!(fields.iter().all(|&v| (0.0..=1.0).contains(&v)), "{line}");
        }
    }
}

fn train_tiny(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let out = dupnet(&[
        "synthdata",
        data.to_str().unwrap(),
        "--num",
        "8",
        "--seed",
        "1",
    ]);
    assert!(out.status.success());
    let weights = dir.join("w.dupw");
    let out = dupnet(&[
        "train",
        "desk64",
        data.to_str().unwrap(),
        "--iters",
        "10",
        "--seed",
        "2",
        "--out",
        weights.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    // line-oriented `iter, lr, loss` records with finite losses
    let log = stdout_str(&out);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 10);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(", ").collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        assert!(fields[1].parse::<f64>().unwrap() > 0.0);
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }
    (data, weights)
}

#[test]
fn train_smoke_and_detect_paths_agree_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (data, weights) = train_tiny(dir.path());
    let image = data.join("img00000.pgm");
    let reference = dupnet(&[
        "detect",
        "desk64",
        weights.to_str().unwrap(),
        image.to_str().unwrap(),
        "--thresh",
        "0.0001",
        "--ref",
    ]);
    assert!(reference.status.success());
    let packed = dupnet(&[
        "detect",
        "desk64",
        weights.to_str().unwrap(),
        image.to_str().unwrap(),
        "--thresh",
        "0.0001",
        "--packed",
    ]);
    assert!(packed.status.success());
    assert_eq!(reference.stdout, packed.stdout, "kernel paths disagree");
    // untrained-ish net at threshold 1.0 finds nothing
    let none = dupnet(&[
        "detect",
        "desk64",
        weights.to_str().unwrap(),
        image.to_str().unwrap(),
        "--thresh",
        "1.0",
    ]);
    assert!(none.status.success());
    assert!(none.stdout.is_empty());
    // every line is `score cx cy w h`
    for line in stdout_str(&reference).lines() {
        assert_eq!(line.split_whitespace().count(), 5, "{line}");
    }
}

#[test]
fn gradcheck_passes_for_presets() {
    for preset in ["desk64", "dupnet"] {
        let out = dupnet(&["gradcheck", preset]);
        assert!(out.status.success(), "{preset}: {}", stdout_str(&out));
        assert!(stdout_str(&out).contains("conv"));
    }
}

#[test]
fn sensitivity_zero_iters_emits_table3_costs() {
    let out = dupnet(&["sensitivity", "tinier-yolo-h", "--csv"]);
    assert!(out.status.success());
    let text = stdout_str(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "quantized_layers,mflops,weight_kb,detection_rate");
    let expected = [
        ("none", 1338.9, 2637.3),
        ("conv4-8", 422.2, 366.6),
        ("conv2-8", 215.9, 344.8),
        ("conv1-8", 146.0, 344.0),
        ("all", 49.3, 82.4),
    ];
    assert_eq!(lines.len(), 1 + expected.len());
    for (line, (name, mflops, kb)) in lines[1..].iter().zip(expected) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], name, "row order must be preserved");
        assert!((fields[1].parse::<f64>().unwrap() - mflops).abs() < 0.2, "{line}");
        assert!((fields[2].parse::<f64>().unwrap() - kb).abs() < 0.2, "{line}");
        assert!(fields[3].is_empty(), "no rate in zero-iteration mode");
    }
}

#[test]
fn sensitivity_with_training_produces_rates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dupnet(&[
        "synthdata",
        data.to_str().unwrap(),
        "--num",
        "30",
        "--seed",
        "4",
    ]);
    assert!(out.status.success());
    let out = dupnet(&[
        "sensitivity",
        "tinier-yolo-h",
        data.to_str().unwrap(),
        "--iters",
        "5",
        "--csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    for line in text.lines().skip(1) {
        let rate: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&rate), "{line}");
    }
}
