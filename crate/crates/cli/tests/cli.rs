//! End-to-end tests of the binary: every subcommand, exit codes, and the
//! on-disk artifacts they promise.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddsmooth"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout_of(out),
        stderr_of(out)
    );
}

fn code_of(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn full_pipeline_through_grid_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = dir.join("data");
    let models = dir.join("models");

    let out = run(&[
        "gen-data",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "60",
        "--group-size",
        "5",
        "--seed",
        "7",
    ]);
    assert_success(&out, "gen-data");
    assert!(data.join("meta.json").is_file());

    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        models.to_str().unwrap(),
        "--epochs",
        "1",
        "--denoiser-epochs",
        "1",
        "--min-val-accuracy",
        "0.0",
        "--seed",
        "3",
    ]);
    assert_success(&out, "train");
    assert!(models.join("meta.json").is_file());
    assert!(models.join("weights.bin").is_file());

    // Zero-budget attack saves images identical to the inputs.
    let atk0 = dir.join("atk0");
    let out = run(&[
        "attack",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--method",
        "pgd",
        "--budget",
        "0",
        "--count",
        "2",
        "--out",
        atk0.to_str().unwrap(),
    ]);
    assert_success(&out, "attack --budget 0");
    for i in 0..2 {
        let clean = std::fs::read(atk0.join(format!("clean_{i:03}.png"))).unwrap();
        let adv = std::fs::read(atk0.join(format!("adv_{i:03}.png"))).unwrap();
        assert_eq!(clean, adv, "zero budget must leave image {i} untouched");
    }

    // A real attack perturbs the files.
    let atk = dir.join("atk");
    let out = run(&[
        "attack",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--method",
        "pgd",
        "--iterations",
        "3",
        "--count",
        "2",
        "--out",
        atk.to_str().unwrap(),
    ]);
    assert_success(&out, "attack");
    let clean = std::fs::read(atk.join("clean_000.png")).unwrap();
    let adv = std::fs::read(atk.join("adv_000.png")).unwrap();
    assert_ne!(clean, adv, "attack should change the saved image");

    let out = run(&[
        "defend-eval",
        "--models",
        models.to_str().unwrap(),
        "--images",
        atk.to_str().unwrap(),
        "--mode",
        "none",
    ]);
    assert_success(&out, "defend-eval");
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(report["n_images"], 2);
    assert!(report["accuracy"].is_number());

    let cfg_path = dir.join("grid.json");
    let out_dir = dir.join("out");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{
              "dataset": {{"n": 60, "resolution": 32, "num_classes": 4, "group_size": 5, "seed": 7}},
              "models_dir": {:?},
              "attacks": [
                {{"method": "none"}},
                {{"method": "pgd", "budget": 0.03137254901960784, "iterations": 2}}
              ],
              "defenses": [
                {{"mode": "none"}},
                {{"mode": "denoise", "level": {{"kind": "low"}}}}
              ],
              "tasks": ["classification"],
              "eval_size": 3,
              "seeds": {{"attack": 5, "defense": 6}}
            }}"#,
            models.to_str().unwrap()
        ),
    )
    .unwrap();

    let out = run(&[
        "grid",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "grid");
    assert!(out_dir.join("results.jsonl").is_file());
    assert!(out_dir.join("report.md").is_file());
    assert!(out_dir.join("report.tex").is_file());
    assert!(out_dir.join("report.csv").is_file());

    // Rerunning is a no-op on the store.
    let before = std::fs::read(out_dir.join("results.jsonl")).unwrap();
    let out = run(&[
        "grid",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "grid rerun");
    let after = std::fs::read(out_dir.join("results.jsonl")).unwrap();
    assert_eq!(before, after, "completed grid must not be recomputed");

    let out = run(&[
        "report",
        "--store",
        out_dir.join("results.jsonl").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_success(&out, "report");
    assert!(stdout_of(&out).starts_with("fingerprint,attack,defense"));

    let demo = dir.join("demo");
    let out = run(&[
        "demo",
        "--models",
        models.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--count",
        "2",
        "--out",
        demo.to_str().unwrap(),
    ]);
    assert_success(&out, "demo");
    assert!(demo.join("demo_000_clean.png").is_file());
    assert!(demo.join("demo_001_denoised_high.png").is_file());
    assert!(demo.join("predictions.json").is_file());

    // The tiny grid lacks the claim cells: check reports the missing cell.
    let out = run(&[
        "check",
        "--store",
        out_dir.join("results.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code_of(&out), 1, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("missing grid cell"));
}

fn claim_store_line(
    method: &str,
    p: f64,
    level: &str,
    defense_mode: &str,
    defense_level: &str,
    metric: &str,
    value: f64,
) -> String {
    let attack_level = if level == "none" {
        r#"{"kind":"none"}"#.to_string()
    } else {
        format!(r#"{{"kind":"{level}"}}"#)
    };
    let defense = if defense_mode == "none" {
        r#"{"mode":"none","level":{"kind":"none"},"samples":1}"#.to_string()
    } else {
        format!(r#"{{"mode":"denoise","level":{{"kind":"{defense_level}"}},"samples":1}}"#)
    };
    format!(
        r#"{{"fingerprint":"{method}-{p}-{level}-{defense_mode}-{defense_level}-{metric}","attack":{{"method":"{method}","noise_level":{attack_level},"p_diffusion":{p:?}}},"defense":{defense},"task":"classification","metric":"{metric}","value":{value},"n_images":16,"wall_time_s":0.1,"timestamp":"2026-01-01T00:00:00Z"}}"#
    )
}

fn write_claim_store(path: &Path, high_clean_acc: f64) {
    let lines = [
        claim_store_line("none", 0.0, "none", "none", "", "accuracy", 0.94),
        claim_store_line("none", 0.0, "none", "denoise", "low", "accuracy", 0.92),
        claim_store_line(
            "none",
            0.0,
            "none",
            "denoise",
            "high",
            "accuracy",
            high_clean_acc,
        ),
        claim_store_line("pgd", 0.0, "none", "none", "", "accuracy", 0.05),
        claim_store_line("pgd", 0.0, "none", "denoise", "high", "accuracy", 0.60),
        claim_store_line("pgd", 1.0, "low", "denoise", "low", "accuracy", 0.10),
        claim_store_line("pgd", 1.0, "high", "none", "", "accuracy", 0.90),
        claim_store_line("pgd", 0.0, "none", "none", "", "cls_cos_sim", 0.15),
        claim_store_line("none", 0.0, "none", "denoise", "high", "cls_cos_sim", 0.55),
        claim_store_line("none", 0.0, "none", "denoise", "low", "cls_cos_sim", 0.92),
    ];
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn check_passes_and_fails_by_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("results.jsonl");

    write_claim_store(&store, 0.80);
    let out = run(&["check", "--store", store.to_str().unwrap()]);
    assert_success(&out, "check on passing store");
    let text = stdout_of(&out);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS ")).count(),
        7,
        "{text}"
    );

    // A high-noise defense that beats the undefended pipeline contradicts
    // the utility-cost claim.
    write_claim_store(&store, 0.96);
    let out = run(&["check", "--store", store.to_str().unwrap()]);
    assert_eq!(code_of(&out), 1);
    assert!(stdout_of(&out).contains("FAIL high-noise-utility-cost"));
}

#[test]
fn invalid_usage_exits_one_with_usage_text() {
    let out = run(&["report", "--bogus-flag"]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).to_lowercase().contains("usage"));

    let out = run(&[
        "report",
        "--store",
        "/nonexistent/results.jsonl",
        "--format",
        "pdf",
    ]);
    assert_eq!(code_of(&out), 1, "stderr: {}", stderr_of(&out));

    let out = bin()
        .args(["check", "--store", "/nonexistent/results.jsonl"])
        .env("DDSMOOTH_DEVICE", "gpu")
        .output()
        .unwrap();
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("DDSMOOTH_DEVICE"));

    let out = run(&["--help"]);
    assert_eq!(code_of(&out), 0);
    assert!(stdout_of(&out).contains("gen-data"));
}

#[test]
fn grid_requires_an_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let models = tmp.path().join("models");
    std::fs::create_dir_all(&models).unwrap();
    std::fs::write(models.join("meta.json"), "{}").unwrap();
    let cfg_path = tmp.path().join("grid.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{"models_dir": {:?}, "attacks": [{{"method": "none"}}],
               "defenses": [{{"mode": "none"}}], "tasks": ["classification"],
               "seeds": {{"attack": 1, "defense": 2}}}}"#,
            models.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = run(&["grid", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(code_of(&out), 1);
    assert!(stderr_of(&out).contains("output"));
}
