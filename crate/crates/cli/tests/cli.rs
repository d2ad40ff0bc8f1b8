use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_iclpac"));
    c.env_remove("ICL_PAC_SEED");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn iclpac(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn bounds_closed_form() {
    let sc = scenario("iid-2-T40");
    let out = iclpac(&["bounds", sc.to_str().unwrap(), "--delta", "0.1", "--epsilon", "0.01"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["lemma1"]["k"], 495);
    assert!((v["lemma1"]["confidence_term"].as_f64().unwrap() - 494.2).abs() < 0.05);
    assert_eq!(v["margin"]["k"], 495);

    let out = iclpac(&["bounds", sc.to_str().unwrap(), "--delta", "0.01"]);
    assert_eq!(stdout_json(&out)["lemma1"]["k"], 989);

    let out = iclpac(&["bounds", sc.to_str().unwrap(), "--delta", "1.5"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn check_reports_constants() {
    let out = iclpac(&[
        "check",
        scenario("three-concept-markov").to_str().unwrap(),
        "--kl-samples",
        "4000",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    for row in v["kl_monte_carlo"].as_array().unwrap() {
        let exact = row["exact"].as_f64().unwrap();
        let mc = &row["monte_carlo"];
        let half = (mc["upper"].as_f64().unwrap() - mc["lower"].as_f64().unwrap()) / 2.0;
        // about 4 standard errors
        assert!((mc["mean"].as_f64().unwrap() - exact).abs() < 2.1 * half, "{row}");
    }

    let out = iclpac(&["check", scenario("leaky-lambda0.5").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("4·(1 − c1²)"));
    assert!(
        stdout_json(&out)["report"]["concepts"][0]["constants"]["c1"]
            .as_f64()
            .unwrap()
            < 1.0
    );
}

#[test]
fn malformed_scenarios_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("iid-2-T40")).unwrap();

    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let out = iclpac(&["check", truncated.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    let bad_row = dir.path().join("bad.json");
    std::fs::write(&bad_row, text.replacen("[0.6, 0.2, 0.2]", "[0.6, 0.3, 0.2]", 1)).unwrap();
    let out = iclpac(&["check", bad_row.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("concepts[0].initial"));

    let out = iclpac(&["check", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let out = iclpac(&["bounds"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn run_row_count_and_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("iid-2-T40");
    let a = dir.path().join("a");
    let out = iclpac(&[
        "run",
        "lemma1",
        sc.to_str().unwrap(),
        "--k-grid",
        "1,4",
        "--trials",
        "30",
        "--seed",
        "5",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let csv_a = std::fs::read_to_string(a.join("records_flip0.csv")).unwrap();
    assert_eq!(csv_a.lines().count(), 61);
    assert_eq!(
        csv_a.lines().next().unwrap(),
        "trial,k,flip_count,competitor,log_ratio,task_margin,prompted_margin,pred,true,bayes,loss,seed"
    );
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["campaign"], "lemma1");

    let b = dir.path().join("b");
    let out = bin()
        .env("ICL_PAC_SEED", "5")
        .args([
            "run",
            "lemma1",
            sc.to_str().unwrap(),
            "--k-grid",
            "1,4",
            "--trials",
            "30",
            "--out",
            b.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(csv_a, std::fs::read_to_string(b.join("records_flip0.csv")).unwrap());
}

#[test]
fn run_refuses_infeasible_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("iid-2-T4");
    let out_dir = dir.path().join("r");
    let args = [
        "run",
        "theorem1",
        sc.to_str().unwrap(),
        "--k-grid",
        "2",
        "--trials",
        "10",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    let out = iclpac(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Δ_KL > 8·ln(1/(c1c2))"));
    assert!(!out_dir.exists());

    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&iclpac(&forced)), 0);
    assert!(out_dir.join("records_flip0.csv").exists());
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = iclpac(&[
        "run",
        "regret",
        scenario("iid-2-T40").to_str().unwrap(),
        "--k-grid",
        "0",
        "--trials",
        "5",
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn empirical_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("e");
    let out = iclpac(&[
        "run",
        "regret",
        scenario("iid-2-T40").to_str().unwrap(),
        "--model",
        "empirical",
        "--pretrain-docs",
        "2000",
        "--k-grid",
        "0,5",
        "--trials",
        "50",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["regret"]["model"]["kind"], "empirical");
    assert!(s["regret"]["tv_error"].as_f64().unwrap() > 0.0);
}

#[test]
fn plot_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let out = iclpac(&[
        "run",
        "lemma1",
        scenario("iid-2-T40").to_str().unwrap(),
        "--k-grid",
        "1,5,10",
        "--trials",
        "20",
        "--flip-prob",
        "0,0.5",
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let f0 = runs.join("records_flip0.csv");
    let f5 = runs.join("records_flip0.5.csv");
    let svg = dir.path().join("plot.svg");
    let out = iclpac(&[
        "plot",
        f0.to_str().unwrap(),
        f5.to_str().unwrap(),
        "--x",
        "k",
        "--y",
        "log_ratio",
        "--group-by",
        "flip_prob",
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains("flip_prob=0.5"));

    let out = iclpac(&[
        "plot",
        f0.to_str().unwrap(),
        "--y",
        "nonexistent",
        "--out",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    let empty = dir.path().join("empty.csv");
    std::fs::write(
        &empty,
        "trial,k,flip_count,competitor,log_ratio,task_margin,prompted_margin,pred,true,bayes,loss,seed\n",
    )
    .unwrap();
    let out = iclpac(&["plot", empty.to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    let out = iclpac(&["plot", f0.to_str().unwrap(), "--log-y", "--out", svg.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "log ratios are all negative");
}
