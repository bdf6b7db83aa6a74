//! End-to-end runs of the binary: exit codes, report determinism, config
//! validation, and the data-audit path.

use std::path::Path;
use std::process::{Command, Output};

fn riesz(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riesz"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

#[test]
fn influence_writes_table_and_process() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riesz(
        &["influence", "--scenario", "ate-aipw", "--out", "rep"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(tmp.path().join("rep/report.json")).unwrap();
    assert!(report.contains("\"mean_certificate\""));
    assert!(tmp.path().join("rep/influence.csv").exists());
    assert!(tmp.path().join("rep/dgp.csv").exists());
}

#[test]
fn influence_quantile_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riesz(&["influence", "--scenario", "quantile", "--q", "0.5"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"truth\""));
}

#[test]
fn unknown_scenario_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riesz(&["influence", "--scenario", "no-such"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("bad.toml"),
        "scenario = \"mean\"\nnot_a_key = 1\n",
    )
    .unwrap();
    let out = riesz(&["influence", "--config", "bad.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn missing_dgp_section_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    // quantile scenario without its section or the level flag
    let out = riesz(&["influence", "--scenario", "quantile"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mc_without_seed_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("mc.toml"),
        "scenario = \"mean\"\n[mc]\nreplications = 10\nsample_size = 50\n",
    )
    .unwrap();
    let out = riesz(&["mc", "--config", "mc.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mc_reports_are_byte_identical_across_parallelism_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, parallel) in [("a.toml", true), ("b.toml", false)] {
        std::fs::write(
            tmp.path().join(name),
            format!(
                "scenario = \"ate-aipw\"\nseed = 11\nout = \"{}\"\n[mc]\nreplications = 40\n\
                 sample_size = 300\nparallel = {parallel}\n",
                name.replace(".toml", "")
            ),
        )
        .unwrap();
        let out = riesz(&["mc", "--config", name], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = std::fs::read_to_string(tmp.path().join("a/report.json")).unwrap();
    let b = std::fs::read_to_string(tmp.path().join("b/report.json")).unwrap();
    // the embedded config differs only in its parallel flag and out path;
    // the measured sections must agree byte for byte
    let strip = |s: &str| {
        let v: serde_json::Value = serde_json::from_str(s).unwrap();
        serde_json::to_string(&v["mc"]["scenarios"]).unwrap()
    };
    assert_eq!(strip(&a), strip(&b));

    // rerunning the same config reproduces the full report bit for bit
    let out = riesz(&["mc", "--config", "a.toml"], tmp.path());
    assert!(out.status.success());
    let a2 = std::fs::read_to_string(tmp.path().join("a/report.json")).unwrap();
    assert_eq!(a, a2);
}

#[test]
fn misspecified_weights_bias_the_raw_estimator_only() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("mc.toml"),
        "seed = 5\nout = \"mis\"\n[mc]\nreplications = 300\nsample_size = 2000\n\
         scenarios = [\"ate-ipw\", \"ate-aipw\"]\npropensity_contamination = 0.05\n",
    )
    .unwrap();
    let out = riesz(&["mc", "--config", "mc.toml"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(tmp.path().join("mis/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    let bias = |i: usize| v["mc"]["scenarios"][i]["bias"][0].as_f64().unwrap().abs();
    let (ipw, aipw) = (bias(0), bias(1));
    assert!(
        ipw > 4.0 * aipw,
        "misspecification should bias the raw weighting much more: {ipw} vs {aipw}"
    );
}

#[test]
fn check_verdicts_match_the_theory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riesz(&["check", "--scenario", "ate-ipw"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"locally_robust\": false"), "{text}");
    assert!(text.contains("\"lr_is_eff\": true"), "{text}");

    let out = riesz(&["check", "--scenario", "ate-aipw"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"locally_robust\": true"), "{text}");

    let out = riesz(&["check", "--scenario", "iv-gls"], tmp.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"adaptive_beta\": true"), "{text}");
}

#[test]
fn bias_order_emits_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = riesz(
        &["bias-order", "--scenario", "ate-ipw", "--out", "bo"],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("bo/bias_order.csv")).unwrap();
    assert!(csv.starts_with("eps,abs_delta,series"));
    assert!(csv.contains(",raw"));
    assert!(csv.contains(",robust"));
    let report = std::fs::read_to_string(tmp.path().join("bo/report.json")).unwrap();
    assert!(report.contains("\"raw_in_window\": true"));
    assert!(report.contains("\"robust_in_window\": true"));
}

#[test]
fn bound_orders_the_first_stage_variances() {
    let tmp = tempfile::tempdir().unwrap();
    let grab = |scenario: &str| -> serde_json::Value {
        let out = riesz(&["bound", "--scenario", scenario], tmp.path());
        assert!(out.status.success());
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap()
    };
    let gls = grab("iv-gls");
    let unc = grab("iv-unconditional");
    // variance-weighted first stage gives the tighter first-stage variance
    let gls_gg = gls["bounds"]["sigma_gg_inv"][0][0].as_f64().unwrap();
    let unc_gg = unc["bounds"]["sigma_gg_inv"][0][0].as_f64().unwrap();
    assert!(
        gls_gg <= unc_gg + 1e-12,
        "weighted first stage should not be worse: {gls_gg} vs {unc_gg}"
    );
}

fn write_ate_csv(path: &Path) {
    // balanced draws from a two-cell process with both arms present
    let mut rows = String::from("x,t,y\n");
    let cells = [
        (0.0, 0, -0.5, 14),
        (0.0, 0, 0.5, 14),
        (0.0, 1, 0.8, 6),
        (0.0, 1, 1.2, 6),
        (1.0, 0, 0.3, 5),
        (1.0, 0, 0.7, 5),
        (1.0, 1, 1.8, 15),
        (1.0, 1, 2.2, 15),
    ];
    for (x, t, y, count) in cells {
        for _ in 0..count {
            rows.push_str(&format!("{x},{t},{y}\n"));
        }
    }
    std::fs::write(path, rows).unwrap();
}

#[test]
fn audit_runs_on_ingested_data() {
    let tmp = tempfile::tempdir().unwrap();
    write_ate_csv(&tmp.path().join("obs.csv"));
    std::fs::write(
        tmp.path().join("audit.toml"),
        "scenario = \"ate-aipw\"\nout = \"audited\"\n[data]\npath = \"obs.csv\"\n\
         blocks = [[\"x\"], [\"t\"], [\"y\"]]\n",
    )
    .unwrap();
    let out = riesz(&["audit", "--config", "audit.toml"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(tmp.path().join("audited/report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["oracle"]["pass"], serde_json::Value::Bool(true));
    assert_eq!(
        v["conditions"]["verdicts"]["locally_robust"],
        serde_json::Value::Bool(true)
    );
}

#[test]
fn audit_without_overlap_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    // one covariate cell has no treated rows
    let mut rows = String::from("x,t,y\n");
    for _ in 0..10 {
        rows.push_str("0,0,1.0\n");
    }
    for _ in 0..10 {
        rows.push_str("1,0,1.0\n1,1,2.0\n");
    }
    std::fs::write(tmp.path().join("obs.csv"), rows).unwrap();
    std::fs::write(
        tmp.path().join("audit.toml"),
        "scenario = \"ate-ipw\"\n[data]\npath = \"obs.csv\"\n\
         blocks = [[\"x\"], [\"t\"], [\"y\"]]\n",
    )
    .unwrap();
    let out = riesz(&["audit", "--config", "audit.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
