use std::path::Path;
use std::process::{Command, Output};

use paconv::geometry::RelationMode;
use paconv::paconv::serial::layer_to_json;
use paconv::paconv::{AggMode, NormMode, PAConvLayer, ScoreNet, WeightBank};
use serde_json::Value;

fn paconv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paconv"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn default_config() -> String {
    format!("{}/../../configs/default.toml", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn equivalence_default_passes_within_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let o = paconv(dir.path(), &["equivalence"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("equivalence.json"));
    assert_eq!(r["instances"].as_array().unwrap().len(), 50);
    assert!(r["max_forward_diff_single"].as_f64().unwrap() < 1e-6);
    assert!(r["max_forward_diff_double"].as_f64().unwrap() < 1e-10);
}

#[test]
fn equivalence_fault_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = paconv(dir.path(), &["equivalence", "--inject-fault", "--instances", "6"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeds"));
    assert_eq!(code(&paconv(dir.path(), &["equivalence", "--instances", "0"])), 2);
    assert_eq!(code(&paconv(dir.path(), &["no-such-command"])), 2);
}

#[test]
fn flops_closed_forms_match_counters() {
    let dir = tempfile::tempdir().unwrap();
    let o = paconv(
        dir.path(),
        &["flops", "--verify", "--n", "24", "--k", "5", "--m", "6", "--c-in", "4", "--c-out", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("flops.json"));
    assert!(r["verified"].as_array().unwrap().iter().all(|v| v["matches"] == true));
}

#[test]
fn flops_table_trends() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&paconv(dir.path(), &["flops", "--m-sweep", "2,16"])), 0);
    let r = json(&dir.path().join("flops.json"));
    let sweep = r["m_sweep"].as_array().unwrap();
    let f = |i: usize, key: &str| sweep[i][key].as_u64().unwrap();
    assert!(f(1, "fused_flops") > f(0, "fused_flops"));
    assert!(f(1, "naive_flops") > f(0, "naive_flops"));
    // k·C_in = 2048 > M = 16 at the default dims
    assert!(r["fused"]["peak_elements"].as_u64() < r["naive"]["peak_elements"].as_u64());
    let csv = std::fs::read_to_string(dir.path().join("flops.csv")).unwrap();
    assert!(csv.starts_with("m,naive_flops,fused_flops,naive_peak_elements,fused_peak_elements\n"));
}

#[test]
fn gradcheck_double_passes_and_single_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = paconv(dir.path(), &["gradcheck", "--agg", "max,avg", "--norm", "softmax"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("gradcheck.json"));
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-6);
    assert_eq!(r["cases"].as_array().unwrap().len(), 4);
    let o = paconv(dir.path(), &["gradcheck", "--precision", "single", "--agg", "sum", "--norm", "none"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn corr_study_reaches_target() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&paconv(dir.path(), &["corr-study", "--steps", "300"])), 0);
    let r = json(&dir.path().join("corr_study.json"));
    assert!(r["last"]["mean_abs_r"].as_f64().unwrap() < 0.05);
    assert!(r["initial"]["mean_abs_r"].as_f64().unwrap() > r["last"]["mean_abs_r"].as_f64().unwrap());
}

const SMALL_TRAIN: [&str; 7] = ["train", "--epochs", "3", "--n-per-class", "2", "--n-points", "16"];

#[test]
fn train_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&paconv(a.path(), &SMALL_TRAIN)), 0);
    assert_eq!(code(&paconv(b.path(), &SMALL_TRAIN)), 0);
    for f in ["history.csv", "model.json", "train.json"] {
        let read = |d: &Path| std::fs::read(d.join(f)).unwrap();
        if f == "train.json" {
            // embeds the output path
            let strip = |d: &Path| {
                let mut v = json(&d.join(f));
                v["model"] = Value::Null;
                v
            };
            assert_eq!(strip(a.path()), strip(b.path()));
        } else {
            assert_eq!(read(a.path()), read(b.path()), "{f}");
        }
    }
    let csv = std::fs::read_to_string(a.path().join("history.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,acc,l_corr,mean_pearson\n"));
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn train_require_acc_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL_TRAIN.to_vec();
    args.extend(["--require-acc", "1.01"]);
    assert_eq!(code(&paconv(dir.path(), &args)), 1);
}

#[test]
fn robustness_permutation_delta_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&paconv(dir.path(), &SMALL_TRAIN)), 0);
    let model = dir.path().join("model.json");
    let o = paconv(
        dir.path(),
        &["robustness", "--model", model.to_str().unwrap(), "--transform", "permute"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("robustness.json"));
    assert_eq!(r["rows"][0]["delta"].as_f64(), Some(0.0));
}

fn zero_layer(m: usize) -> PAConvLayer<f64> {
    let bank = WeightBank::zeros(m, 2, 2).unwrap();
    let net = ScoreNet::zeros(7, &[16, 16, 16], m, NormMode::Softmax).unwrap();
    PAConvLayer::new(bank, net, AggMode::Max, RelationMode::Full7).unwrap()
}

#[test]
fn scorefield_of_zero_scorenet_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("layer.json");
    std::fs::write(&params, layer_to_json(&zero_layer(5))).unwrap();
    let o = paconv(
        dir.path(),
        &["scorefield", "--params", params.to_str().unwrap(), "--resolution", "6", "--plane", "xz"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("scorefield_xz.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,y,s_1,s_2,s_3,s_4,s_5"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 36);
    for row in rows {
        for s in row.split(',').skip(2) {
            assert_eq!(s.parse::<f64>().unwrap(), 0.2);
        }
    }
}

#[test]
fn scorefield_malformed_params_report_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("bad.json");
    let text = layer_to_json(&zero_layer(2));
    std::fs::write(&params, text.replacen("\"agg\"", "\"agg\" ::", 1)).unwrap();
    let o = paconv(dir.path(), &["scorefield", "--params", params.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("parse error at byte"));
    let o = paconv(
        dir.path(),
        &["scorefield", "--params", params.to_str().unwrap(), "--resolution", "1"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[equivalence]\ninstances = 0\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&paconv(dir.path(), &["--config", c, "equivalence"])), 2);
    assert_eq!(code(&paconv(dir.path(), &["--config", c, "equivalence", "--instances", "3"])), 0);

    std::fs::write(&cfg, "[equivalence]\ninstancez = 3\n").unwrap();
    let o = paconv(dir.path(), &["--config", c, "equivalence"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));

    let shipped = default_config();
    assert_eq!(code(&paconv(dir.path(), &["--config", &shipped, "corr-study", "--steps", "50"])), 0);
}

/// The shipped configuration trains to the accuracy it requires, and the
/// trained first-layer ScoreNet gives visibly different score surfaces.
#[test]
fn default_config_training_and_trained_scorefield() {
    let dir = tempfile::tempdir().unwrap();
    let o = paconv(dir.path(), &["--config", &default_config(), "train"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("train.json"));
    assert!(r["final"]["acc"].as_f64().unwrap() >= 0.95);

    let model = dir.path().join("model.json");
    let o = paconv(
        dir.path(),
        &["scorefield", "--params", model.to_str().unwrap(), "--resolution", "32", "--require-gap", "0.1"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}
