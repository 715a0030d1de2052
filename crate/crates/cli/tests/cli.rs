use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "name": "tiny",
  "seeds": [3],
  "tracks": [{
    "family": "mlp",
    "data": {"kind": "two-moons", "n_train": 100, "n_test": 60, "noise": 0.2},
    "widths": [0.5, 1.0]
  }],
  "train": {"epochs": 3},
  "effdim": {"k": 10, "subset_size": 50},
  "attacks": {"epsilons_255": [4], "sigmas": [0.2], "pgd_steps": 5, "pgd_restarts": 1, "gaussian_draws": 1},
  "methods": {"methods": ["standard", "at"], "awp": [false], "extra_data": [false]}
}"#;

fn effdim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effdim"))
        .current_dir(dir)
        .env_remove("EFFDIM_DATA_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gen_data_writes_lf_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = effdim(
        dir.path(),
        &[
            "gen-data",
            "--n-train",
            "40",
            "--n-test",
            "20",
            "--out",
            "d",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("d/train.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("label,x0,x1\n"));
    assert_eq!(text.lines().count(), 41);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), r#"{"tracks": [], "colour": 1}"#);
    assert_eq!(
        code(&effdim(dir.path(), &["sweep", "scale", "--config", &bad])),
        1
    );
    assert_eq!(code(&effdim(dir.path(), &["sweep", "scale"])), 1);
    assert_eq!(code(&effdim(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&effdim(dir.path(), &["report", "missing.csv"])), 3);
    assert_eq!(
        code(&effdim(
            dir.path(),
            &["sweep", "scale", "--config", "missing.json"]
        )),
        3
    );
    assert_eq!(code(&effdim(dir.path(), &["--help"])), 0);
}

#[test]
fn failed_cells_give_partial_exit_and_keep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"tracks": [{"family": "mlp", "data": {"kind": "mnist", "dir": "no-such-dir"}, "widths": [1.0]}]}"#,
    );
    let o = effdim(dir.path(), &["sweep", "scale", "--config", &cfg]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("out/scale_cells.csv")).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.contains("failed:"), "{row}");
}

#[test]
fn deterministic_sweep_is_byte_identical_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let files = [
        "methods_cells.csv",
        "methods_attacks.csv",
        "methods_summary.json",
    ];
    let mut runs = Vec::new();
    for out in ["a", "b"] {
        let o = effdim(
            dir.path(),
            &[
                "--deterministic",
                "--out",
                out,
                "--config",
                &cfg,
                "sweep",
                "methods",
            ],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(files.map(|f| std::fs::read(dir.path().join(out).join(f)).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let cells = String::from_utf8(runs[0][0].clone()).unwrap();
    assert_eq!(cells.lines().count(), 1 + 2 * 2);

    let o = effdim(
        dir.path(),
        &[
            "report",
            "--out",
            "rep",
            "a/methods_cells.csv",
            "a/methods_attacks.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("rep/summary.json").exists());
    assert!(dir.path().join("rep/pr_vs_neff_methods.csv").exists());
}

#[test]
fn single_model_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = effdim(dir.path(), &["--config", &cfg, "train", "--width", "0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = "out/models/mlp-two-moons-w0.5-standard-s3.ckpt";
    assert!(dir.path().join(model).exists());
    assert!(dir
        .path()
        .join("out/mlp-two-moons-w0.5-standard-s3_history.csv")
        .exists());

    let o = effdim(dir.path(), &["--config", &cfg, "effdim", "--model", model]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let spectrum = std::fs::read_to_string(
        dir.path()
            .join("out/mlp-two-moons-w0.5-standard-s3_spectrum.csv"),
    )
    .unwrap();
    let sidecar: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(
            dir.path()
                .join("out/mlp-two-moons-w0.5-standard-s3_spectrum.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let k = sidecar["k"].as_u64().unwrap() as usize;
    assert!(k <= 10 && (k == 10 || sidecar["breakdown"] == true));
    assert_eq!(spectrum.lines().count(), k + 1);

    let o = effdim(
        dir.path(),
        &[
            "--config",
            &cfg,
            "attack",
            "--model",
            model,
            "--attack",
            "gaussian",
            "--budgets",
            "0.1,0.2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(
        dir.path()
            .join("out/mlp-two-moons-w0.5-standard-s3_gaussian.csv"),
    )
    .unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
}
