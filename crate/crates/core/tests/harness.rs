use std::collections::BTreeMap;

use effdim_core::harness::{
    build_report, read_table, read_table_file, report, run_sweep, summarize, to_canonical_json,
    write_attacks, write_cells, Experiment, Summary, SweepConfig, SweepOptions, SweepReport, Table,
};
use effdim_core::seed;
use effdim_core::stats::{linear_regression, spearman_rho};
use effdim_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const TWO_FAMILIES: &str = r#"{
  "name": "two-families",
  "tracks": [
    {"family": "mlp", "data": {"kind": "two-moons", "n_train": 60, "n_test": 40}},
    {"family": "smallcnn", "data": {"kind": "glyphs", "n_train": 20, "n_test": 20, "side": 16}}
  ],
  "train": {"epochs": 1, "batch_size": 10},
  "effdim": {"k": 5, "subset_size": 10},
  "attacks": {"epsilons_255": [2, 4, 8], "sigmas": [0.1, 0.2], "pgd_steps": 3, "pgd_restarts": 1, "gaussian_draws": 1}
}"#;

const METHODS: &str = r#"{
  "name": "methods",
  "seeds": [0, 1, 2],
  "tracks": [{"family": "mlp", "data": {"kind": "two-moons", "n_train": 40, "n_test": 30}, "widths": [1.0]}],
  "train": {"epochs": 1, "batch_size": 10, "inner_steps": 2},
  "effdim": {"k": 5, "subset_size": 10},
  "attacks": {"epsilons_255": [4], "sigmas": [0.2], "pgd_steps": 3, "pgd_restarts": 1, "gaussian_draws": 1}
}"#;

fn sweep(exp: Experiment, text: &str, jobs: usize) -> SweepReport {
    let cfg = SweepConfig::from_json(text).unwrap();
    let opts = SweepOptions {
        jobs,
        ..SweepOptions::default()
    };
    run_sweep(exp, &cfg, &opts).unwrap()
}

fn bytes(r: &SweepReport) -> (Vec<u8>, Vec<u8>, String) {
    let mut c = Vec::new();
    write_cells(&r.cells, &mut c).unwrap();
    let mut a = Vec::new();
    write_attacks(&r.attacks, &mut a).unwrap();
    (c, a, to_canonical_json(&r.summary).unwrap())
}

#[test]
fn scale_sweep_rows_and_param_order() {
    let r = sweep(Experiment::Scale, TWO_FAMILIES, 1);
    assert_eq!(r.cells.len(), 12);
    assert!(r.attacks.is_empty());
    assert_eq!(r.failed_cells(), 0);
    for fam in ["mlp", "smallcnn"] {
        let p: Vec<usize> = r
            .cells
            .iter()
            .filter(|c| c.family == fam)
            .map(|c| c.param_count.unwrap())
            .collect();
        assert_eq!(p.len(), 6);
        assert!(p.windows(2).all(|w| w[0] < w[1]), "{fam}: {p:?}");
    }
    for c in &r.cells {
        assert!(c.eff_dim.unwrap().is_finite() && c.clean_accuracy.unwrap().is_finite());
        assert_eq!(c.config_hash, r.config_hash);
    }
    assert!(r
        .summary
        .trends
        .contains_key("neff_vs_params/mlp/two-moons/all-seeds"));
}

#[test]
fn robustness_rows_have_controls_and_nested_budgets() {
    let r = sweep(Experiment::Robustness, TWO_FAMILIES, 0);
    let mut per_model: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for a in &r.attacks {
        if a.budget == 0.0 {
            assert_eq!(a.relative_performance, Some(1.0), "{}", a.model_id);
        }
        if let Some(pr) = a.relative_performance {
            assert!((pr - a.attacked_accuracy / a.clean_accuracy).abs() <= 1e-12);
        }
        per_model
            .entry((a.model_id.clone(), a.attack.clone()))
            .or_default()
            .push((a.budget, a.attacked_accuracy));
    }
    assert_eq!(per_model.len(), 24);
    for ((id, attack), rows) in per_model {
        if attack == "pgd-strong" {
            assert_eq!(rows.len(), 4);
            assert!(
                rows.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 <= w[0].1),
                "{id}"
            );
        } else {
            assert_eq!(rows.len(), 3);
        }
    }
}

#[test]
fn methods_grid_counts_and_baseline() {
    let r = sweep(Experiment::Methods, METHODS, 0);
    assert_eq!(r.cells.len(), 36);
    for c in r.cells.iter().filter(|c| c.method == "standard") {
        assert_eq!(c.neff_change_pct, Some(0.0));
    }
    for c in &r.cells {
        let base = r
            .cells
            .iter()
            .find(|b| b.method == "standard" && b.seed == c.seed)
            .and_then(|b| b.eff_dim)
            .unwrap();
        let want = 100.0 * (c.eff_dim.unwrap() - base) / base;
        assert!((c.neff_change_pct.unwrap() - want).abs() <= 1e-9);
    }
    let tags: Vec<&str> = r
        .cells
        .iter()
        .filter(|c| c.seed == 0)
        .map(|c| c.method.as_str())
        .collect();
    assert_eq!(
        tags,
        [
            "standard",
            "standard+awp",
            "standard+awp+ed",
            "standard+ed",
            "at",
            "at+awp",
            "at+awp+ed",
            "at+ed",
            "trades",
            "trades+awp",
            "trades+awp+ed",
            "trades+ed"
        ]
    );
}

#[test]
fn sweeps_are_deterministic_across_runs_and_workers() {
    let a = sweep(Experiment::Robustness, METHODS, 1);
    let b = sweep(Experiment::Robustness, METHODS, 1);
    let c = sweep(Experiment::Robustness, METHODS, 3);
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(bytes(&a), bytes(&c));
}

#[test]
fn checkpoints_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig::from_json(METHODS).unwrap();
    let opts = SweepOptions {
        jobs: 1,
        models_dir: Some(dir.path().to_path_buf()),
        progress: false,
    };
    let first = run_sweep(Experiment::Scale, &cfg, &opts).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    let second = run_sweep(Experiment::Scale, &cfg, &opts).unwrap();
    assert_eq!(bytes(&first), bytes(&second));
}

#[test]
fn report_round_trips_and_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let r = sweep(Experiment::Robustness, TWO_FAMILIES, 0);
    let written = r.write(dir.path()).unwrap();
    assert_eq!(written.len(), 3);

    let tables: Vec<Table> = written[..2]
        .iter()
        .map(|p| read_table_file(p).unwrap())
        .collect();
    match (&tables[0], &tables[1]) {
        (Table::Cells(c), Table::Attacks(a)) => {
            assert_eq!(c, &r.cells);
            assert_eq!(a, &r.attacks);
            assert_eq!(summarize("robustness", c, a), r.summary);
        }
        other => panic!("unexpected tables {other:?}"),
    }

    // Trend statistics equal a fresh fit of the CSV rows.
    let Table::Attacks(rows) = &tables[1] else {
        unreachable!()
    };
    let key = format!("pr_vs_neff/pgd-strong/{:?}/all/all-seeds", 4.0 / 255.0);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|a| a.attack == "pgd-strong" && a.budget == 4.0 / 255.0 && !a.excluded)
        .filter_map(|a| a.relative_performance.map(|p| (a.eff_dim, p)))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let trend = &r.summary.trends[&key];
    assert_eq!(trend.n_points, x.len());
    match linear_regression(&x, &y) {
        Ok((slope, intercept, r2)) => {
            let s = trend.stats.as_ref().unwrap();
            assert_eq!((s.slope, s.intercept, s.r_squared), (slope, intercept, r2));
            assert_eq!(s.spearman_rho, Some(spearman_rho(&x, &y).unwrap()));
        }
        Err(_) => assert!(trend.note.is_some()),
    }

    // The summary JSON survives parse and re-serialization unchanged.
    let text = std::fs::read_to_string(&written[2]).unwrap();
    let parsed: Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(to_canonical_json(&parsed).unwrap(), text);

    let out = dir.path().join("report");
    let files = report(&written[..2], &out).unwrap();
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["pr_vs_neff_robustness.csv", "summary.json"]);
    let summaries: BTreeMap<String, Summary> =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summaries["robustness"], r.summary);
}

#[test]
fn report_omits_empty_series() {
    let r = sweep(Experiment::Scale, TWO_FAMILIES, 0);
    let mut buf = Vec::new();
    write_cells(&r.cells, &mut buf).unwrap();
    let bundle = build_report(&[read_table(&buf[..]).unwrap()]);
    assert_eq!(
        bundle.figures.keys().collect::<Vec<_>>(),
        ["neff_vs_params"]
    );
    assert_eq!(bundle.figures["neff_vs_params"].len(), 12);
}

#[test]
fn report_rejects_schema_mismatch_by_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "schema_version,experiment,config_hash,seed,model\n").unwrap();
    match report(&[path], &dir.path().join("out")) {
        Err(Error::Schema { column, .. }) => assert_eq!(column, "model_id"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ols_on_noisy_line_matches_normal_equations() {
    let mut rng = seed::rng(2024);
    let x: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&xi| {
            let z: f64 = StandardNormal.sample(&mut rng);
            -0.5 * xi + 3.0 + 0.3 * z
        })
        .collect();
    let (slope, intercept, r2) = linear_regression(&x, &y).unwrap();
    assert!((slope + 0.5).abs() <= 0.1);
    let design = DMatrix::from_fn(50, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let yv = DVector::from_column_slice(&y);
    let beta = (design.transpose() * &design)
        .lu()
        .solve(&(design.transpose() * yv))
        .unwrap();
    assert!((intercept - beta[0]).abs() <= 1e-10);
    assert!((slope - beta[1]).abs() <= 1e-10);
    assert!((0.0..=1.0).contains(&r2));
}

proptest! {
    #[test]
    fn trend_statistics_stay_in_range(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Ok((_, _, r2)) = linear_regression(&x, &y) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r2));
        }
        let rho = spearman_rho(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn spearman_ignores_monotone_transforms(pts in prop::collection::vec((0.01f64..100.0, -50.0f64..50.0), 3..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let cy: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        prop_assert!((spearman_rho(&x, &y).unwrap() - spearman_rho(&lx, &cy).unwrap()).abs() <= 1e-12);
    }
}
