//! The acceptance suite. Every criterion writes one `[PASS]` or `[FAIL]`
//! line to stderr (uncaptured) before asserting. Criteria run one at a time
//! so their wall-clock budgets are measured without contention.

mod common;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::{
    dense_eigenvalues, dense_hessian, dot, eig_rel_err, norm, random_direction, random_problem,
};
use effdim_core::attacks::{epsilon_grid, evaluate_grid, fgsm_batch, pgd, pgd_batch};
use effdim_core::data::{encode_idx, generate_two_moons, parse_idx, read_idx, write_idx};
use effdim_core::harness::{
    budget_label, run_sweep, Experiment, SweepConfig, SweepOptions, SweepReport,
};
use effdim_core::spectral::{hessian_spectrum, n_eff};
use effdim_core::stats::{linear_regression, median};
use effdim_core::training::{train, train_with, TrainExtras};
use effdim_core::{
    build_model, AttackConfig, EffDimConfig, Error, LossFunction, Method, ModelSpec, Network,
    Tensor, TrainConfig,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} [{tag}] {name}: {detail}"
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(exp: Experiment, cfg: &SweepConfig) -> SweepReport {
    let opts = SweepOptions {
        jobs: 1,
        ..SweepOptions::default()
    };
    run_sweep(exp, cfg, &opts).unwrap()
}

#[test]
fn criterion_01_hvp_correctness() {
    let _g = serial();
    let start = Instant::now();
    let (mut worst_fd, mut worst_sym, mut max_p) = (0.0f64, 0.0f64, 0);
    for case in 0..20 {
        let (net, data) = random_problem(1000 + case, 500, 64);
        let batch = data.to_batch();
        let p = net.param_count();
        max_p = max_p.max(p);
        let hvp =
            |v: &effdim_core::ParamVector| LossFunction::CrossEntropy.hvp(&net, &batch, v).unwrap();
        let grad_at = |s: f64, v: &[f64]| {
            let shifted: Vec<f64> = net.params().iter().zip(v).map(|(a, b)| a + s * b).collect();
            LossFunction::CrossEntropy
                .gradient(&net.with_params(&shifted).unwrap(), &batch)
                .unwrap()
                .0
        };
        for j in 0..10 {
            let v = random_direction(p, 7919 * case + j);
            let hv = hvp(&v);
            let h = 1e-6;
            let (gp, gm) = (grad_at(h, &v.0), grad_at(-h, &v.0));
            let diff: Vec<f64> =
                hv.0.iter()
                    .zip(gp.iter().zip(&gm))
                    .map(|(a, (p, m))| a - (p - m) / (2.0 * h))
                    .collect();
            worst_fd = worst_fd.max(norm(&diff) / norm(&hv.0));

            let u = random_direction(p, 104_729 * case + j);
            let hu = hvp(&u);
            worst_sym = worst_sym.max((dot(&u.0, &hv.0) - dot(&v.0, &hu.0)).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass =
        worst_fd <= 1e-4 && worst_sym <= 1e-8 && max_p <= 500 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "HVP correctness",
        pass,
        &format!(
            "20 nets (P <= {max_p}), 10 dirs each; max rel FD error {worst_fd:.2e}, max |uHv - vHu| {worst_sym:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_spectral_oracle() {
    let _g = serial();
    let start = Instant::now();
    let (mut worst_eig, mut worst_neff, mut max_p) = (0.0f64, 0.0f64, 0);
    let mut full = true;
    for case in 0..10 {
        let (net, data) = random_problem(2000 + case, 300, 120);
        let p = net.param_count();
        max_p = max_p.max(p);
        let dense = dense_eigenvalues(&dense_hessian(&net, &data.to_batch()));
        let cfg = EffDimConfig {
            z: 1.0,
            k: Some(p),
            subset_size: data.len(),
            seed: case,
        };
        let s = hessian_spectrum(&net, &data, &LossFunction::CrossEntropy, &cfg).unwrap();
        full &= s.eigenvalues.len() == p;
        for (&a, &b) in s.eigenvalues.iter().zip(&dense).take(10) {
            worst_eig = worst_eig.max(eig_rel_err(a, b, &dense));
        }
        let (a, b) = (n_eff(&s.eigenvalues, 1.0), n_eff(&dense, 1.0));
        worst_neff = worst_neff.max((a - b).abs() / b.abs());
    }
    let elapsed = start.elapsed();
    let pass = full
        && worst_eig <= 1e-6
        && worst_neff <= 1e-6
        && max_p <= 300
        && elapsed < Duration::from_secs(300);
    verdict(
        2,
        "spectral oracle",
        pass,
        &format!(
            "10 nets (P <= {max_p}); max rel error top-10 {worst_eig:.2e}, N_eff {worst_neff:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_03_neff_exactness() {
    let _g = serial();
    let example = n_eff(&[10.0, 1.0, 0.1], 1.0);
    let exact = example == 1.5;

    let mut rng_vals = random_direction(200, 3).0;
    for v in &mut rng_vals {
        *v = (v.abs() * 1e3).powf(1.5);
    }
    let zs: Vec<f64> = (-4..=8).map(|i| 10f64.powf(i as f64 * 0.5)).collect();
    let monotone = [vec![10.0, 1.0, 0.1], rng_vals.clone()]
        .iter()
        .all(|ev| zs.windows(2).all(|w| n_eff(ev, w[1]) <= n_eff(ev, w[0])));

    let mut worst = 0.0f64;
    for c in [1e-3, 0.5, 2.0, 7.0, 1e3] {
        for z in [0.01, 1.0, 100.0] {
            for ev in [vec![10.0, 1.0, 0.1], rng_vals.clone()] {
                let scaled: Vec<f64> = ev.iter().map(|l| c * l).collect();
                worst = worst.max((n_eff(&scaled, c * z) - n_eff(&ev, z)).abs());
            }
        }
    }
    let pass = exact && monotone && worst <= 1e-12;
    verdict(
        3,
        "N_eff exactness",
        pass,
        &format!("N_eff({{10,1,0.1}}, 1) = {example:?}; monotone over z in [0.01, 100]: {monotone}; max scaling error {worst:.1e}"),
    );
}

fn moons_model() -> (Network, effdim_core::Dataset) {
    let train_set = generate_two_moons(1000, 0.2, 41).unwrap();
    let test = generate_two_moons(500, 0.2, 42).unwrap();
    let init = build_model(&ModelSpec::mlp(2, 2, 2.0, 43)).unwrap();
    let (net, _) = train(
        &init,
        &train_set,
        &TrainConfig::new(Method::Standard, 30, 32, 0.05, 0.0, 44),
    )
    .unwrap();
    (net, test)
}

#[test]
fn criterion_04_attack_invariants() {
    let _g = serial();
    let (net, test) = moons_model();
    let scale = 10.0;

    // Budget and box on 10^4 attacked samples: 2500 points at four radii.
    let pool = generate_two_moons(2500, 0.2, 45).unwrap();
    let (x, y) = (pool.inputs_flat(), pool.labels());
    let mut attacked = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut in_box = true;
    for e in [1.0, 2.0, 4.0, 8.0] {
        let eps = scale * e / 255.0;
        let adv = pgd_batch(
            &net,
            &x,
            &y,
            &AttackConfig::pgd_with(eps, 10, 1, e as u64),
            0,
        )
        .adversarial;
        for chunk in [adv, fgsm_batch(&net, &x, &y, eps)] {
            for (a, o) in chunk.iter().zip(&x) {
                worst_excess = worst_excess.max((a - o).abs() - eps);
                in_box &= (0.0..=1.0).contains(a);
            }
        }
        attacked += 2 * pool.len();
    }
    let budget_ok = worst_excess <= 0.0 && in_box;

    // Nested grid and the ε = 0 control.
    let grid: Vec<f64> = std::iter::once(0.0).chain(epsilon_grid()).collect();
    let configs: Vec<AttackConfig> = grid
        .iter()
        .map(|e| AttackConfig::pgd_strong(scale * e, 46))
        .collect();
    let records = evaluate_grid(&net, &test, &configs).unwrap();
    let nested = records
        .windows(2)
        .all(|w| w[1].attacked_accuracy <= w[0].attacked_accuracy);
    let control = records[0].relative_performance == Some(1.0);
    let p_star: Vec<String> = records
        .iter()
        .map(|r| format!("{:.3}", r.attacked_accuracy))
        .collect();

    // Linear scorer s(x) = 3x1 - 4x2 - 0.5 at (0.5, 0.5): margin 1, |w|_1 = 7.
    let mut lin = build_model(&ModelSpec::mlp_with_hidden(2, vec![], 2, 0)).unwrap();
    lin.set_params(&[0.0, 0.0, 3.0, -4.0, 0.0, -0.5]).unwrap();
    let x0 = Tensor::vector(vec![0.5, 0.5]).unwrap();
    let step = 0.005;
    let flip = (0..=60).map(|i| i as f64 * step).find(|&e| {
        lin.predict_batch(pgd(&lin, &x0, 0, &AttackConfig::pgd_with(e, 40, 1, 1)).data()) == vec![1]
    });
    let threshold_ok = flip.is_some_and(|e| (e - 1.0 / 7.0).abs() <= step);

    let pass = attacked >= 10_000 && budget_ok && nested && control && threshold_ok;
    verdict(
        4,
        "attack invariants",
        pass,
        &format!(
            "{attacked} attacked samples, max excess over eps {worst_excess:.1e}, in box {in_box}; p* along grid [{}]; eps=0 p_r {:?}; linear flip at {flip:?} (1/7 = {:.4})",
            p_star.join(", "),
            records[0].relative_performance,
            1.0 / 7.0
        ),
    );
}

#[test]
fn criterion_05_degenerate_training() {
    let _g = serial();
    let data = generate_two_moons(300, 0.2, 51).unwrap();
    let monitor = generate_two_moons(100, 0.2, 52).unwrap();
    let init = build_model(&ModelSpec::mlp(2, 2, 2.0, 53)).unwrap();
    let base = TrainConfig::new(Method::Standard, 6, 32, 0.05, 0.0, 54);
    let extras = TrainExtras {
        monitor: Some(&monitor),
        pool: None,
    };
    let (reference, ref_hist) = train_with(&init, &data, &base, extras).unwrap();

    let mut at = base.clone();
    at.method = Method::At;
    at.inner_attack.epsilon = 0.0;
    let mut trades = base.clone();
    trades.method = Method::Trades;
    trades.inner_attack.epsilon = 0.1;
    trades.inner_attack.steps = 0;
    let mut awp = base.clone();
    awp.awp = true;
    awp.awp_gamma = 0.0;

    let mut results = Vec::new();
    for (name, cfg) in [
        ("AT(eps=0)", at),
        ("TRADES(0 steps)", trades),
        ("AWP(gamma=0)", awp),
    ] {
        let (net, hist) = train_with(&init, &data, &cfg, extras).unwrap();
        let same = net
            .params()
            .iter()
            .zip(reference.params())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && hist.train_loss == ref_hist.train_loss
            && hist.test_accuracy == ref_hist.test_accuracy;
        results.push((name, same));
    }
    let pass = results.iter().all(|r| r.1);
    let detail: Vec<String> = results
        .iter()
        .map(|(n, s)| format!("{n} {}", if *s { "bitwise equal" } else { "differs" }))
        .collect();
    verdict(
        5,
        "degenerate-training equivalence",
        pass,
        &detail.join(", "),
    );
}

#[test]
fn criterion_06_standard_has_highest_neff() {
    let _g = serial();
    let start = Instant::now();
    let cfg = SweepConfig::load(&config_path("desk-methods.json")).unwrap();
    let r = run(Experiment::Methods, &cfg);
    let neff = |method: &str, seed: u64| {
        r.cells
            .iter()
            .find(|c| c.method == method && c.seed == seed && c.width_multiplier == 2.0)
            .and_then(|c| c.eff_dim)
    };
    let (mut above_at, mut above_trades, mut awp_below_at) = (0, 0, 0);
    let mut per_seed = Vec::new();
    for &s in &cfg.seeds {
        let (Some(st), Some(at), Some(tr), Some(aw)) = (
            neff("standard", s),
            neff("at", s),
            neff("trades", s),
            neff("at+awp", s),
        ) else {
            continue;
        };
        above_at += usize::from(st > at);
        above_trades += usize::from(st > tr);
        awp_below_at += usize::from(aw < at);
        per_seed.push(format!(
            "s{s}: std {st:.3} at {at:.3} trades {tr:.3} at+awp {aw:.3}"
        ));
    }
    let elapsed = start.elapsed();
    let n = cfg.seeds.len();
    let pass = r.failed_cells() == 0
        && above_at >= 4
        && above_trades >= 4
        && awp_below_at >= 3
        && elapsed < Duration::from_secs(15 * 60);
    verdict(
        6,
        "standard training has the highest N_eff",
        pass,
        &format!(
            "std > AT in {above_at}/{n}, std > TRADES in {above_trades}/{n}, AWP < AT in {awp_below_at}/{n}; {}; {:.0}s",
            per_seed.join("; "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_lower_neff_more_robust() {
    let _g = serial();
    let start = Instant::now();
    let cfg = SweepConfig::load(&config_path("desk-robustness.json")).unwrap();
    let r = run(Experiment::Robustness, &cfg);
    let rho = |attack: &str, budget: f64, group: &str, seed: u64| {
        r.summary
            .trends
            .get(&format!(
                "pr_vs_neff/{attack}/{}/{group}/seed-{seed}",
                budget_label(budget)
            ))
            .and_then(|t| t.spearman())
    };
    let mid = 4.0 / 255.0;
    let collect = |attack: &str, budget: f64, group: &str| -> Vec<f64> {
        cfg.seeds
            .iter()
            .filter_map(|&s| rho(attack, budget, group, s))
            .collect()
    };
    let pgd_rho = collect("pgd-strong", mid, "all");
    let gauss_rho = collect("gaussian", 0.2, "all");
    let pgd_med = median(&pgd_rho);
    let gauss_med = median(&gauss_rho);
    let mut families = BTreeMap::new();
    for fam in ["mlp", "smallcnn"] {
        families.insert(
            fam,
            (
                median(&collect("pgd-strong", mid, fam)),
                median(&collect("gaussian", 0.2, fam)),
            ),
        );
    }
    let elapsed = start.elapsed();
    let pass = r.failed_cells() == 0
        && r.cells.len() == 12 * cfg.seeds.len()
        && pgd_rho.len() == cfg.seeds.len()
        && pgd_med.is_some_and(|m| m <= -0.5)
        && gauss_med.is_some_and(|m| m < 0.0)
        && elapsed < Duration::from_secs(30 * 60);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    verdict(
        7,
        "lower N_eff goes with higher p_r",
        pass,
        &format!(
            "pgd-strong eps=4/255 rho per seed [{}] median {:?}; gaussian sigma=0.2 rho per seed [{}] median {:?}; per-family medians (pgd, gaussian) {families:?}; {:.0}s",
            fmt(&pgd_rho),
            pgd_med,
            fmt(&gauss_rho),
            gauss_med,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_regression_engine() {
    let _g = serial();
    let (slope, intercept, r2) = linear_regression(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
    let exact = slope == 2.0 && intercept == 1.0 && r2 == 1.0;
    let mut worst = 0.0f64;
    for case in 0..20 {
        let n = 5 + 7 * case as usize;
        let x: Vec<f64> = random_direction(n, 300 + case)
            .0
            .iter()
            .map(|v| 10.0 * v)
            .collect();
        let y: Vec<f64> = random_direction(n, 600 + case).0;
        let (s, i, _) = linear_regression(&x, &y).unwrap();
        let design = nalgebra::DMatrix::from_fn(n, 2, |r, c| if c == 0 { 1.0 } else { x[r] });
        let rhs = design.transpose() * nalgebra::DVector::from_column_slice(&y);
        let beta = (design.transpose() * &design).lu().solve(&rhs).unwrap();
        worst = worst.max((i - beta[0]).abs()).max((s - beta[1]).abs());
    }
    let pass = exact && worst <= 1e-10;
    verdict(
        8,
        "regression engine",
        pass,
        &format!("line fit (slope {slope}, intercept {intercept}, R2 {r2}); max deviation from normal equations {worst:.1e}"),
    );
}

const REPRO: &str = r#"{
  "name": "repro",
  "seeds": [0, 1],
  "tracks": [
    {"family": "mlp", "data": {"kind": "two-moons", "n_train": 200, "n_test": 100, "noise": 0.2}, "widths": [0.5, 2.0]},
    {"family": "smallcnn", "data": {"kind": "glyphs", "n_train": 60, "n_test": 40, "side": 16}, "widths": [0.5]}
  ],
  "train": {"epochs": 3, "batch_size": 20},
  "effdim": {"k": 10, "subset_size": 40},
  "attacks": {"epsilons_255": [2, 4], "sigmas": [0.2], "pgd_steps": 5, "pgd_restarts": 2, "gaussian_draws": 2}
}"#;

#[test]
fn criterion_09_reproducibility() {
    let _g = serial();
    let cfg = SweepConfig::from_json(REPRO).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for d in &dirs {
        let mut files = Vec::new();
        for exp in [Experiment::Scale, Experiment::Robustness] {
            for path in run(exp, &cfg).write(d.path()).unwrap() {
                files.push((
                    path.file_name().unwrap().to_owned(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
        outputs.push(files);
    }
    let identical = outputs[0] == outputs[1];
    let bytes: usize = outputs[0].iter().map(|f| f.1.len()).sum();
    verdict(
        9,
        "reproducibility",
        identical && outputs[0].len() == 5,
        &format!(
            "{} files, {bytes} bytes, byte-identical across reruns: {identical}",
            outputs[0].len()
        ),
    );
}

#[test]
fn criterion_10_idx_parser() {
    let _g = serial();
    // Two 2x3 unsigned-byte images, written out by hand.
    let file: Vec<u8> = vec![
        0x00, 0x00, 0x08, 0x03, // magic: ubyte, 3 dims
        0x00, 0x00, 0x00, 0x02, // 2 images
        0x00, 0x00, 0x00, 0x02, // 2 rows
        0x00, 0x00, 0x00, 0x03, // 3 columns
        0, 64, 128, 192, 255, 1, // image 0
        9, 8, 7, 6, 5, 4, // image 1
    ];
    let parsed = parse_idx(&file).unwrap();
    let layout = parsed.dims == vec![2, 2, 3] && parsed.data == file[16..];
    let reencoded = encode_idx(&parsed.dims, &parsed.data).unwrap() == file;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two-images-idx3-ubyte");
    write_idx(&path, &parsed.dims, &parsed.data).unwrap();
    let on_disk = std::fs::read(&path).unwrap() == file && read_idx(&path).unwrap() == parsed;

    let mut bad_magic = file.clone();
    bad_magic[0] = 0x01;
    let mut bad_type = file.clone();
    bad_type[2] = 0x0B;
    let truncated = &file[..file.len() - 2];
    let errors = [
        parse_idx(&bad_magic),
        parse_idx(&bad_type),
        parse_idx(truncated),
    ];
    let distinct = matches!(errors[0], Err(Error::IdxBadMagic(_)))
        && matches!(errors[1], Err(Error::IdxUnsupportedType(0x0B)))
        && matches!(
            errors[2],
            Err(Error::IdxTruncated {
                expected: 28,
                found: 26
            })
        );
    let messages: Vec<String> = errors
        .iter()
        .map(|e| e.as_ref().err().map(|e| e.to_string()).unwrap_or_default())
        .collect();
    verdict(
        10,
        "IDX parser",
        layout && reencoded && on_disk && distinct,
        &format!(
            "round trip {}; rejections: {}",
            layout && reencoded && on_disk,
            messages.join(" | ")
        ),
    );
}
