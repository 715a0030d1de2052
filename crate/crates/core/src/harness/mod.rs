//! Reproducible sweeps over model families, widths, training methods and
//! seeds. Each sweep writes a cells table (one row per trained model), an
//! attacks table (one row per model and attack setting) and a JSON summary
//! of fitted trends.
//!
//! Cells are independent and may run on a worker pool; every random stream
//! is derived from the base seed and the cell's identity, and rows are
//! sorted before writing, so outputs do not depend on scheduling.

mod config;
mod report;
mod table;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{
    AttackSettings, DataConfig, DataKind, EffDimSettings, LoadedData, MethodGrid, SweepConfig,
    TrackConfig, TrainSettings,
};
pub use report::{
    budget_label, build_report, report, summarize, to_canonical_json, PlotPoint, ReportBundle,
    Summary, Trend,
};
pub use table::{
    classify_header, read_table, read_table_file, write_attacks, write_cells, AttackRow, CellRow,
    Table, TableKind, ATTACK_COLUMNS, CELL_COLUMNS, SCHEMA_VERSION,
};

use crate::attacks::{evaluate_grid, AttackConfig, AttackKind};
use crate::error::{Error, Result};
use crate::loss::LossFunction;
use crate::model::{build_model, load_checkpoint, save_checkpoint, Network};
use crate::seed::{mix64, str_key};
use crate::spectral::{effective_dimensionality, hessian_spectrum};
use crate::stats::median;
use crate::training::{accuracy, train_with, Method, TrainConfig, TrainExtras};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    Scale,
    Robustness,
    Methods,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Scale => "scale",
            Experiment::Robustness => "robustness",
            Experiment::Methods => "methods",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Experiment::Scale),
            "robustness" => Ok(Experiment::Robustness),
            "methods" => Ok(Experiment::Methods),
            other => Err(Error::invalid(format!("unknown experiment `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
    /// Trained models are loaded from here when present and saved otherwise.
    pub models_dir: Option<PathBuf>,
    /// Print one line per finished cell to stderr.
    pub progress: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub experiment: Experiment,
    pub config_hash: String,
    pub cells: Vec<CellRow>,
    pub attacks: Vec<AttackRow>,
    pub summary: Summary,
}

impl SweepReport {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_ok()).count()
    }

    /// Writes `<experiment>_cells.csv`, `<experiment>_attacks.csv` (when the
    /// sweep attacks) and `<experiment>_summary.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.experiment.as_str();
        let mut written = Vec::new();
        let mut buf = Vec::new();
        write_cells(&self.cells, &mut buf)?;
        written.push(write_file(&dir.join(format!("{stem}_cells.csv")), &buf)?);
        if self.experiment != Experiment::Scale {
            buf.clear();
            write_attacks(&self.attacks, &mut buf)?;
            written.push(write_file(&dir.join(format!("{stem}_attacks.csv")), &buf)?);
        }
        let json = to_canonical_json(&self.summary)?;
        written.push(write_file(
            &dir.join(format!("{stem}_summary.json")),
            json.as_bytes(),
        )?);
        Ok(written)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// One model to train and measure.
#[derive(Clone, Debug)]
struct Cell {
    track: usize,
    width: f64,
    seed: u64,
    method: Method,
    awp: bool,
    extra_data: bool,
}

impl Cell {
    fn tag(&self) -> String {
        let mut s = self.method.as_str().to_string();
        if self.awp {
            s.push_str("+awp");
        }
        if self.extra_data {
            s.push_str("+ed");
        }
        s
    }
}

/// Stable identifier, also used as the checkpoint file name.
pub fn model_id(family: &str, dataset: &str, width: f64, tag: &str, seed: u64) -> String {
    format!("{family}-{dataset}-w{width:?}-{tag}-s{seed}")
}

/// Seeds derived from the base seed and the model's identity. The training
/// method is deliberately not part of the key: cells that differ only in
/// method share initialization, batch order and attack streams.
pub fn cell_seed(base: u64, purpose: &str, family: &str, width: f64) -> u64 {
    mix64(base, &[str_key(purpose), str_key(family), width.to_bits()])
}

struct CellOutcome {
    cell: CellRow,
    attacks: Vec<AttackRow>,
}

pub fn run_scale_sweep(config: &SweepConfig, options: &SweepOptions) -> Result<SweepReport> {
    run_sweep(Experiment::Scale, config, options)
}

pub fn run_robustness_sweep(config: &SweepConfig, options: &SweepOptions) -> Result<SweepReport> {
    run_sweep(Experiment::Robustness, config, options)
}

pub fn run_training_method_sweep(
    config: &SweepConfig,
    options: &SweepOptions,
) -> Result<SweepReport> {
    run_sweep(Experiment::Methods, config, options)
}

/// Runs every cell of `experiment`. Configuration errors abort; failures
/// inside a cell are recorded in its row and the sweep continues.
pub fn run_sweep(
    experiment: Experiment,
    config: &SweepConfig,
    options: &SweepOptions,
) -> Result<SweepReport> {
    config.validate()?;
    let hash = config.hash();
    let mut cells = Vec::new();
    for (t, track) in config.tracks.iter().enumerate() {
        for &width in &track.widths {
            for &seed in &config.seeds {
                let base = Cell {
                    track: t,
                    width,
                    seed,
                    method: Method::Standard,
                    awp: false,
                    extra_data: false,
                };
                if experiment != Experiment::Methods {
                    cells.push(base);
                    continue;
                }
                for &method in &config.methods.methods {
                    for &awp in &config.methods.awp {
                        for &extra_data in &config.methods.extra_data {
                            cells.push(Cell {
                                method,
                                awp,
                                extra_data,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
    }

    // Datasets are shared by every cell of a (track, seed) pair.
    let mut data = Vec::new();
    for track in &config.tracks {
        let per_seed: Vec<Result<LoadedData, String>> = config
            .seeds
            .iter()
            .map(|&s| track.data.load(s).map_err(|e| e.to_string()))
            .collect();
        data.push(per_seed);
    }

    let run = || -> Vec<CellOutcome> {
        cells
            .par_iter()
            .map(|cell| {
                let si = config
                    .seeds
                    .iter()
                    .position(|&s| s == cell.seed)
                    .expect("seed from config");
                let outcome = run_cell(
                    experiment,
                    config,
                    &hash,
                    cell,
                    &data[cell.track][si],
                    options,
                );
                if options.progress {
                    let c = &outcome.cell;
                    eprintln!("[{}] {} {}", experiment.as_str(), c.model_id, c.status);
                }
                outcome
            })
            .collect()
    };
    let outcomes = if options.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("worker pool: {e}")))?
            .install(run)
    } else {
        run()
    };

    let mut cell_rows = Vec::with_capacity(outcomes.len());
    let mut attack_rows = Vec::new();
    for o in outcomes {
        cell_rows.push(o.cell);
        attack_rows.extend(o.attacks);
    }
    flag_outliers(&mut cell_rows, &mut attack_rows, config.outlier_ratio);
    fill_neff_change(&mut cell_rows);
    cell_rows.sort_by(table::cmp_cells);
    attack_rows.sort_by(table::cmp_attacks);
    let summary = summarize(experiment.as_str(), &cell_rows, &attack_rows);
    Ok(SweepReport {
        experiment,
        config_hash: hash,
        cells: cell_rows,
        attacks: attack_rows,
        summary,
    })
}

/// Flags cells whose clean accuracy is below `ratio` times the median of
/// their track, and the attack rows that belong to them.
fn flag_outliers(cells: &mut [CellRow], attacks: &mut [AttackRow], ratio: f64) {
    let mut medians = std::collections::BTreeMap::new();
    for c in cells.iter().filter(|c| c.is_ok()) {
        medians
            .entry((c.family.clone(), c.dataset.clone()))
            .or_insert_with(Vec::new)
            .push(c.clean_accuracy.unwrap_or_default());
    }
    let medians: std::collections::BTreeMap<_, _> = medians
        .into_iter()
        .map(|(k, v)| (k, median(&v).unwrap_or_default()))
        .collect();
    let mut excluded = std::collections::BTreeSet::new();
    for c in cells.iter_mut() {
        if let (Some(p), Some(m)) = (
            c.clean_accuracy,
            medians.get(&(c.family.clone(), c.dataset.clone())),
        ) {
            if p < ratio * m {
                c.excluded = true;
                excluded.insert(c.model_id.clone());
            }
        }
    }
    for a in attacks.iter_mut() {
        a.excluded = excluded.contains(&a.model_id);
    }
}

/// Percent change of N_eff against the standard, no-option cell of the
/// same family, dataset, width and seed.
fn fill_neff_change(cells: &mut [CellRow]) {
    let baselines: Vec<((String, String, u64, u64), f64)> = cells
        .iter()
        .filter(|c| c.method == "standard" && c.is_ok())
        .filter_map(|c| {
            c.eff_dim.map(|n| {
                (
                    (
                        c.family.clone(),
                        c.dataset.clone(),
                        c.width_multiplier.to_bits(),
                        c.seed,
                    ),
                    n,
                )
            })
        })
        .collect();
    for c in cells.iter_mut() {
        let key = (
            c.family.clone(),
            c.dataset.clone(),
            c.width_multiplier.to_bits(),
            c.seed,
        );
        let base = baselines.iter().find(|(k, _)| *k == key).map(|(_, n)| *n);
        c.neff_change_pct = match (c.eff_dim, base) {
            (Some(n), Some(b)) if b != 0.0 => Some(100.0 * (n - b) / b),
            _ => None,
        };
    }
}

fn run_cell(
    experiment: Experiment,
    config: &SweepConfig,
    hash: &str,
    cell: &Cell,
    data: &Result<LoadedData, String>,
    options: &SweepOptions,
) -> CellOutcome {
    let track = &config.tracks[cell.track];
    let family = track.family.as_str();
    let dataset = track.data.kind.as_str();
    let tag = cell.tag();
    let id = model_id(family, dataset, cell.width, &tag, cell.seed);
    let mut row = CellRow {
        schema_version: SCHEMA_VERSION,
        experiment: experiment.as_str().into(),
        config_hash: hash.into(),
        seed: cell.seed,
        model_id: id.clone(),
        family: family.into(),
        dataset: dataset.into(),
        width_multiplier: cell.width,
        param_count: None,
        method: tag,
        awp: cell.awp,
        extra_data: cell.extra_data,
        z: track.effdim_settings(config).z,
        eff_dim: None,
        eff_dim_k: None,
        tail_bound: None,
        neg_mass_fraction: None,
        neff_change_pct: None,
        clean_accuracy: None,
        excluded: false,
        status: "ok".into(),
    };
    let result = data
        .as_ref()
        .map_err(|e| Error::invalid(e.clone()))
        .and_then(|d| measure_cell(experiment, config, cell, d, &id, &mut row, options));
    match result {
        Ok(attacks) => CellOutcome { cell: row, attacks },
        Err(e) => {
            row.status = format!("failed: {e}").replace(['\n', '\r'], " ");
            CellOutcome {
                cell: row,
                attacks: Vec::new(),
            }
        }
    }
}

fn measure_cell(
    experiment: Experiment,
    config: &SweepConfig,
    cell: &Cell,
    data: &LoadedData,
    id: &str,
    row: &mut CellRow,
    options: &SweepOptions,
) -> Result<Vec<AttackRow>> {
    let track = &config.tracks[cell.track];
    let family = track.family.as_str();
    let scale = track.data.attack_scale();
    let net = trained_model(config, cell, data, id, options)?;
    row.param_count = Some(net.param_count());
    row.clean_accuracy = Some(accuracy(&net, &data.test));

    let settings = track.effdim_settings(config);
    let eff = settings.to_config(cell_seed(cell.seed, "effdim", family, cell.width));
    let spectrum = hessian_spectrum(&net, &data.test, &LossFunction::CrossEntropy, &eff)?;
    let n_eff = effective_dimensionality(&spectrum, settings.z);
    row.eff_dim = Some(n_eff);
    row.eff_dim_k = Some(spectrum.k);
    row.tail_bound = Some(spectrum.tail_bound(settings.z));
    row.neg_mass_fraction = Some(spectrum.neg_mass_fraction);

    if experiment == Experiment::Scale {
        return Ok(Vec::new());
    }
    let a = track.attack_settings(config);
    let test = match a.test_limit {
        Some(n) if n < data.test.len() => data
            .test
            .subset(n, cell_seed(cell.seed, "attack-subset", family, cell.width)),
        _ => data.test.clone(),
    };
    let attack_seed = cell_seed(cell.seed, "attack", family, cell.width);

    let (eps, pgd) = attack_grid(AttackKind::PgdStrong, a, scale, attack_seed);
    let (sigmas, gauss) = attack_grid(AttackKind::Gaussian, a, scale, attack_seed);
    let mut records = evaluate_grid(&net, &test, &pgd)?;
    records.extend(evaluate_grid(&net, &test, &gauss)?);
    let budgets = eps.iter().chain(&sigmas);
    Ok(records
        .into_iter()
        .zip(budgets)
        .map(|(r, &budget)| AttackRow {
            schema_version: SCHEMA_VERSION,
            experiment: row.experiment.clone(),
            config_hash: row.config_hash.clone(),
            seed: cell.seed,
            model_id: id.into(),
            family: family.into(),
            dataset: row.dataset.clone(),
            width_multiplier: cell.width,
            method: row.method.clone(),
            eff_dim: n_eff,
            attack: r.attack.kind.as_str().into(),
            budget,
            attack_scale: if r.attack.kind.is_budgeted() {
                scale
            } else {
                1.0
            },
            effective_budget: r.attack.budget(),
            clean_accuracy: r.clean_accuracy,
            attacked_accuracy: r.attacked_accuracy,
            relative_performance: r.relative_performance,
            n_evaluated: r.n_evaluated,
            excluded: false,
        })
        .collect())
}

/// Budgets of one attack kind with the ε = 0 or σ = 0 control prepended,
/// ascending, and the configurations that evaluate them. Budgets for
/// budgeted attacks are ε before `scale`; the configurations use ε·scale.
pub fn attack_grid(
    kind: AttackKind,
    settings: &AttackSettings,
    scale: f64,
    seed: u64,
) -> (Vec<f64>, Vec<AttackConfig>) {
    let raw: Vec<f64> = if kind.is_budgeted() {
        settings.epsilons_255.iter().map(|e| e / 255.0).collect()
    } else {
        settings.sigmas.clone()
    };
    let mut budgets: Vec<f64> = std::iter::once(0.0).chain(raw).collect();
    budgets.sort_by(f64::total_cmp);
    budgets.dedup();
    let configs = budgets
        .iter()
        .map(|&b| match kind {
            AttackKind::Gaussian => {
                let mut c = AttackConfig::gaussian(b, seed);
                c.restarts = settings.gaussian_draws;
                c
            }
            AttackKind::Fgsm => AttackConfig::fgsm(b * scale),
            AttackKind::Pgd | AttackKind::PgdStrong => {
                let mut c = if kind == AttackKind::Pgd {
                    AttackConfig::pgd(b * scale, seed)
                } else {
                    AttackConfig::pgd_strong(b * scale, seed)
                };
                c.steps = settings.pgd_steps;
                c.restarts = settings.pgd_restarts;
                c.step_size =
                    crate::attacks::PGD_STEP_FACTOR * c.epsilon / settings.pgd_steps as f64;
                c
            }
        })
        .collect();
    (budgets, configs)
}

/// The training configuration a cell uses.
pub fn cell_train_config(
    config: &SweepConfig,
    track: &TrackConfig,
    width: f64,
    seed: u64,
    method: Method,
    awp: bool,
    extra_data: bool,
) -> TrainConfig {
    let t = track.train_settings(config);
    let eps = t.inner_epsilon_255 / 255.0 * track.data.attack_scale();
    let mut cfg = TrainConfig::new(
        method,
        t.epochs,
        t.batch_size,
        t.learning_rate,
        eps,
        cell_seed(seed, "train", track.family.as_str(), width),
    );
    cfg.momentum = t.momentum;
    cfg.step_decay = t.step_decay;
    cfg.trades_beta = t.trades_beta;
    cfg.awp = awp;
    cfg.awp_gamma = t.awp_gamma;
    cfg.extra_data = extra_data;
    cfg.extra_factor = t.extra_factor;
    cfg.inner_attack.steps = t.inner_steps;
    cfg.inner_attack.step_size =
        crate::attacks::PGD_STEP_FACTOR * eps / t.inner_steps.max(1) as f64;
    cfg
}

fn trained_model(
    config: &SweepConfig,
    cell: &Cell,
    data: &LoadedData,
    id: &str,
    options: &SweepOptions,
) -> Result<Network> {
    let track = &config.tracks[cell.track];
    let family = track.family.as_str();
    let spec = track.model_spec(
        &data.train,
        cell.width,
        cell_seed(cell.seed, "init", family, cell.width),
    )?;
    let ckpt = options
        .models_dir
        .as_ref()
        .map(|d| d.join(format!("{id}.ckpt")));
    if let Some(path) = &ckpt {
        if path.exists() {
            let net = load_checkpoint(path)?;
            if net.spec() == &spec {
                return Ok(net);
            }
        }
    }
    let init = build_model(&spec)?;
    let train_cfg = cell_train_config(
        config,
        track,
        cell.width,
        cell.seed,
        cell.method,
        cell.awp,
        cell.extra_data,
    );
    let extras = TrainExtras {
        monitor: None,
        pool: data.pool.as_ref(),
    };
    let (net, _) = train_with(&init, &data.train, &train_cfg, extras)?;
    if let Some(path) = &ckpt {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(&net, path)?;
    }
    Ok(net)
}
