use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::table::{read_table_file, AttackRow, CellRow, Table, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::stats::TrendStats;

/// A fitted trend, or the reason none could be fitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub x: String,
    pub y: String,
    pub n_points: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stats: Option<TrendStats>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl Trend {
    fn fit(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> Self {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let (stats, note) = match TrendStats::fit(&xs, &ys) {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            x: x_name.into(),
            y: y_name.into(),
            n_points: points.len(),
            stats,
            note,
        }
    }

    pub fn spearman(&self) -> Option<f64> {
        self.stats.as_ref().and_then(|s| s.spearman_rho)
    }
}

/// Everything in a summary is a function of the rows, so [`report`] can
/// recompute it from the CSV files alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_cells: usize,
    pub failed_cells: Vec<String>,
    pub excluded_cells: Vec<String>,
    /// Dataset name to attack scale factor.
    pub attack_scales: BTreeMap<String, f64>,
    pub trends: BTreeMap<String, Trend>,
    /// `family/method` to mean percent change of N_eff against the baseline.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub neff_change_pct_mean: BTreeMap<String, f64>,
}

/// `{:?}` keeps budgets like 4/255 exact in labels.
pub fn budget_label(b: f64) -> String {
    format!("{b:?}")
}

pub fn summarize(experiment: &str, cells: &[CellRow], attacks: &[AttackRow]) -> Summary {
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let ok: Vec<&CellRow> = cells.iter().filter(|c| c.is_ok()).collect();
    let mut trends = BTreeMap::new();

    // N_eff against parameter count, per family and dataset.
    let mut by_track: BTreeMap<String, Vec<(u64, f64, f64)>> = BTreeMap::new();
    for c in &ok {
        if let (Some(p), Some(n)) = (c.param_count, c.eff_dim) {
            by_track
                .entry(format!("{}/{}", c.family, c.dataset))
                .or_default()
                .push((c.seed, p as f64, n));
        }
    }
    for (track, pts) in &by_track {
        let all: Vec<(f64, f64)> = pts.iter().map(|&(_, x, y)| (x, y)).collect();
        trends.insert(
            format!("neff_vs_params/{track}/all-seeds"),
            Trend::fit("param_count", "eff_dim", &all),
        );
        for s in &seeds {
            let one: Vec<(f64, f64)> = pts
                .iter()
                .filter(|p| p.0 == *s)
                .map(|&(_, x, y)| (x, y))
                .collect();
            if !one.is_empty() {
                trends.insert(
                    format!("neff_vs_params/{track}/seed-{s}"),
                    Trend::fit("param_count", "eff_dim", &one),
                );
            }
        }
    }

    // p_r against N_eff, per attack setting; pooled over families and per
    // family, pooled over seeds and per seed. Controls and flagged cells are
    // left out.
    let mut by_setting: BTreeMap<(String, String), Vec<&AttackRow>> = BTreeMap::new();
    for a in attacks.iter().filter(|a| a.budget > 0.0 && !a.excluded) {
        if a.relative_performance.is_some() {
            by_setting
                .entry((a.attack.clone(), budget_label(a.budget)))
                .or_default()
                .push(a);
        }
    }
    for ((attack, budget), rows) in &by_setting {
        let mut families: Vec<&str> = rows.iter().map(|r| r.family.as_str()).collect();
        families.sort_unstable();
        families.dedup();
        let groups = std::iter::once("all").chain(families.iter().copied());
        for fam in groups {
            let sel = |seed: Option<u64>| -> Vec<(f64, f64)> {
                rows.iter()
                    .filter(|r| fam == "all" || r.family == fam)
                    .filter(|r| seed.is_none_or(|s| r.seed == s))
                    .map(|r| (r.eff_dim, r.relative_performance.unwrap_or_default()))
                    .collect()
            };
            let key = format!("pr_vs_neff/{attack}/{budget}/{fam}");
            trends.insert(
                format!("{key}/all-seeds"),
                Trend::fit("eff_dim", "relative_performance", &sel(None)),
            );
            for s in &seeds {
                let pts = sel(Some(*s));
                if !pts.is_empty() {
                    trends.insert(
                        format!("{key}/seed-{s}"),
                        Trend::fit("eff_dim", "relative_performance", &pts),
                    );
                }
            }
        }
    }

    let mut change: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for c in &ok {
        if let Some(v) = c.neff_change_pct {
            let e = change
                .entry(format!("{}/{}", c.family, c.method))
                .or_default();
            e.0 += v;
            e.1 += 1;
        }
    }

    Summary {
        schema_version: SCHEMA_VERSION,
        experiment: experiment.into(),
        config_hash: cells
            .first()
            .map(|c| c.config_hash.clone())
            .unwrap_or_default(),
        seeds,
        n_cells: cells.len(),
        failed_cells: cells
            .iter()
            .filter(|c| !c.is_ok())
            .map(|c| c.model_id.clone())
            .collect(),
        excluded_cells: cells
            .iter()
            .filter(|c| c.excluded)
            .map(|c| c.model_id.clone())
            .collect(),
        attack_scales: attacks
            .iter()
            .map(|a| (a.dataset.clone(), a.attack_scale))
            .collect(),
        trends,
        neff_change_pct_mean: change
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
    }
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// One point of a plot-data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: String,
    pub y: f64,
    pub series: String,
    pub excluded: bool,
}

/// Plot data keyed by file stem, plus summaries keyed by experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub figures: BTreeMap<String, Vec<PlotPoint>>,
    pub summaries: BTreeMap<String, Summary>,
}

fn push(figures: &mut BTreeMap<String, Vec<PlotPoint>>, name: &str, point: PlotPoint) {
    figures.entry(name.to_string()).or_default().push(point);
}

/// Builds plot data and summaries from sweep tables. Points without a
/// y value are skipped, so empty series never appear.
pub fn build_report(tables: &[Table]) -> ReportBundle {
    let mut cells: BTreeMap<String, Vec<CellRow>> = BTreeMap::new();
    let mut attacks: BTreeMap<String, Vec<AttackRow>> = BTreeMap::new();
    for t in tables {
        match t {
            Table::Cells(rows) => {
                for r in rows {
                    cells
                        .entry(r.experiment.clone())
                        .or_default()
                        .push(r.clone());
                }
            }
            Table::Attacks(rows) => {
                for r in rows {
                    attacks
                        .entry(r.experiment.clone())
                        .or_default()
                        .push(r.clone());
                }
            }
        }
    }
    let mut figures = BTreeMap::new();
    for (exp, rows) in &cells {
        for r in rows.iter().filter(|r| r.is_ok()) {
            match exp.as_str() {
                "scale" => {
                    if let (Some(p), Some(n)) = (r.param_count, r.eff_dim) {
                        let point = PlotPoint {
                            x: p.to_string(),
                            y: n,
                            series: format!("{}/{}", r.family, r.dataset),
                            excluded: r.excluded,
                        };
                        push(&mut figures, "neff_vs_params", point);
                    }
                }
                "methods" => {
                    if let Some(v) = r.neff_change_pct {
                        let point = PlotPoint {
                            x: r.method.clone(),
                            y: v,
                            series: format!("{}/w{:?}", r.family, r.width_multiplier),
                            excluded: r.excluded,
                        };
                        push(&mut figures, "neff_change_by_method", point);
                    }
                }
                _ => {}
            }
        }
    }
    for (exp, rows) in &attacks {
        let name = format!("pr_vs_neff_{exp}");
        for r in rows.iter().filter(|r| r.budget > 0.0) {
            if let Some(pr) = r.relative_performance {
                let label = if exp == "methods" {
                    &r.method
                } else {
                    &r.family
                };
                let point = PlotPoint {
                    x: format!("{:?}", r.eff_dim),
                    y: pr,
                    series: format!("{label}/{}/{}", r.attack, budget_label(r.budget)),
                    excluded: r.excluded,
                };
                push(&mut figures, &name, point);
            }
        }
    }
    let mut experiments: Vec<&String> = cells.keys().chain(attacks.keys()).collect();
    experiments.sort();
    experiments.dedup();
    let summaries = experiments
        .into_iter()
        .map(|e| {
            let c = cells.get(e).map(Vec::as_slice).unwrap_or_default();
            let a = attacks.get(e).map(Vec::as_slice).unwrap_or_default();
            (e.clone(), summarize(e, c, a))
        })
        .collect();
    ReportBundle { figures, summaries }
}

/// Reads sweep CSVs and writes one `<figure>.csv` per non-empty figure plus
/// `summary.json` into `out`. Returns the written paths.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let tables = inputs
        .iter()
        .map(|p| read_table_file(p))
        .collect::<Result<Vec<_>>>()?;
    let bundle = build_report(&tables);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (name, points) in &bundle.figures {
        let path = out.join(format!("{name}.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(f);
        for p in points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = out.join("summary.json");
    std::fs::write(&path, to_canonical_json(&bundle.summaries)?)
        .map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
