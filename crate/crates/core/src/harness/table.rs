use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CELL_COLUMNS: [&str; 21] = [
    "schema_version",
    "experiment",
    "config_hash",
    "seed",
    "model_id",
    "family",
    "dataset",
    "width_multiplier",
    "param_count",
    "method",
    "awp",
    "extra_data(simple)",
    "z",
    "eff_dim",
    "eff_dim_k",
    "tail_bound",
    "neg_mass_fraction",
    "neff_change_pct",
    "clean_accuracy",
    "excluded",
    "status",
];

pub const ATTACK_COLUMNS: [&str; 19] = [
    "schema_version",
    "experiment",
    "config_hash",
    "seed",
    "model_id",
    "family",
    "dataset",
    "width_multiplier",
    "method",
    "eff_dim",
    "attack",
    "budget",
    "attack_scale",
    "effective_budget",
    "clean_accuracy",
    "attacked_accuracy",
    "relative_performance",
    "n_evaluated",
    "excluded",
];

/// One trained model: its spectrum summary and clean accuracy. Failed cells
/// keep their identifying fields and leave the measurements empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub model_id: String,
    pub family: String,
    pub dataset: String,
    pub width_multiplier: f64,
    pub param_count: Option<usize>,
    pub method: String,
    pub awp: bool,
    /// Extra same-distribution samples, not pseudo-labelled data.
    #[serde(rename = "extra_data(simple)")]
    pub extra_data: bool,
    pub z: f64,
    pub eff_dim: Option<f64>,
    pub eff_dim_k: Option<usize>,
    pub tail_bound: Option<f64>,
    pub neg_mass_fraction: Option<f64>,
    /// Relative to the standard, no-option cell with the same model and seed.
    pub neff_change_pct: Option<f64>,
    pub clean_accuracy: Option<f64>,
    pub excluded: bool,
    pub status: String,
}

impl CellRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// One attack setting evaluated on one cell. `budget` is ε before the
/// attack scale (or σ); `effective_budget` is what the attack used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub model_id: String,
    pub family: String,
    pub dataset: String,
    pub width_multiplier: f64,
    pub method: String,
    pub eff_dim: f64,
    pub attack: String,
    pub budget: f64,
    pub attack_scale: f64,
    pub effective_budget: f64,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub relative_performance: Option<f64>,
    pub n_evaluated: usize,
    pub excluded: bool,
}

fn method_rank(tag: &str) -> (usize, &str) {
    let base = tag.split('+').next().unwrap_or(tag);
    let r = match base {
        "standard" => 0,
        "at" => 1,
        "trades" => 2,
        _ => 3,
    };
    (r, tag)
}

pub(crate) fn cmp_cells(a: &CellRow, b: &CellRow) -> Ordering {
    (a.family.as_str(), a.dataset.as_str())
        .cmp(&(b.family.as_str(), b.dataset.as_str()))
        .then(a.width_multiplier.total_cmp(&b.width_multiplier))
        .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
        .then(a.seed.cmp(&b.seed))
}

pub(crate) fn cmp_attacks(a: &AttackRow, b: &AttackRow) -> Ordering {
    (a.family.as_str(), a.dataset.as_str())
        .cmp(&(b.family.as_str(), b.dataset.as_str()))
        .then(a.width_multiplier.total_cmp(&b.width_multiplier))
        .then(method_rank(&a.method).cmp(&method_rank(&b.method)))
        .then(a.seed.cmp(&b.seed))
        .then(a.attack.cmp(&b.attack))
        .then(a.budget.total_cmp(&b.budget))
}

fn write_rows<T: Serialize>(rows: &[T], columns: &[&str], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

pub fn write_cells(rows: &[CellRow], out: impl Write) -> Result<()> {
    write_rows(rows, &CELL_COLUMNS, out)
}

pub fn write_attacks(rows: &[AttackRow], out: impl Write) -> Result<()> {
    write_rows(rows, &ATTACK_COLUMNS, out)
}

/// Which table a CSV header belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Cells,
    Attacks,
}

/// Classifies a header, or names the first column that matches neither
/// schema.
pub fn classify_header(header: &[&str]) -> Result<TableKind> {
    if header == CELL_COLUMNS {
        return Ok(TableKind::Cells);
    }
    if header == ATTACK_COLUMNS {
        return Ok(TableKind::Attacks);
    }
    let common = |schema: &[&str]| {
        header
            .iter()
            .zip(schema)
            .take_while(|(a, b)| a == b)
            .count()
    };
    let (c, a) = (common(&CELL_COLUMNS), common(&ATTACK_COLUMNS));
    let schema: &[&str] = if a > c {
        &ATTACK_COLUMNS
    } else {
        &CELL_COLUMNS
    };
    let i = c.max(a);
    Err(match (schema.get(i), header.get(i)) {
        (Some(want), Some(got)) => Error::Schema {
            column: want.to_string(),
            reason: format!("found `{got}` at position {}", i + 1),
        },
        (Some(want), None) => Error::Schema {
            column: want.to_string(),
            reason: "missing".into(),
        },
        (None, Some(got)) => Error::Schema {
            column: got.to_string(),
            reason: "unexpected extra column".into(),
        },
        (None, None) => unreachable!("identical headers are classified above"),
    })
}

fn read_rows<T: DeserializeOwned>(
    rdr: &mut csv::Reader<impl Read>,
    columns: &[&str],
) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec.map_err(|e| {
            let column = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => {
                    err.field().and_then(|f| columns.get(f as usize))
                }
                _ => None,
            };
            match column {
                Some(c) => Error::Schema {
                    column: c.to_string(),
                    reason: e.to_string(),
                },
                None => Error::Csv(e),
            }
        })?);
    }
    Ok(rows)
}

/// Rows of either table, as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Table {
    Cells(Vec<CellRow>),
    Attacks(Vec<AttackRow>),
}

pub fn read_table(input: impl Read) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(match classify_header(&header)? {
        TableKind::Cells => Table::Cells(read_rows(&mut rdr, &CELL_COLUMNS)?),
        TableKind::Attacks => Table::Attacks(read_rows(&mut rdr, &ATTACK_COLUMNS)?),
    })
}

pub fn read_table_file(path: &Path) -> Result<Table> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cell(method: &str, seed: u64) -> CellRow {
        CellRow {
            schema_version: SCHEMA_VERSION,
            experiment: "methods".into(),
            config_hash: "0123456789abcdef".into(),
            seed,
            model_id: format!("mlp-w2-{method}-s{seed}"),
            family: "mlp".into(),
            dataset: "two-moons".into(),
            width_multiplier: 2.0,
            param_count: Some(354),
            method: method.into(),
            awp: false,
            extra_data: false,
            z: 1.0,
            eff_dim: Some(2.5),
            eff_dim_k: Some(100),
            tail_bound: Some(1e-9),
            neg_mass_fraction: Some(0.0),
            neff_change_pct: None,
            clean_accuracy: Some(0.97),
            excluded: false,
            status: "ok".into(),
        }
    }

    #[test]
    fn cells_round_trip_with_lf_endings() {
        let mut rows = vec![cell("standard", 0), cell("at+awp", 1)];
        rows[1].eff_dim = None;
        rows[1].status = "failed: diverged".into();
        let mut buf = Vec::new();
        write_cells(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.starts_with("schema_version,experiment,config_hash,seed,"));
        assert_eq!(read_table(&buf[..]).unwrap(), Table::Cells(rows));
    }

    #[test]
    fn header_errors_name_the_column() {
        let mut cols: Vec<&str> = CELL_COLUMNS.to_vec();
        cols[13] = "neff";
        match classify_header(&cols) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "eff_dim"),
            other => panic!("{other:?}"),
        }
        match classify_header(&CELL_COLUMNS[..5]) {
            Err(Error::Schema { column, reason }) => {
                assert_eq!(column, "family");
                assert_eq!(reason, "missing");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            classify_header(&ATTACK_COLUMNS).unwrap(),
            TableKind::Attacks
        );
    }

    #[test]
    fn bad_value_names_the_column() {
        let mut buf = Vec::new();
        write_cells(&[cell("standard", 0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(",2.5,", ",abc,");
        match read_table(text.as_bytes()) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "eff_dim"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn methods_sort_baseline_first() {
        let mut rows = [
            cell("trades", 0),
            cell("at+awp", 0),
            cell("standard", 1),
            cell("standard", 0),
            cell("at", 0),
        ];
        rows.sort_by(cmp_cells);
        let order: Vec<_> = rows.iter().map(|r| (r.method.as_str(), r.seed)).collect();
        assert_eq!(
            order,
            vec![
                ("standard", 0),
                ("standard", 1),
                ("at", 0),
                ("at+awp", 0),
                ("trades", 0)
            ]
        );
    }
}
