//! Long-format CSV ingestion and serialization.
//!
//! Epoch table: `subject_id, epoch, treatment, outcome, <covariates...>`, one row
//! per subject-epoch. Baseline table: `subject_id, <baseline...>`. Empty cells
//! are missing values, categorical cells hold labels, lines starting with `#`
//! are comments.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BaselineRecord, Cohort, CohortError, EpochRecord, Schema, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Filters {
    /// Minimum number of in-treatment (covariate-bearing) epochs.
    pub min_epochs: u32,
    /// Baseline fields that must be present; `None` means all of them.
    pub required_baseline: Option<Vec<String>>,
}

impl Default for Filters {
    fn default() -> Self {
        Self {
            min_epochs: 1,
            required_baseline: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub subject_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub exclusions: Vec<Exclusion>,
}

fn open(path: &Path) -> Result<File, CohortError> {
    File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_cohort(
    epochs_path: &Path,
    baseline_path: &Path,
    schema: &Schema,
    filters: &Filters,
) -> Result<LoadedCohort, CohortError> {
    read_cohort(
        open(epochs_path)?,
        &epochs_path.display().to_string(),
        open(baseline_path)?,
        &baseline_path.display().to_string(),
        schema,
        filters,
    )
}

struct Column {
    index: usize,
    categories: Option<Vec<String>>,
    bounds: Option<[f64; 2]>,
}

fn parse_cell(raw: &str, column: &Column, name: &str, path: &str, line: u64) -> Result<Option<f64>, CohortError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let bad = || CohortError::Parse {
        path: path.to_string(),
        line,
        column: name.to_string(),
        value: raw.to_string(),
    };
    match &column.categories {
        Some(cats) => cats
            .iter()
            .position(|c| c == raw)
            .map(|i| Some(i as f64))
            .ok_or_else(bad),
        None => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            if !v.is_finite() {
                return Err(bad());
            }
            Ok(Some(v))
        }
    }
}

fn parse_flag(raw: &str, name: &str, path: &str, line: u64) -> Result<bool, CohortError> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(CohortError::Parse {
            path: path.to_string(),
            line,
            column: name.to_string(),
            value: other.to_string(),
        }),
    }
}

fn header_map(
    reader: &mut csv::Reader<impl Read>,
    path: &str,
    expected: &[&str],
) -> Result<HashMap<String, usize>, CohortError> {
    let headers = reader
        .headers()
        .map_err(|source| CohortError::Csv {
            path: path.to_string(),
            source,
        })?
        .clone();
    let mut map = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if map.insert(h.trim().to_string(), i).is_some() {
            return Err(CohortError::ColumnMismatch {
                path: path.to_string(),
                detail: format!("duplicate column {h:?}"),
            });
        }
    }
    let missing: Vec<&str> = expected.iter().copied().filter(|e| !map.contains_key(*e)).collect();
    let extra: Vec<&String> = map.keys().filter(|k| !expected.contains(&k.as_str())).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CohortError::ColumnMismatch {
            path: path.to_string(),
            detail: format!("missing {missing:?}, unexpected {extra:?}"),
        });
    }
    Ok(map)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input)
}

struct RawRow {
    epoch: u32,
    values: Vec<Option<f64>>,
    treatment: bool,
    outcome: bool,
}

/// Parse and validate a cohort from two CSV sources.
pub fn read_cohort<E: Read, B: Read>(
    epochs: E,
    epochs_label: &str,
    baseline: B,
    baseline_label: &str,
    schema: &Schema,
    filters: &Filters,
) -> Result<LoadedCohort, CohortError> {
    schema.validate()?;
    let csv_err = |path: &str| {
        let path = path.to_string();
        move |source| CohortError::Csv {
            path: path.clone(),
            source,
        }
    };

    // baseline table
    let mut reader = csv_reader(baseline);
    let mut expected: Vec<&str> = vec!["subject_id"];
    expected.extend(schema.baseline.iter().map(|b| b.name.as_str()));
    let map = header_map(&mut reader, baseline_label, &expected)?;
    let id_col = map["subject_id"];
    let baseline_cols: Vec<Column> = schema
        .baseline
        .iter()
        .map(|b| Column {
            index: map[&b.name],
            categories: b.categories.clone(),
            bounds: None,
        })
        .collect();
    let mut baselines: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(baseline_label))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[id_col].to_string();
        let mut values = Vec::with_capacity(baseline_cols.len());
        for (col, spec) in baseline_cols.iter().zip(&schema.baseline) {
            values.push(parse_cell(&record[col.index], col, &spec.name, baseline_label, line)?);
        }
        if baselines.insert(id.clone(), values).is_some() {
            return Err(CohortError::ColumnMismatch {
                path: baseline_label.to_string(),
                detail: format!("duplicate baseline row for subject {id}"),
            });
        }
    }

    // epoch table
    let mut reader = csv_reader(epochs);
    let mut expected: Vec<&str> = vec!["subject_id", "epoch", "treatment", "outcome"];
    expected.extend(schema.covariates.iter().map(|c| c.name.as_str()));
    let map = header_map(&mut reader, epochs_label, &expected)?;
    let (id_col, epoch_col, a_col, y_col) = (map["subject_id"], map["epoch"], map["treatment"], map["outcome"]);
    let cov_cols: Vec<Column> = schema
        .covariates
        .iter()
        .map(|c| Column {
            index: map[&c.name],
            categories: c.categories.clone(),
            bounds: c.bounds,
        })
        .collect();

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<RawRow>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(epochs_label))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[id_col].to_string();
        let epoch: u32 = record[epoch_col].trim().parse().map_err(|_| CohortError::Parse {
            path: epochs_label.to_string(),
            line,
            column: "epoch".into(),
            value: record[epoch_col].to_string(),
        })?;
        let treatment = parse_flag(&record[a_col], "treatment", epochs_label, line)?;
        let outcome = parse_flag(&record[y_col], "outcome", epochs_label, line)?;
        let mut values = Vec::with_capacity(cov_cols.len());
        for (col, spec) in cov_cols.iter().zip(&schema.covariates) {
            let v = parse_cell(&record[col.index], col, &spec.name, epochs_label, line)?;
            if let (Some(v), Some([lo, hi])) = (v, col.bounds) {
                if v < lo || v > hi {
                    return Err(CohortError::OutOfBounds {
                        subject: id,
                        column: spec.name.clone(),
                        value: v,
                        lo,
                        hi,
                    });
                }
            }
            values.push(v);
        }
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        entry.push(RawRow {
            epoch,
            values,
            treatment,
            outcome,
        });
    }

    let required: Vec<usize> = match &filters.required_baseline {
        None => (0..schema.baseline.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                schema
                    .baseline_index(n)
                    .ok_or_else(|| CohortError::Schema(format!("unknown required baseline {n:?}")))
            })
            .collect::<Result<_, _>>()?,
    };

    let mut trajectories = Vec::with_capacity(order.len());
    let mut exclusions = Vec::new();
    for id in order {
        let mut raw = rows.remove(&id).unwrap_or_default();
        raw.sort_by_key(|r| r.epoch);
        if let Some(w) = raw.windows(2).find(|w| w[0].epoch == w[1].epoch) {
            return Err(CohortError::DuplicateKey {
                subject: id,
                epoch: w[0].epoch,
            });
        }
        let exclude = |reason: &str, exclusions: &mut Vec<Exclusion>| {
            exclusions.push(Exclusion {
                subject_id: id.clone(),
                reason: reason.to_string(),
            })
        };
        let Some(values) = baselines.get(&id) else {
            exclude("missing baseline record", &mut exclusions);
            continue;
        };
        if required.iter().any(|&i| values[i].is_none()) {
            exclude("missing required baseline covariate", &mut exclusions);
            continue;
        }
        if raw.first().is_some_and(|r| r.epoch == 0 && r.outcome) {
            exclude("event at epoch 0", &mut exclusions);
            continue;
        }

        let mut epochs = Vec::with_capacity(raw.len());
        let mut treated_before = true;
        let mut alive_before = true;
        for r in raw {
            let observable = alive_before && treated_before && !r.outcome && r.epoch < schema.horizon;
            let covariates = if observable {
                Some(r.values)
            } else if r.values.iter().all(Option::is_none) {
                None
            } else {
                // left for validation to report
                Some(r.values)
            };
            treated_before = r.treatment;
            alive_before = !r.outcome;
            epochs.push(EpochRecord {
                epoch: r.epoch,
                covariates,
                treatment: r.treatment,
                outcome: r.outcome,
            });
        }
        let trajectory = Trajectory {
            baseline: BaselineRecord {
                subject_id: id.clone(),
                values: values.clone(),
            },
            epochs,
        };
        trajectory.validate(schema)?;
        if (trajectory.observed_len() as u32) < filters.min_epochs {
            exclude("fewer than the minimum in-treatment epochs", &mut exclusions);
            continue;
        }
        trajectories.push(trajectory);
    }

    Ok(LoadedCohort {
        cohort: Cohort {
            schema: schema.clone(),
            trajectories,
        },
        exclusions,
    })
}

fn format_value(v: Option<f64>, categories: Option<&Vec<String>>) -> String {
    match (v, categories) {
        (None, _) => String::new(),
        (Some(v), Some(cats)) => cats[v as usize].clone(),
        (Some(v), None) => v.to_string(),
    }
}

fn io_err(source: std::io::Error) -> CohortError {
    CohortError::Io {
        path: "<output>".into(),
        source,
    }
}

/// Write a cohort as epoch and baseline CSV tables. `comment` is emitted as a
/// leading `#` line in both files.
pub fn write_cohort<E: Write, B: Write>(
    cohort: &Cohort,
    mut epochs: E,
    mut baseline: B,
    comment: Option<&str>,
) -> Result<(), CohortError> {
    let schema = &cohort.schema;
    if let Some(c) = comment {
        writeln!(epochs, "# {c}").map_err(io_err)?;
        writeln!(baseline, "# {c}").map_err(io_err)?;
    }
    let csv_err = |source| CohortError::Csv {
        path: "<output>".into(),
        source,
    };

    let mut w = csv::Writer::from_writer(&mut baseline);
    let mut header = vec!["subject_id".to_string()];
    header.extend(schema.baseline.iter().map(|b| b.name.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for t in &cohort.trajectories {
        let mut row = vec![t.baseline.subject_id.clone()];
        for (v, spec) in t.baseline.values.iter().zip(&schema.baseline) {
            row.push(format_value(*v, spec.categories.as_ref()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)?;
    drop(w);

    let mut w = csv::Writer::from_writer(&mut epochs);
    let mut header: Vec<String> = ["subject_id", "epoch", "treatment", "outcome"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(schema.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(csv_err)?;
    let blank = vec![None; schema.covariates.len()];
    for t in &cohort.trajectories {
        for e in &t.epochs {
            let mut row = vec![
                t.baseline.subject_id.clone(),
                e.epoch.to_string(),
                u8::from(e.treatment).to_string(),
                u8::from(e.outcome).to_string(),
            ];
            let values = e.covariates.as_ref().unwrap_or(&blank);
            for (v, spec) in values.iter().zip(&schema.covariates) {
                row.push(format_value(*v, spec.categories.as_ref()));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}
