//! Plot-data export: run records in, CSV tables out.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! re-imported value parses back to exactly the same `f64`.

use std::fmt;
use std::str::FromStr;

use crate::experiments::{
    EntropyScanPayload, MissingClassPayload, ProjectPayload, SweetSpotPayload, TransferSweepPayload,
};
use crate::record::MetricsRecord;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Mean soft-label entropy against temperature, per teacher.
    Fig3,
    /// Student accuracy against transfer-set size, per teacher.
    Fig4,
    /// Entropy and accuracy over the batch × epoch surface.
    Fig6,
    /// Fewest examples per class reaching the target accuracy.
    Fig8,
    /// Missing-class accuracy, teachers × temperatures.
    Table4To6,
    Projection,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Fig3,
        Target::Fig4,
        Target::Fig6,
        Target::Fig8,
        Target::Table4To6,
        Target::Projection,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Target::Fig3 => "fig3",
            Target::Fig4 => "fig4",
            Target::Fig6 => "fig6",
            Target::Fig8 => "fig8",
            Target::Table4To6 => "table4-6",
            Target::Projection => "projection",
        }
    }

    /// Experiment kind whose records feed this target.
    pub fn experiment(self) -> &'static str {
        match self {
            Target::Fig3 => "entropy-scan",
            Target::Fig4 | Target::Fig8 => "transfer-sweep",
            Target::Fig6 => "sweet-spot",
            Target::Table4To6 => "missing-class",
            Target::Projection => "project",
        }
    }

    pub fn header(self) -> &'static [&'static str] {
        match self {
            Target::Fig3 => &["dataset", "teacher", "T", "mean_entropy", "std"],
            Target::Fig4 => &["dataset", "teacher", "per_class", "accuracy"],
            Target::Fig6 => &["dataset", "batch", "epochs", "T", "entropy", "accuracy"],
            Target::Fig8 => &["dataset", "teacher", "target_accuracy", "required_per_class"],
            Target::Table4To6 => &["dataset", "missing_class", "teacher", "T", "accuracy"],
            Target::Projection => &["teacher", "x", "y", "class"],
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Target::ALL.into_iter().find(|t| t.id() == s).ok_or_else(|| {
            let ids: Vec<&str> = Target::ALL.iter().map(|t| t.id()).collect();
            format!("unknown export target '{s}' (expected one of: {})", ids.join(", "))
        })
    }
}

/// A header and string cells; numeric cells hold round-trip decimals and
/// missing values are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses what `to_csv` writes (no quoting: cells never contain commas).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| CliError::Data("empty CSV".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(CliError::Data(format!(
                    "CSV row {} has {} cells, header has {}",
                    i + 1,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    /// Column `name` parsed as `f64` (empty cells are `None`).
    pub fn numeric_column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let col = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| {
                let cell = &r[col];
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse()
                        .map(Some)
                        .map_err(|_| CliError::Data(format!("column {name}: '{cell}' is not a number")))
                }
            })
            .collect()
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn payload<T: serde::de::DeserializeOwned>(r: &MetricsRecord) -> Result<T> {
    serde_json::from_value(r.payload.clone())
        .map_err(|e| CliError::Data(format!("{} record {} has an unreadable payload: {e}", r.experiment, r.config_hash)))
}

/// Records feeding `target`, all from one configuration. Reruns of the same
/// configuration collapse to one record; their payloads must agree.
pub fn select<'a>(records: &'a [MetricsRecord], target: Target) -> Result<Vec<&'a MetricsRecord>> {
    let matching: Vec<&MetricsRecord> = records.iter().filter(|r| r.experiment == target.experiment()).collect();
    let Some(first) = matching.first() else {
        return Err(CliError::Data(format!(
            "nothing to export: no {} records for target {target}",
            target.experiment()
        )));
    };
    if let Some(other) = matching.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(CliError::Data(format!(
            "mixed-config records rejected: {} and {} come from different configurations",
            first.config_hash, other.config_hash
        )));
    }
    if matching.iter().any(|r| r.payload != first.payload) {
        return Err(CliError::Data(format!(
            "records of configuration {} disagree on their results",
            first.config_hash
        )));
    }
    Ok(vec![*first])
}

pub fn export(records: &[MetricsRecord], target: Target) -> Result<Table> {
    let chosen = select(records, target)?;
    let mut rows = Vec::new();
    for r in chosen {
        let dataset = r.config.dataset.id.id().to_string();
        match target {
            Target::Fig3 => {
                let p: EntropyScanPayload = payload(r)?;
                for t in &p.teachers {
                    for pt in &t.curve.points {
                        rows.push(vec![
                            dataset.clone(),
                            t.teacher.name.clone(),
                            num(pt.temperature),
                            num(pt.mean),
                            num(pt.std),
                        ]);
                    }
                }
            }
            Target::Fig4 => {
                let p: TransferSweepPayload = payload(r)?;
                for t in &p.teachers {
                    for pt in &t.points {
                        rows.push(vec![
                            dataset.clone(),
                            t.teacher.name.clone(),
                            pt.per_class.to_string(),
                            num(pt.accuracy),
                        ]);
                    }
                }
            }
            Target::Fig8 => {
                let p: TransferSweepPayload = payload(r)?;
                let Some(target_accuracy) = p.target_accuracy else {
                    return Err(CliError::Data(format!(
                        "record {} has no target_accuracy; fig8 needs one",
                        r.config_hash
                    )));
                };
                for t in &p.teachers {
                    rows.push(vec![
                        dataset.clone(),
                        t.teacher.name.clone(),
                        num(target_accuracy),
                        opt(t.required_per_class),
                    ]);
                }
            }
            Target::Fig6 => {
                let p: SweetSpotPayload = payload(r)?;
                for c in &p.surface.cells {
                    rows.push(vec![
                        dataset.clone(),
                        c.batch.to_string(),
                        c.epochs.to_string(),
                        num(p.surface.reference_t),
                        opt(c.entropy().map(num)),
                        opt(c.accuracy().map(num)),
                    ]);
                }
            }
            Target::Table4To6 => {
                let p: MissingClassPayload = payload(r)?;
                for c in &p.cells {
                    rows.push(vec![
                        dataset.clone(),
                        p.class.to_string(),
                        c.teacher.clone(),
                        num(c.temperature),
                        num(c.missing_accuracy),
                    ]);
                }
            }
            Target::Projection => {
                let p: ProjectPayload = payload(r)?;
                for t in &p.teachers {
                    for (pt, class) in t.points.iter().zip(&t.classes) {
                        rows.push(vec![t.teacher.name.clone(), num(pt[0]), num(pt[1]), class.to_string()]);
                    }
                }
            }
        }
    }
    Ok(Table {
        header: target.header().iter().map(|h| h.to_string()).collect(),
        rows,
    })
}
