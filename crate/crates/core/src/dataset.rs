//! Long-format person-time panels: ingestion, validation and row access.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rules::{RuleError, RuleExpr};

/// Tokens read as a missing cell.
const MISSING_TOKENS: [&str; 3] = ["", "NA", "."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRole {
    Baseline,
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub role: CovariateRole,
    /// Ordered category labels; `None` for numeric covariates.
    pub levels: Option<Vec<String>>,
}

impl CovariateSpec {
    pub fn numeric(name: impl Into<String>, role: CovariateRole) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Numeric,
            role,
            levels: None,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        role: CovariateRole,
        levels: impl IntoIterator<Item = S>,
    ) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Categorical,
            role,
            levels: Some(levels.into_iter().map(Into::into).collect()),
        }
    }

    pub fn levels(&self) -> &[String] {
        self.levels.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{x}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

/// One person-time row.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub id: String,
    pub time: u32,
    pub treatment: u8,
    pub censored: u8,
    /// Covariate values in schema order.
    pub values: Vec<Value>,
    pub outcome: Option<f64>,
    pub(crate) lag: Lag,
}

/// Quantities derived from a subject's earlier rows, fixed when the full panel
/// is validated so they survive subsetting.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Lag {
    pub prev_treatment: u8,
    pub prev_censored: u8,
    /// Treatment values at all earlier times, oldest first, as `0`/`1` chars.
    pub history: String,
}

impl PanelRecord {
    pub fn new(
        id: impl Into<String>,
        time: u32,
        treatment: u8,
        censored: u8,
        values: Vec<Value>,
    ) -> Self {
        PanelRecord {
            id: id.into(),
            time,
            treatment,
            censored,
            values,
            outcome: None,
            lag: Lag::default(),
        }
    }

    pub fn with_outcome(mut self, outcome: Option<f64>) -> Self {
        self.outcome = outcome;
        self
    }

    /// A_{t-1}; 0 at a subject's first time.
    pub fn prev_treatment(&self) -> u8 {
        self.lag.prev_treatment
    }

    /// C_{t-1}; 0 at a subject's first time.
    pub fn prev_censored(&self) -> u8 {
        self.lag.prev_censored
    }

    /// Observed treatment history strictly before this row.
    pub fn treatment_history(&self) -> &str {
        &self.lag.history
    }
}

/// Names of the structural columns, kept so a panel can be written back out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub id: String,
    pub time: String,
    pub treatment: String,
    pub censoring: Option<String>,
    pub outcome: Option<String>,
}

impl Default for ColumnNames {
    fn default() -> Self {
        ColumnNames {
            id: "id".into(),
            time: "time".into(),
            treatment: "treatment".into(),
            censoring: Some("censored".into()),
            outcome: None,
        }
    }
}

/// Column mapping for [`load_panel`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub id: String,
    pub time: String,
    pub treatment: String,
    #[serde(default)]
    pub censoring: Option<String>,
    #[serde(default)]
    pub outcome: Option<String>,
    #[serde(default)]
    pub baseline: Vec<String>,
    #[serde(default)]
    pub time_varying: Vec<String>,
    /// Covariates forced to categorical; others are numeric when every value parses.
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Drop rows with missing covariates (and the subject's later rows) instead of failing.
    #[serde(default)]
    pub drop_incomplete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    /// 1-based data row (header excluded), when the problem is tied to a row.
    pub row: Option<usize>,
    pub message: String,
}

impl Issue {
    fn at(row: usize, message: impl Into<String>) -> Self {
        Issue {
            row: Some(row),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Issue {
            row: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing mapped column '{0}'")]
    MissingColumn(String),
    #[error("{}", format_issues(.0))]
    Invalid(Vec<Issue>),
    #[error("unknown record id={id} t={time}")]
    UnknownRecord { id: String, time: u32 },
    #[error(transparent)]
    Predicate(#[from] RuleError),
}

fn format_issues(issues: &[Issue]) -> String {
    let mut out = format!("{} validation error(s)", issues.len());
    for issue in issues {
        out.push_str("\n  ");
        out.push_str(&issue.message);
    }
    out
}

/// Validated long-format panel. Immutable once built.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    schema: Vec<CovariateSpec>,
    columns: ColumnNames,
    records: Vec<PanelRecord>,
    time_points: Vec<u32>,
    index: HashMap<(String, u32), usize>,
}

impl PanelDataset {
    /// Validates the panel invariants and derives lagged quantities.
    ///
    /// Records may arrive in any order; they are stored sorted by subject
    /// (first appearance) and time.
    pub fn new(
        schema: Vec<CovariateSpec>,
        columns: ColumnNames,
        records: Vec<PanelRecord>,
    ) -> Result<Self, DataError> {
        let mut issues = check_schema(&schema);
        for (i, rec) in records.iter().enumerate() {
            issues.extend(check_values(&schema, rec, i + 1));
        }
        if !issues.is_empty() {
            return Err(DataError::Invalid(issues));
        }
        Self::assemble(schema, columns, records, None)
    }

    /// `rows[i]` is the source row number of `records[i]`, used in messages.
    fn assemble(
        schema: Vec<CovariateSpec>,
        columns: ColumnNames,
        records: Vec<PanelRecord>,
        rows: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let row_of = |i: usize| rows.as_ref().map_or(i + 1, |r| r[i]);
        let mut issues = Vec::new();

        let mut order: Vec<String> = Vec::new();
        let mut by_subject: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut seen: HashMap<(&str, u32), usize> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            if let Some(&first) = seen.get(&(rec.id.as_str(), rec.time)) {
                issues.push(Issue::at(
                    row_of(i),
                    format!(
                        "duplicate record id={} t={} at row {} (first at row {})",
                        rec.id,
                        rec.time,
                        row_of(i),
                        row_of(first)
                    ),
                ));
                continue;
            }
            seen.insert((rec.id.as_str(), rec.time), i);
            let entry = by_subject.entry(rec.id.as_str()).or_insert_with(|| {
                order.push(rec.id.clone());
                Vec::new()
            });
            entry.push(i);
        }

        let time_points: Vec<u32> = records
            .iter()
            .map(|r| r.time)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let baseline: Vec<usize> = schema
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == CovariateRole::Baseline)
            .map(|(i, _)| i)
            .collect();

        let mut sorted = Vec::with_capacity(records.len());
        for id in &order {
            let mut rows_of = by_subject[id.as_str()].clone();
            rows_of.sort_by_key(|&i| records[i].time);
            let first = records[rows_of[0]].time;
            if first != time_points[0] {
                issues.push(Issue::general(format!(
                    "late entry: id={id} first observed at t={first}, study starts at t={}",
                    time_points[0]
                )));
            }
            let mut expected = time_points.iter();
            let mut censored_at: Option<u32> = None;
            for &i in &rows_of {
                let rec = &records[i];
                for &t in expected.by_ref() {
                    if t == rec.time {
                        break;
                    }
                    if t > first {
                        issues.push(Issue::general(format!("time gap: id={id} missing t={t}")));
                    }
                }
                if let Some(tc) = censored_at {
                    issues.push(Issue::at(
                        row_of(i),
                        format!(
                            "record after censoring: id={id} t={} (censored at t={tc})",
                            rec.time
                        ),
                    ));
                }
                if rec.censored == 1 && censored_at.is_none() {
                    censored_at = Some(rec.time);
                }
                for &b in &baseline {
                    if rec.values[b] != records[rows_of[0]].values[b] {
                        issues.push(Issue::at(
                            row_of(i),
                            format!(
                                "baseline covariate '{}' varies within id={id}",
                                schema[b].name
                            ),
                        ));
                    }
                }
            }
            sorted.extend(rows_of);
        }
        if !issues.is_empty() {
            return Err(DataError::Invalid(issues));
        }

        let mut slots: Vec<Option<PanelRecord>> = records.into_iter().map(Some).collect();
        let mut out: Vec<PanelRecord> = Vec::with_capacity(sorted.len());
        for i in sorted {
            let mut rec = slots[i].take().expect("each record placed once");
            rec.lag = match out.last() {
                Some(prev) if prev.id == rec.id => {
                    let mut history = prev.lag.history.clone();
                    history.push(if prev.treatment == 1 { '1' } else { '0' });
                    Lag {
                        prev_treatment: prev.treatment,
                        prev_censored: prev.censored,
                        history,
                    }
                }
                _ => Lag::default(),
            };
            out.push(rec);
        }
        Ok(Self::from_parts(schema, columns, out, time_points))
    }

    fn from_parts(
        schema: Vec<CovariateSpec>,
        columns: ColumnNames,
        records: Vec<PanelRecord>,
        time_points: Vec<u32>,
    ) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.id.clone(), r.time), i))
            .collect();
        PanelDataset {
            schema,
            columns,
            records,
            time_points,
            index,
        }
    }

    pub fn schema(&self) -> &[CovariateSpec] {
        &self.schema
    }

    pub fn columns(&self) -> &ColumnNames {
        &self.columns
    }

    pub fn records(&self) -> &[PanelRecord] {
        &self.records
    }

    pub fn time_points(&self) -> &[u32] {
        &self.time_points
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s.name == name)
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateSpec> {
        self.schema.iter().find(|s| s.name == name)
    }

    /// Subject ids in storage order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for rec in &self.records {
            if ids.last() != Some(&rec.id.as_str()) {
                ids.push(&rec.id);
            }
        }
        ids
    }

    pub fn record(&self, id: &str, time: u32) -> Option<&PanelRecord> {
        self.index
            .get(&(id.to_string(), time))
            .map(|&i| &self.records[i])
    }

    /// A_{t-1} for the subject, 0 at its first observed time.
    pub fn lagged_treatment(&self, id: &str, time: u32) -> Result<u8, DataError> {
        self.record(id, time)
            .map(PanelRecord::prev_treatment)
            .ok_or_else(|| DataError::UnknownRecord {
                id: id.to_string(),
                time,
            })
    }

    /// Rows satisfying a parsed predicate (see [`crate::rules::parse_predicate`]).
    pub fn subset(&self, predicate: &RuleExpr) -> Result<PanelDataset, DataError> {
        let mut kept = Vec::new();
        for rec in &self.records {
            if predicate.eval(rec)? {
                kept.push(rec.clone());
            }
        }
        Ok(self.with_records(kept))
    }

    /// Rows satisfying an arbitrary closure.
    pub fn subset_by(&self, mut keep: impl FnMut(&PanelRecord) -> bool) -> PanelDataset {
        let kept = self.records.iter().filter(|r| keep(r)).cloned().collect();
        self.with_records(kept)
    }

    fn with_records(&self, records: Vec<PanelRecord>) -> PanelDataset {
        Self::from_parts(
            self.schema.clone(),
            self.columns.clone(),
            records,
            self.time_points.clone(),
        )
    }

    /// Rows where treatment was stopped after initiation (`1 -> 0`).
    ///
    /// Not an ingestion failure: monotone analyses use this as a diagnostic.
    pub fn monotonicity_issues(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.prev_treatment() == 1 && r.treatment == 0)
            .map(|r| format!("non-monotone treatment: id={} stops at t={}", r.id, r.time))
            .collect()
    }

    /// Writes the panel in its own column layout, schema order for covariates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let mut header = vec![
            self.columns.id.clone(),
            self.columns.time.clone(),
            self.columns.treatment.clone(),
        ];
        if let Some(c) = &self.columns.censoring {
            header.push(c.clone());
        }
        if let Some(c) = &self.columns.outcome {
            header.push(c.clone());
        }
        header.extend(self.schema.iter().map(|s| s.name.clone()));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.id.clone(), rec.time.to_string(), rec.treatment.to_string()];
            if self.columns.censoring.is_some() {
                row.push(rec.censored.to_string());
            }
            if self.columns.outcome.is_some() {
                row.push(rec.outcome.map(|y| y.to_string()).unwrap_or_default());
            }
            row.extend(rec.values.iter().map(ToString::to_string));
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: "<output>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn write_panel(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_schema(schema: &[CovariateSpec]) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut names = BTreeSet::new();
    for spec in schema {
        if !names.insert(spec.name.as_str()) {
            issues.push(Issue::general(format!("duplicate covariate '{}'", spec.name)));
        }
        if spec.kind == CovariateKind::Categorical && spec.levels().len() < 2 {
            issues.push(Issue::general(format!(
                "categorical covariate '{}' needs at least 2 levels",
                spec.name
            )));
        }
    }
    issues
}

fn check_values(schema: &[CovariateSpec], rec: &PanelRecord, row: usize) -> Vec<Issue> {
    let mut issues = Vec::new();
    if rec.treatment > 1 {
        issues.push(Issue::at(row, format!("non-binary treatment at row {row}")));
    }
    if rec.censored > 1 {
        issues.push(Issue::at(row, format!("non-binary censoring at row {row}")));
    }
    if rec.values.len() != schema.len() {
        issues.push(Issue::at(
            row,
            format!(
                "row {row} has {} covariate values, schema has {}",
                rec.values.len(),
                schema.len()
            ),
        ));
        return issues;
    }
    for (spec, value) in schema.iter().zip(&rec.values) {
        match (spec.kind, value) {
            (CovariateKind::Numeric, Value::Num(x)) if x.is_finite() => {}
            (CovariateKind::Categorical, Value::Cat(s)) if spec.levels().contains(s) => {}
            _ => issues.push(Issue::at(
                row,
                format!("invalid value '{value}' for '{}' at row {row}", spec.name),
            )),
        }
    }
    issues
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

fn parse_binary(cell: &str) -> Option<u8> {
    match cell.trim() {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

/// Sorted category labels: numerically when every label is a number.
fn sort_levels(labels: BTreeSet<String>) -> Vec<String> {
    let mut levels: Vec<String> = labels.into_iter().collect();
    if levels.iter().all(|l| l.parse::<f64>().is_ok()) {
        levels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    }
    levels
}

/// Reads a delimited long-format file and validates it.
pub fn load_panel(path: &Path, config: &PanelConfig) -> Result<PanelDataset, DataError> {
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    read_panel(&text, config)
}

/// [`load_panel`] over in-memory text.
pub fn read_panel(text: &str, config: &PanelConfig) -> Result<PanelDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let id_col = col(&config.id)?;
    let time_col = col(&config.time)?;
    let treat_col = col(&config.treatment)?;
    let cens_col = config.censoring.as_deref().map(&col).transpose()?;
    let out_col = config.outcome.as_deref().map(&col).transpose()?;
    let mut covariates: Vec<(String, CovariateRole, usize)> = Vec::new();
    for (names, role) in [
        (&config.baseline, CovariateRole::Baseline),
        (&config.time_varying, CovariateRole::TimeVarying),
    ] {
        for name in names {
            covariates.push((name.clone(), role, col(name)?));
        }
    }

    let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;

    // Drop incomplete rows first so kind inference sees only kept values.
    let mut keep = vec![true; rows.len()];
    let mut issues = Vec::new();
    let mut dropped_from: HashMap<String, u32> = HashMap::new();
    for (i, row) in rows.iter().enumerate() {
        let incomplete: Vec<&str> = covariates
            .iter()
            .filter(|(_, _, c)| is_missing(&row[*c]))
            .map(|(n, _, _)| n.as_str())
            .collect();
        if incomplete.is_empty() {
            continue;
        }
        if config.drop_incomplete {
            keep[i] = false;
            if let Ok(t) = row[time_col].parse::<u32>() {
                let entry = dropped_from.entry(row[id_col].to_string()).or_insert(t);
                *entry = (*entry).min(t);
            }
        } else {
            issues.push(Issue::at(
                i + 1,
                format!("missing value for {} at row {}", incomplete.join(", "), i + 1),
            ));
        }
    }
    if config.drop_incomplete {
        let mut dropped = 0usize;
        for (i, row) in rows.iter().enumerate() {
            let later = match (dropped_from.get(&row[id_col]), row[time_col].parse::<u32>()) {
                (Some(&t0), Ok(t)) => t >= t0,
                _ => false,
            };
            if later {
                keep[i] = false;
            }
            if !keep[i] {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::info!("dropped {dropped} incomplete or post-dropout row(s)");
        }
    }

    let mut schema = Vec::new();
    for (name, role, c) in &covariates {
        let kept_cells = rows
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(r, _)| &r[*c])
            .filter(|cell| !is_missing(cell));
        let forced = config.categorical.iter().any(|n| n == name);
        let cells: Vec<&str> = kept_cells.collect();
        if !forced && cells.iter().all(|s| s.parse::<f64>().is_ok()) {
            schema.push(CovariateSpec::numeric(name.clone(), *role));
        } else {
            let labels = cells.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
            schema.push(CovariateSpec::categorical(
                name.clone(),
                *role,
                sort_levels(labels),
            ));
        }
    }
    issues.extend(check_schema(&schema));

    let mut records = Vec::new();
    let mut row_numbers = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let n = i + 1;
        let time = match row[time_col].parse::<u32>() {
            Ok(t) => t,
            Err(_) => {
                issues.push(Issue::at(n, format!("invalid time '{}' at row {n}", &row[time_col])));
                continue;
            }
        };
        let Some(treatment) = parse_binary(&row[treat_col]) else {
            issues.push(Issue::at(n, format!("non-binary treatment at row {n}")));
            continue;
        };
        let censored = match cens_col {
            None => 0,
            Some(c) => match parse_binary(&row[c]) {
                Some(v) => v,
                None => {
                    issues.push(Issue::at(n, format!("non-binary censoring at row {n}")));
                    continue;
                }
            },
        };
        let outcome = match out_col {
            Some(c) if !is_missing(&row[c]) => match row[c].parse::<f64>() {
                Ok(y) => Some(y),
                Err(_) => {
                    issues.push(Issue::at(n, format!("non-numeric outcome at row {n}")));
                    continue;
                }
            },
            _ => None,
        };
        let values = covariates
            .iter()
            .zip(&schema)
            .map(|((_, _, c), spec)| match spec.kind {
                CovariateKind::Numeric => Value::Num(row[*c].parse().unwrap_or(f64::NAN)),
                CovariateKind::Categorical => Value::Cat(row[*c].to_string()),
            })
            .collect();
        records.push(
            PanelRecord::new(&row[id_col], time, treatment, censored, values).with_outcome(outcome),
        );
        row_numbers.push(n);
    }
    if !issues.is_empty() {
        return Err(DataError::Invalid(issues));
    }
    if records.is_empty() {
        return Err(DataError::Invalid(vec![Issue::general("no data rows")]));
    }
    let columns = ColumnNames {
        id: config.id.clone(),
        time: config.time.clone(),
        treatment: config.treatment.clone(),
        censoring: config.censoring.clone(),
        outcome: config.outcome.clone(),
    };
    PanelDataset::assemble(schema, columns, records, Some(row_numbers))
}

/// Reshapes a wide table (`<stem>_<t>` columns) into long format.
///
/// Columns matching a stem are spread over time; every other column except
/// `id` is copied to each row. A time is emitted for a subject only when at
/// least one of its stem cells is present.
pub fn wide_to_long(text: &str, id: &str, stems: &[String], time_name: &str) -> Result<String, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let id_col = headers
        .iter()
        .position(|h| h == id)
        .ok_or_else(|| DataError::MissingColumn(id.to_string()))?;

    // stem -> time -> column
    let mut spread: BTreeMap<u32, HashMap<&str, usize>> = BTreeMap::new();
    let mut fixed = Vec::new();
    for (c, h) in headers.iter().enumerate() {
        if c == id_col {
            continue;
        }
        let matched = stems.iter().find_map(|stem| {
            h.strip_prefix(stem.as_str())
                .and_then(|rest| rest.strip_prefix('_'))
                .and_then(|t| t.parse::<u32>().ok())
                .map(|t| (stem.as_str(), t))
        });
        match matched {
            Some((stem, t)) => {
                spread.entry(t).or_default().insert(stem, c);
            }
            None => fixed.push(c),
        }
    }
    for stem in stems {
        if !spread.values().any(|m| m.contains_key(stem.as_str())) {
            return Err(DataError::MissingColumn(format!("{stem}_<t>")));
        }
    }

    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec![id.to_string(), time_name.to_string()];
    header.extend(stems.iter().cloned());
    header.extend(fixed.iter().map(|&c| headers[c].clone()));
    w.write_record(&header)?;
    for row in reader.records() {
        let row = row?;
        for (t, cols) in &spread {
            let cells: Vec<&str> = stems
                .iter()
                .map(|s| cols.get(s.as_str()).map_or("", |&c| &row[c]))
                .collect();
            if cells.iter().all(|c| is_missing(c)) {
                continue;
            }
            let mut out = vec![row[id_col].to_string(), t.to_string()];
            out.extend(cells.iter().map(|c| c.to_string()));
            out.extend(fixed.iter().map(|&c| row[c].to_string()));
            w.write_record(&out)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| DataError::Io {
        path: "<buffer>".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::parse_predicate;

    fn config() -> PanelConfig {
        PanelConfig {
            id: "id".into(),
            time: "t".into(),
            treatment: "a".into(),
            censoring: Some("c".into()),
            baseline: vec!["sex".into()],
            time_varying: vec!["z".into()],
            ..Default::default()
        }
    }

    #[test]
    fn smallest_panel() {
        let text = "id,t,a,c,sex,z\n1,0,0,0,m,1.5\n1,1,0,0,m,2\n1,2,1,0,m,3\n";
        let mut cfg = config();
        cfg.categorical = vec!["sex".into()];
        // single observed level is not enough for a categorical covariate
        assert!(read_panel(text, &cfg).is_err());
        cfg.baseline.clear();
        let ds = read_panel(text, &cfg).unwrap();
        assert_eq!(ds.subjects().len(), 1);
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.time_points(), &[0, 1, 2]);
    }

    #[test]
    fn reports_time_gap() {
        let text = "id,t,a,c,sex,z\n7,0,0,0,m,1\n7,2,0,0,m,1\n8,0,0,0,f,1\n8,1,0,0,f,1\n";
        let err = read_panel(text, &config()).unwrap_err();
        let DataError::Invalid(issues) = err else { panic!("{err}") };
        assert!(issues.iter().any(|i| i.message == "time gap: id=7 missing t=1"));
    }

    #[test]
    fn reports_non_binary_treatment_row() {
        let mut text = String::from("id,t,a,c,sex,z\n");
        for i in 1..=13 {
            text.push_str(&format!("{i},0,0,0,m,1\n"));
        }
        text.push_str("14,0,2,0,f,1\n");
        let err = read_panel(&text, &config()).unwrap_err();
        let DataError::Invalid(issues) = err else { panic!("{err}") };
        assert_eq!(issues[0].message, "non-binary treatment at row 14");
        assert_eq!(issues[0].row, Some(14));
    }

    #[test]
    fn rejects_duplicates_post_censoring_and_missing_columns() {
        let dup = "id,t,a,c,sex,z\n1,0,0,0,m,1\n1,0,0,0,m,1\n2,0,0,0,f,1\n";
        assert!(matches!(read_panel(dup, &config()), Err(DataError::Invalid(_))));

        let cens = "id,t,a,c,sex,z\n1,0,0,1,m,1\n1,1,0,0,m,1\n2,0,0,0,f,1\n2,1,0,0,f,1\n";
        let DataError::Invalid(issues) = read_panel(cens, &config()).unwrap_err() else {
            panic!()
        };
        assert!(issues[0].message.starts_with("record after censoring: id=1 t=1"));

        let mut cfg = config();
        cfg.treatment = "art".into();
        assert!(matches!(
            read_panel(dup, &cfg),
            Err(DataError::MissingColumn(c)) if c == "art"
        ));
    }

    #[test]
    fn late_entry_and_varying_baseline() {
        let late = "id,t,a,c,sex,z\n1,0,0,0,m,1\n1,1,0,0,m,1\n2,1,0,0,f,1\n";
        let DataError::Invalid(issues) = read_panel(late, &config()).unwrap_err() else {
            panic!()
        };
        assert!(issues[0].message.starts_with("late entry: id=2"));

        let varying = "id,t,a,c,sex,z\n1,0,0,0,m,1\n1,1,0,0,f,1\n";
        let DataError::Invalid(issues) = read_panel(varying, &config()).unwrap_err() else {
            panic!()
        };
        assert!(issues[0].message.contains("'sex' varies"));
    }

    #[test]
    fn missing_values_rejected_or_dropped() {
        let text = "id,t,a,c,sex,z\n1,0,0,0,m,1\n1,1,0,0,m,NA\n1,2,0,0,m,3\n2,0,0,0,f,1\n2,1,0,0,f,2\n";
        assert!(read_panel(text, &config()).is_err());
        let mut cfg = config();
        cfg.drop_incomplete = true;
        let ds = read_panel(text, &cfg).unwrap();
        // subject 1 leaves at its first incomplete row
        assert_eq!(ds.len(), 3);
        assert!(ds.record("1", 2).is_none());
    }

    #[test]
    fn tab_delimited_input() {
        let text = "id\tt\ta\tc\tsex\tz\n1\t0\t0\t0\tm\t1\n2\t0\t1\t0\tf\t2\n";
        let ds = read_panel(text, &config()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.covariate("sex").unwrap().levels(), &["f", "m"]);
    }

    fn three_step() -> PanelDataset {
        let text = "id,t,a,c,sex,z\n\
                    1,0,0,0,m,1\n1,1,0,0,m,1\n1,2,1,0,m,1\n\
                    2,0,0,0,f,1\n2,1,1,0,f,1\n2,2,1,0,f,1\n";
        read_panel(text, &config()).unwrap()
    }

    #[test]
    fn lagged_treatment_lookup() {
        let ds = three_step();
        assert_eq!(ds.lagged_treatment("1", 2).unwrap(), 0);
        assert_eq!(ds.lagged_treatment("2", 2).unwrap(), 1);
        assert_eq!(ds.lagged_treatment("2", 0).unwrap(), 0);
        assert!(ds.lagged_treatment("3", 0).is_err());
        assert_eq!(ds.record("2", 2).unwrap().treatment_history(), "01");
    }

    #[test]
    fn subset_by_predicates() {
        let ds = three_step();
        let p = parse_predicate("time == 2", ds.schema()).unwrap();
        let sub = ds.subset(&p).unwrap();
        assert!(sub.records().iter().all(|r| r.time == 2));
        assert_eq!(sub.len(), 2);

        // subject 2 has A = (0,1,1): prev_treatment == 0 keeps t=0 and t=1
        let p = parse_predicate("prev_treatment == 0", ds.schema()).unwrap();
        let sub = ds.subset(&p).unwrap();
        let times: Vec<u32> = sub.records().iter().filter(|r| r.id == "2").map(|r| r.time).collect();
        assert_eq!(times, vec![0, 1]);

        let p = parse_predicate("time < 0", ds.schema()).unwrap();
        let empty = ds.subset(&p).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.schema(), ds.schema());

        assert!(parse_predicate("bogus == 1", ds.schema()).is_err());
    }

    #[test]
    fn monotonicity_diagnostic() {
        let text = "id,t,a,c,sex,z\n1,0,0,0,m,1\n1,1,1,0,m,1\n1,2,0,0,m,1\n2,0,0,0,f,1\n";
        let ds = read_panel(text, &config()).unwrap();
        assert_eq!(ds.monotonicity_issues(), vec!["non-monotone treatment: id=1 stops at t=2"]);
    }

    #[test]
    fn reshape_wide_panel() {
        let wide = "id,sex,a_0,a_1,z_0,z_1\n1,m,0,1,5,6\n2,f,0,,3,\n";
        let long = wide_to_long(wide, "id", &["a".into(), "z".into()], "t").unwrap();
        assert_eq!(long, "id,t,a,z,sex\n1,0,0,5,m\n1,1,1,6,m\n2,0,0,3,f\n");
    }
}
