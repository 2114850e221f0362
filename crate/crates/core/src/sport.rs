//! Sequential checks: per-time (or pooled) positivity trees on the rows that
//! are still following an intervention rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CovariateKind, PanelDataset, PanelRecord, Value};
use crate::par;
use crate::port::{run_port, CheckLevels, PortConfig, PortError, Subgroup};
use crate::report::{trajectory_summary, TrajectorySummary};
use crate::rules::{InterventionRule, RuleError};
use crate::tree::{Frame, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SportError {
    #[error("invalid check: {0}")]
    Check(String),
    #[error("unknown adjustment covariate '{0}'")]
    UnknownCovariate(String),
    #[error("time {0} is not a time point of the panel")]
    UnknownTime(u32),
    #[error(transparent)]
    Rule(#[from] RuleError),
    #[error(transparent)]
    Port(#[from] PortError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Treatment,
    Censoring,
}

/// Which arm of the rule is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleLevel {
    /// Rows the rule says to treat; are any left untreated with certainty?
    FollowRuleTreat,
    /// Rows the rule says not to treat.
    FollowRuleUntreat,
}

impl RuleLevel {
    fn value(self) -> u8 {
        match self {
            RuleLevel::FollowRuleTreat => 1,
            RuleLevel::FollowRuleUntreat => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    StratifiedByTime,
    PooledOverTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum History {
    SmoothOverHistory,
    StratifyOnHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub target: TargetKind,
    pub rule: InterventionRule,
    pub level: RuleLevel,
    pub monotone: bool,
    pub smoothing: Smoothing,
    pub history: History,
    /// Baseline and time-varying covariates of the estimation plan.
    pub adjustment: Vec<String>,
}

impl CheckSpec {
    pub fn treatment(rule: InterventionRule, level: RuleLevel, adjustment: Vec<String>) -> Self {
        CheckSpec {
            target: TargetKind::Treatment,
            rule,
            level,
            monotone: false,
            smoothing: Smoothing::StratifiedByTime,
            history: History::SmoothOverHistory,
            adjustment,
        }
    }

    /// Censoring is monotone by construction and ignores the rule.
    pub fn censoring(adjustment: Vec<String>) -> Self {
        CheckSpec {
            target: TargetKind::Censoring,
            rule: InterventionRule::Static { value: 1 },
            level: RuleLevel::FollowRuleTreat,
            monotone: true,
            smoothing: Smoothing::StratifiedByTime,
            history: History::SmoothOverHistory,
            adjustment,
        }
    }

    pub fn monotone(mut self, monotone: bool) -> Self {
        self.monotone = monotone;
        self
    }

    pub fn smoothing(mut self, smoothing: Smoothing) -> Self {
        self.smoothing = smoothing;
        self
    }

    pub fn history(mut self, history: History) -> Self {
        self.history = history;
        self
    }

    pub fn check_levels(&self) -> CheckLevels {
        match (self.target, self.level) {
            (TargetKind::Censoring, _) | (_, RuleLevel::FollowRuleTreat) => CheckLevels::Treated,
            (_, RuleLevel::FollowRuleUntreat) => CheckLevels::Untreated,
        }
    }

    pub fn validate(&self, ds: &PanelDataset) -> Result<(), SportError> {
        if self.adjustment.is_empty() {
            return Err(SportError::Check("adjustment set is empty".into()));
        }
        if let Some(c) = self.adjustment.iter().find(|c| ds.covariate(c).is_none()) {
            return Err(SportError::UnknownCovariate(c.clone()));
        }
        if self.target == TargetKind::Censoring && !self.monotone {
            return Err(SportError::Check("censoring checks are always monotone".into()));
        }
        Ok(())
    }

    /// The modelled probability, e.g. `P(A_t=1 | A_{t-1}=0, L_t, W, d_t(L_t)=1)`.
    pub fn title(&self) -> String {
        if self.target == TargetKind::Censoring {
            return "P(C_t=1 | C_{t-1}=0, X_t)".into();
        }
        let a = self.level.value();
        let past = match (self.monotone, self.history) {
            (true, _) => "A_{t-1}=0",
            (false, History::SmoothOverHistory) => "A_{t-1}",
            (false, History::StratifyOnHistory) => "A_0..A_{t-1}",
        };
        let d = if self.rule.is_static() { "d_t" } else { "d_t(L_t)" };
        format!("P(A_t={a} | {past}, L_t, W, {d}={a})")
    }

    /// Columns fed to the trees besides the adjustment set.
    fn extra_columns(&self, ds: &PanelDataset) -> Vec<Extra> {
        let treatment = ds.columns().treatment.clone();
        let mut extra = Vec::new();
        match self.target {
            TargetKind::Censoring => extra.push(Extra::Treatment(treatment)),
            TargetKind::Treatment if !self.monotone && self.history == History::SmoothOverHistory => {
                extra.push(Extra::PrevTreatment(format!("prev_{treatment}")))
            }
            TargetKind::Treatment => {}
        }
        if self.smoothing == Smoothing::PooledOverTime {
            extra.push(Extra::Time(ds.columns().time.clone()));
        }
        extra
    }
}

enum Extra {
    Treatment(String),
    PrevTreatment(String),
    Time(String),
}

/// Rows of one check at one time, as indices into the panel's records.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSubset {
    pub time: u32,
    pub rows: Vec<usize>,
    pub target: Vec<u8>,
}

/// Selects the at-risk rows of `check` at time `t`.
pub fn build_check_subset(ds: &PanelDataset, check: &CheckSpec, t: u32) -> Result<CheckSubset, SportError> {
    if !ds.time_points().contains(&t) {
        return Err(SportError::UnknownTime(t));
    }
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (i, rec) in ds.records().iter().enumerate() {
        if rec.time != t || !at_risk(rec, check)? {
            continue;
        }
        rows.push(i);
        target.push(match check.target {
            TargetKind::Treatment => rec.treatment,
            TargetKind::Censoring => rec.censored,
        });
    }
    Ok(CheckSubset { time: t, rows, target })
}

fn at_risk(rec: &PanelRecord, check: &CheckSpec) -> Result<bool, SportError> {
    Ok(match check.target {
        TargetKind::Censoring => rec.prev_censored() == 0,
        TargetKind::Treatment => {
            if check.monotone && rec.prev_treatment() == 1 {
                return Ok(false);
            }
            check.rule.indicated(rec, rec.prev_treatment(), check.monotone)? == check.level.value()
        }
    })
}

/// Builds the tree input for the given records; returns it with the covariate names.
pub fn check_frame(ds: &PanelDataset, check: &CheckSpec, rows: &[usize]) -> Result<(Frame, Vec<String>), SportError> {
    check.validate(ds)?;
    let records = ds.records();
    let target = rows
        .iter()
        .map(|&i| match check.target {
            TargetKind::Treatment => records[i].treatment,
            TargetKind::Censoring => records[i].censored,
        })
        .collect();
    let mut frame = Frame::new(target);
    let mut names = Vec::new();
    for name in &check.adjustment {
        let idx = ds.covariate_index(name).expect("validated");
        let spec = &ds.schema()[idx];
        frame = match spec.kind {
            CovariateKind::Numeric => frame.with_numeric(
                name.clone(),
                rows.iter()
                    .map(|&i| match &records[i].values[idx] {
                        Value::Num(x) => *x,
                        Value::Cat(_) => f64::NAN,
                    })
                    .collect(),
            )?,
            CovariateKind::Categorical => {
                let labels: Vec<String> = rows.iter().map(|&i| records[i].values[idx].to_string()).collect();
                frame.with_labels(name.clone(), spec.levels().to_vec(), &labels)?
            }
        };
        names.push(name.clone());
    }
    let binary = || vec!["0".to_string(), "1".to_string()];
    for extra in check.extra_columns(ds) {
        let (name, levels, labels): (String, Vec<String>, Vec<String>) = match extra {
            Extra::Treatment(n) => (n, binary(), rows.iter().map(|&i| records[i].treatment.to_string()).collect()),
            Extra::PrevTreatment(n) => (
                n,
                binary(),
                rows.iter().map(|&i| records[i].prev_treatment().to_string()).collect(),
            ),
            Extra::Time(n) => (
                n,
                ds.time_points().iter().map(u32::to_string).collect(),
                rows.iter().map(|&i| records[i].time.to_string()).collect(),
            ),
        };
        if names.contains(&name) {
            return Err(SportError::Check(format!("adjustment covariate '{name}' clashes with a derived column")));
        }
        frame = frame.with_labels(name.clone(), levels, &labels)?;
        names.push(name);
    }
    Ok((frame, names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePointResult {
    /// `None` for a pooled-over-time run.
    pub time: Option<u32>,
    /// Treatment history of the stratum when stratifying on history.
    pub stratum: Option<String>,
    pub n_t: usize,
    pub beta_t: Option<f64>,
    pub violations: Vec<Subgroup>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub records: usize,
    pub time_points: Vec<u32>,
    pub trajectories: TrajectorySummary,
}

impl DatasetSummary {
    pub fn of(ds: &PanelDataset) -> Self {
        DatasetSummary {
            subjects: ds.subjects().len(),
            records: ds.len(),
            time_points: ds.time_points().to_vec(),
            trajectories: trajectory_summary(ds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub check: CheckSpec,
    pub per_time: Vec<TimePointResult>,
    pub summary: DatasetSummary,
}

/// Post-baseline times: the first time point carries no treatment decision.
pub fn decision_times(ds: &PanelDataset) -> &[u32] {
    ds.time_points().get(1..).unwrap_or(&[])
}

fn run_rows(
    ds: &PanelDataset,
    check: &CheckSpec,
    config: &PortConfig,
    rows: &[usize],
    time: Option<u32>,
    stratum: Option<String>,
) -> Result<TimePointResult, SportError> {
    let mut result = TimePointResult {
        time,
        stratum,
        n_t: rows.len(),
        beta_t: None,
        violations: Vec::new(),
        warnings: Vec::new(),
    };
    let at = time.map_or("pooled".to_string(), |t| format!("t={t}"));
    if rows.is_empty() {
        result.warnings.push(format!("empty subset at {at}"));
        return Ok(result);
    }
    let resolved = match config.beta.resolve(rows.len()) {
        Ok(r) => r,
        Err(e) => {
            result.warnings.push(format!("cannot resolve beta at {at}: {e}"));
            return Ok(result);
        }
    };
    result.beta_t = Some(resolved.value);
    let (frame, names) = check_frame(ds, check, rows)?;
    let cfg = PortConfig {
        check_levels: check.check_levels(),
        ..config.clone()
    };
    let port = run_port(&frame, &names, &cfg)?;
    result.violations = port.subgroups;
    result.warnings = port.warnings;
    Ok(result)
}

fn by_history(ds: &PanelDataset, check: &CheckSpec, rows: Vec<usize>) -> Vec<(Option<String>, Vec<usize>)> {
    match (check.target, check.history) {
        (TargetKind::Treatment, History::StratifyOnHistory) => {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for i in rows {
                groups
                    .entry(ds.records()[i].treatment_history().to_string())
                    .or_default()
                    .push(i);
            }
            groups.into_iter().map(|(h, r)| (Some(h), r)).collect()
        }
        _ => vec![(None, rows)],
    }
}

/// Runs a sequential positivity check over all decision times.
pub fn run_sport(ds: &PanelDataset, check: &CheckSpec, config: &PortConfig) -> Result<PositivityReport, SportError> {
    check.validate(ds)?;
    config.validate()?;
    let times = decision_times(ds);
    let subsets: Vec<CheckSubset> = times
        .iter()
        .map(|&t| build_check_subset(ds, check, t))
        .collect::<Result<_, _>>()?;

    let per_time = match check.smoothing {
        Smoothing::StratifiedByTime => {
            let jobs: Vec<(u32, Option<String>, Vec<usize>)> = subsets
                .into_iter()
                .flat_map(|s| {
                    let t = s.time;
                    by_history(ds, check, s.rows).into_iter().map(move |(h, r)| (t, h, r))
                })
                .collect();
            par::map(&jobs, |(t, h, rows)| run_rows(ds, check, config, rows, Some(*t), h.clone()))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?
        }
        Smoothing::PooledOverTime => {
            let rows: Vec<usize> = subsets.into_iter().flat_map(|s| s.rows).collect();
            let jobs = by_history(ds, check, rows);
            par::map(&jobs, |(h, rows)| run_rows(ds, check, config, rows, None, h.clone()))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(PositivityReport {
        check: check.clone(),
        per_time,
        summary: DatasetSummary::of(ds),
    })
}
