//! Renderers for positivity reports and treatment-trajectory counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::PanelDataset;
use crate::rules::InterventionRule;
use crate::sport::{History, PositivityReport, Smoothing, TargetKind, TimePointResult};

pub const NO_VIOLATION: &str = "No violation was found";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryCount {
    pub time: u32,
    /// Observed treatment values from the first time point through `time`.
    pub history: String,
    pub count: usize,
    /// The history contains a discontinuation ("10").
    pub non_monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub counts: Vec<TrajectoryCount>,
}

impl TrajectorySummary {
    pub fn has_non_monotone(&self) -> bool {
        self.counts.iter().any(|c| c.non_monotone)
    }

    pub fn at(&self, time: u32) -> impl Iterator<Item = &TrajectoryCount> {
        self.counts.iter().filter(move |c| c.time == time)
    }
}

/// Counts of observed treatment-history prefixes per time, sorted by time then history.
pub fn trajectory_summary(ds: &PanelDataset) -> TrajectorySummary {
    let mut counts: BTreeMap<(u32, String), usize> = BTreeMap::new();
    for rec in ds.records() {
        let mut h = rec.treatment_history().to_string();
        h.push(if rec.treatment == 1 { '1' } else { '0' });
        *counts.entry((rec.time, h)).or_default() += 1;
    }
    TrajectorySummary {
        counts: counts
            .into_iter()
            .map(|((time, history), count)| TrajectoryCount {
                non_monotone: history.contains("10"),
                time,
                history,
                count,
            })
            .collect(),
    }
}

fn rule_line(rep: &PositivityReport) -> String {
    let c = &rep.check;
    let mut parts = Vec::new();
    if c.target == TargetKind::Treatment {
        parts.push(match &c.rule {
            InterventionRule::Static { .. } => format!("rule {}", c.rule.label()),
            InterventionRule::Dynamic { .. } => format!("rule `{}`", c.rule.label()),
        });
        parts.push(if c.monotone { "monotone" } else { "non-monotone" }.to_string());
        if c.history == History::StratifyOnHistory {
            parts.push("stratified on history".into());
        }
    } else {
        parts.push("censoring".into());
    }
    parts.push(
        match c.smoothing {
            Smoothing::StratifiedByTime => "stratified by time",
            Smoothing::PooledOverTime => "pooled over time",
        }
        .into(),
    );
    parts.push(format!("adjusting for {}", c.adjustment.join(", ")));
    parts.join("; ")
}

fn time_header(tp: &TimePointResult) -> String {
    let mut head = match tp.time {
        Some(t) => format!("t={t}"),
        None => "pooled over time".to_string(),
    };
    if let Some(h) = &tp.stratum {
        write!(head, ", history {h}").unwrap();
    }
    let beta = tp.beta_t.map_or("n/a".to_string(), |b| format!("{b:.3}"));
    format!("{head} (n_t={}, β={beta})", tp.n_t)
}

/// Markdown tables, one section per check and one table per time point.
pub fn render_markdown(reports: &[PositivityReport]) -> String {
    let mut out = String::new();
    for (i, rep) in reports.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        writeln!(out, "## {}\n", rep.check.title()).unwrap();
        writeln!(out, "{}\n", rule_line(rep)).unwrap();
        if rep.per_time.is_empty() {
            writeln!(out, "{NO_VIOLATION}").unwrap();
            continue;
        }
        for (j, tp) in rep.per_time.iter().enumerate() {
            if j > 0 {
                out.push('\n');
            }
            writeln!(out, "### {}\n", time_header(tp)).unwrap();
            if tp.violations.is_empty() {
                writeln!(out, "{NO_VIOLATION}").unwrap();
            } else {
                out.push_str("| Subgroup | Prob. | n* (%) |\n|---|---|---|\n");
                for v in &tp.violations {
                    writeln!(
                        out,
                        "| {} | {:.3} | {} ({:.1}) |",
                        v.describe(),
                        v.prob,
                        v.n_sub,
                        100.0 * v.share
                    )
                    .unwrap();
                }
            }
            for w in &tp.warnings {
                writeln!(out, "\n> warning: {w}").unwrap();
            }
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Document {
    checks: Vec<PositivityReport>,
}

pub fn render_json(reports: &[PositivityReport]) -> String {
    let doc = Document { checks: reports.to_vec() };
    let mut s = serde_json::to_string_pretty(&doc).expect("reports serialize");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<Vec<PositivityReport>, serde_json::Error> {
    serde_json::from_str::<Document>(text).map(|d| d.checks)
}

pub const CSV_HEADER: [&str; 9] = ["check", "time", "n_t", "beta_t", "conditions", "prob", "n_sub", "share", "history"];

/// One row per violation; `time` is "pooled" for pooled runs.
pub fn render_csv(reports: &[PositivityReport]) -> String {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for rep in reports {
        let title = rep.check.title();
        for tp in &rep.per_time {
            let time = tp.time.map_or("pooled".to_string(), |t| t.to_string());
            let beta = tp.beta_t.map_or(String::new(), |b| b.to_string());
            for v in &tp.violations {
                w.write_record([
                    title.as_str(),
                    &time,
                    &tp.n_t.to_string(),
                    &beta,
                    &v.describe(),
                    &v.prob.to_string(),
                    &v.n_sub.to_string(),
                    &v.share.to_string(),
                    tp.stratum.as_deref().unwrap_or(""),
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn render_trajectories_markdown(summary: &TrajectorySummary) -> String {
    let mut out = String::from("| Time | History | Count | Non-monotone |\n|---|---|---|---|\n");
    for c in &summary.counts {
        writeln!(
            out,
            "| {} | {} | {} | {} |",
            c.time,
            c.history,
            c.count,
            if c.non_monotone { "yes" } else { "" }
        )
        .unwrap();
    }
    out
}

pub fn render_trajectories_csv(summary: &TrajectorySummary) -> String {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Always)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["time", "history", "count", "non_monotone"]).expect("in-memory write");
    for c in &summary.counts {
        w.write_record([c.time.to_string(), c.history.clone(), c.count.to_string(), c.non_monotone.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}
