//! Positivity regression trees for a single decision point.
//!
//! Trees of the target are fitted on every `g`-subset of the still-active
//! covariates, for `g = 1..=gamma`. Nodes holding at least a share `alpha`
//! of the rows whose target probability is within `beta` of 0 or 1 are
//! reported as violations, and the covariates they involve are dropped
//! before the next stage.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BetaSpec, BoundsError};
use crate::par;
use crate::tree::{enumerate_nodes, fit_tree, simplify_path, Constraint, Frame, TreeControls, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PortError {
    #[error("no rows to check")]
    Empty,
    #[error("no covariates to check")]
    NoCovariates,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

/// Which target levels lack support when the node probability is extreme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckLevels {
    /// Flag nodes where P(target = 1) <= beta.
    Treated,
    /// Flag nodes where P(target = 0) <= beta.
    Untreated,
    Both,
}

impl CheckLevels {
    pub fn includes(self, level: ViolatedLevel) -> bool {
        matches!(
            (self, level),
            (CheckLevels::Both, _)
                | (CheckLevels::Treated, ViolatedLevel::Treated)
                | (CheckLevels::Untreated, ViolatedLevel::Untreated)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolatedLevel {
    Treated,
    Untreated,
}

impl fmt::Display for ViolatedLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolatedLevel::Treated => "treated",
            ViolatedLevel::Untreated => "untreated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortConfig {
    /// Minimal subgroup share of the checked rows.
    pub alpha: f64,
    pub beta: BetaSpec,
    /// Maximal number of covariates per tree.
    pub gamma: usize,
    pub check_levels: CheckLevels,
    /// `min_leaf_size` is raised to the smallest size meeting `alpha`.
    pub tree: TreeControls,
}

impl Default for PortConfig {
    fn default() -> Self {
        PortConfig {
            alpha: 0.05,
            beta: BetaSpec::Gruber,
            gamma: 2,
            check_levels: CheckLevels::Both,
            tree: TreeControls::default(),
        }
    }
}

impl PortConfig {
    pub fn validate(&self) -> Result<(), PortError> {
        if !(self.alpha >= 0.0 && self.alpha < 0.5) {
            return Err(PortError::Config(format!("alpha must lie in [0, 0.5), got {}", self.alpha)));
        }
        if let BetaSpec::Fixed(b) = self.beta {
            BetaSpec::fixed(b)?;
        }
        if self.gamma < 1 {
            return Err(PortError::Config("gamma must be at least 1".into()));
        }
        self.tree.validate()?;
        Ok(())
    }

    /// Tree controls actually used on `n` rows.
    pub fn effective_tree(&self, n: usize) -> TreeControls {
        let min_leaf = self.tree.min_leaf_size.max(min_share_size(n, self.alpha)).max(1);
        TreeControls {
            min_leaf_size: min_leaf,
            min_node_size: self.tree.min_node_size.max(2 * min_leaf),
            ..self.tree.clone()
        }
    }
}

/// `n_sub / n >= alpha`, the share test used everywhere subgroups are judged.
pub fn meets_share(n_sub: usize, n: usize, alpha: f64) -> bool {
    n > 0 && n_sub as f64 / n as f64 >= alpha
}

/// Whether a node with `n_target` events among `n_sub` rows lacks support for `level`.
pub fn is_violation(n_target: usize, n_sub: usize, beta: f64, level: ViolatedLevel) -> bool {
    if n_sub == 0 {
        return false;
    }
    let k = match level {
        ViolatedLevel::Treated => n_target,
        ViolatedLevel::Untreated => n_sub - n_target,
    };
    k as f64 / n_sub as f64 <= beta
}

/// Smallest subgroup size meeting the share `alpha` out of `n` rows.
fn min_share_size(n: usize, alpha: f64) -> usize {
    let mut m = ((alpha * n as f64).ceil() as usize).min(n);
    while m > 0 && meets_share(m - 1, n, alpha) {
        m -= 1;
    }
    while m < n && !meets_share(m, n, alpha) {
        m += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub conditions: Vec<Constraint>,
    pub prob: f64,
    pub n_sub: usize,
    pub n_target: usize,
    pub share: f64,
    pub violated_level: ViolatedLevel,
    /// Covariates of the tree that produced the subgroup.
    pub source_covariates: Vec<String>,
    pub stage: usize,
}

impl Subgroup {
    pub fn covariates(&self) -> Vec<&str> {
        self.conditions.iter().map(Constraint::covariate).collect()
    }

    /// Order-insensitive identity of the condition set.
    pub fn key(&self) -> String {
        condition_key(&self.conditions)
    }

    pub fn describe(&self) -> String {
        self.conditions.iter().map(ToString::to_string).join(" & ")
    }
}

pub fn condition_key(conditions: &[Constraint]) -> String {
    conditions
        .iter()
        .map(|c| serde_json::to_string(c).expect("constraints serialize"))
        .sorted()
        .join("&")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortResult {
    pub n: usize,
    pub beta: f64,
    pub subgroups: Vec<Subgroup>,
    pub warnings: Vec<String>,
}

fn tree_findings(
    frame: &Frame,
    covariates: &[&str],
    controls: &TreeControls,
    config: &PortConfig,
    beta: f64,
    stage: usize,
) -> Result<Vec<Subgroup>, PortError> {
    let root = fit_tree(frame, covariates, controls)?;
    let n = frame.len();
    let mut out = Vec::new();
    for node in enumerate_nodes(&root) {
        if !meets_share(node.n, n, config.alpha) {
            continue;
        }
        let level = [ViolatedLevel::Treated, ViolatedLevel::Untreated]
            .into_iter()
            .find(|&l| config.check_levels.includes(l) && is_violation(node.n_target, node.n, beta, l));
        let Some(level) = level else { continue };
        out.push(Subgroup {
            conditions: simplify_path(&node.path)?,
            prob: node.prob,
            n_sub: node.n,
            n_target: node.n_target,
            share: node.n as f64 / n as f64,
            violated_level: level,
            source_covariates: covariates.iter().map(|s| s.to_string()).collect(),
            stage,
        });
    }
    Ok(out)
}

/// Runs the staged tree sweep on all rows of `frame`.
pub fn run_port(frame: &Frame, covariates: &[String], config: &PortConfig) -> Result<PortResult, PortError> {
    config.validate()?;
    let n = frame.len();
    if n == 0 {
        return Err(PortError::Empty);
    }
    if covariates.is_empty() {
        return Err(PortError::NoCovariates);
    }
    if let Some(missing) = covariates.iter().find(|c| frame.column(c).is_none()) {
        return Err(TreeError::UnknownCovariate(missing.clone()).into());
    }

    let mut warnings = Vec::new();
    let resolved = config.beta.resolve(n)?;
    warnings.extend(resolved.warning);
    let beta = resolved.value;

    let gamma = if config.gamma > covariates.len() {
        warnings.push(format!(
            "gamma {} exceeds the {} covariates; clamped",
            config.gamma,
            covariates.len()
        ));
        covariates.len()
    } else {
        config.gamma
    };

    let events = frame.events(&(0..n).collect::<Vec<_>>());
    for (missing, level) in [(events == 0, ViolatedLevel::Treated), (events == n, ViolatedLevel::Untreated)] {
        if missing && config.check_levels.includes(level) {
            let value = if level == ViolatedLevel::Treated { 1 } else { 0 };
            warnings.push(format!("no observed events for target level {value}"));
        }
    }

    let controls = config.effective_tree(n);
    let mut active: Vec<&str> = covariates.iter().map(String::as_str).collect();
    let mut seen = HashSet::new();
    let mut subgroups = Vec::new();
    for stage in 1..=gamma {
        if active.len() < stage {
            break;
        }
        let subsets: Vec<Vec<&str>> = active.iter().copied().combinations(stage).collect();
        let found = par::map(&subsets, |subset| tree_findings(frame, subset, &controls, config, beta, stage));
        let mut implicated = BTreeSet::new();
        for result in found {
            for sg in result? {
                if seen.insert(sg.key()) {
                    implicated.extend(sg.covariates().into_iter().map(str::to_string));
                    subgroups.push(sg);
                }
            }
        }
        active.retain(|c| !implicated.contains(*c));
    }
    subgroups.sort_by(|a, b| a.stage.cmp(&b.stage).then(a.prob.total_cmp(&b.prob)));
    Ok(PortResult {
        n,
        beta,
        subgroups,
        warnings,
    })
}

/// Recounts a subgroup on `frame` and re-checks the thresholds.
pub fn verify_subgroup(frame: &Frame, sg: &Subgroup, config: &PortConfig) -> bool {
    let n = frame.len();
    let Ok(beta) = config.beta.resolve(n) else { return false };
    let Ok(rows) = frame.rows_matching(&sg.conditions) else { return false };
    let n_target = frame.events(&rows);
    rows.len() == sg.n_sub
        && n_target == sg.n_target
        && sg.n_sub > 0
        && sg.prob == n_target as f64 / rows.len() as f64
        && sg.share == rows.len() as f64 / n as f64
        && meets_share(rows.len(), n, config.alpha)
        && config.check_levels.includes(sg.violated_level)
        && is_violation(n_target, rows.len(), beta.value, sg.violated_level)
}
