//! Binary classification trees (Gini, CART-style) over a columnar frame.
//!
//! Every node of a fitted tree is a candidate subgroup: it carries its row
//! count, target count and the condition that led to it from its parent.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::{self, Write as _};

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Categorical covariates with at most this many levels present get an exact split search.
const EXHAUSTIVE_LEVELS: usize = 12;
/// Impurity totals closer than this are treated as tied.
const TIE_TOLERANCE: f64 = 1e-9;
/// A split must lower impurity (per root row) by more than this.
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("empty input")]
    Empty,
    #[error("no covariates given")]
    NoCovariates,
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("column '{name}' has {got} rows, expected {expected}")]
    Length { name: String, got: usize, expected: usize },
    #[error("duplicate column '{0}'")]
    DuplicateColumn(String),
    #[error("category code {code} out of range for '{name}'")]
    BadCode { name: String, code: u32 },
    #[error("label '{label}' is not a level of '{name}'")]
    UnknownLabel { name: String, label: String },
    #[error("invalid tree controls: {0}")]
    Controls(String),
    #[error("contradictory conditions on '{0}'")]
    Contradiction(String),
    #[error("condition on '{0}' does not match the column type")]
    KindMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical { levels: Vec<String>, codes: Vec<u32> },
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical { codes, .. } => codes.len(),
        }
    }
}

/// Columnar rows with a binary target; the input to [`fit_tree`].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    names: Vec<String>,
    columns: Vec<Column>,
    target: Vec<u8>,
}

impl Frame {
    pub fn new(target: Vec<u8>) -> Self {
        Frame {
            names: Vec::new(),
            columns: Vec::new(),
            target,
        }
    }

    fn push(mut self, name: String, column: Column) -> Result<Self, TreeError> {
        if self.names.contains(&name) {
            return Err(TreeError::DuplicateColumn(name));
        }
        if column.len() != self.target.len() {
            return Err(TreeError::Length {
                name,
                got: column.len(),
                expected: self.target.len(),
            });
        }
        self.names.push(name);
        self.columns.push(column);
        Ok(self)
    }

    pub fn with_numeric(self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, TreeError> {
        self.push(name.into(), Column::Numeric(values))
    }

    pub fn with_categorical(
        self,
        name: impl Into<String>,
        levels: Vec<String>,
        codes: Vec<u32>,
    ) -> Result<Self, TreeError> {
        let name = name.into();
        if let Some(&code) = codes.iter().find(|&&c| c as usize >= levels.len()) {
            return Err(TreeError::BadCode { name, code });
        }
        self.push(name, Column::Categorical { levels, codes })
    }

    pub fn with_labels<S: AsRef<str>>(
        self,
        name: impl Into<String>,
        levels: Vec<String>,
        labels: &[S],
    ) -> Result<Self, TreeError> {
        let name = name.into();
        let lookup: HashMap<&str, u32> = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i as u32))
            .collect();
        let mut codes = Vec::with_capacity(labels.len());
        for l in labels {
            match lookup.get(l.as_ref()) {
                Some(&c) => codes.push(c),
                None => {
                    return Err(TreeError::UnknownLabel {
                        name,
                        label: l.as_ref().to_string(),
                    })
                }
            }
        }
        drop(lookup);
        self.with_categorical(name, levels, codes)
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn target(&self) -> &[u8] {
        &self.target
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.position(name).map(|i| &self.columns[i])
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of target events among the given rows.
    pub fn events(&self, rows: &[usize]) -> usize {
        rows.iter().filter(|&&r| self.target[r] == 1).count()
    }

    /// Rows satisfying every constraint.
    pub fn rows_matching(&self, constraints: &[Constraint]) -> Result<Vec<usize>, TreeError> {
        enum Test<'a> {
            Range(&'a [f64], Option<f64>, Option<f64>),
            Set(&'a [u32], Vec<bool>),
        }
        let mut tests = Vec::with_capacity(constraints.len());
        for c in constraints {
            let col = self
                .column(c.covariate())
                .ok_or_else(|| TreeError::UnknownCovariate(c.covariate().to_string()))?;
            tests.push(match (c, col) {
                (Constraint::Range { lower, upper, .. }, Column::Numeric(v)) => Test::Range(v, *lower, *upper),
                (Constraint::Levels { labels, covariate }, Column::Categorical { levels, codes }) => {
                    let mut member = vec![false; levels.len()];
                    for l in labels {
                        let i = levels.iter().position(|x| x == l).ok_or_else(|| TreeError::UnknownLabel {
                            name: covariate.clone(),
                            label: l.clone(),
                        })?;
                        member[i] = true;
                    }
                    Test::Set(codes, member)
                }
                _ => return Err(TreeError::KindMismatch(c.covariate().to_string())),
            });
        }
        Ok((0..self.len())
            .filter(|&r| {
                tests.iter().all(|t| match t {
                    Test::Range(v, lo, hi) => {
                        lo.is_none_or(|lo| v[r] >= lo) && hi.is_none_or(|hi| v[r] < hi)
                    }
                    Test::Set(codes, member) => member[codes[r] as usize],
                })
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `x < value`
    Below(f64),
    /// `x >= value`; the complement of `Below` on the other branch.
    AtLeast(f64),
    InSet(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCondition {
    pub covariate: String,
    pub rule: SplitRule,
}

impl SplitCondition {
    pub fn below(covariate: impl Into<String>, value: f64) -> Self {
        SplitCondition {
            covariate: covariate.into(),
            rule: SplitRule::Below(value),
        }
    }

    pub fn at_least(covariate: impl Into<String>, value: f64) -> Self {
        SplitCondition {
            covariate: covariate.into(),
            rule: SplitRule::AtLeast(value),
        }
    }

    pub fn in_set<S: Into<String>>(covariate: impl Into<String>, labels: impl IntoIterator<Item = S>) -> Self {
        SplitCondition {
            covariate: covariate.into(),
            rule: SplitRule::InSet(labels.into_iter().map(Into::into).collect()),
        }
    }
}

impl fmt::Display for SplitCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.rule {
            SplitRule::Below(v) => write!(f, "{} < {v}", self.covariate),
            SplitRule::AtLeast(v) => write!(f, "{} ≥ {v}", self.covariate),
            SplitRule::InSet(ls) => write!(f, "{} ∈ {{{}}}", self.covariate, ls.join(", ")),
        }
    }
}

/// A simplified condition on one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Constraint {
    /// `lower <= x < upper`, either bound optional.
    Range {
        covariate: String,
        lower: Option<f64>,
        upper: Option<f64>,
    },
    Levels { covariate: String, labels: Vec<String> },
}

impl Constraint {
    pub fn covariate(&self) -> &str {
        match self {
            Constraint::Range { covariate, .. } | Constraint::Levels { covariate, .. } => covariate,
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Range { covariate, lower: Some(lo), upper: Some(hi) } => {
                write!(f, "{covariate} ∈ [{lo}, {hi})")
            }
            Constraint::Range { covariate, lower: Some(lo), upper: None } => write!(f, "{covariate} ≥ {lo}"),
            Constraint::Range { covariate, lower: None, upper: Some(hi) } => write!(f, "{covariate} < {hi}"),
            Constraint::Range { covariate, .. } => write!(f, "{covariate} unrestricted"),
            Constraint::Levels { covariate, labels } if labels.len() == 1 => {
                write!(f, "{covariate} = {}", labels[0])
            }
            Constraint::Levels { covariate, labels } => write!(f, "{covariate} ∈ {{{}}}", labels.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeControls {
    /// Nodes with fewer rows are not split.
    pub min_node_size: usize,
    pub min_leaf_size: usize,
    pub max_depth: usize,
    /// Minimum decrease of total Gini impurity a split must achieve, as a
    /// fraction of the root's impurity.
    pub complexity_penalty: f64,
}

impl Default for TreeControls {
    fn default() -> Self {
        TreeControls {
            min_node_size: 20,
            min_leaf_size: 1,
            max_depth: 5,
            complexity_penalty: 0.001,
        }
    }
}

impl TreeControls {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.min_leaf_size < 1 {
            return Err(TreeError::Controls("min_leaf_size must be at least 1".into()));
        }
        if self.max_depth < 1 {
            return Err(TreeError::Controls("max_depth must be at least 1".into()));
        }
        if !(self.complexity_penalty >= 0.0 && self.complexity_penalty.is_finite()) {
            return Err(TreeError::Controls("complexity_penalty must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Condition on the edge from the parent; `None` at the root.
    pub condition: Option<SplitCondition>,
    pub n: usize,
    pub n_target: usize,
    pub prob: f64,
    pub depth: usize,
    /// Empty for leaves, otherwise `[condition true, condition false]`.
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TreeNode::node_count).sum::<usize>()
    }

    /// Indented text rendering for debugging.
    pub fn to_text(&self) -> String {
        fn walk(node: &TreeNode, out: &mut String) {
            let indent = "  ".repeat(node.depth);
            let label = node.condition.as_ref().map_or("root".to_string(), ToString::to_string);
            let _ = writeln!(
                out,
                "{indent}{label}  n={} n_target={} prob={:.3}",
                node.n, node.n_target, node.prob
            );
            for c in &node.children {
                walk(c, out);
            }
        }
        let mut out = String::new();
        walk(self, &mut out);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree nodes serialize")
    }
}

fn gini_total(n: usize, n1: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    2.0 * n1 as f64 * (n - n1) as f64 / n as f64
}

#[derive(Debug, Clone)]
enum SplitKind {
    Numeric { cut: f64 },
    /// `members` is the set sent left; `key` orders tied partitions.
    Categorical { members: Vec<u32>, rest: Vec<u32>, key: Vec<u32> },
}

#[derive(Debug, Clone)]
struct Candidate {
    impurity: f64,
    feature: usize,
    kind: SplitKind,
}

enum Feature<'a> {
    Numeric(&'a [f64]),
    Categorical { levels: &'a [String], codes: &'a [u32] },
}

struct Grower<'a> {
    frame: &'a Frame,
    names: Vec<&'a str>,
    features: Vec<Feature<'a>>,
    controls: &'a TreeControls,
    min_gain: f64,
    root_n: f64,
}

struct NodeRows {
    rows: Vec<usize>,
    /// Rows sorted by value, per numeric feature (empty for categorical ones).
    sorted: Vec<Vec<usize>>,
}

/// Fits a tree of `target` on the named covariates.
///
/// Splits minimise the weighted Gini impurity of the two children. Ties go
/// to the covariate listed first, then the smallest cutpoint, then for
/// categorical covariates the partition whose side holding the first present
/// level has the smallest level codes.
pub fn fit_tree(frame: &Frame, covariates: &[&str], controls: &TreeControls) -> Result<TreeNode, TreeError> {
    controls.validate()?;
    if frame.is_empty() {
        return Err(TreeError::Empty);
    }
    if covariates.is_empty() {
        return Err(TreeError::NoCovariates);
    }
    let mut features = Vec::with_capacity(covariates.len());
    for name in covariates {
        let col = frame
            .column(name)
            .ok_or_else(|| TreeError::UnknownCovariate(name.to_string()))?;
        features.push(match col {
            Column::Numeric(v) => Feature::Numeric(v),
            Column::Categorical { levels, codes } => Feature::Categorical { levels, codes },
        });
    }

    let rows: Vec<usize> = (0..frame.len()).collect();
    let n1 = frame.events(&rows);
    let root_total = gini_total(rows.len(), n1);
    let root_n = rows.len() as f64;
    let grower = Grower {
        frame,
        names: covariates.to_vec(),
        min_gain: controls.complexity_penalty * root_total / root_n,
        features,
        controls,
        root_n,
    };
    let sorted = grower
        .features
        .iter()
        .map(|f| match f {
            Feature::Numeric(v) => {
                let mut s = rows.clone();
                s.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                s
            }
            Feature::Categorical { .. } => Vec::new(),
        })
        .collect();
    Ok(grower.grow(NodeRows { rows, sorted }, None, 0))
}

impl Grower<'_> {
    fn grow(&self, node: NodeRows, condition: Option<SplitCondition>, depth: usize) -> TreeNode {
        let n = node.rows.len();
        let n1 = self.frame.events(&node.rows);
        let mut out = TreeNode {
            condition,
            n,
            n_target: n1,
            prob: if n == 0 { 0.0 } else { n1 as f64 / n as f64 },
            depth,
            children: Vec::new(),
        };
        if n1 == 0 || n1 == n || n < self.controls.min_node_size || depth >= self.controls.max_depth {
            return out;
        }
        let Some(best) = self.best_split(&node, n1) else {
            return out;
        };
        let gain = (gini_total(n, n1) - best.impurity) / self.root_n;
        if gain <= MIN_GAIN || gain < self.min_gain {
            return out;
        }

        let name = self.names[best.feature];
        let (goes_left, left_cond, right_cond) = match (&best.kind, &self.features[best.feature]) {
            (SplitKind::Numeric { cut }, Feature::Numeric(v)) => {
                let cut = *cut;
                let mask: Vec<(usize, bool)> = node.rows.iter().map(|&r| (r, v[r] < cut)).collect();
                (mask, SplitCondition::below(name, cut), SplitCondition::at_least(name, cut))
            }
            (SplitKind::Categorical { members, rest, .. }, Feature::Categorical { levels, codes }) => {
                let mut inside = vec![false; levels.len()];
                for &c in members {
                    inside[c as usize] = true;
                }
                let mask = node.rows.iter().map(|&r| (r, inside[codes[r] as usize])).collect();
                let labels = |set: &[u32]| set.iter().map(|&c| levels[c as usize].clone()).collect::<Vec<_>>();
                (
                    mask,
                    SplitCondition::in_set(name, labels(members)),
                    SplitCondition::in_set(name, labels(rest)),
                )
            }
            _ => unreachable!("split kind matches feature kind"),
        };

        let mut left_of = vec![false; self.frame.len()];
        for (r, l) in goes_left {
            left_of[r] = l;
        }
        let mut left = NodeRows { rows: Vec::new(), sorted: Vec::new() };
        let mut right = NodeRows { rows: Vec::new(), sorted: Vec::new() };
        for &r in &node.rows {
            if left_of[r] {
                left.rows.push(r);
            } else {
                right.rows.push(r);
            }
        }
        for s in &node.sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = s.iter().partition(|&&r| left_of[r]);
            left.sorted.push(l);
            right.sorted.push(r);
        }
        drop(node);
        out.children = vec![
            self.grow(left, Some(left_cond), depth + 1),
            self.grow(right, Some(right_cond), depth + 1),
        ];
        out
    }

    fn best_split(&self, node: &NodeRows, n1: usize) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for (i, feature) in self.features.iter().enumerate() {
            let found = match feature {
                Feature::Numeric(v) => self.numeric_split(i, v, &node.sorted[i], n1),
                Feature::Categorical { levels, codes } => self.categorical_split(i, levels.len(), codes, &node.rows),
            };
            if let Some(c) = found {
                if best.as_ref().is_none_or(|b| c.impurity < b.impurity - TIE_TOLERANCE) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn numeric_split(&self, feature: usize, values: &[f64], sorted: &[usize], n1: usize) -> Option<Candidate> {
        let n = sorted.len();
        let min_leaf = self.controls.min_leaf_size;
        let target = self.frame.target();
        let mut best: Option<Candidate> = None;
        let mut left1 = 0;
        for i in 1..n {
            left1 += target[sorted[i - 1]] as usize;
            let (lo, hi) = (values[sorted[i - 1]], values[sorted[i]]);
            if lo == hi || i < min_leaf || n - i < min_leaf {
                continue;
            }
            let impurity = gini_total(i, left1) + gini_total(n - i, n1 - left1);
            if best.as_ref().is_none_or(|b| impurity < b.impurity - TIE_TOLERANCE) {
                let mut cut = lo + (hi - lo) / 2.0;
                if cut <= lo {
                    cut = hi;
                }
                best = Some(Candidate {
                    impurity,
                    feature,
                    kind: SplitKind::Numeric { cut },
                });
            }
        }
        best
    }

    /// Searches every bipartition of the present levels when there are at
    /// most `EXHAUSTIVE_LEVELS` of them, else the k-1 partitions ordered by
    /// target rate.
    fn categorical_split(&self, feature: usize, n_levels: usize, codes: &[u32], rows: &[usize]) -> Option<Candidate> {
        let target = self.frame.target();
        let mut counts = vec![(0usize, 0usize); n_levels];
        for &r in rows {
            let c = &mut counts[codes[r] as usize];
            c.0 += 1;
            c.1 += target[r] as usize;
        }
        let mut present: Vec<u32> = (0..n_levels as u32).filter(|&c| counts[c as usize].0 > 0).collect();
        if present.len() < 2 {
            return None;
        }
        let n = rows.len();
        let n1: usize = present.iter().map(|&c| counts[c as usize].1).sum();
        let min_leaf = self.controls.min_leaf_size;
        let mut best: Option<Candidate> = None;
        let mut consider = |without_first: Vec<u32>, with_first: Vec<u32>| {
            let (ln, l1) = without_first
                .iter()
                .fold((0, 0), |(a, b), &c| (a + counts[c as usize].0, b + counts[c as usize].1));
            if ln < min_leaf || n - ln < min_leaf {
                return;
            }
            let impurity = gini_total(ln, l1) + gini_total(n - ln, n1 - l1);
            let better = match &best {
                None => true,
                Some(b) if impurity < b.impurity - TIE_TOLERANCE => true,
                Some(b) if impurity <= b.impurity + TIE_TOLERANCE => match &b.kind {
                    SplitKind::Categorical { key, .. } => with_first < *key,
                    SplitKind::Numeric { .. } => false,
                },
                _ => false,
            };
            if better {
                best = Some(Candidate {
                    impurity,
                    feature,
                    kind: SplitKind::Categorical {
                        members: without_first,
                        key: with_first.clone(),
                        rest: with_first,
                    },
                });
            }
        };

        let first = present[0];
        if present.len() <= EXHAUSTIVE_LEVELS {
            let others = &present[1..];
            for mask in 1u32..(1 << others.len()) {
                let (out, keep): (Vec<u32>, Vec<u32>) =
                    others.iter().enumerate().partition_map(|(i, &c)| {
                        if mask & (1 << i) != 0 {
                            itertools::Either::Left(c)
                        } else {
                            itertools::Either::Right(c)
                        }
                    });
                let mut with_first = vec![first];
                with_first.extend(keep);
                consider(out, with_first);
            }
        } else {
            present.sort_by(|&a, &b| {
                let (na, ea) = counts[a as usize];
                let (nb, eb) = counts[b as usize];
                (ea * nb).cmp(&(eb * na)).then(a.cmp(&b))
            });
            for j in 1..present.len() {
                let mut low: Vec<u32> = present[..j].to_vec();
                let mut high: Vec<u32> = present[j..].to_vec();
                low.sort_unstable();
                high.sort_unstable();
                if low.contains(&first) {
                    consider(high, low);
                } else {
                    consider(low, high);
                }
            }
        }
        best
    }
}

/// One non-root node with the conditions leading to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub path: Vec<SplitCondition>,
    pub n: usize,
    pub n_target: usize,
    pub prob: f64,
    pub depth: usize,
}

/// Pre-order listing of every node except the root.
pub fn enumerate_nodes(root: &TreeNode) -> Vec<NodeSummary> {
    fn walk(node: &TreeNode, path: &mut Vec<SplitCondition>, out: &mut Vec<NodeSummary>) {
        for child in &node.children {
            path.push(child.condition.clone().expect("non-root nodes carry a condition"));
            out.push(NodeSummary {
                path: path.clone(),
                n: child.n,
                n_target: child.n_target,
                prob: child.prob,
                depth: child.depth,
            });
            walk(child, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    walk(root, &mut Vec::new(), &mut out);
    out
}

/// Merges the conditions of a path into one constraint per covariate.
///
/// Numeric bounds become a half-open interval, category sets are
/// intersected. Covariates keep their order of first appearance.
pub fn simplify_path(conditions: &[SplitCondition]) -> Result<Vec<Constraint>, TreeError> {
    let mut out: Vec<Constraint> = Vec::new();
    for cond in conditions {
        let slot = out.iter().position(|c| c.covariate() == cond.covariate);
        match (&cond.rule, slot.map(|i| &mut out[i])) {
            (SplitRule::Below(v), None) => out.push(Constraint::Range {
                covariate: cond.covariate.clone(),
                lower: None,
                upper: Some(*v),
            }),
            (SplitRule::AtLeast(v), None) => out.push(Constraint::Range {
                covariate: cond.covariate.clone(),
                lower: Some(*v),
                upper: None,
            }),
            (SplitRule::InSet(ls), None) => out.push(Constraint::Levels {
                covariate: cond.covariate.clone(),
                labels: ls.clone(),
            }),
            (SplitRule::Below(v), Some(Constraint::Range { upper, .. })) => {
                *upper = Some(upper.map_or(*v, |u| u.min(*v)));
            }
            (SplitRule::AtLeast(v), Some(Constraint::Range { lower, .. })) => {
                *lower = Some(lower.map_or(*v, |l| l.max(*v)));
            }
            (SplitRule::InSet(ls), Some(Constraint::Levels { labels, .. })) => {
                labels.retain(|l| ls.contains(l));
            }
            _ => return Err(TreeError::KindMismatch(cond.covariate.clone())),
        }
    }
    for c in &out {
        let empty = match c {
            Constraint::Range { lower: Some(lo), upper: Some(hi), .. } => lo.partial_cmp(hi) != Some(Ordering::Less),
            Constraint::Levels { labels, .. } => labels.is_empty(),
            _ => false,
        };
        if empty {
            return Err(TreeError::Contradiction(c.covariate().to_string()));
        }
    }
    Ok(out)
}
