//! Brute-force oracles and instance generators shared by the integration tests.
//!
//! Nothing here calls the tree or PoRT code: counts, thresholds and splits are
//! recomputed from the raw columns.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sport::bounds::BetaSpec;
use sport::dataset::PanelDataset;
use sport::port::{CheckLevels, PortConfig, Subgroup, ViolatedLevel};
use sport::sport::{build_check_subset, check_frame, CheckSpec, TimePointResult};
use sport::tree::{Column, Constraint, Frame, TreeControls};

/// Canonical, order-free identity of a condition list.
pub type CellKey = BTreeSet<(String, String)>;

pub fn cell_key(conditions: &[Constraint]) -> CellKey {
    conditions
        .iter()
        .map(|c| match c {
            Constraint::Levels { covariate, labels } => (covariate.clone(), labels.join("|")),
            Constraint::Range { covariate, lower, upper } => (covariate.clone(), format!("{lower:?}..{upper:?}")),
        })
        .collect()
}

pub fn gruber(n: usize) -> f64 {
    let n = n as f64;
    5.0 / (n.sqrt() * n.ln())
}

pub fn resolve_beta(beta: BetaSpec, n: usize) -> f64 {
    match beta {
        BetaSpec::Fixed(b) => b,
        BetaSpec::Gruber => gruber(n).min(0.5 - 1e-9),
    }
}

/// Row indices of `frame` satisfying every constraint.
pub fn recount_rows(frame: &Frame, conditions: &[Constraint]) -> Vec<usize> {
    (0..frame.len())
        .filter(|&r| {
            conditions.iter().all(|c| match (c, frame.column(c_name(c)).expect("known covariate")) {
                (Constraint::Range { lower, upper, .. }, Column::Numeric(v)) => {
                    lower.is_none_or(|lo| v[r] >= lo) && upper.is_none_or(|hi| v[r] < hi)
                }
                (Constraint::Levels { labels, .. }, Column::Categorical { levels, codes }) => {
                    labels.contains(&levels[codes[r] as usize])
                }
                _ => false,
            })
        })
        .collect()
}

fn c_name(c: &Constraint) -> &str {
    match c {
        Constraint::Range { covariate, .. } | Constraint::Levels { covariate, .. } => covariate,
    }
}

fn violates(k_target: usize, n_sub: usize, beta: f64, levels: CheckLevels) -> bool {
    if n_sub == 0 {
        return false;
    }
    let low = k_target as f64 / n_sub as f64 <= beta;
    let high = (n_sub - k_target) as f64 / n_sub as f64 <= beta;
    match levels {
        CheckLevels::Treated => low,
        CheckLevels::Untreated => high,
        CheckLevels::Both => low || high,
    }
}

fn share_ok(n_sub: usize, n: usize, alpha: f64) -> bool {
    n_sub as f64 / n as f64 >= alpha
}

/// Independent audit of one emitted subgroup against the rows it was found on.
pub fn audit(frame: &Frame, sg: &Subgroup, config: &PortConfig) -> Result<(), String> {
    let n = frame.len();
    let rows = recount_rows(frame, &sg.conditions);
    let k: usize = rows.iter().map(|&r| frame.target()[r] as usize).sum();
    let beta = resolve_beta(config.beta, n);
    let level_ok = match sg.violated_level {
        ViolatedLevel::Treated => violates(k, rows.len(), beta, CheckLevels::Treated),
        ViolatedLevel::Untreated => violates(k, rows.len(), beta, CheckLevels::Untreated),
    };
    let checked = matches!(
        (config.check_levels, sg.violated_level),
        (CheckLevels::Both, _)
            | (CheckLevels::Treated, ViolatedLevel::Treated)
            | (CheckLevels::Untreated, ViolatedLevel::Untreated)
    );
    if rows.len() != sg.n_sub || k != sg.n_target {
        return Err(format!("{}: recount {}/{} vs stored {}/{}", sg.describe(), k, rows.len(), sg.n_target, sg.n_sub));
    }
    if (sg.prob - k as f64 / rows.len() as f64).abs() > 1e-12 {
        return Err(format!("{}: prob {} vs {}", sg.describe(), sg.prob, k as f64 / rows.len() as f64));
    }
    if !share_ok(rows.len(), n, config.alpha) {
        return Err(format!("{}: share {}/{} below alpha {}", sg.describe(), rows.len(), n, config.alpha));
    }
    if !(level_ok && checked) {
        return Err(format!("{}: prob {} not beyond beta {beta} at {:?}", sg.describe(), sg.prob, sg.violated_level));
    }
    Ok(())
}

/// The rows a time-point result was computed on, rebuilt from the panel.
pub fn rebuild_rows(ds: &PanelDataset, check: &CheckSpec, tp: &TimePointResult) -> Vec<usize> {
    let times: Vec<u32> = match tp.time {
        Some(t) => vec![t],
        None => ds.time_points()[1..].to_vec(),
    };
    let mut rows = Vec::new();
    for t in times {
        rows.extend(build_check_subset(ds, check, t).expect("valid time").rows);
    }
    if let Some(h) = &tp.stratum {
        rows.retain(|&i| ds.records()[i].treatment_history() == h);
    }
    rows
}

pub fn rebuild_frame(ds: &PanelDataset, check: &CheckSpec, tp: &TimePointResult) -> Frame {
    check_frame(ds, check, &rebuild_rows(ds, check, tp)).expect("frame").0
}

/// Smallest subgroup size whose share reaches `alpha`.
pub fn min_share(n: usize, alpha: f64) -> usize {
    (0..=n).find(|&m| share_ok(m, n, alpha)).unwrap_or(n)
}

fn gini(n: usize, k: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    2.0 * k as f64 * (n - k) as f64 / n as f64
}

/// Exact Gini CART on one categorical covariate, searched over every
/// bipartition of the present levels, with the same stopping rules and tie
/// order as the library: lower impurity, then the partition whose side holding
/// the smallest present level code has the lexicographically smallest codes.
/// Returns the level sets (as codes) of all non-root nodes.
struct OneWayCart<'a> {
    counts: &'a [(usize, usize)],
    min_leaf: usize,
    min_node: usize,
    max_depth: usize,
    root_n: f64,
}

impl OneWayCart<'_> {
    fn grow(&self, set: &[u32], depth: usize, out: &mut Vec<(Vec<u32>, usize, usize)>) {
        let n: usize = set.iter().map(|&c| self.counts[c as usize].0).sum();
        let k: usize = set.iter().map(|&c| self.counts[c as usize].1).sum();
        if k == 0 || k == n || n < self.min_node || depth >= self.max_depth {
            return;
        }
        let present: Vec<u32> = set.iter().copied().filter(|&c| self.counts[c as usize].0 > 0).collect();
        if present.len() < 2 {
            return;
        }
        let mut candidates: Vec<(f64, Vec<u32>, Vec<u32>)> = Vec::new();
        for mask in 1u32..(1 << (present.len() - 1)) {
            let mut a = vec![present[0]];
            let mut b = Vec::new();
            for (i, &c) in present[1..].iter().enumerate() {
                if mask & (1 << i) != 0 {
                    b.push(c);
                } else {
                    a.push(c);
                }
            }
            let nb: usize = b.iter().map(|&c| self.counts[c as usize].0).sum();
            let kb: usize = b.iter().map(|&c| self.counts[c as usize].1).sum();
            if nb < self.min_leaf || n - nb < self.min_leaf {
                continue;
            }
            candidates.push((gini(nb, kb) + gini(n - nb, k - kb), a, b));
        }
        let Some(best) = candidates.iter().map(|c| c.0).reduce(f64::min) else { return };
        let (imp, a, b) = candidates
            .into_iter()
            .filter(|c| c.0 <= best + 1e-9)
            .min_by(|x, y| x.1.cmp(&y.1))
            .expect("nonempty");
        if (gini(n, k) - imp) / self.root_n <= 1e-12 {
            return;
        }
        for side in [b, a] {
            let ns = side.iter().map(|&c| self.counts[c as usize].0).sum();
            let ks = side.iter().map(|&c| self.counts[c as usize].1).sum();
            out.push((side.clone(), ns, ks));
            self.grow(&side, depth + 1, out);
        }
    }
}

/// Single-covariate findings of PoRT at γ=1 on categorical columns, found by
/// brute force on the contingency tables. `controls.complexity_penalty` must be 0.
pub fn oracle_single_covariate(frame: &Frame, covariates: &[String], config: &PortConfig) -> BTreeSet<CellKey> {
    assert_eq!(config.tree.complexity_penalty, 0.0);
    let n = frame.len();
    let beta = resolve_beta(config.beta, n);
    let min_leaf = config.tree.min_leaf_size.max(min_share(n, config.alpha)).max(1);
    let min_node = config.tree.min_node_size.max(2 * min_leaf);
    let mut found = BTreeSet::new();
    for name in covariates {
        let Some(Column::Categorical { levels, codes }) = frame.column(name) else {
            panic!("categorical covariates only")
        };
        let mut counts = vec![(0usize, 0usize); levels.len()];
        for (r, &c) in codes.iter().enumerate() {
            counts[c as usize].0 += 1;
            counts[c as usize].1 += frame.target()[r] as usize;
        }
        let cart = OneWayCart {
            counts: &counts,
            min_leaf,
            min_node,
            max_depth: config.tree.max_depth,
            root_n: n as f64,
        };
        let mut nodes = Vec::new();
        let all: Vec<u32> = (0..levels.len() as u32).collect();
        cart.grow(&all, 0, &mut nodes);
        for (set, ns, ks) in nodes {
            if share_ok(ns, n, config.alpha) && violates(ks, ns, beta, config.check_levels) {
                let labels: Vec<String> = set.iter().map(|&c| levels[c as usize].clone()).collect();
                found.insert(BTreeSet::from([(name.clone(), labels.join("|"))]));
            }
        }
    }
    found
}

/// Every conjunction over at most two categorical covariates (any nonempty
/// level subset per covariate) meeting α and beyond β.
pub fn oracle_pair_cells(frame: &Frame, covariates: &[String], config: &PortConfig) -> BTreeSet<CellKey> {
    let n = frame.len();
    let beta = resolve_beta(config.beta, n);
    let cols: Vec<(&String, &[String], &[u32])> = covariates
        .iter()
        .map(|name| match frame.column(name) {
            Some(Column::Categorical { levels, codes }) => (name, levels.as_slice(), codes.as_slice()),
            _ => panic!("categorical covariates only"),
        })
        .collect();
    let subsets = |k: usize| (1u32..(1 << k)).map(move |m| (0..k as u32).filter(|i| m & (1 << i) != 0).collect::<Vec<_>>());
    let labels = |levels: &[String], set: &[u32]| set.iter().map(|&c| levels[c as usize].clone()).collect::<Vec<_>>().join("|");
    let mut out = BTreeSet::new();
    for (i, &(ni, li, ci)) in cols.iter().enumerate() {
        let mut table = vec![(0usize, 0usize); li.len()];
        for r in 0..n {
            table[ci[r] as usize].0 += 1;
            table[ci[r] as usize].1 += frame.target()[r] as usize;
        }
        for s in subsets(li.len()) {
            let (ns, ks) = s.iter().fold((0, 0), |(a, b), &c| (a + table[c as usize].0, b + table[c as usize].1));
            if share_ok(ns, n, config.alpha) && violates(ks, ns, beta, config.check_levels) {
                out.insert(BTreeSet::from([(ni.clone(), labels(li, &s))]));
            }
        }
        for &(nj, lj, cj) in &cols[i + 1..] {
            let mut table = vec![vec![(0usize, 0usize); lj.len()]; li.len()];
            for r in 0..n {
                let cell = &mut table[ci[r] as usize][cj[r] as usize];
                cell.0 += 1;
                cell.1 += frame.target()[r] as usize;
            }
            for s in subsets(li.len()) {
                for u in subsets(lj.len()) {
                    let (mut ns, mut ks) = (0, 0);
                    for &a in &s {
                        for &b in &u {
                            ns += table[a as usize][b as usize].0;
                            ks += table[a as usize][b as usize].1;
                        }
                    }
                    if share_ok(ns, n, config.alpha) && violates(ks, ns, beta, config.check_levels) {
                        out.insert(BTreeSet::from([(ni.clone(), labels(li, &s)), (nj.clone(), labels(lj, &u))]));
                    }
                }
            }
        }
    }
    out
}

/// Single-level cells over at most two covariates meeting α and beyond β.
pub fn oracle_atomic_cells(frame: &Frame, covariates: &[String], config: &PortConfig) -> Vec<Vec<Constraint>> {
    let n = frame.len();
    let beta = resolve_beta(config.beta, n);
    let levels_of = |name: &String| match frame.column(name) {
        Some(Column::Categorical { levels, .. }) => levels.clone(),
        _ => panic!("categorical covariates only"),
    };
    let mut cells = Vec::new();
    for (i, a) in covariates.iter().enumerate() {
        for la in levels_of(a) {
            let one = Constraint::Levels { covariate: a.clone(), labels: vec![la.clone()] };
            cells.push(vec![one.clone()]);
            for b in &covariates[i + 1..] {
                for lb in levels_of(b) {
                    cells.push(vec![one.clone(), Constraint::Levels { covariate: b.clone(), labels: vec![lb] }]);
                }
            }
        }
    }
    cells
        .into_iter()
        .filter(|cell| {
            let rows = recount_rows(frame, cell);
            let k = rows.iter().map(|&r| frame.target()[r] as usize).sum();
            share_ok(rows.len(), n, config.alpha) && violates(k, rows.len(), beta, config.check_levels)
        })
        .collect()
}

/// A random categorical instance: up to four covariates with two to five
/// levels, logistic-ish rates and, often, a planted deterministic cell.
pub fn categorical_instance(seed: u64, max_covariates: usize) -> (Frame, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(20..=500);
    let k = rng.random_range(1..=max_covariates);
    let names: Vec<String> = (0..k).map(|j| format!("c{j}")).collect();
    let n_levels: Vec<usize> = (0..k).map(|_| rng.random_range(2..=5)).collect();
    let weights: Vec<Vec<f64>> = n_levels.iter().map(|&m| (0..m).map(|_| rng.random_range(0.2..1.0)).collect()).collect();
    let effects: Vec<Vec<f64>> = n_levels.iter().map(|&m| (0..m).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let plant: Option<(usize, u32, u8)> = rng
        .random_bool(0.7)
        .then(|| {
            let j = rng.random_range(0..k);
            (j, rng.random_range(0..n_levels[j] as u32), rng.random_range(0..=1u8))
        });
    let mut codes = vec![Vec::with_capacity(n); k];
    let mut target = Vec::with_capacity(n);
    for _ in 0..n {
        let mut score = rng.random_range(-0.5..0.5);
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            let total: f64 = weights[j].iter().sum();
            let mut u = rng.random_range(0.0..total);
            let mut c = 0;
            while u >= weights[j][c] && c + 1 < weights[j].len() {
                u -= weights[j][c];
                c += 1;
            }
            score += effects[j][c];
            row.push(c as u32);
        }
        let mut y = u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-score).exp()));
        if let Some((j, level, forced)) = plant {
            if row[j] == level {
                y = forced;
            }
        }
        for j in 0..k {
            codes[j].push(row[j]);
        }
        target.push(y);
    }
    let mut frame = Frame::new(target);
    for j in 0..k {
        let levels = (0..n_levels[j]).map(|l| format!("L{l}")).collect();
        frame = frame.with_categorical(names[j].clone(), levels, codes[j].clone()).expect("valid column");
    }
    (frame, names)
}

/// Random PoRT settings for categorical instances, complexity penalty 0.
pub fn categorical_config(seed: u64, gamma: usize) -> PortConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let alpha = [0.0, 0.05, 0.1][rng.random_range(0..3)];
    let beta = match rng.random_range(0..4) {
        0 => BetaSpec::Fixed(0.01),
        1 => BetaSpec::Fixed(0.05),
        2 => BetaSpec::Fixed(0.1),
        _ => BetaSpec::Gruber,
    };
    let check_levels = [CheckLevels::Treated, CheckLevels::Untreated, CheckLevels::Both][rng.random_range(0..3)];
    PortConfig {
        alpha,
        beta,
        gamma,
        check_levels,
        tree: TreeControls {
            min_node_size: [2, 10, 20][rng.random_range(0..3)],
            min_leaf_size: [1, 1, 5][rng.random_range(0..3)],
            max_depth: rng.random_range(1..=5),
            complexity_penalty: 0.0,
        },
    }
}

pub fn keys_of(subgroups: &[Subgroup]) -> BTreeSet<CellKey> {
    subgroups.iter().map(|s| cell_key(&s.conditions)).collect()
}

/// Counts of violation keys per time point, for set comparisons across runs.
pub fn violation_sets(per_time: &[TimePointResult]) -> BTreeMap<(Option<u32>, Option<String>), BTreeSet<CellKey>> {
    per_time
        .iter()
        .map(|tp| ((tp.time, tp.stratum.clone()), keys_of(&tp.violations)))
        .collect()
}
