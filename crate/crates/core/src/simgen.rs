//! Seeded synthetic cohorts ordered as W → L_t → A_t → C_t → L_{t+1}, with
//! optional planted cells of deterministic treatment.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ColumnNames, CovariateRole, CovariateSpec, DataError, PanelDataset, PanelRecord, Value};
use crate::rules::{parse_rule, RuleError, RuleExpr};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("plant condition '{condition}': {source}")]
    Plant { condition: String, source: RuleError },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineSpec {
    Categorical { name: String, levels: Vec<String>, probs: Vec<f64> },
    Numeric { name: String, mean: f64, sd: f64 },
}

/// Numeric: `L_t = L_{t-1} + drift + treatment_effect * A_{t-1} + N(0, noise_sd)`.
/// Categorical: keeps the previous level with probability `persistence`, else redraws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeVaryingSpec {
    Numeric {
        name: String,
        initial_mean: f64,
        initial_sd: f64,
        #[serde(default)]
        drift: f64,
        #[serde(default)]
        treatment_effect: f64,
        #[serde(default)]
        noise_sd: f64,
    },
    Categorical {
        name: String,
        levels: Vec<String>,
        probs: Vec<f64>,
        #[serde(default)]
        persistence: f64,
    },
}

/// Logistic score; a categorical covariate contributes `coefficient * level index`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticModel {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTimes {
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantTime {
    At(u32),
    Every(AllTimes),
}

impl PlantTime {
    fn covers(self, t: u32) -> bool {
        match self {
            PlantTime::At(p) => p == t,
            PlantTime::Every(_) => true,
        }
    }
}

/// Forces `A_t := value` whenever `condition` holds at a covered time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plant {
    pub condition: String,
    pub time: PlantTime,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_subjects: usize,
    /// Time points are `0..n_times`; everyone is untreated at 0.
    pub n_times: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baseline: Vec<BaselineSpec>,
    #[serde(default)]
    pub time_varying: Vec<TimeVaryingSpec>,
    #[serde(default)]
    pub treatment: LogisticModel,
    /// Per-time censoring probability before covariate adjustment.
    #[serde(default)]
    pub censoring_hazard: f64,
    #[serde(default)]
    pub censoring: LogisticModel,
    #[serde(default)]
    pub monotone: bool,
    #[serde(default)]
    pub plants: Vec<Plant>,
    /// Emit a pure-noise outcome column.
    #[serde(default)]
    pub outcome: bool,
}

impl SimConfig {
    pub fn new(n_subjects: usize, n_times: u32, seed: u64) -> Self {
        SimConfig {
            n_subjects,
            n_times,
            seed,
            baseline: Vec::new(),
            time_varying: Vec::new(),
            treatment: LogisticModel::default(),
            censoring_hazard: 0.0,
            censoring: LogisticModel::default(),
            monotone: false,
            plants: Vec::new(),
            outcome: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        Ok(toml::from_str(text)?)
    }

    pub fn columns(&self) -> ColumnNames {
        ColumnNames {
            outcome: self.outcome.then(|| "outcome".to_string()),
            ..ColumnNames::default()
        }
    }

    pub fn schema(&self) -> Vec<CovariateSpec> {
        let mut schema = Vec::new();
        for b in &self.baseline {
            schema.push(match b {
                BaselineSpec::Categorical { name, levels, .. } => {
                    CovariateSpec::categorical(name.clone(), CovariateRole::Baseline, levels.clone())
                }
                BaselineSpec::Numeric { name, .. } => CovariateSpec::numeric(name.clone(), CovariateRole::Baseline),
            });
        }
        for v in &self.time_varying {
            schema.push(match v {
                TimeVaryingSpec::Categorical { name, levels, .. } => {
                    CovariateSpec::categorical(name.clone(), CovariateRole::TimeVarying, levels.clone())
                }
                TimeVaryingSpec::Numeric { name, .. } => CovariateSpec::numeric(name.clone(), CovariateRole::TimeVarying),
            });
        }
        schema
    }

    pub fn validate(&self) -> Result<Vec<RuleExpr>, SimError> {
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if self.n_times < 2 {
            return bad("n_times must be at least 2".into());
        }
        let schema = self.schema();
        let mut seen = HashSet::new();
        for s in &schema {
            if !seen.insert(s.name.as_str()) {
                return bad(format!("duplicate covariate '{}'", s.name));
            }
        }
        let check_probs = |name: &str, levels: &[String], probs: &[f64]| -> Result<(), SimError> {
            if levels.is_empty() || levels.len() != probs.len() {
                return bad(format!("'{name}' needs one probability per level"));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || probs.iter().sum::<f64>() <= 0.0 {
                return bad(format!("'{name}' probabilities must lie in [0, 1] and not all be zero"));
            }
            Ok(())
        };
        for b in &self.baseline {
            match b {
                BaselineSpec::Categorical { name, levels, probs } => check_probs(name, levels, probs)?,
                BaselineSpec::Numeric { name, sd, .. } if sd.is_nan() || *sd < 0.0 => {
                    return bad(format!("'{name}' sd must be non-negative"))
                }
                BaselineSpec::Numeric { .. } => {}
            }
        }
        for v in &self.time_varying {
            match v {
                TimeVaryingSpec::Categorical { name, levels, probs, persistence } => {
                    check_probs(name, levels, probs)?;
                    if !(0.0..=1.0).contains(persistence) {
                        return bad(format!("'{name}' persistence must lie in [0, 1]"));
                    }
                }
                TimeVaryingSpec::Numeric { name, initial_sd, noise_sd, .. } => {
                    if !(*initial_sd >= 0.0 && *noise_sd >= 0.0) {
                        return bad(format!("'{name}' standard deviations must be non-negative"));
                    }
                }
            }
        }
        for model in [&self.treatment, &self.censoring] {
            if let Some((c, _)) = model.coefficients.iter().find(|(c, _)| !seen.contains(c.as_str())) {
                return bad(format!("coefficient for unknown covariate '{c}'"));
            }
        }
        if !(0.0..1.0).contains(&self.censoring_hazard) {
            return bad("censoring_hazard must lie in [0, 1)".into());
        }
        self.plants
            .iter()
            .map(|p| {
                if p.value > 1 {
                    return bad(format!("plant value must be 0 or 1, got {}", p.value));
                }
                parse_rule(&p.condition, &schema).map_err(|source| SimError::Plant {
                    condition: p.condition.clone(),
                    source,
                })
            })
            .collect()
    }
}

fn bad<T>(message: String) -> Result<T, SimError> {
    Err(SimError::Config(message))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn score(model: &LogisticModel, schema: &[CovariateSpec], values: &[Value], offset: f64) -> f64 {
    let mut s = model.intercept + offset;
    for (name, coef) in &model.coefficients {
        let i = schema.iter().position(|c| &c.name == name).expect("validated");
        s += coef
            * match &values[i] {
                Value::Num(x) => *x,
                Value::Cat(l) => schema[i].levels().iter().position(|x| x == l).unwrap_or(0) as f64,
            };
    }
    s
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("validated sd")
}

fn draw_level(rng: &mut ChaCha8Rng, levels: &[String], probs: &[f64]) -> Value {
    let idx = WeightedIndex::new(probs).expect("validated probabilities").sample(rng);
    Value::Cat(levels[idx].clone())
}

/// Deterministic in `cfg` (including its seed) on every platform.
pub fn generate(cfg: &SimConfig) -> Result<PanelDataset, SimError> {
    let plants = cfg.validate()?;
    let schema = cfg.schema();
    let nb = cfg.baseline.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let censor_offset = if cfg.censoring_hazard > 0.0 {
        (cfg.censoring_hazard / (1.0 - cfg.censoring_hazard)).ln()
    } else {
        f64::NEG_INFINITY
    };
    let mut records = Vec::new();
    for s in 0..cfg.n_subjects {
        let id = (s + 1).to_string();
        let mut values: Vec<Value> = cfg
            .baseline
            .iter()
            .map(|b| match b {
                BaselineSpec::Categorical { levels, probs, .. } => draw_level(&mut rng, levels, probs),
                BaselineSpec::Numeric { mean, sd, .. } => Value::Num(normal(*mean, *sd).sample(&mut rng)),
            })
            .collect();
        let mut prev_a = 0u8;
        for t in 0..cfg.n_times {
            for (j, v) in cfg.time_varying.iter().enumerate() {
                let next = match (v, t) {
                    (TimeVaryingSpec::Numeric { initial_mean, initial_sd, .. }, 0) => {
                        Value::Num(normal(*initial_mean, *initial_sd).sample(&mut rng))
                    }
                    (TimeVaryingSpec::Numeric { drift, treatment_effect, noise_sd, .. }, _) => {
                        let Value::Num(prev) = values[nb + j] else { unreachable!() };
                        let noise = normal(0.0, *noise_sd).sample(&mut rng);
                        Value::Num(prev + drift + treatment_effect * f64::from(prev_a) + noise)
                    }
                    (TimeVaryingSpec::Categorical { levels, probs, .. }, 0) => draw_level(&mut rng, levels, probs),
                    (TimeVaryingSpec::Categorical { levels, probs, persistence, .. }, _) => {
                        if rng.random::<f64>() < *persistence {
                            values[nb + j].clone()
                        } else {
                            draw_level(&mut rng, levels, probs)
                        }
                    }
                };
                if t == 0 {
                    values.push(next);
                } else {
                    values[nb + j] = next;
                }
            }
            let mut rec = PanelRecord::new(id.clone(), t, 0, 0, values.clone());
            let p_treat = logistic(score(&cfg.treatment, &schema, &values, 0.0));
            let u: f64 = rng.random();
            rec.treatment = if t == 0 {
                0
            } else if cfg.monotone && prev_a == 1 {
                1
            } else if let Some(p) = planted(cfg, &plants, &rec, t) {
                p
            } else {
                u8::from(u < p_treat)
            };
            let p_cens = logistic(score(&cfg.censoring, &schema, &values, censor_offset));
            let u: f64 = rng.random();
            rec.censored = u8::from(t > 0 && u < p_cens);
            if cfg.outcome {
                rec.outcome = Some(normal(0.0, 1.0).sample(&mut rng));
            }
            prev_a = rec.treatment;
            let censored = rec.censored == 1;
            records.push(rec);
            if censored {
                break;
            }
        }
    }
    Ok(PanelDataset::new(schema, cfg.columns(), records)?)
}

fn planted(cfg: &SimConfig, plants: &[RuleExpr], rec: &PanelRecord, t: u32) -> Option<u8> {
    cfg.plants
        .iter()
        .zip(plants)
        .find(|(p, expr)| p.time.covers(t) && expr.eval(rec).expect("validated plant"))
        .map(|(p, _)| p.value)
}
