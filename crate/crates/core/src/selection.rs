//! Choosing which scored candidates become training data.
//!
//! Every strategy ranks a pool of [`ScoreTriple`]s and returns pool indices.
//! Ties always fall back to pool order, and pools are built in generation
//! order, so the outcome is fully determined by the pool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{Objective, ScoreTriple};
use crate::scalar::{ceil_fraction, Scalar};

pub const DEFAULT_QUOTA: usize = 50;
pub const DEFAULT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionStrategy {
    /// Candidates in the top `fraction` of the pool on `f_s` and on `f_f` and
    /// in the bottom `fraction` on `f_b`.
    BalancedTopFraction { fraction: f64, quota: usize },
    /// `λ_S·z(f_s) + λ_F·z(f_f) − λ_B·z(f_b)` over pool z-scores.
    WeightedSum { lambdas: [f64; 3], quota: usize },
    SingleObjective { objective: Objective, quota: usize },
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self::BalancedTopFraction {
            fraction: DEFAULT_FRACTION,
            quota: DEFAULT_QUOTA,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("invalid selection strategy: {0}")]
    InvalidStrategy(String),
    #[error("candidate {0} has no scores")]
    Unscored(usize),
    #[error("no candidate passes the selection thresholds")]
    EmptySelection,
}

impl SelectionStrategy {
    pub fn quota(&self) -> usize {
        match self {
            Self::BalancedTopFraction { quota, .. }
            | Self::WeightedSum { quota, .. }
            | Self::SingleObjective { quota, .. } => *quota,
        }
    }

    pub fn with_quota(mut self, new_quota: usize) -> Self {
        match &mut self {
            Self::BalancedTopFraction { quota, .. }
            | Self::WeightedSum { quota, .. }
            | Self::SingleObjective { quota, .. } => *quota = new_quota,
        }
        self
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: String| Err(SelectionError::InvalidStrategy(m));
        if self.quota() == 0 {
            return bad("quota must be at least 1".into());
        }
        match self {
            Self::BalancedTopFraction { fraction, .. } if !(*fraction > 0.0 && *fraction <= 1.0) => {
                bad(format!("fraction {fraction} is outside (0, 1]"))
            }
            Self::WeightedSum { lambdas, .. } if lambdas.iter().any(|l| !l.is_finite()) => {
                bad("weights must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

/// `balanced:0.5`, `weighted:1,1,0.5`, `single:f_b`; the quota defaults to 50.
impl FromStr for SelectionStrategy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| SelectionError::InvalidStrategy(format!("{s:?}: {m}"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let strategy = match kind.trim() {
            "balanced" | "balanced_top_fraction" => Self::BalancedTopFraction {
                fraction: if arg.is_empty() {
                    DEFAULT_FRACTION
                } else {
                    arg.trim().parse().map_err(|_| bad("fraction is not a number"))?
                },
                quota: DEFAULT_QUOTA,
            },
            "weighted" | "weighted_sum" => {
                let lambdas: Vec<f64> = if arg.is_empty() {
                    vec![1.0; 3]
                } else {
                    arg.split(',')
                        .map(|x| x.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad("weights are not numbers"))?
                };
                let lambdas: [f64; 3] = lambdas.try_into().map_err(|_| bad("expected three weights"))?;
                Self::WeightedSum {
                    lambdas,
                    quota: DEFAULT_QUOTA,
                }
            }
            "single" | "single_objective" => Self::SingleObjective {
                objective: arg.parse().map_err(|e: String| bad(&e))?,
                quota: DEFAULT_QUOTA,
            },
            _ => return Err(bad("unknown strategy kind")),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BalancedTopFraction { fraction, quota } => write!(f, "balanced:{fraction} (quota {quota})"),
            Self::WeightedSum { lambdas: [s, ff, b], quota } => write!(f, "weighted:{s},{ff},{b} (quota {quota})"),
            Self::SingleObjective { objective, quota } => write!(f, "single:{} (quota {quota})", objective.name()),
        }
    }
}

fn column<S: Scalar>(pool: &[ScoreTriple<S>], objective: Objective) -> Vec<f64> {
    pool.iter().map(|t| t.get(objective).to_f64_lossy()).collect()
}

/// Pool z-scores; a constant column maps to zeros.
pub fn z_scores(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect()
}

/// `λ_S·z(f_s) + λ_F·z(f_f) − λ_B·z(f_b)` for every pool member.
pub fn weighted_scores<S: Scalar>(pool: &[ScoreTriple<S>], lambdas: [f64; 3]) -> Vec<f64> {
    let zs = z_scores(&column(pool, Objective::FS));
    let zf = z_scores(&column(pool, Objective::FF));
    let zb = z_scores(&column(pool, Objective::FB));
    (0..pool.len())
        .map(|i| lambdas[0] * zs[i] + lambdas[1] * zf[i] - lambdas[2] * zb[i])
        .collect()
}

/// Value of the `m`-th best entry (1-based) in `objective`'s direction.
fn mth_best(values: &[f64], m: usize, higher_is_better: bool) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| if higher_is_better { b.total_cmp(a) } else { a.total_cmp(b) });
    sorted[m - 1]
}

/// Indices passing the balanced thresholds: at least as good as the
/// `ceil(fraction · n)`-th best pool value on each objective.
pub fn balanced_passing<S: Scalar>(pool: &[ScoreTriple<S>], fraction: f64) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let m = ceil_fraction(fraction, pool.len()).max(1);
    let mut passing: Vec<bool> = vec![true; pool.len()];
    for objective in Objective::ALL {
        let values = column(pool, objective);
        let up = objective.higher_is_better();
        let threshold = mth_best(&values, m, up);
        for (ok, v) in passing.iter_mut().zip(&values) {
            *ok &= if up { *v >= threshold } else { *v <= threshold };
        }
    }
    (0..pool.len()).filter(|&i| passing[i]).collect()
}

/// Sorts indices by descending key, ties by index.
fn rank_desc(indices: &mut [usize], key: &[f64]) {
    indices.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
}

/// Pool indices chosen by `strategy`, best first.
pub fn select_indices<S: Scalar>(
    pool: &[ScoreTriple<S>],
    strategy: &SelectionStrategy,
) -> Result<Vec<usize>, SelectionError> {
    strategy.validate()?;
    let quota = strategy.quota();
    let mut chosen = match strategy {
        SelectionStrategy::BalancedTopFraction { fraction, .. } => {
            let mut passing = balanced_passing(pool, *fraction);
            if passing.is_empty() {
                return Err(SelectionError::EmptySelection);
            }
            rank_desc(&mut passing, &weighted_scores(pool, [1.0; 3]));
            passing
        }
        SelectionStrategy::WeightedSum { lambdas, .. } => {
            let mut all: Vec<usize> = (0..pool.len()).collect();
            rank_desc(&mut all, &weighted_scores(pool, *lambdas));
            all
        }
        SelectionStrategy::SingleObjective { objective, .. } => {
            let values = column(pool, *objective);
            let key: Vec<f64> = if objective.higher_is_better() {
                values
            } else {
                values.iter().map(|v| -v).collect()
            };
            let mut all: Vec<usize> = (0..pool.len()).collect();
            rank_desc(&mut all, &key);
            all
        }
    };
    if chosen.is_empty() {
        return Err(SelectionError::EmptySelection);
    }
    chosen.truncate(quota);
    Ok(chosen)
}

/// Independent post-hoc check of a selection, by counting rather than
/// sorting. Returns a description of the first violation.
pub fn check_selection<S: Scalar>(
    pool: &[ScoreTriple<S>],
    strategy: &SelectionStrategy,
    selected: &[usize],
) -> Result<(), String> {
    let quota = strategy.quota();
    let mut seen = vec![false; pool.len()];
    for &i in selected {
        if i >= pool.len() || std::mem::replace(&mut seen[i], true) {
            return Err(format!("index {i} is out of range or repeated"));
        }
    }
    if selected.len() > quota {
        return Err(format!("{} selected, quota {quota}", selected.len()));
    }
    // `a` strictly beats `b` on the strategy's ranking key.
    let beats: Box<dyn Fn(usize, usize) -> bool> = match strategy {
        SelectionStrategy::BalancedTopFraction { fraction, .. } => {
            let m = ceil_fraction(*fraction, pool.len()).max(1);
            let passes = |i: usize| {
                Objective::ALL.iter().all(|&o| {
                    let v = pool[i].get(o).to_f64_lossy();
                    let better = pool
                        .iter()
                        .filter(|t| {
                            let w = t.get(o).to_f64_lossy();
                            if o.higher_is_better() { w > v } else { w < v }
                        })
                        .count();
                    better < m
                })
            };
            for &i in selected {
                if !passes(i) {
                    return Err(format!("candidate {i} misses a balanced threshold"));
                }
            }
            let passing = (0..pool.len()).filter(|&i| passes(i)).count();
            if selected.len() != passing.min(quota) {
                return Err(format!("{} selected of {passing} passing", selected.len()));
            }
            let key = weighted_scores(pool, [1.0; 3]);
            let passing_flags: Vec<bool> = (0..pool.len()).map(passes).collect();
            Box::new(move |a, b| passing_flags[a] && (key[a] > key[b] || (key[a] == key[b] && a < b)))
        }
        SelectionStrategy::WeightedSum { lambdas, .. } => {
            let key = weighted_scores(pool, *lambdas);
            Box::new(move |a, b| key[a] > key[b] || (key[a] == key[b] && a < b))
        }
        SelectionStrategy::SingleObjective { objective, .. } => {
            let o = *objective;
            let key: Vec<f64> = column(pool, o);
            Box::new(move |a, b| {
                let (x, y) = (key[a], key[b]);
                let strictly = if o.higher_is_better() { x > y } else { x < y };
                strictly || (x == y && a < b)
            })
        }
    };
    if !matches!(strategy, SelectionStrategy::BalancedTopFraction { .. }) && selected.len() != pool.len().min(quota) {
        return Err(format!("{} selected from a pool of {}", selected.len(), pool.len()));
    }
    for i in (0..pool.len()).filter(|&i| !seen[i]) {
        if let Some(&j) = selected.iter().find(|&&j| beats(i, j)) {
            return Err(format!("unselected candidate {i} outranks selected candidate {j}"));
        }
    }
    for w in selected.windows(2) {
        if beats(w[1], w[0]) {
            return Err(format!("selection is not in rank order at {} and {}", w[0], w[1]));
        }
    }
    Ok(())
}
