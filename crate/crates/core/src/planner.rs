//! Budgeted recompute allocation: minimize `sum_i S_i(r_i)` subject to
//! `sum_i r_i <= P_tar`, non-increasing ratios and grid membership.
//!
//! All budget arithmetic is in integer grid units of 0.002.

use crate::error::{Error, Result};
use crate::plan::{ratio_to_units, units_to_ratio, RecomputePlan, GRID_MAX_UNITS};
use crate::sensitivity::SensitivityTable;

/// Brute-force caps.
pub const BRUTE_MAX_GRID: usize = 8;
pub const BRUTE_MAX_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSpec {
    /// Total budget in grid units (`P_tar / 0.002`, floored).
    pub target_units: u32,
    /// Allowed non-zero ratios in grid units, strictly increasing.
    pub grid_units: Vec<u32>,
}

impl BudgetSpec {
    pub fn new(p_target: f64, grid: &[f64], num_layers: usize) -> Result<Self> {
        if !(p_target.is_finite() && p_target >= 0.0) {
            return Err(Error::Input(format!("budget {p_target} must be a non-negative number")));
        }
        let grid_units = grid
            .iter()
            .map(|&g| match ratio_to_units(g) {
                Some(u) if (1..=GRID_MAX_UNITS).contains(&u) => Ok(u),
                _ => Err(Error::Input(format!("budget grid ratio {g} is not on the plan grid"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if grid_units.is_empty() || grid_units.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("budget grid must be non-empty and strictly increasing".into()));
        }
        let target_units = (p_target * f64::from(crate::plan::UNITS_PER_ONE) + 1e-9).floor() as u64;
        let cap = num_layers as u64 * u64::from(*grid_units.last().expect("non-empty"));
        if target_units > cap {
            return Err(Error::Input(format!(
                "budget {p_target} exceeds {num_layers} layers x max grid ratio {}",
                grid.last().expect("non-empty")
            )));
        }
        Ok(Self {
            target_units: target_units as u32,
            grid_units,
        })
    }

    /// Budget given as a target mean ratio, i.e. `P_tar = r_bar * L`.
    pub fn from_mean_ratio(mean_ratio: f64, grid: &[f64], num_layers: usize) -> Result<Self> {
        Self::new(mean_ratio * num_layers as f64, grid, num_layers)
    }

    pub fn target(&self) -> f64 {
        units_to_ratio(self.target_units)
    }

    /// Level 0 is ratio 0; level `j > 0` is `grid_units[j - 1]`.
    fn level_units(&self, level: usize) -> u32 {
        if level == 0 {
            0
        } else {
            self.grid_units[level - 1]
        }
    }

    fn levels(&self) -> usize {
        self.grid_units.len() + 1
    }
}

fn check_table(table: &SensitivityTable, layers: usize) -> Result<()> {
    table.validate()?;
    if layers == 0 {
        return Err(Error::Input("sensitivity table has no layers".into()));
    }
    Ok(())
}

fn to_plan(levels: &[usize], budget: &BudgetSpec) -> RecomputePlan {
    RecomputePlan::new(levels.iter().map(|&l| units_to_ratio(budget.level_units(l))).collect())
}

/// `sum_i S_i(r_i)` with step-function lookup into the table.
pub fn objective(table: &SensitivityTable, plan: &RecomputePlan) -> f64 {
    plan.ratios.iter().enumerate().map(|(i, &r)| table.score(i, r)).sum()
}

/// Greedy allocation. Each move raises one layer by one grid step, lifting any
/// shallower layer that would otherwise fall below it to the same level; the
/// move with the largest objective decrease per budget unit wins, ties going
/// to the shallowest layer. Stops when no affordable move improves.
pub fn plan_greedy(table: &SensitivityTable, budget: &BudgetSpec) -> Result<RecomputePlan> {
    let layers = table.num_layers();
    check_table(table, layers)?;
    let score = |i: usize, level: usize| table.score(i, units_to_ratio(budget.level_units(level)));
    let mut levels = vec![0usize; layers];
    let mut spent = 0u32;
    loop {
        let mut best: Option<(f64, usize, u32)> = None;
        for target in 0..layers {
            let next = levels[target] + 1;
            if next >= budget.levels() {
                continue;
            }
            let (mut cost, mut gain) = (0u32, 0.0f64);
            for i in 0..=target {
                if levels[i] < next {
                    cost += budget.level_units(next) - budget.level_units(levels[i]);
                    gain += score(i, levels[i]) - score(i, next);
                }
            }
            if spent + cost > budget.target_units || gain <= 0.0 {
                continue;
            }
            let rate = gain / f64::from(cost);
            if best.is_none_or(|(r, _, _)| rate > r) {
                best = Some((rate, target, cost));
            }
        }
        let Some((_, target, cost)) = best else { break };
        let next = levels[target] + 1;
        for l in levels.iter_mut().take(target + 1) {
            *l = (*l).max(next);
        }
        spent += cost;
        debug_assert!(levels.windows(2).all(|w| w[0] >= w[1]), "greedy broke monotonicity: {levels:?}");
        debug_assert!(spent <= budget.target_units);
    }
    let plan = to_plan(&levels, budget);
    plan.validate()?;
    Ok(plan)
}

/// Exact optimum by enumeration of every monotone assignment within budget.
/// Ties go to the lexicographically smallest ratio vector.
pub fn plan_bruteforce(table: &SensitivityTable, budget: &BudgetSpec) -> Result<RecomputePlan> {
    let layers = table.num_layers();
    check_table(table, layers)?;
    if budget.grid_units.len() > BRUTE_MAX_GRID || layers > BRUTE_MAX_LAYERS {
        return Err(Error::Size(format!(
            "brute force is capped at {BRUTE_MAX_LAYERS} layers x {BRUTE_MAX_GRID} grid points, got {layers} x {}",
            budget.grid_units.len()
        )));
    }
    let score = |i: usize, level: usize| table.score(i, units_to_ratio(budget.level_units(level)));

    struct Search<'a> {
        budget: &'a BudgetSpec,
        score: &'a dyn Fn(usize, usize) -> f64,
        layers: usize,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search<'_> {
        // Levels ascend at each depth, so the first minimum found is lexicographically smallest.
        fn visit(&mut self, depth: usize, max_level: usize, spent: u32, value: f64) {
            if depth == self.layers {
                if self.best.as_ref().is_none_or(|(b, _)| value < *b) {
                    self.best = Some((value, self.current.clone()));
                }
                return;
            }
            for level in 0..=max_level {
                let cost = spent + self.budget.level_units(level);
                if cost > self.budget.target_units {
                    break;
                }
                self.current.push(level);
                let v = value + (self.score)(depth, level);
                self.visit(depth + 1, level, cost, v);
                self.current.pop();
            }
        }
    }

    let mut search = Search {
        budget,
        score: &score,
        layers,
        current: Vec::with_capacity(layers),
        best: None,
    };
    search.visit(0, budget.levels() - 1, 0, 0.0);
    let (_, levels) = search.best.expect("the zero plan is always feasible");
    Ok(to_plan(&levels, budget))
}

/// Uniform ratio at every layer.
pub fn plan_static(ratio: f64, num_layers: usize) -> Result<RecomputePlan> {
    let plan = RecomputePlan::uniform(ratio, num_layers);
    plan.validate_for(num_layers)?;
    Ok(plan)
}

pub fn mean_ratio(plan: &RecomputePlan) -> f64 {
    plan.mean_ratio()
}

/// Total units a plan spends.
pub fn plan_units(plan: &RecomputePlan) -> Option<u32> {
    plan.ratios.iter().map(|&r| ratio_to_units(r)).sum()
}
