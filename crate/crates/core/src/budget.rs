//! Turns per-pair transport difficulties into integer compression budgets.
//!
//! `β = softmax(-W / τ_b)` gives easy pairs (small `W`) the larger share of
//! the `B_tot` operations. Shares are rounded by largest remainder so they sum
//! to `B_tot` exactly, then any pair above the per-pair cap `K` is clamped,
//! frozen, and its excess redistributed over the pairs still below the cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// `B_tot = round(K · T · (1 - r_t))`, rejected when it exceeds `(T-1)·K`.
pub fn total_budget(k: usize, frames: usize, temporal_ratio: f64) -> Result<usize> {
    if k == 0 {
        return Err(Error::param("K", "must be at least 1"));
    }
    if !(temporal_ratio > 0.0 && temporal_ratio <= 1.0) {
        return Err(Error::param("r_t", format!("{temporal_ratio} not in (0, 1]")));
    }
    if frames < 2 {
        if temporal_ratio == 1.0 {
            return Ok(0);
        }
        return Err(Error::param("T", "temporal compression needs at least two frames"));
    }
    let total = (k as f64 * frames as f64 * (1.0 - temporal_ratio)).round() as usize;
    let cap = (frames - 1) * k;
    if total > cap {
        return Err(Error::InfeasibleBudget { total, cap });
    }
    Ok(total)
}

/// Rounds nonnegative `targets` (summing to `total`) to integers with the
/// same sum. Leftover units go to the largest fractional parts, lower index
/// first on ties.
pub fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = targets.iter().map(|t| t.max(0.0).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let frac = |i: usize| targets[i].max(0.0) - targets[i].max(0.0).floor();
    if assigned <= total {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        let mut short = total - assigned;
        // more than one pass only if the targets undershoot `total` by ≥ len
        while short > 0 && !order.is_empty() {
            for &i in &order {
                if short == 0 {
                    break;
                }
                out[i] += 1;
                short -= 1;
            }
        }
    } else {
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(b.cmp(&a)));
        let mut over = assigned - total;
        while over > 0 {
            for &i in &order {
                if over > 0 && out[i] > 0 {
                    out[i] -= 1;
                    over -= 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub total: usize,
    pub cap: usize,
    /// Final integer budgets `B_t`.
    pub budgets: Vec<usize>,
    /// First-pass softmax weights `β_t` over all pairs.
    pub weights: Vec<f64>,
    /// Pre-clamp targets `β_t · B_tot`.
    pub targets: Vec<f64>,
    /// `ρ_t = B_t / (B_tot / (T-1))`; 1 for every pair when `B_tot = 0`.
    pub ratios: Vec<f64>,
    /// Pairs frozen at the cap, in the order they were frozen.
    pub frozen: Vec<usize>,
    /// Softmax passes used, including the first.
    pub rounds: usize,
}

/// Distributes `total` operations over the pairs with difficulties
/// `difficulties`, at most `cap` per pair.
pub fn allocate(difficulties: &[f64], total: usize, cap: usize, tau_b: f64) -> Result<BudgetAllocation> {
    if tau_b.is_nan() || tau_b <= 0.0 {
        return Err(Error::param("tau_b", format!("{tau_b} must be positive")));
    }
    if let Some(w) = difficulties.iter().find(|w| !w.is_finite()) {
        return Err(Error::Numerical(format!("non-finite transport difficulty {w}")));
    }
    let pairs = difficulties.len();
    if total > pairs * cap {
        return Err(Error::InfeasibleBudget {
            total,
            cap: pairs * cap,
        });
    }

    let weights = if pairs == 0 {
        Vec::new()
    } else {
        math::negative_softmax(difficulties, tau_b)
    };
    let targets: Vec<f64> = weights.iter().map(|b| b * total as f64).collect();

    let mut budgets = vec![0usize; pairs];
    let mut active: Vec<usize> = (0..pairs).collect();
    let mut frozen = Vec::new();
    let mut remaining = total;
    let mut rounds = 0;

    while remaining > 0 {
        // cannot happen while total <= pairs * cap
        assert!(!active.is_empty(), "all pairs frozen with {remaining} operations left");
        rounds += 1;
        let w: Vec<f64> = active.iter().map(|&t| difficulties[t]).collect();
        let shares: Vec<f64> = math::negative_softmax(&w, tau_b)
            .into_iter()
            .map(|b| b * remaining as f64)
            .collect();
        let granted = largest_remainder(&shares, remaining);

        let mut excess = 0;
        for (&t, &g) in active.iter().zip(&granted) {
            let give = g.min(cap - budgets[t]);
            budgets[t] += give;
            excess += g - give;
        }
        let (full, open): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&t| budgets[t] == cap);
        frozen.extend(full);
        active = open;
        remaining = excess;
    }

    let ratios = budgets
        .iter()
        .map(|&b| {
            if total == 0 {
                1.0
            } else {
                b as f64 * pairs as f64 / total as f64
            }
        })
        .collect();

    Ok(BudgetAllocation {
        total,
        cap,
        budgets,
        weights,
        targets,
        ratios,
        frozen,
        rounds,
    })
}

/// Budget ratio above which a pair overflows: `ρ* = (T-1) / (T (1 - r_t))`.
pub fn overflow_threshold(frames: usize, temporal_ratio: f64) -> Result<f64> {
    if frames < 2 {
        return Err(Error::param("T", "needs at least two frames"));
    }
    if !(temporal_ratio > 0.0 && temporal_ratio < 1.0) {
        return Err(Error::param("r_t", format!("{temporal_ratio} not in (0, 1)")));
    }
    Ok((frames - 1) as f64 / (frames as f64 * (1.0 - temporal_ratio)))
}

/// Population coefficient of variation; 0 for an all-zero vector.
pub fn coefficient_of_variation(values: &[usize]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub const RHO_BIN_WIDTH: f64 = 0.25;
pub const RHO_BINS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoBin {
    pub lower: f64,
    /// `None` for the open-ended last bin.
    pub upper: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetStats {
    pub cv: f64,
    /// Fraction of pairs whose pre-clamp target exceeded the cap.
    pub overflow_rate: f64,
    pub rho_histogram: Vec<RhoBin>,
}

pub fn rho_histogram(ratios: &[f64]) -> Vec<RhoBin> {
    let mut bins: Vec<RhoBin> = (0..=RHO_BINS)
        .map(|b| RhoBin {
            lower: b as f64 * RHO_BIN_WIDTH,
            upper: (b < RHO_BINS).then(|| (b + 1) as f64 * RHO_BIN_WIDTH),
            count: 0,
        })
        .collect();
    for &r in ratios {
        let b = ((r / RHO_BIN_WIDTH).floor().max(0.0) as usize).min(RHO_BINS);
        bins[b].count += 1;
    }
    bins
}

pub fn budget_stats(allocation: &BudgetAllocation) -> BudgetStats {
    let pairs = allocation.budgets.len();
    let overflowed = allocation
        .targets
        .iter()
        .filter(|&&t| t > allocation.cap as f64)
        .count();
    BudgetStats {
        cv: coefficient_of_variation(&allocation.budgets),
        overflow_rate: if pairs == 0 {
            0.0
        } else {
            overflowed as f64 / pairs as f64
        },
        rho_histogram: rho_histogram(&allocation.ratios),
    }
}
