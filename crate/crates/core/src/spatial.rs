//! Per-frame reduction to `K` tokens and transport-mass assignment.
//!
//! Every strategy pairs a selection rule with a score `u_k` per kept token
//! that mirrors the selection criterion. Scores are normalized by their
//! maximum and mapped to mass through `softmax(-ũ / τ_m)`, so tokens that
//! matter more end up with less mass and resist temporal compression.
//!
//! Ties are broken by the lowest token index throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{GridPosition, TokenVideo};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialStrategy {
    /// Coverage gain weighted by the saliency of the covered tokens.
    #[default]
    Ours,
    /// Highest saliency first.
    TopK,
    /// Max-min farthest-point sampling on cosine distance.
    DivPrune,
    /// Farthest-point sampling on saliency-scaled distances.
    Adts,
    /// Coverage gain weighted by the candidate's own saliency.
    Scope,
}

impl SpatialStrategy {
    pub const ALL: [SpatialStrategy; 5] = [
        SpatialStrategy::Ours,
        SpatialStrategy::TopK,
        SpatialStrategy::DivPrune,
        SpatialStrategy::Adts,
        SpatialStrategy::Scope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialStrategy::Ours => "ours",
            SpatialStrategy::TopK => "topk",
            SpatialStrategy::DivPrune => "divprune",
            SpatialStrategy::Adts => "adts",
            SpatialStrategy::Scope => "scope",
        }
    }
}

impl fmt::Display for SpatialStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param("strategy", format!("unknown strategy {s:?}")))
    }
}

/// The `K` tokens kept for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedFrame {
    pub frame: usize,
    /// Original token indices, in selection order.
    pub selected: Vec<usize>,
    /// Original features of the selected tokens.
    pub features: Vec<Vec<f64>>,
    pub positions: Vec<GridPosition>,
    /// Saliency of the selected tokens.
    pub saliency: Vec<f64>,
    /// Pre-normalization importance scores `u_k`.
    pub scores: Vec<f64>,
    /// Transport mass; sums to one, strictly positive.
    pub mass: Vec<f64>,
}

impl RetainedFrame {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Splits a retention ratio into `(spatial, temporal)` factors
/// `r^(1-γ)` and `r^γ`.
pub fn retention_split(ratio: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param("ratio", format!("{ratio} not in (0, 1]")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("{gamma} not in [0, 1]")));
    }
    Ok((ratio.powf(1.0 - gamma), ratio.powf(gamma)))
}

/// `K = round(N_v · r_s)`, at least one.
pub fn retained_count(tokens: usize, spatial_ratio: f64) -> usize {
    ((tokens as f64 * spatial_ratio).round() as usize).clamp(1, tokens)
}

/// Pairwise cosine similarities of one frame's tokens.
#[derive(Debug, Clone)]
pub struct Similarity {
    n: usize,
    values: Vec<f64>,
}

impl Similarity {
    pub fn new(tokens: &[Vec<f64>]) -> Self {
        let units: Vec<Vec<f64>> = tokens.iter().map(|t| math::unit(t)).collect();
        let n = units.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = math::dot(&units[i], &units[j]).clamp(-1.0, 1.0);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::param("K", format!("{k} not in [1, {n}]")));
    }
    Ok(())
}

/// Greedy coverage maximization. With `candidate_weighted` the gain of `j`
/// is `w_j Σ_i max(0, sim(i,j) - μ_i)`, otherwise `Σ_i w_i max(0, sim(i,j) - μ_i)`.
fn greedy_coverage(sim: &Similarity, w: &[f64], k: usize, candidate_weighted: bool) -> Vec<usize> {
    let n = sim.len();
    let mut covered = vec![0.0f64; n];
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            let gain = if candidate_weighted {
                w[j] * (0..n).map(|i| (sim.get(i, j) - covered[i]).max(0.0)).sum::<f64>()
            } else {
                (0..n)
                    .map(|i| w[i] * (sim.get(i, j) - covered[i]).max(0.0))
                    .sum::<f64>()
            };
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((j, gain));
            }
        }
        let (pick, _) = best.expect("k <= n leaves a candidate");
        taken[pick] = true;
        order.push(pick);
        for (i, c) in covered.iter_mut().enumerate() {
            *c = c.max(sim.get(i, pick));
        }
    }
    order
}

/// Saliency-weighted facility-location greedy selection.
pub fn select_ours(sim: &Similarity, saliency: &[f64], k: usize) -> Result<Vec<usize>> {
    check_k(sim.len(), k)?;
    Ok(greedy_coverage(sim, saliency, k, false))
}

/// `F(S) = Σ_i w_i · max(0, max_{v∈S} sim(x_i, v))`.
pub fn coverage_value(sim: &Similarity, saliency: &[f64], selection: &[usize]) -> f64 {
    (0..sim.len())
        .map(|i| {
            let best = selection
                .iter()
                .map(|&v| sim.get(i, v))
                .fold(f64::NEG_INFINITY, f64::max);
            saliency[i] * best.max(0.0)
        })
        .sum()
}

/// For every original token: the position in `selection` of its best match
/// (lowest token index among ties) and the gap `max(0, σ1 - σ2)`.
fn best_match_gaps(sim: &Similarity, selection: &[usize]) -> Vec<(usize, f64)> {
    (0..sim.len())
        .map(|i| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            let mut second = f64::NEG_INFINITY;
            for (k, &v) in selection.iter().enumerate() {
                let s = sim.get(i, v);
                if s > best.1 || (s == best.1 && v < selection[best.0]) {
                    second = best.1;
                    best = (k, s);
                } else if s > second {
                    second = s;
                }
            }
            (best.0, (best.1 - second).max(0.0))
        })
        .collect()
}

/// Leave-one-out contribution `u_k = Σ_{i: k̂(i)=k} w_i · max(0, σ_{i,1} - σ_{i,2})`.
pub fn leave_one_out_scores(sim: &Similarity, saliency: &[f64], selection: &[usize]) -> Vec<f64> {
    let mut u = vec![0.0; selection.len()];
    for (i, (k, gap)) in best_match_gaps(sim, selection).into_iter().enumerate() {
        u[k] += saliency[i] * gap;
    }
    u
}

/// `ũ = u / max u` (a zero vector when `max u = 0`), then `softmax(-ũ / τ_m)`.
pub fn scores_to_mass(scores: &[f64], tau_m: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(0.0, f64::max);
    let normalized: Vec<f64> = if max > 0.0 {
        scores.iter().map(|u| u / max).collect()
    } else {
        vec![0.0; scores.len()]
    };
    math::negative_softmax(&normalized, tau_m)
}

/// Leave-one-out mass for the default strategy. A single kept token has no
/// runner-up and receives all the mass.
pub fn mass_ours(sim: &Similarity, saliency: &[f64], selection: &[usize], tau_m: f64) -> Vec<f64> {
    if selection.len() == 1 {
        log::warn!("K = 1: second-best similarity undefined, using unit mass");
        return vec![1.0];
    }
    scores_to_mass(&leave_one_out_scores(sim, saliency, selection), tau_m)
}

/// Farthest-point sampling on `scale_j · min_{k∈S} (1 - cos(j, k))`. The first
/// pick maximizes the same quantity against all other tokens.
fn farthest_point(sim: &Similarity, scale: impl Fn(usize) -> f64, k: usize) -> Vec<usize> {
    let n = sim.len();
    let isolation = |j: usize| {
        (0..n)
            .filter(|&o| o != j)
            .map(|o| 1.0 - sim.get(j, o))
            .fold(f64::INFINITY, f64::min)
    };
    let first = if n == 1 {
        0
    } else {
        math::argmax((0..n).map(|j| scale(j) * isolation(j))).unwrap_or(0)
    };
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut order = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|j| 1.0 - sim.get(j, first)).collect();
    while order.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            let score = scale(j) * nearest[j];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        let (pick, _) = best.expect("k <= n leaves a candidate");
        taken[pick] = true;
        order.push(pick);
        for (j, d) in nearest.iter_mut().enumerate() {
            *d = d.min(1.0 - sim.get(j, pick));
        }
    }
    order
}

/// `iso_j = min_{k∈S∖{j}} (1 - cos(j, k))` for each kept token.
fn isolation_within(sim: &Similarity, selection: &[usize]) -> Vec<f64> {
    selection
        .iter()
        .map(|&j| {
            selection
                .iter()
                .filter(|&&o| o != j)
                .map(|&o| 1.0 - sim.get(j, o))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Selection order and importance scores for any strategy.
pub fn select_with_scores(
    strategy: SpatialStrategy,
    sim: &Similarity,
    saliency: &[f64],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_k(sim.len(), k)?;
    let selection = match strategy {
        SpatialStrategy::Ours => greedy_coverage(sim, saliency, k, false),
        SpatialStrategy::Scope => greedy_coverage(sim, saliency, k, true),
        SpatialStrategy::TopK => {
            let mut idx: Vec<usize> = (0..sim.len()).collect();
            idx.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        }
        SpatialStrategy::DivPrune => farthest_point(sim, |_| 1.0, k),
        SpatialStrategy::Adts => farthest_point(sim, |j| saliency[j], k),
    };
    let scores = match strategy {
        SpatialStrategy::TopK => selection.iter().map(|&j| saliency[j]).collect(),
        _ if k == 1 => vec![0.0],
        SpatialStrategy::Ours => leave_one_out_scores(sim, saliency, &selection),
        SpatialStrategy::Scope => {
            let mut u = vec![0.0; k];
            for (k_hat, gap) in best_match_gaps(sim, &selection) {
                u[k_hat] += gap;
            }
            u.iter().zip(&selection).map(|(u, &j)| saliency[j] * u).collect()
        }
        SpatialStrategy::DivPrune => isolation_within(sim, &selection),
        SpatialStrategy::Adts => isolation_within(sim, &selection)
            .into_iter()
            .zip(&selection)
            .map(|(iso, &j)| saliency[j] * iso)
            .collect(),
    };
    Ok((selection, scores))
}

/// Selection and mass for any strategy.
pub fn select_variant(
    strategy: SpatialStrategy,
    sim: &Similarity,
    saliency: &[f64],
    k: usize,
    tau_m: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (selection, scores) = select_with_scores(strategy, sim, saliency, k)?;
    if k == 1 && strategy != SpatialStrategy::TopK {
        log::warn!("K = 1: leave-one-out score undefined, using unit mass");
    }
    Ok((selection, scores_to_mass(&scores, tau_m)))
}

/// Reduces frame `frame` of `video` to `k` tokens with their mass.
pub fn retain_frame(
    video: &TokenVideo,
    frame: usize,
    strategy: SpatialStrategy,
    k: usize,
    tau_m: f64,
) -> Result<RetainedFrame> {
    if tau_m.is_nan() || tau_m <= 0.0 {
        return Err(Error::param("tau_m", format!("{tau_m} must be positive")));
    }
    let tokens = video.frame_tokens(frame);
    let saliency = video.frame_saliency_f64(frame);
    let sim = Similarity::new(&tokens);
    let (selected, scores) = select_with_scores(strategy, &sim, &saliency, k)?;
    let mass = scores_to_mass(&scores, tau_m);
    let grid = video.grid();
    Ok(RetainedFrame {
        frame,
        features: selected.iter().map(|&i| tokens[i].clone()).collect(),
        positions: selected.iter().map(|&i| grid.position(i)).collect(),
        saliency: selected.iter().map(|&i| saliency[i]).collect(),
        selected,
        scores,
        mass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn retention_split_values() {
        let (rs, rt) = retention_split(0.10, 0.3).unwrap();
        assert!((rt - 0.501).abs() < 5e-4, "r_t = {rt}");
        assert!((rs * rt - 0.10).abs() < 1e-15);
        assert_eq!(retention_split(0.10, 0.0).unwrap(), (0.10, 1.0));
        let (rs, rt) = retention_split(0.25, 0.5).unwrap();
        assert!((rs - 0.5).abs() < 1e-15 && (rt - 0.5).abs() < 1e-15);
        assert!(retention_split(0.0, 0.3).is_err());
        assert!(retention_split(-0.1, 0.3).is_err());
        assert!(retention_split(1.5, 0.3).is_err());
        assert!(retention_split(0.5, 1.1).is_err());
    }

    #[test]
    fn retained_count_rounds_with_floor_one() {
        assert_eq!(retained_count(196, 0.1f64.powf(0.7)), 39);
        assert_eq!(retained_count(10, 0.01), 1);
        assert_eq!(retained_count(10, 1.0), 10);
    }

    #[test]
    fn ours_on_orthonormal_picks_most_salient() {
        let sim = Similarity::new(&orthonormal(3));
        let w = [0.5, 0.3, 0.2];
        assert_eq!(select_ours(&sim, &w, 1).unwrap(), vec![0]);
        let w = [0.2, 0.5, 0.3];
        assert_eq!(select_ours(&sim, &w, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn ours_exhausts_all_tokens() {
        let sim = Similarity::new(&orthonormal(5));
        let w = [0.1, 0.3, 0.2, 0.25, 0.15];
        let mut s = select_ours(&sim, &w, 5).unwrap();
        assert_eq!(s, vec![1, 3, 2, 4, 0]);
        s.sort_unstable();
        assert_eq!(s, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn ours_identical_tokens_break_ties_by_index() {
        let tokens = vec![vec![1.0, 2.0]; 4];
        let sim = Similarity::new(&tokens);
        let w = [0.25; 4];
        assert_eq!(select_ours(&sim, &w, 2).unwrap(), vec![0, 1]);
        // all gaps vanish once duplicates are kept: uniform mass
        let m = mass_ours(&sim, &w, &[0, 1], 0.3);
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        let sim = Similarity::new(&orthonormal(3));
        assert!(select_ours(&sim, &[0.3, 0.3, 0.4], 0).is_err());
        assert!(select_ours(&sim, &[0.3, 0.3, 0.4], 4).is_err());
    }

    #[test]
    fn two_token_mass_matches_hand_value() {
        // ũ = (1, 0), τ_m = 0.3: m_0 = e^{-1/0.3} / (1 + e^{-1/0.3})
        let m = scores_to_mass(&[0.7, 0.0], 0.3);
        let e = (-1.0f64 / 0.3).exp();
        assert!((m[0] - e / (1.0 + e)).abs() < 1e-15);
        assert!((m[0] - 0.0345).abs() < 1e-4 && (m[1] - 0.9655).abs() < 1e-4);
    }

    #[test]
    fn equal_scores_give_uniform_mass() {
        let m = scores_to_mass(&[0.4; 5], 0.3);
        assert!(m.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn mass_order_reverses_score_order() {
        let u = [0.3, 0.9, 0.1, 0.5];
        let m = scores_to_mass(&u, 0.3);
        for a in 0..4 {
            for b in 0..4 {
                if u[a] < u[b] {
                    assert!(m[a] > m[b]);
                }
            }
        }
    }

    #[test]
    fn single_token_gets_unit_mass() {
        let sim = Similarity::new(&orthonormal(3));
        assert_eq!(mass_ours(&sim, &[0.2, 0.3, 0.5], &[2], 0.3), vec![1.0]);
        for s in SpatialStrategy::ALL {
            let (_, m) = select_variant(s, &sim, &[0.2, 0.3, 0.5], 1, 0.3).unwrap();
            assert_eq!(m, vec![1.0], "{s}");
        }
    }

    #[test]
    fn leave_one_out_hand_example() {
        // tokens 0 and 1 kept; 2 sits between them, closer to 0
        let t = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]];
        let sim = Similarity::new(&t);
        let w = [0.5, 0.2, 0.3];
        let u = leave_one_out_scores(&sim, &w, &[0, 1]);
        // token 0: gap 1 → 0.5; token 2: gap 0.8 - 0.6 → 0.3·0.2 = 0.06; token 1: gap 1 → 0.2
        assert!((u[0] - 0.56).abs() < 1e-12, "{u:?}");
        assert!((u[1] - 0.2).abs() < 1e-12, "{u:?}");
    }

    #[test]
    fn topk_picks_by_saliency() {
        let sim = Similarity::new(&orthonormal(3));
        let (sel, m) = select_variant(SpatialStrategy::TopK, &sim, &[0.1, 0.6, 0.3], 2, 0.3).unwrap();
        assert_eq!(sel, vec![1, 2]);
        assert!(m[0] < m[1]);
    }

    #[test]
    fn divprune_ties_on_orthogonal_tokens() {
        let sim = Similarity::new(&orthonormal(4));
        let (sel, m) = select_variant(SpatialStrategy::DivPrune, &sim, &[0.25; 4], 2, 0.3).unwrap();
        assert_eq!(sel, vec![0, 1]);
        assert_eq!(m, vec![0.5, 0.5]);
    }

    #[test]
    fn divprune_spreads_out() {
        // two tight clusters; second pick must come from the other cluster
        let t = vec![vec![1.0, 0.0], vec![1.0, 0.05], vec![0.0, 1.0], vec![0.05, 1.0]];
        let sim = Similarity::new(&t);
        let (sel, _) = select_with_scores(SpatialStrategy::DivPrune, &sim, &[0.25; 4], 2).unwrap();
        assert!((sel[0] < 2) != (sel[1] < 2), "{sel:?}");
    }

    #[test]
    fn adts_scales_by_saliency() {
        let sim = Similarity::new(&orthonormal(4));
        let w = [0.1, 0.2, 0.4, 0.3];
        let (sel, scores) = select_with_scores(SpatialStrategy::Adts, &sim, &w, 3).unwrap();
        assert_eq!(sel, vec![2, 3, 1]);
        assert_eq!(scores, vec![0.4, 0.3, 0.2]);
    }

    #[test]
    fn scope_first_pick_matches_topk_on_orthonormal() {
        let sim = Similarity::new(&orthonormal(4));
        let w = [0.1, 0.2, 0.4, 0.3];
        let (scope, _) = select_with_scores(SpatialStrategy::Scope, &sim, &w, 1).unwrap();
        let (topk, _) = select_with_scores(SpatialStrategy::TopK, &sim, &w, 1).unwrap();
        assert_eq!(scope, topk);
        assert_eq!(scope, vec![2]);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in SpatialStrategy::ALL {
            assert_eq!(s.name().parse::<SpatialStrategy>().unwrap(), s);
        }
        assert!("nope".parse::<SpatialStrategy>().is_err());
    }

    #[test]
    fn huge_temperature_gives_uniform_mass() {
        let m = scores_to_mass(&[0.0, 0.3, 1.0, 0.7], 1e6);
        assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
