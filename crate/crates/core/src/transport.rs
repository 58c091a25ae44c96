//! Entropic optimal transport between the retained tokens of adjacent frames.
//!
//! The cost of matching token `i` of frame `t` to token `j` of frame `t+1` is
//!
//! ```text
//! C_ij = α · (1 - cos(s_i, s_j)) + (1 - α) · ‖p_i - p_j‖ / d_max
//! ```
//!
//! with `α = 1 - s̄/2` derived from how similar the two original frames are at
//! co-located positions. The plan is found by Sinkhorn scaling in the log
//! domain; `ε = 0.01` against costs up to 2 puts kernel entries near
//! `e^{-200}`, far below what direct scaling can represent.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::container::{colocated_similarity, Grid, GridPosition, TokenVideo};
use crate::error::{Error, Result};
use crate::math;
use crate::spatial::RetainedFrame;

/// Masses must sum to one within this tolerance.
pub const MASS_SUM_TOL: f64 = 1e-9;
/// Objective checkpoints are recorded every this many iterations.
pub const CHECKPOINT_EVERY: usize = 10;

/// `α = 1 - s̄/2`, in `[0.5, 1]` for `s̄ ∈ [0, 1]`.
pub fn mixing_weight(similarity: f64) -> f64 {
    1.0 - similarity.clamp(0.0, 1.0) / 2.0
}

/// How the frame-pair similarity `s̄` behind `α` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AlphaMode {
    /// Constant `α`, no similarity involved.
    Fixed(f64),
    /// Mean cosine between tokens at identical grid positions.
    #[default]
    PositionAligned,
    /// Mean cosine between 3×3 neighborhood averages, border windows clipped.
    Kernel3x3,
    /// Cosine between the frame-mean token vectors.
    Global,
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Fixed(a) => write!(f, "fixed:{a}"),
            AlphaMode::PositionAligned => f.write_str("position-aligned"),
            AlphaMode::Kernel3x3 => f.write_str("kernel3x3"),
            AlphaMode::Global => f.write_str("global"),
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position-aligned" | "position_aligned" => Ok(AlphaMode::PositionAligned),
            "kernel3x3" => Ok(AlphaMode::Kernel3x3),
            "global" => Ok(AlphaMode::Global),
            _ => {
                let value = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::param("alpha_mode", format!("unknown mode {s:?}")))?;
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::param("alpha_mode", format!("fixed α {value} not in [0, 1]")));
                }
                Ok(AlphaMode::Fixed(value))
            }
        }
    }
}

impl From<AlphaMode> for String {
    fn from(mode: AlphaMode) -> Self {
        mode.to_string()
    }
}

impl TryFrom<String> for AlphaMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

fn mean_vector<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += x as f64;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn kernel_similarity(video: &TokenVideo, pair: usize) -> f64 {
    let grid = video.grid();
    let dim = video.dim();
    let window = |frame: usize, pos: GridPosition| {
        let rows = pos.row.saturating_sub(1)..(pos.row + 2).min(grid.rows);
        let cols = pos.col.saturating_sub(1)..(pos.col + 2).min(grid.cols);
        let members = rows.flat_map(move |r| cols.clone().map(move |c| GridPosition { row: r, col: c }));
        mean_vector(members.map(|p| video.token(frame, grid.index(p))), dim)
    };
    let n = grid.len();
    let total: f64 = (0..n)
        .map(|i| {
            let p = grid.position(i);
            math::cosine(&window(pair, p), &window(pair + 1, p))
        })
        .sum();
    (total / n as f64).clamp(0.0, 1.0)
}

fn global_similarity(video: &TokenVideo, pair: usize) -> f64 {
    let n = video.tokens_per_frame();
    let a = mean_vector((0..n).map(|i| video.token(pair, i)), video.dim());
    let b = mean_vector((0..n).map(|i| video.token(pair + 1, i)), video.dim());
    math::cosine(&a, &b).clamp(0.0, 1.0)
}

/// Frame-pair similarity `s̄` and mixing weight `α` for `pair` under `mode`.
/// Fixed modes report no similarity.
pub fn mixing_weight_variant(mode: AlphaMode, video: &TokenVideo, pair: usize) -> Result<(Option<f64>, f64)> {
    if pair + 1 >= video.frames() {
        return Err(Error::param(
            "pair",
            format!("pair {pair} out of range for {} frames", video.frames()),
        ));
    }
    let similarity = match mode {
        AlphaMode::Fixed(alpha) => return Ok((None, alpha)),
        AlphaMode::PositionAligned => colocated_similarity(video, pair)?,
        AlphaMode::Kernel3x3 => kernel_similarity(video, pair),
        AlphaMode::Global => global_similarity(video, pair),
    };
    Ok((Some(similarity), mixing_weight(similarity)))
}

/// Largest distance between two patch centers on `grid`.
pub fn grid_diameter(grid: Grid) -> f64 {
    let dr = grid.rows.saturating_sub(1) as f64;
    let dc = grid.cols.saturating_sub(1) as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Mixed semantic/locality cost between two retained frames. Rows index
/// `src` (frame `t`), columns index `dst` (frame `t+1`).
pub fn build_cost(src: &RetainedFrame, dst: &RetainedFrame, alpha: f64, grid: Grid) -> Array2<f64> {
    let src_units: Vec<Vec<f64>> = src.features.iter().map(|f| math::unit(f)).collect();
    let dst_units: Vec<Vec<f64>> = dst.features.iter().map(|f| math::unit(f)).collect();
    let d_max = grid_diameter(grid);
    Array2::from_shape_fn((src.len(), dst.len()), |(i, j)| {
        let semantic = 1.0 - math::dot(&src_units[i], &dst_units[j]).clamp(-1.0, 1.0);
        let locality = if d_max > 0.0 {
            let (a, b) = (src.positions[i], dst.positions[j]);
            let dr = a.row as f64 - b.row as f64;
            let dc = a.col as f64 - b.col as f64;
            (dr * dr + dc * dc).sqrt() / d_max
        } else {
            0.0
        };
        alpha * semantic + (1.0 - alpha) * locality
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 200,
            tol: 1e-5,
        }
    }
}

/// Objective values of the iterate after a full row and column update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// `⟨P,C⟩ - εH(P)` of the current plan. Its row sums are not yet exact,
    /// so this value need not decrease monotonically.
    pub primal: f64,
    /// `ε(⟨u,a⟩ + ⟨v,b⟩) - ε Σ P_ij + ε`. Each half-step maximizes it exactly
    /// in one block, so it never decreases; it meets `primal` at the optimum.
    pub dual: f64,
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub plan: Array2<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// One entry every [`CHECKPOINT_EVERY`] iterations.
    pub checkpoints: Vec<Checkpoint>,
}

fn check_mass(name: &'static str, m: &[f64]) -> Result<()> {
    if let Some(v) = m.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::param(name, format!("mass entries must be positive, found {v}")));
    }
    let sum: f64 = m.iter().sum();
    if (sum - 1.0).abs() > MASS_SUM_TOL {
        return Err(Error::param(name, format!("mass sums to {sum}")));
    }
    Ok(())
}

/// Log-domain Sinkhorn scaling for `min ⟨P,C⟩ - εH(P)` over couplings with
/// row sums `src` and column sums `dst`.
///
/// Potentials are kept as log-scalings `u = f/ε`, `v = g/ε`, so that
/// `log P_ij = u_i + v_j - C_ij/ε`. Iteration stops once the sup-norm change
/// of `u` drops below `tol`, or after `max_iters` updates.
pub fn sinkhorn(src: &[f64], dst: &[f64], cost: &Array2<f64>, params: SinkhornParams) -> Result<SinkhornSolution> {
    let (m, n) = cost.dim();
    if src.len() != m || dst.len() != n {
        return Err(Error::InvalidDimensions(format!(
            "cost is {m}x{n}, masses have {} and {} entries",
            src.len(),
            dst.len()
        )));
    }
    if !(params.epsilon > 0.0 && params.epsilon.is_finite()) {
        return Err(Error::param("epsilon", format!("{} must be positive", params.epsilon)));
    }
    if params.tol.is_nan() || params.tol <= 0.0 {
        return Err(Error::param("tol", format!("{} must be positive", params.tol)));
    }
    check_mass("source mass", src)?;
    check_mass("destination mass", dst)?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("cost matrix has non-finite entries".into()));
    }

    let eps = params.epsilon;
    // -C/ε, row-major and transposed for cache-friendly column passes
    let kernel: Vec<f64> = cost.iter().map(|c| -c / eps).collect();
    let mut kernel_t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            kernel_t[j * m + i] = kernel[i * n + j];
        }
    }
    let log_src: Vec<f64> = src.iter().map(|v| v.ln()).collect();
    let log_dst: Vec<f64> = dst.iter().map(|v| v.ln()).collect();

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut checkpoints = Vec::new();

    while iterations < params.max_iters {
        iterations += 1;
        let mut delta = 0.0f64;
        for i in 0..m {
            let row = &kernel[i * n..(i + 1) * n];
            let lse = math::logsumexp(row.iter().zip(&v).map(|(k, v)| k + v));
            let next = log_src[i] - lse;
            delta = delta.max((next - u[i]).abs());
            u[i] = next;
        }
        for j in 0..n {
            let col = &kernel_t[j * m..(j + 1) * m];
            v[j] = log_dst[j] - math::logsumexp(col.iter().zip(&u).map(|(k, u)| k + u));
        }
        if !delta.is_finite() || u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite Sinkhorn potential at iteration {iterations} (ε = {eps})"
            )));
        }
        if iterations % CHECKPOINT_EVERY == 0 {
            let (primal, dual) = objectives(&u, &v, src, dst, &kernel, cost, eps);
            checkpoints.push(Checkpoint {
                iteration: iterations,
                primal,
                dual,
            });
        }
        if delta < params.tol {
            converged = true;
            break;
        }
    }

    let plan = Array2::from_shape_fn((m, n), |(i, j)| (u[i] + v[j] + kernel[i * n + j]).exp());
    if plan.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite transport plan".into()));
    }
    Ok(SinkhornSolution {
        plan,
        converged,
        iterations,
        checkpoints,
    })
}

fn objectives(
    u: &[f64],
    v: &[f64],
    src: &[f64],
    dst: &[f64],
    kernel: &[f64],
    cost: &Array2<f64>,
    eps: f64,
) -> (f64, f64) {
    let n = v.len();
    let (mut primal, mut total) = (0.0, 0.0);
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            let log_p = ui + vj + kernel[i * n + j];
            let p = log_p.exp();
            if p > 0.0 {
                primal += p * cost[[i, j]] + eps * p * log_p;
                total += p;
            }
        }
    }
    let linear = math::dot(u, src) + math::dot(v, dst);
    (primal, eps * (linear - total + 1.0))
}

/// Transport difficulty `W = Σ_ij P_ij C_ij`.
pub fn difficulty(plan: &Array2<f64>, cost: &Array2<f64>) -> f64 {
    plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum()
}

/// Largest deviation of the plan's row and column sums from the marginals.
pub fn marginal_error(plan: &Array2<f64>, src: &[f64], dst: &[f64]) -> f64 {
    let rows = plan.rows().into_iter().zip(src).map(|(r, m)| (r.sum() - m).abs());
    let cols = plan.columns().into_iter().zip(dst).map(|(c, m)| (c.sum() - m).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Everything computed for one adjacent frame pair.
#[derive(Debug, Clone)]
pub struct PairTransport {
    pub pair: usize,
    /// `s̄` behind `alpha`; `None` under a fixed mixing weight.
    pub similarity: Option<f64>,
    pub alpha: f64,
    pub cost: Array2<f64>,
    pub plan: Array2<f64>,
    pub difficulty: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Builds the cost for `(src, dst)` and solves the pair.
pub fn solve_pair(
    pair: usize,
    src: &RetainedFrame,
    dst: &RetainedFrame,
    similarity: Option<f64>,
    alpha: f64,
    grid: Grid,
    params: SinkhornParams,
) -> Result<PairTransport> {
    let cost = build_cost(src, dst, alpha, grid);
    let solution = sinkhorn(&src.mass, &dst.mass, &cost, params)?;
    if !solution.converged {
        log::warn!(
            "pair {pair}: Sinkhorn stopped after {} iterations without converging",
            solution.iterations
        );
    }
    let w = difficulty(&solution.plan, &cost);
    Ok(PairTransport {
        pair,
        similarity,
        alpha,
        difficulty: w,
        cost,
        plan: solution.plan,
        converged: solution.converged,
        iterations: solution.iterations,
    })
}
