//! Brute-force reference solvers for small instances.
//!
//! Nothing here calls into the spatial or transport code paths; the cosine
//! and objective computations are repeated locally on purpose.

use itertools::Itertools;
use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAX_OT_SIZE: usize = 8;
pub const MAX_SELECTION_TOKENS: usize = 10;
pub const MAX_SELECTION_K: usize = 3;

const PIVOT_EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 50_000;

#[derive(Debug, Clone)]
pub struct ExactOtResult {
    pub plan: Array2<f64>,
    pub objective: f64,
}

/// Dense tableau for `min c·x  s.t.  A x = b, x ≥ 0` with `b ≥ 0`.
struct Tableau {
    rows: usize,
    vars: usize,
    /// `rows × (vars + rows + 1)`; artificials follow the real variables,
    /// right-hand side last.
    cells: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn new(a: &[Vec<f64>], b: &[f64]) -> Self {
        let rows = a.len();
        let vars = a.first().map_or(0, Vec::len);
        let width = vars + rows + 1;
        let mut cells = vec![0.0; rows * width];
        for r in 0..rows {
            cells[r * width..r * width + vars].copy_from_slice(&a[r]);
            cells[r * width + vars + r] = 1.0;
            cells[r * width + width - 1] = b[r];
        }
        Self {
            rows,
            vars,
            cells,
            basis: (vars..vars + rows).collect(),
        }
    }

    fn width(&self) -> usize {
        self.vars + self.rows + 1
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.cells[r * self.width() + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.width() - 1)
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width();
        let p = self.at(row, col);
        for c in 0..w {
            self.cells[row * w + c] /= p;
        }
        for r in (0..self.rows).filter(|&r| r != row) {
            let factor = self.at(r, col);
            if factor != 0.0 {
                for c in 0..w {
                    self.cells[r * w + c] -= factor * self.cells[row * w + c];
                }
            }
        }
        self.basis[row] = col;
    }

    /// Runs simplex with Bland's rule on `cost` (one entry per column except
    /// the rhs), letting only columns below `enterable` enter.
    fn optimize(&mut self, cost: &[f64], enterable: usize) -> Result<()> {
        for _ in 0..MAX_PIVOTS {
            let entering = (0..enterable).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let reduced = cost[j] - (0..self.rows).map(|r| cost[self.basis[r]] * self.at(r, j)).sum::<f64>();
                reduced < -PIVOT_EPS
            });
            let Some(col) = entering else {
                return Ok(());
            };
            let leaving = (0..self.rows)
                .filter(|&r| self.at(r, col) > PIVOT_EPS)
                .map(|r| (r, self.rhs(r) / self.at(r, col)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(self.basis[a.0].cmp(&self.basis[b.0])));
            let Some((row, _)) = leaving else {
                return Err(Error::Numerical("unbounded linear program".into()));
            };
            self.pivot(row, col);
        }
        Err(Error::Numerical("simplex pivot limit reached".into()))
    }

    fn solve(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        let mut t = Self::new(a, b);
        let (rows, vars) = (t.rows, t.vars);

        let phase_one: Vec<f64> = (0..vars + rows).map(|j| if j < vars { 0.0 } else { 1.0 }).collect();
        t.optimize(&phase_one, vars + rows)?;
        let infeasibility: f64 = (0..rows).filter(|&r| t.basis[r] >= vars).map(|r| t.rhs(r)).sum();
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if infeasibility > 1e-9 * scale {
            return Err(Error::Numerical(format!(
                "infeasible program (residual {infeasibility})"
            )));
        }
        // drive zero-level artificials out of the basis; rows where that is
        // impossible are redundant and stay inert
        for r in 0..rows {
            if t.basis[r] >= vars {
                if let Some(j) = (0..vars).find(|&j| !t.basis.contains(&j) && t.at(r, j).abs() > 1e-9) {
                    t.pivot(r, j);
                }
            }
        }

        let mut phase_two = c.to_vec();
        phase_two.resize(vars + rows, 0.0);
        t.optimize(&phase_two, vars)?;

        let mut x = vec![0.0; vars];
        for r in 0..rows {
            if t.basis[r] < vars {
                x[t.basis[r]] = t.rhs(r).max(0.0);
            }
        }
        Ok(x)
    }
}

fn check_masses(src: &[f64], dst: &[f64]) -> Result<()> {
    if src.iter().chain(dst).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::param("mass", "exact OT needs strictly positive masses"));
    }
    let (sa, sb): (f64, f64) = (src.iter().sum(), dst.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::param("mass", format!("totals differ: {sa} vs {sb}")));
    }
    Ok(())
}

/// Unregularized optimal transport by two-phase simplex on the dense LP with
/// one variable per cell and one equality per row and column.
pub fn exact_ot(src: &[f64], dst: &[f64], cost: &Array2<f64>) -> Result<ExactOtResult> {
    let (m, n) = cost.dim();
    if m > MAX_OT_SIZE || n > MAX_OT_SIZE {
        return Err(Error::InstanceTooLarge(format!(
            "{m}x{n} exceeds {MAX_OT_SIZE}x{MAX_OT_SIZE}"
        )));
    }
    if src.len() != m || dst.len() != n {
        return Err(Error::InvalidDimensions("mass and cost shapes differ".into()));
    }
    check_masses(src, dst)?;

    let mut a = Vec::with_capacity(m + n);
    let mut b = Vec::with_capacity(m + n);
    for (i, &mass) in src.iter().enumerate() {
        a.push((0..m * n).map(|v| if v / n == i { 1.0 } else { 0.0 }).collect());
        b.push(mass);
    }
    for (j, &mass) in dst.iter().enumerate() {
        a.push((0..m * n).map(|v| if v % n == j { 1.0 } else { 0.0 }).collect());
        b.push(mass);
    }
    let c: Vec<f64> = cost.iter().copied().collect();
    let x = Tableau::solve(&a, &b, &c)?;
    let plan = Array2::from_shape_vec((m, n), x).expect("m*n values");
    let objective = plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
    Ok(ExactOtResult { plan, objective })
}

/// North-west-corner feasible plan.
pub fn north_west_corner(src: &[f64], dst: &[f64]) -> Array2<f64> {
    let (m, n) = (src.len(), dst.len());
    let mut plan = Array2::zeros((m, n));
    let (mut a, mut b) = (src.to_vec(), dst.to_vec());
    let (mut i, mut j) = (0, 0);
    while i < m && j < n {
        let q = a[i].min(b[j]);
        plan[[i, j]] = q;
        a[i] -= q;
        b[j] -= q;
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    plan
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// `F(S) = Σ_i w_i · max(0, max_{v∈S} cos(x_i, x_v))`.
pub fn facility_location(tokens: &[Vec<f64>], saliency: &[f64], subset: &[usize]) -> f64 {
    tokens
        .iter()
        .zip(saliency)
        .map(|(x, w)| {
            let best = subset
                .iter()
                .map(|&v| cos(x, &tokens[v]))
                .fold(f64::NEG_INFINITY, f64::max);
            w * best.max(0.0)
        })
        .sum()
}

/// Exhaustive maximizer of [`facility_location`] over `k`-subsets. Returns
/// the lexicographically first optimal subset and its value.
pub fn brute_force_selection(tokens: &[Vec<f64>], saliency: &[f64], k: usize) -> Result<(Vec<usize>, f64)> {
    let n = tokens.len();
    if n > MAX_SELECTION_TOKENS || k > MAX_SELECTION_K {
        return Err(Error::InstanceTooLarge(format!(
            "N_v={n}, K={k} exceeds N_v ≤ {MAX_SELECTION_TOKENS}, K ≤ {MAX_SELECTION_K}"
        )));
    }
    if k == 0 || k > n || saliency.len() != n {
        return Err(Error::param("K", format!("{k} invalid for {n} tokens")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for subset in (0..n).combinations(k) {
        let value = facility_location(tokens, saliency, &subset);
        if best.as_ref().is_none_or(|(_, b)| value > *b) {
            best = Some((subset, value));
        }
    }
    Ok(best.expect("at least one subset"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn feasible(plan: &Array2<f64>, src: &[f64], dst: &[f64], tol: f64) -> bool {
        plan.iter().all(|&p| p >= 0.0)
            && plan.rows().into_iter().zip(src).all(|(r, m)| (r.sum() - m).abs() < tol)
            && plan
                .columns()
                .into_iter()
                .zip(dst)
                .all(|(c, m)| (c.sum() - m).abs() < tol)
    }

    #[test]
    fn zero_cost_matching() {
        let c = array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]];
        let u = [1.0 / 3.0; 3];
        let r = exact_ot(&u, &u, &c).unwrap();
        assert!(r.objective.abs() < 1e-15);
        assert!(feasible(&r.plan, &u, &u, 1e-12));
    }

    #[test]
    fn single_cell() {
        let r = exact_ot(&[1.0], &[1.0], &array![[0.7]]).unwrap();
        assert_eq!(r.plan, array![[1.0]]);
        assert_eq!(r.objective, 0.7);
    }

    #[test]
    fn beats_north_west_corner() {
        let a = [0.2, 0.5, 0.3];
        let b = [0.4, 0.1, 0.5];
        let c = array![[0.9, 0.1, 0.4], [0.3, 0.8, 0.2], [0.5, 0.6, 0.7]];
        let r = exact_ot(&a, &b, &c).unwrap();
        let nw = north_west_corner(&a, &b);
        assert!(feasible(&nw, &a, &b, 1e-15));
        let nw_cost: f64 = nw.iter().zip(c.iter()).map(|(p, c)| p * c).sum();
        assert!(r.objective <= nw_cost + 1e-12);
        assert!(feasible(&r.plan, &a, &b, 1e-12));
        // no 2-cycle exchange lowers the cost
        for (i1, i2) in [(0, 1), (0, 2), (1, 2)] {
            for (j1, j2) in [(0, 1), (0, 2), (1, 2)] {
                let delta = c[[i1, j1]] + c[[i2, j2]] - c[[i1, j2]] - c[[i2, j1]];
                let room = r.plan[[i1, j2]].min(r.plan[[i2, j1]]);
                // moving mass onto (i1,j1),(i2,j2) must not reduce cost
                assert!(room < 1e-12 || delta >= -1e-12);
            }
        }
    }

    #[test]
    fn rectangular_and_degenerate_masses() {
        let a = [0.5, 0.5];
        let b = [0.25, 0.25, 0.5];
        let c = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0]];
        let r = exact_ot(&a, &b, &c).unwrap();
        assert!(feasible(&r.plan, &a, &b, 1e-12));
        assert!((r.objective - 0.25).abs() < 1e-12);
        assert!(exact_ot(&[1.0, 0.0], &[0.5, 0.5], &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn size_limits() {
        let u = vec![1.0 / 9.0; 9];
        assert!(matches!(
            exact_ot(&u, &u, &Array2::zeros((9, 9))),
            Err(Error::InstanceTooLarge(_))
        ));
        let tokens = vec![vec![1.0]; 11];
        assert!(brute_force_selection(&tokens, &[1.0 / 11.0; 11], 2).is_err());
        assert!(brute_force_selection(&tokens[..5], &[0.2; 5], 4).is_err());
    }

    #[test]
    fn selection_of_everything_covers_fully() {
        let tokens: Vec<Vec<f64>> = vec![vec![1.0, 0.2], vec![-0.3, 1.0], vec![0.5, -0.5]];
        let (s, f) = brute_force_selection(&tokens, &[0.2, 0.5, 0.3], 3).unwrap();
        assert_eq!(s, vec![0, 1, 2]);
        assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_single_pick_is_most_salient() {
        let tokens: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let (s, f) = brute_force_selection(&tokens, &[0.1, 0.2, 0.4, 0.3], 1).unwrap();
        assert_eq!(s, vec![2]);
        assert_eq!(f, 0.4);
    }
}
