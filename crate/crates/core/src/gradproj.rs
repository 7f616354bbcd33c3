//! Constrained gradient update.
//!
//! Given a proposed update `g` and constraint gradients `g_1..g_k`, find
//!
//! ```text
//! min_z ½|g - z|²   subject to   <z, g_i> >= 0 for all i
//! ```
//!
//! With `G` the row-stack of the constraint gradients the problem is solved
//! in its k-dimensional dual
//!
//! ```text
//! min_u ½ uᵀ G Gᵀ u + gᵀ Gᵀ u   subject to   u >= 0
//! ```
//!
//! and the primal solution is recovered as `z = g + Gᵀ u`. Because
//! `½uᵀGGᵀu + gᵀGᵀu = ½|Gᵀu + g|² - ½|g|²`, the dual is a non-negative least
//! squares problem, solved here with the Lawson–Hanson active-set method on
//! the k×k Gram matrix. It terminates finitely and copes with linearly
//! dependent constraint rows, which show up whenever `k > P` or two
//! constraint gradients are parallel.
//!
//! [`oracle_project`] is an independent brute-force solver (enumeration of
//! active sets, Gram–Schmidt projections in the primal) used for testing.

use serde::{Deserialize, Serialize};

use crate::error::{GrclError, Result};
use crate::model::{dot, FlatGradient};

/// Largest constraint count the enumeration oracle accepts.
pub const ORACLE_MAX_CONSTRAINTS: usize = 12;

/// Which loss a constraint row protects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintTag {
    /// Cross-entropy on a source batch.
    Source,
    /// Cross-entropy on a batch drawn from the whole domain memory.
    DomainMemory,
    /// Cross-entropy on one episodic memory, keyed by its domain id.
    Memory(u32),
}

impl std::fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintTag::Source => write!(f, "source"),
            ConstraintTag::DomainMemory => write!(f, "domain-memory"),
            ConstraintTag::Memory(d) => write!(f, "memory-{d}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub proposed: FlatGradient,
    pub rows: Vec<FlatGradient>,
    pub tags: Vec<ConstraintTag>,
}

impl ConstraintSet {
    pub fn new(proposed: FlatGradient) -> Self {
        ConstraintSet {
            proposed,
            rows: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn with(mut self, tag: ConstraintTag, row: FlatGradient) -> Self {
        self.push(tag, row);
        self
    }

    pub fn push(&mut self, tag: ConstraintTag, row: FlatGradient) {
        self.rows.push(row);
        self.tags.push(tag);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let p = self.proposed.len();
        if self.tags.len() != self.rows.len() {
            return Err(GrclError::InvalidInput(
                "constraint tags and rows differ in length".into(),
            ));
        }
        if !self.proposed.is_finite() {
            return Err(GrclError::InvalidInput(
                "proposed gradient has non-finite entries".into(),
            ));
        }
        for row in &self.rows {
            if row.len() != p {
                return Err(GrclError::DimensionMismatch {
                    what: "constraint gradient",
                    expected: p,
                    found: row.len(),
                });
            }
            if !row.is_finite() {
                return Err(GrclError::InvalidInput(
                    "constraint gradient has non-finite entries".into(),
                ));
            }
        }
        Ok(())
    }

    /// `<g_t, g_k>` for every row.
    pub fn alignments(&self) -> Vec<f64> {
        self.rows.iter().map(|r| self.proposed.dot(r)).collect()
    }
}

/// Default feasibility slack `1e-9 (1 + |g_t|)`.
pub fn feasibility_tolerance(proposed: &[f64]) -> f64 {
    1e-9 * (1.0 + dot(proposed, proposed).sqrt())
}

/// Row `k` is violated iff `<g_t, g_k> < -eps`.
pub fn check_violation(cs: &ConstraintSet, eps: f64) -> Vec<bool> {
    cs.alignments().into_iter().map(|a| a < -eps).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub projected: FlatGradient,
    pub multipliers: Vec<f64>,
    pub active: Vec<bool>,
    /// `|g_t - projected|`
    pub distortion: f64,
    /// Violation flags of the proposed gradient, before projection.
    pub violated: Vec<bool>,
}

/// Projects `cs.proposed` onto the constraint cone.
///
/// `ridge` is added to the diagonal of the Gram matrix of the unit-normalized
/// rows. Any positive value relaxes row `i` to `<z, g_i>/|g_i| >= -ridge v_i`
/// (`v_i = u_i |g_i|`), so it should stay 0 unless the caller accepts that
/// slack.
pub fn project(cs: &ConstraintSet, ridge: f64, eps: f64) -> Result<ProjectionResult> {
    cs.validate()?;
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(GrclError::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let k = cs.len();
    let violated = check_violation(cs, eps);
    if !violated.iter().any(|&v| v) {
        return Ok(ProjectionResult {
            projected: cs.proposed.clone(),
            multipliers: vec![0.0; k],
            active: vec![false; k],
            distortion: 0.0,
            violated,
        });
    }

    // Constraints are invariant to positive row scaling, and rows can differ
    // by many orders of magnitude (a nearly converged source loss), so the
    // dual is solved on unit rows. Zero rows constrain nothing.
    let norms: Vec<f64> = cs.rows.iter().map(|r| r.norm()).collect();
    let live: Vec<usize> = (0..k).filter(|&i| norms[i] > 0.0).collect();
    let unit: Vec<FlatGradient> = live
        .iter()
        .map(|&i| cs.rows[i].scaled(1.0 / norms[i]))
        .collect();
    let gram = gram_matrix(&unit, ridge);
    let mut multipliers = vec![0.0; k];
    let mut projected = cs.proposed.clone();
    // A second pass on the (nearly feasible) result absorbs rounding error.
    for _ in 0..2 {
        let linear: Vec<f64> = unit.iter().map(|r| r.dot(&projected)).collect();
        if live.iter().all(|&i| cs.rows[i].dot(&projected) >= -eps) {
            break;
        }
        let scale = dual_scale(&gram, &linear);
        let v = nnls_gram(&gram, &linear, scale)?;
        for (row, &vi) in unit.iter().zip(&v) {
            if vi != 0.0 {
                projected.add_scaled(row, vi);
            }
        }
        for (&i, vi) in live.iter().zip(v) {
            multipliers[i] += vi / norms[i];
        }
    }

    let distortion = distance(&cs.proposed, &projected);
    Ok(ProjectionResult {
        active: multipliers.iter().map(|&u| u > 0.0).collect(),
        projected,
        multipliers,
        distortion,
        violated,
    })
}

fn gram_matrix(rows: &[FlatGradient], ridge: f64) -> Vec<Vec<f64>> {
    let k = rows.len();
    let mut h = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let v = rows[i].dot(&rows[j]);
            h[i][j] = v;
            h[j][i] = v;
        }
        h[i][i] += ridge;
    }
    h
}

/// Magnitude used to make the dual tolerances scale-free.
fn dual_scale(h: &[Vec<f64>], c: &[f64]) -> f64 {
    let diag = h.iter().enumerate().map(|(i, r)| r[i]).fold(0.0, f64::max);
    let lin = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    diag.max(lin).max(f64::MIN_POSITIVE)
}

/// Lawson–Hanson on `min_{u>=0} ½uᵀHu + cᵀu`.
fn nnls_gram(h: &[Vec<f64>], c: &[f64], scale: f64) -> Result<Vec<f64>> {
    let k = c.len();
    let tol = 1e-13 * scale;
    let max_outer = 3 * k + 10;
    let mut u = vec![0.0; k];
    let mut passive = vec![false; k];
    let neg_grad = |u: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| -(c[i] + (0..k).map(|j| h[i][j] * u[j]).sum::<f64>()))
            .collect()
    };

    for _ in 0..max_outer {
        let w = neg_grad(&u);
        let mut candidates: Vec<usize> = (0..k).filter(|&j| !passive[j] && w[j] > tol).collect();
        if candidates.is_empty() {
            return Ok(u);
        }
        candidates.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));

        // Enter the steepest candidate that keeps the passive system solvable.
        let mut entered = None;
        for &j in &candidates {
            passive[j] = true;
            if let Some(s) = solve_passive(h, c, &passive).filter(|s| s[j] > 0.0) {
                entered = Some(s);
                break;
            }
            passive[j] = false;
        }
        let Some(mut s) = entered else {
            // Every remaining ascent direction is numerically dependent on
            // the passive set; the current point is optimal to working
            // precision.
            return Ok(u);
        };

        let mut inner = 0;
        loop {
            if (0..k).all(|i| !passive[i] || s[i] > 0.0) {
                u = s;
                break;
            }
            inner += 1;
            if inner > k + 1 {
                return Err(non_converged(h, c, u, max_outer));
            }
            let mut alpha = f64::INFINITY;
            for i in 0..k {
                if passive[i] && s[i] <= 0.0 {
                    let denom = u[i] - s[i];
                    if denom > 0.0 {
                        alpha = alpha.min(u[i] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for i in 0..k {
                u[i] += alpha * (s[i] - u[i]);
            }
            for i in 0..k {
                if passive[i] && u[i] <= 1e-15 * (1.0 + u.iter().fold(0.0f64, |a, v| a.max(*v))) {
                    passive[i] = false;
                    u[i] = 0.0;
                }
            }
            match solve_passive(h, c, &passive) {
                Some(next) => s = next,
                None => return Err(non_converged(h, c, u, max_outer)),
            }
        }
    }
    Err(non_converged(h, c, u, max_outer))
}

fn non_converged(h: &[Vec<f64>], c: &[f64], u: Vec<f64>, iterations: usize) -> GrclError {
    let k = c.len();
    let residual = (0..k)
        .map(|i| {
            let g = c[i] + (0..k).map(|j| h[i][j] * u[j]).sum::<f64>();
            // projected gradient of the bound-constrained problem
            if u[i] > 0.0 {
                g.abs()
            } else {
                (-g).max(0.0)
            }
        })
        .fold(0.0, f64::max);
    GrclError::SolverNonConvergence {
        iterations,
        residual,
        best: u,
    }
}

/// Solves `H_PP s_P = -c_P`, `s_i = 0` off `P`. `None` if `H_PP` is
/// numerically singular.
fn solve_passive(h: &[Vec<f64>], c: &[f64], passive: &[bool]) -> Option<Vec<f64>> {
    let idx: Vec<usize> = (0..c.len()).filter(|&i| passive[i]).collect();
    let sub: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| idx.iter().map(|&j| h[i][j]).collect())
        .collect();
    let rhs: Vec<f64> = idx.iter().map(|&i| -c[i]).collect();
    let sol = cholesky_solve(&sub, &rhs)?;
    let mut s = vec![0.0; c.len()];
    for (&i, v) in idx.iter().zip(sol) {
        s[i] = v;
    }
    Some(s)
}

/// Cholesky solve with a relative pivot floor.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let max_diag = (0..n).map(|i| a[i][i]).fold(0.0, f64::max);
    let floor = 1e-12 * max_diag;
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|m| l[i][m] * l[j][m]).sum::<f64>();
            if i == j {
                if !(s > floor) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|m| l[i][m] * y[m]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|m| l[m][i] * x[m]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Brute-force projection: tries every active set, projects `g_t` onto the
/// orthogonal complement of the active rows, keeps the closest feasible
/// candidate. Ties go to the smaller active set.
pub fn oracle_project(cs: &ConstraintSet) -> Result<FlatGradient> {
    cs.validate()?;
    let k = cs.len();
    if k > ORACLE_MAX_CONSTRAINTS {
        return Err(GrclError::InvalidInput(format!(
            "oracle supports at most {ORACLE_MAX_CONSTRAINTS} constraints, got {k}"
        )));
    }
    let g = &cs.proposed;
    let g_norm = g.norm();
    let mut masks: Vec<u32> = (0..(1u32 << k)).collect();
    masks.sort_by_key(|m| (m.count_ones(), *m));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in masks {
        let active: Vec<&FlatGradient> = (0..k)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| &cs.rows[i])
            .collect();
        let basis = orthonormal_basis(&active);
        let mut z = g.to_vec();
        for q in &basis {
            let c = dot(q, &z);
            for (zi, qi) in z.iter_mut().zip(q) {
                *zi -= c * qi;
            }
        }
        let feasible = cs
            .rows
            .iter()
            .all(|r| dot(&z, r) >= -1e-9 * (1.0 + g_norm) * r.norm().max(1.0));
        if !feasible {
            continue;
        }
        let d = distance(g, &z);
        let better = match &best {
            None => true,
            Some((bd, _)) => d < bd - 1e-12 * (1.0 + g_norm),
        };
        if better {
            best = Some((d, z));
        }
    }
    // The empty-active candidate is g itself and z = 0 is always feasible, so
    // some candidate survives unless every projection was rejected by noise.
    let (_, z) = best.ok_or_else(|| {
        GrclError::InvalidInput("oracle found no feasible candidate".into())
    })?;
    Ok(FlatGradient::new(z))
}

/// Modified Gram–Schmidt with one reorthogonalization pass; drops vectors
/// that are dependent on earlier ones.
fn orthonormal_basis(rows: &[&FlatGradient]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for row in rows {
        let orig = row.norm();
        if orig == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-10 * orig {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}
