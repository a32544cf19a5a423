//! Tolerance-aware dense linear algebra primitives shared by every other
//! module: canonical SVD, numerical rank, truncated left subspaces,
//! projector-based subspace comparison, singular-value extrema, and the
//! Frobenius product lower bounds.
//!
//! All routines are pure functions over [`Mat`] values. Rank and equality
//! questions that are exact in real arithmetic are operationalized here with
//! explicit thresholds carried by [`Tolerances`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix used throughout the crate.
pub type Mat = DMatrix<f64>;

/// Relative gap below which two adjacent singular values are treated as a
/// degenerate (non-unique) spectrum cut.
pub const SPECTRUM_GAP_REL_TOL: f64 = 1e-8;

/// Thresholds that operationalize exact rank/equality conditions in
/// floating point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative singular-value cutoff for numerical rank.
    pub rank_rel_tol: f64,
    /// Projector Frobenius-distance cutoff for subspace equality.
    pub subspace_tol: f64,
    /// Scaled gradient-norm cutoff for criticality.
    pub grad_tol: f64,
    /// Scaled Frobenius-norm cutoff for "this matrix is zero".
    pub zero_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_rel_tol: 1e-8,
            subspace_tol: 1e-6,
            grad_tol: 1e-8,
            zero_tol: 1e-8,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rank_rel_tol,
            self.subspace_tol,
            self.grad_tol,
            self.zero_tol,
        ];
        if all.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::InvalidInput(
                "all tolerances must be strictly positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Thin SVD `A = U diag(σ) Vᵀ` with a deterministic sign convention.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, `m × r` with orthonormal columns.
    pub u: Mat,
    /// Singular values in non-increasing order, length `r = min(m, n)`.
    pub singular_values: Vec<f64>,
    /// Right singular vectors, `n × r` with orthonormal columns.
    pub v: Mat,
}

impl SvdResult {
    /// Multiplies the factors back together.
    pub fn reconstruct(&self) -> Mat {
        let r = self.singular_values.len();
        let mut us = self.u.clone();
        for j in 0..r {
            us.column_mut(j).scale_mut(self.singular_values[j]);
        }
        &us * self.v.transpose()
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }
}

pub(crate) fn ensure_finite(a: &Mat, what: &str) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{what} contains non-finite entries"
        )));
    }
    Ok(())
}

fn ensure_nonempty(a: &Mat, what: &str) -> Result<()> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidInput(format!("{what} is empty")));
    }
    Ok(())
}

/// Thin SVD with singular values sorted in non-increasing order.
///
/// Signs are fixed so that the largest-magnitude entry of each column of `U`
/// is positive (magnitude ties broken by lowest row index), making the
/// factorization deterministic across runs.
pub fn svd(a: &Mat) -> Result<SvdResult> {
    ensure_finite(a, "svd input")?;
    ensure_nonempty(a, "svd input")?;
    let dec = a
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let mut u = dec.u.expect("u requested");
    let mut v_t = dec.v_t.expect("v_t requested");
    let s: Vec<f64> = dec.singular_values.iter().copied().collect();
    for j in 0..s.len() {
        let col = u.column(j);
        let mut lead = 0usize;
        let mut lead_abs = col[0].abs();
        for i in 1..col.len() {
            if col[i].abs() > lead_abs {
                lead_abs = col[i].abs();
                lead = i;
            }
        }
        if u[(lead, j)] < 0.0 {
            u.column_mut(j).neg_mut();
            v_t.row_mut(j).neg_mut();
        }
    }
    Ok(SvdResult {
        u,
        singular_values: s,
        v: v_t.transpose(),
    })
}

/// Singular values only, sorted in non-increasing order.
pub fn singular_values(a: &Mat) -> Result<Vec<f64>> {
    ensure_finite(a, "singular-value input")?;
    ensure_nonempty(a, "singular-value input")?;
    let dec = a
        .clone()
        .try_svd(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    Ok(dec.singular_values.iter().copied().collect())
}

/// Count of singular values above `rank_rel_tol · σ_max`.
///
/// The zero matrix is special-cased through the absolute `zero_tol` so the
/// relative threshold never degenerates to `0 · rel_tol`.
pub fn numerical_rank(a: &Mat, tol: &Tolerances) -> Result<usize> {
    let s = singular_values(a)?;
    let sigma_max = s.first().copied().unwrap_or(0.0);
    if sigma_max <= tol.zero_tol {
        return Ok(0);
    }
    let cutoff = tol.rank_rel_tol * sigma_max;
    Ok(s.iter().filter(|&&x| x > cutoff).count())
}

/// First `k` left singular vectors of `a`, requiring a strict spectrum gap
/// at the cut so the returned subspace is unique.
pub fn top_k_left_vectors(a: &Mat, k: usize) -> Result<Mat> {
    let r = a.nrows().min(a.ncols());
    if k == 0 || k > r {
        return Err(Error::InvalidInput(format!(
            "k = {k} outside 1..={r} for a {}×{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let dec = svd(a)?;
    if k < r {
        let sigma_max = dec.sigma_max();
        let gap = if sigma_max > 0.0 {
            (dec.singular_values[k - 1] - dec.singular_values[k]) / sigma_max
        } else {
            0.0
        };
        if gap <= 1e-10 {
            return Err(Error::DegenerateSpectrum {
                index: k,
                gap,
                tol: 1e-10,
            });
        }
    }
    Ok(dec.u.columns(0, k).into_owned())
}

/// Result of comparing two column spans by orthogonal-projector distance.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceComparison {
    pub equal: bool,
    /// `‖P₁ − P₂‖_F` where `Pᵢ` projects onto `col(Uᵢ)`.
    pub distance: f64,
}

/// Orthonormal basis for the numerical column space of `a`.
fn orthonormal_basis(a: &Mat, tol: &Tolerances) -> Result<Mat> {
    if a.ncols() == 0 {
        return Err(Error::InvalidInput("subspace basis has zero columns".into()));
    }
    let dec = svd(a)?;
    let sigma_max = dec.sigma_max();
    if sigma_max <= tol.zero_tol {
        return Err(Error::InvalidInput(
            "subspace basis is numerically zero".into(),
        ));
    }
    let cutoff = tol.rank_rel_tol * sigma_max;
    let rank = dec.singular_values.iter().filter(|&&x| x > cutoff).count();
    Ok(dec.u.columns(0, rank).into_owned())
}

/// Tests `col(u1) = col(u2)` via `‖P₁ − P₂‖_F ≤ subspace_tol`.
///
/// Inputs need not have orthonormal columns; each is orthonormalized
/// internally, so the result depends only on the spans.
pub fn subspaces_equal(u1: &Mat, u2: &Mat, tol: &Tolerances) -> Result<SubspaceComparison> {
    if u1.nrows() != u2.nrows() {
        return Err(Error::InvalidInput(format!(
            "subspace bases live in different ambient spaces ({} vs {} rows)",
            u1.nrows(),
            u2.nrows()
        )));
    }
    let q1 = orthonormal_basis(u1, tol)?;
    let q2 = orthonormal_basis(u2, tol)?;
    let p1 = &q1 * q1.transpose();
    let p2 = &q2 * q2.transpose();
    let distance = (&p1 - &p2).norm();
    Ok(SubspaceComparison {
        equal: distance <= tol.subspace_tol,
        distance,
    })
}

/// Largest and smallest singular values; the smallest is the
/// `min(rows, cols)`-th value, so rank-deficient matrices report 0.
pub fn sigma_extrema(a: &Mat) -> Result<(f64, f64)> {
    let s = singular_values(a)?;
    Ok((s[0], s[s.len() - 1]))
}

/// Both sides of the product lower bounds `‖AB‖²_F ≥ σ_min²(A)‖B‖²_F`
/// (valid when A has at least as many rows as columns) and
/// `‖AB‖²_F ≥ σ_min²(B)‖A‖²_F` (valid when B has at least as many columns
/// as rows), evaluated unconditionally with flags for which shape
/// conditions actually hold.
#[derive(Debug, Clone, Copy)]
pub struct FrobeniusBound {
    /// `‖AB‖²_F`
    pub lhs: f64,
    /// `σ_min²(A) · ‖B‖²_F`
    pub rhs_sigma_a: f64,
    /// `σ_min²(B) · ‖A‖²_F`
    pub rhs_sigma_b: f64,
    /// A is square or tall, so `rhs_sigma_a` is a genuine lower bound.
    pub a_shape_ok: bool,
    /// B is square or wide, so `rhs_sigma_b` is a genuine lower bound.
    pub b_shape_ok: bool,
}

pub fn frobenius_bound_check(a: &Mat, b: &Mat) -> Result<FrobeniusBound> {
    if a.ncols() != b.nrows() {
        return Err(Error::InvalidInput(format!(
            "inner dimensions differ: {}×{} times {}×{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    ensure_finite(a, "left factor")?;
    ensure_finite(b, "right factor")?;
    let ab = a * b;
    let (_, sig_min_a) = sigma_extrema(a)?;
    let (_, sig_min_b) = sigma_extrema(b)?;
    Ok(FrobeniusBound {
        lhs: ab.norm_squared(),
        rhs_sigma_a: sig_min_a * sig_min_a * b.norm_squared(),
        rhs_sigma_b: sig_min_b * sig_min_b * a.norm_squared(),
        a_shape_ok: a.nrows() >= a.ncols(),
        b_shape_ok: b.nrows() <= b.ncols(),
    })
}

// ── CSV matrix files ─────────────────────────────────────────────────

/// Reads a matrix from CSV: one row per line, comma-separated decimal
/// fields, no header; dimensions are inferred.
pub fn read_matrix_csv(path: &std::path::Path) -> Result<Mat> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!(
                        "{}:{}: bad float {f:?}: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::InvalidInput(format!(
                    "{}:{}: expected {} fields, found {}",
                    path.display(),
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no rows in matrix file",
            path.display()
        )));
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    let m = Mat::from_fn(nrows, ncols, |i, j| rows[i][j]);
    ensure_finite(&m, "matrix file")?;
    Ok(m)
}

/// Writes a matrix as CSV with 17 significant digits per field, enough for
/// exact f64 round trips.
pub fn write_matrix_csv(path: &std::path::Path, a: &Mat) -> Result<()> {
    let mut out = String::new();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.16e}", a[(i, j)]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
