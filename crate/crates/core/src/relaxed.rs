//! Closed-form solution of the relaxed problem: minimize `½‖RX − Y‖²_F`
//! over matrices `R` with `rank(R) ≤ k`. The optimal value is the global
//! reference every certification decision compares against.
//!
//! With `k = min(d_x, d_y)` the constraint is inactive and the optimum is
//! the least-squares map `YXᵀ(XXᵀ)⁻¹`. With `k` strictly smaller, the
//! optimum is that map projected onto its top-k left singular subspace
//! taken from `M = YXᵀ(XXᵀ)⁻¹X`.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, SPECTRUM_GAP_REL_TOL};
use crate::net::Instance;

/// Optimal point of the relaxed problem together with its loss value.
#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    /// The optimal coefficient matrix, `d_y × d_x`.
    pub r_star: Mat,
    /// `½‖R★X − Y‖²_F`.
    pub optimal_loss: f64,
    /// Top-k left singular vectors of `M`; absent when the rank constraint
    /// is inactive.
    pub u_hat: Option<Mat>,
    pub k: usize,
}

/// The two orthogonal pieces the optimal loss decomposes into:
/// `½‖RX − M‖²_F` (paid for the rank constraint) plus `½‖M − Y‖²_F`
/// (paid for leaving the row space of `X`), with `M = YXᵀ(XXᵀ)⁻¹X`.
#[derive(Debug, Clone, Copy)]
pub struct LossDecomposition {
    pub total: f64,
    pub low_rank_term: f64,
    pub projection_term: f64,
}

/// Unconstrained optimum `R★ = YXᵀ(XXᵀ)⁻¹`, valid when
/// `k = min(d_x, d_y)`.
pub fn solve_full_rank(inst: &Instance) -> Result<RelaxedSolution> {
    inst.require_validated()?;
    let r_star = inst.least_squares_map()?;
    let optimal_loss = 0.5 * (&r_star * inst.x() - inst.y()).norm_squared();
    Ok(RelaxedSolution {
        r_star,
        optimal_loss,
        u_hat: None,
        k: inst.input_dim().min(inst.output_dim()),
    })
}

/// Rank-constrained optimum `R★ = ÛÛᵀ YXᵀ(XXᵀ)⁻¹` for
/// `1 ≤ k < min(d_x, d_y)`, where `Û` spans the top-k left singular
/// subspace of `M = YXᵀ(XXᵀ)⁻¹X`.
pub fn solve_rank_constrained(inst: &Instance, k: usize) -> Result<RelaxedSolution> {
    inst.require_validated()?;
    let full = inst.input_dim().min(inst.output_dim());
    if k == 0 || k >= full {
        return Err(Error::InvalidInput(format!(
            "rank bound k = {k} must satisfy 1 ≤ k < min(d_x, d_y) = {full}"
        )));
    }
    let r_full = inst.least_squares_map()?;
    let fitted = &r_full * inst.x();
    let s = linalg::singular_values(&fitted)?;
    let gap = (s[k - 1] - s[k]) / s[0];
    if gap < SPECTRUM_GAP_REL_TOL {
        return Err(Error::DegenerateSpectrum {
            index: k,
            gap,
            tol: SPECTRUM_GAP_REL_TOL,
        });
    }
    let u_hat = linalg::top_k_left_vectors(&fitted, k)?;
    let r_star = &u_hat * u_hat.transpose() * &r_full;
    let optimal_loss = 0.5 * (&r_star * inst.x() - inst.y()).norm_squared();
    Ok(RelaxedSolution {
        r_star,
        optimal_loss,
        u_hat: Some(u_hat),
        k,
    })
}

/// Dispatches on `k`, returning both the optimal loss and its orthogonal
/// decomposition; the decomposition identity is verified on every call.
pub fn optimal_loss(inst: &Instance, k: usize) -> Result<(RelaxedSolution, LossDecomposition)> {
    inst.require_validated()?;
    let full = inst.input_dim().min(inst.output_dim());
    let sol = if k == full {
        solve_full_rank(inst)?
    } else {
        solve_rank_constrained(inst, k)?
    };
    let fitted = inst.fitted_outputs()?;
    let low_rank_term = 0.5 * (&sol.r_star * inst.x() - &fitted).norm_squared();
    let projection_term = 0.5 * (&fitted - inst.y()).norm_squared();
    let decomp = LossDecomposition {
        total: sol.optimal_loss,
        low_rank_term,
        projection_term,
    };
    let gap = (decomp.total - (low_rank_term + projection_term)).abs();
    if gap > 1e-10 * decomp.total.max(1.0) {
        return Err(Error::Numerical(format!(
            "orthogonal loss decomposition failed: total {} vs {} + {}",
            decomp.total, low_rank_term, projection_term
        )));
    }
    Ok((sol, decomp))
}
