//! Certification of critical points. A candidate weight stack is classified
//! as a global minimum, a saddle point, or not critical at all, using only
//! efficiently checkable rank and subspace tests:
//!
//! * with no strict bottleneck (`k = min(d_x, d_y)`), a critical point is a
//!   global minimum exactly when the end-to-end product has full rank `k`;
//! * with a strict bottleneck (`k < min(d_x, d_y)`), it additionally needs
//!   the column space of the post-bottleneck product to match the top-k
//!   left singular subspace `col(Û)` of `YXᵀ(XXᵀ)⁻¹X`.
//!
//! Every certificate carries the numerical evidence behind the verdict.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Tolerances};
use crate::net::{self, Instance, WeightStack};
use crate::relaxed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    GlobalMin,
    Saddle,
    NotCritical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `k = min(d_x, d_y)`: the rank test alone decides.
    FullBottleneck,
    /// `k < min(d_x, d_y)`: the subspace test also applies.
    StrictBottleneck,
}

/// Classification of a point together with all the evidence used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificate {
    pub verdict: Verdict,
    /// Frobenius norm of each per-layer gradient.
    pub grad_norms: Vec<f64>,
    pub product_rank: usize,
    pub k: usize,
    pub regime: Regime,
    /// Projector distance between the post-bottleneck column space and
    /// `col(Û)`; present only in the strict-bottleneck regime.
    pub subspace_distance: Option<f64>,
    pub in_v1: bool,
    /// Present only in the strict-bottleneck regime.
    pub in_v2: Option<bool>,
    /// `L(W) − optimal_loss` against the relaxed problem at rank `k`.
    pub loss_gap: f64,
    /// `(‖A_pE‖_F, ‖EB_{p+1}‖_F)` at the bottleneck split.
    pub criticality_residuals: (f64, f64),
    /// The product's k-th singular value sits within a factor of 10 of the
    /// rank cutoff, so the rank decision is fragile.
    pub marginal: bool,
}

/// Outcome of the gradient-norm criticality test.
#[derive(Debug, Clone)]
pub struct CriticalityCheck {
    pub critical: bool,
    pub grad_norms: Vec<f64>,
    /// The threshold actually applied, `grad_tol · max(1, ‖YXᵀ‖_F)`.
    pub threshold: f64,
}

/// True iff every per-layer gradient norm is at most
/// `grad_tol · max(1, ‖YXᵀ‖_F)`.
pub fn is_critical(
    stack: &WeightStack,
    inst: &Instance,
    tol: &Tolerances,
) -> Result<CriticalityCheck> {
    inst.require_validated()?;
    stack.check_compatible(inst)?;
    let grad_norms: Vec<f64> = net::gradients(stack, inst)
        .iter()
        .map(|g| g.norm())
        .collect();
    let threshold = tol.grad_tol * inst.gradient_scale();
    let max = grad_norms.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(CriticalityCheck {
        critical: max <= threshold,
        grad_norms,
        threshold,
    })
}

/// Outcome of the full-product rank test.
#[derive(Debug, Clone, Copy)]
pub struct V1Check {
    pub in_v1: bool,
    pub product_rank: usize,
    /// σ_k of the product is within a factor of 10 of the rank cutoff.
    pub marginal: bool,
}

/// Tests `rank(W_{H+1} ⋯ W₁) = k`.
pub fn check_v1(stack: &WeightStack, tol: &Tolerances) -> Result<V1Check> {
    let k = stack.dims().bottleneck();
    let product = stack.forward_product();
    let product_rank = linalg::numerical_rank(&product, tol)?;
    let s = linalg::singular_values(&product)?;
    let sigma_max = s[0];
    let marginal = if sigma_max > tol.zero_tol && k <= s.len() {
        let cutoff = tol.rank_rel_tol * sigma_max;
        let sigma_k = s[k - 1];
        sigma_k > cutoff / 10.0 && sigma_k < cutoff * 10.0
    } else {
        false
    };
    Ok(V1Check {
        in_v1: product_rank == k,
        product_rank,
        marginal,
    })
}

/// Outcome of the post-bottleneck subspace test.
#[derive(Debug, Clone, Copy)]
pub struct V2Check {
    pub in_v2: bool,
    pub subspace_distance: f64,
}

/// Tests membership in the strict-bottleneck optimality set: full product
/// rank `k` and `col(W_{H+1} ⋯ W_{p+1}) = col(Û)`.
pub fn check_v2(stack: &WeightStack, inst: &Instance, tol: &Tolerances) -> Result<V2Check> {
    let p = stack.dims().bottleneck_layer();
    check_v2_at(stack, inst, tol, p)
}

/// Same as [`check_v2`] with an explicit bottleneck split index; verdicts
/// are invariant to which minimal-width layer is chosen.
pub fn check_v2_at(
    stack: &WeightStack,
    inst: &Instance,
    tol: &Tolerances,
    p: usize,
) -> Result<V2Check> {
    inst.require_validated()?;
    stack.check_compatible(inst)?;
    let dims = stack.dims();
    if !dims.is_strict_bottleneck() {
        return Err(Error::WrongRegime(
            "the subspace test only applies when k < min(d_x, d_y)".into(),
        ));
    }
    let k = dims.bottleneck();
    let post = stack.product_range(p + 1, stack.num_weights());
    let u_hat = linalg::top_k_left_vectors(&inst.fitted_outputs()?, k)?;
    if linalg::numerical_rank(&post, tol)? == 0 {
        // the zero subspace against a k-dimensional one
        return Ok(V2Check {
            in_v2: false,
            subspace_distance: (k as f64).sqrt(),
        });
    }
    let v1 = check_v1(stack, tol)?;
    let cmp = linalg::subspaces_equal(&post, &u_hat, tol)?;
    Ok(V2Check {
        in_v2: v1.in_v1 && cmp.equal,
        subspace_distance: cmp.distance,
    })
}

/// The two residuals whose joint vanishing characterizes criticality
/// inside the full-rank set, plus agreement with the gradient test.
#[derive(Debug, Clone, Copy)]
pub struct CriticalityCharacterization {
    /// `‖A_pE‖_F`
    pub suffix_residual_norm: f64,
    /// `‖EB_{p+1}‖_F`
    pub prefix_residual_norm: f64,
    /// Both residuals vanish exactly when the gradient test says critical.
    pub consistent: bool,
}

/// Evaluates `A_pE` and `EB_{p+1}` at the bottleneck split and
/// cross-checks the characterization "critical ⟺ both vanish" against the
/// gradient-norm test.
pub fn check_criticality_characterization(
    stack: &WeightStack,
    inst: &Instance,
    tol: &Tolerances,
) -> Result<CriticalityCharacterization> {
    let p = stack.dims().bottleneck_layer();
    check_criticality_characterization_at(stack, inst, tol, p)
}

pub fn check_criticality_characterization_at(
    stack: &WeightStack,
    inst: &Instance,
    tol: &Tolerances,
    p: usize,
) -> Result<CriticalityCharacterization> {
    inst.require_validated()?;
    stack.check_compatible(inst)?;
    if !stack.dims().is_strict_bottleneck() {
        return Err(Error::WrongRegime(
            "the characterization is stated for k < min(d_x, d_y)".into(),
        ));
    }
    if !check_v1(stack, tol)?.in_v1 {
        return Err(Error::NotInV1);
    }
    let n = stack.num_weights();
    let suffix_t = stack.product_range(p + 1, n).transpose();
    let prefix_t = stack.product_range(1, p).transpose();
    let residual_xt =
        (stack.forward_product() * inst.x() - inst.y()) * inst.x().transpose();
    let suffix_residual_norm = (&suffix_t * &residual_xt).norm();
    let prefix_residual_norm = (&residual_xt * &prefix_t).norm();
    let threshold = tol.zero_tol * inst.gradient_scale();
    let both_vanish = suffix_residual_norm <= threshold && prefix_residual_norm <= threshold;
    let critical = is_critical(stack, inst, tol)?.critical;
    Ok(CriticalityCharacterization {
        suffix_residual_norm,
        prefix_residual_norm,
        consistent: both_vanish == critical,
    })
}

/// Full classification with the default bottleneck split.
pub fn classify(stack: &WeightStack, inst: &Instance, tol: &Tolerances) -> Result<Certificate> {
    let p = stack.dims().bottleneck_layer();
    classify_at(stack, inst, tol, p)
}

/// Classification with an explicit bottleneck split index `p`.
pub fn classify_at(
    stack: &WeightStack,
    inst: &Instance,
    tol: &Tolerances,
    p: usize,
) -> Result<Certificate> {
    inst.require_validated()?;
    stack.check_compatible(inst)?;
    tol.validate()?;
    let dims = stack.dims();
    let k = dims.bottleneck();
    let regime = if dims.is_strict_bottleneck() {
        Regime::StrictBottleneck
    } else {
        Regime::FullBottleneck
    };

    let crit = is_critical(stack, inst, tol)?;
    let v1 = check_v1(stack, tol)?;
    let (sol, _) = relaxed::optimal_loss(inst, k)?;
    let loss_gap = net::loss(stack, inst) - sol.optimal_loss;

    let n = stack.num_weights();
    let suffix_t = stack.product_range(p + 1, n).transpose();
    let prefix_t = stack.product_range(1, p).transpose();
    let residual_xt =
        (stack.forward_product() * inst.x() - inst.y()) * inst.x().transpose();
    let criticality_residuals = (
        (&suffix_t * &residual_xt).norm(),
        (&residual_xt * &prefix_t).norm(),
    );

    let (in_v2, subspace_distance) = match regime {
        Regime::FullBottleneck => (None, None),
        Regime::StrictBottleneck => {
            let v2 = check_v2_at(stack, inst, tol, p)?;
            (Some(v2.in_v2), Some(v2.subspace_distance))
        }
    };

    let verdict = if !crit.critical {
        Verdict::NotCritical
    } else {
        let optimal_here = match regime {
            Regime::FullBottleneck => v1.in_v1,
            Regime::StrictBottleneck => in_v2.unwrap(),
        };
        if optimal_here {
            Verdict::GlobalMin
        } else {
            Verdict::Saddle
        }
    };

    if verdict == Verdict::GlobalMin {
        let gap_tol = 1e-6 * sol.optimal_loss.max(1.0);
        if loss_gap > gap_tol {
            return Err(Error::Numerical(format!(
                "certified GlobalMin but loss gap {loss_gap:.3e} exceeds {gap_tol:.3e}; \
                 tolerances are inconsistent for this input"
            )));
        }
    }

    Ok(Certificate {
        verdict,
        grad_norms: crit.grad_norms,
        product_rank: v1.product_rank,
        k,
        regime,
        subspace_distance,
        in_v1: v1.in_v1,
        in_v2,
        loss_gap,
        criticality_residuals,
        marginal: v1.marginal,
    })
}

/// Tests `σ_max(Vᵢ) < 1` for every residual-parameterized layer. When this
/// holds, every `I + Vᵢ` is invertible, so the induced plain stack lies in
/// the full-rank set.
pub fn check_residual_condition(v: &[Mat]) -> Result<bool> {
    if v.is_empty() {
        return Err(Error::InvalidInput("need at least one layer".into()));
    }
    let d = v[0].nrows();
    for (i, layer) in v.iter().enumerate() {
        if layer.nrows() != d || layer.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "layer {} is not square of dimension {d}",
                i + 1
            )));
        }
    }
    for layer in v {
        let (sigma_max, _) = linalg::sigma_extrema(layer)?;
        if sigma_max >= 1.0 {
            return Ok(false);
        }
    }
    Ok(true)
}
