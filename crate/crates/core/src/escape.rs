//! Strict-ascent witnesses at critical points, proving a candidate saddle
//! is not a local maximum, plus a plumbing-level random descent search.
//!
//! Two constructions cover the two cases:
//!
//! * degenerate (`W_H ⋯ W₁ = 0`): perturb the layers one at a time with
//!   uniform Frobenius-ball samples until the leading product turns
//!   nonzero, then flip the sign of the last perturbation — at least one
//!   of the two signed points has strictly greater loss;
//! * non-degenerate: the loss restricted to the last layer is an exact
//!   quadratic whose Hessian is `I ⊗ (W_H ⋯ W₁X)(W_H ⋯ W₁X)ᵀ`; any top
//!   eigenvector gives a direction of strictly positive curvature.

use crate::error::{Error, Result};
use crate::linalg::{Mat, Tolerances};
use crate::net::{loss, Instance, WeightStack};
use crate::sampling::{derived_seed, frobenius_ball_matrix, rng_from};

/// A nearby point with strictly greater loss.
#[derive(Debug, Clone)]
pub struct AscentWitness {
    pub point: WeightStack,
    /// `loss(point) − loss(W)`, strictly positive.
    pub loss_increase: f64,
    /// Layer index whose perturbation produced the witness (1-based).
    pub i_star: usize,
    /// Frobenius norm of the effective end-to-end perturbation.
    pub delta_hat_norm: f64,
    /// Perturbations sampled (degenerate) or losses evaluated
    /// (non-degenerate) before the witness was found.
    pub trials_used: usize,
    /// The seed of the attempt that produced the witness.
    pub seed: u64,
}

/// Outcome of the random descent search.
#[derive(Debug, Clone)]
pub enum DescentOutcome {
    Found { point: WeightStack, loss: f64 },
    NotFound { best_loss: f64 },
}

fn inner_product_and_scale(stack: &WeightStack) -> (Mat, f64) {
    let n = stack.num_weights();
    // n = 1 leaves an empty range, which is the identity on d_x
    let inner = stack.product_range(1, n - 1);
    let scale = (1..n)
        .map(|i| stack.weight(i).norm())
        .product::<f64>()
        .max(1.0);
    (inner, scale)
}

/// The Hessian of the loss with respect to the last layer, vectorized by
/// rows: `I_{d_y} ⊗ (W_H ⋯ W₁X)(W_H ⋯ W₁X)ᵀ`. Positive semidefinite, with
/// a positive eigenvalue exactly when `W_H ⋯ W₁ ≠ 0`.
pub fn hessian_block_last_layer(stack: &WeightStack, inst: &Instance) -> Result<Mat> {
    stack.check_compatible(inst)?;
    let n = stack.num_weights();
    let d_y = stack.dims().output_dim();
    let d_inner = stack.dims().d[n - 1];
    if d_y * d_inner > 4096 {
        return Err(Error::InvalidInput(format!(
            "Hessian block would be {0}×{0}; refusing beyond 4096",
            d_y * d_inner
        )));
    }
    let gx = stack.product_range(1, n - 1) * inst.x();
    let s = &gx * gx.transpose();
    Ok(Mat::identity(d_y, d_y).kronecker(&s))
}

/// Ascent witness at a degenerate critical point (`W_H ⋯ W₁ ≈ 0`):
/// perturbs layers in order with uniform ε-ball samples, stops at the
/// first index `i*` whose leading product becomes nonzero, and returns
/// whichever of the two sign choices at `i*` strictly increases the loss.
///
/// Measure-zero sampling failures are retried with freshly derived seeds,
/// at most three times.
pub fn witness_ascent_degenerate(
    stack: &WeightStack,
    inst: &Instance,
    epsilon: f64,
    seed: u64,
    tol: &Tolerances,
) -> Result<AscentWitness> {
    stack.check_compatible(inst)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let n = stack.num_weights();
    let (inner, inner_scale) = inner_product_and_scale(stack);
    if inner.norm() > tol.zero_tol * inner_scale {
        return Err(Error::UseHessianPath);
    }

    let base_loss = loss(stack, inst);
    let mut trials_used = 0usize;

    for attempt in 0..3u64 {
        let attempt_seed = derived_seed(seed, attempt);
        let mut rng = rng_from(attempt_seed);
        // accepted perturbed layers V₁ … V_{i−1} and their running product
        let mut v_layers: Vec<Mat> = Vec::new();
        let mut v_product = Mat::identity(stack.dims().input_dim(), stack.dims().input_dim());
        let mut found: Option<(usize, Mat)> = None;

        for i in 1..=n {
            let w_i = stack.weight(i);
            let delta = frobenius_ball_matrix(w_i.nrows(), w_i.ncols(), epsilon, &mut rng);
            trials_used += 1;
            let v_i = w_i + &delta;
            let leading = stack.product_range(i + 1, n) * (&v_i * &v_product);
            let scale = (i + 1..=n)
                .map(|j| stack.weight(j).norm())
                .product::<f64>()
                * v_layers.iter().map(|v| v.norm()).product::<f64>()
                * v_i.norm();
            if leading.norm() > tol.zero_tol * scale.max(1.0) {
                found = Some((i, delta));
                break;
            }
            v_product = &v_i * &v_product;
            v_layers.push(v_i);
        }

        let Some((i_star, delta)) = found else {
            continue; // measure-zero event: every leading product stayed zero
        };

        // effective end-to-end perturbation
        let delta_hat = stack.product_range(i_star + 1, n) * (&delta * &v_product);

        let build = |delta_signed: Mat| -> WeightStack {
            let mut weights: Vec<Mat> = Vec::with_capacity(n);
            weights.extend(v_layers.iter().cloned());
            weights.push(stack.weight(i_star) + delta_signed);
            for j in i_star + 1..=n {
                weights.push(stack.weight(j).clone());
            }
            WeightStack::new(weights, stack.dims().m).expect("shapes preserved")
        };
        let plus = build(delta.clone());
        let minus = build(-delta);
        let loss_plus = loss(&plus, inst);
        let loss_minus = loss(&minus, inst);

        // sharp algebraic check: the two signed losses sum to
        // 2·L(W) + ‖Δ̂X‖²_F
        let cross = (&delta_hat * inst.x()).norm_squared();
        let identity_gap =
            (loss_plus + loss_minus - 2.0 * base_loss - cross).abs();
        let identity_scale = (loss_plus + loss_minus).max(1.0);
        if identity_gap > 1e-9 * identity_scale {
            return Err(Error::Numerical(format!(
                "signed-loss identity violated: residual {identity_gap:.3e} \
                 against scale {identity_scale:.3e}"
            )));
        }

        let (point, new_loss) = if loss_plus >= loss_minus {
            (plus, loss_plus)
        } else {
            (minus, loss_minus)
        };
        if new_loss > base_loss {
            return Ok(AscentWitness {
                point,
                loss_increase: new_loss - base_loss,
                i_star,
                delta_hat_norm: delta_hat.norm(),
                trials_used,
                seed: attempt_seed,
            });
        }
    }
    Err(Error::WitnessSearchFailed)
}

/// Ascent witness at a point with `W_H ⋯ W₁ ≠ 0`: perturbs the last layer
/// along a top eigenvector of [`hessian_block_last_layer`], line-searching
/// `t ∈ {±10⁻ʲ}` for a strict loss increase.
pub fn witness_ascent_nondegenerate(
    stack: &WeightStack,
    inst: &Instance,
    seed: u64,
    tol: &Tolerances,
) -> Result<AscentWitness> {
    stack.check_compatible(inst)?;
    let (inner, inner_scale) = inner_product_and_scale(stack);
    if inner.norm() <= tol.zero_tol * inner_scale {
        return Err(Error::InvalidInput(
            "inner product is numerically zero; use the perturbation witness".into(),
        ));
    }
    let n = stack.num_weights();
    let d_y = stack.dims().output_dim();
    let d_inner = stack.dims().d[n - 1];

    let block = hessian_block_last_layer(stack, inst)?;
    let eigen = nalgebra::SymmetricEigen::new(block);
    let mut top = 0usize;
    for i in 1..eigen.eigenvalues.len() {
        if eigen.eigenvalues[i] > eigen.eigenvalues[top] {
            top = i;
        }
    }
    if eigen.eigenvalues[top] <= 0.0 {
        return Err(Error::Numerical(
            "Hessian block has no positive eigenvalue despite nonzero inner product".into(),
        ));
    }
    let q = eigen.eigenvectors.column(top);
    // rows of the last layer are stacked contiguously in the vectorization
    let mut direction = Mat::zeros(d_y, d_inner);
    for r in 0..d_y {
        for c in 0..d_inner {
            direction[(r, c)] = q[r * d_inner + c];
        }
    }
    direction /= direction.norm();

    let base_loss = loss(stack, inst);
    let mut trials_used = 0usize;
    for j in 1..=12 {
        for sign in [1.0, -1.0] {
            let t = sign * 10f64.powi(-j);
            let candidate = stack
                .with_weight(n, stack.weight(n) + &direction * t)
                .expect("shape preserved");
            trials_used += 1;
            let l = loss(&candidate, inst);
            if l > base_loss {
                return Ok(AscentWitness {
                    point: candidate,
                    loss_increase: l - base_loss,
                    i_star: n,
                    delta_hat_norm: t.abs(),
                    trials_used,
                    seed,
                });
            }
        }
    }
    Err(Error::WitnessSearchFailed)
}

/// Samples perturbed stacks in the per-layer Frobenius ball and returns
/// the first with loss strictly below `loss(W) − 1e-12`.
pub fn random_descent(
    stack: &WeightStack,
    inst: &Instance,
    radius: f64,
    trials: usize,
    seed: u64,
) -> Result<DescentOutcome> {
    stack.check_compatible(inst)?;
    if trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    let base_loss = loss(stack, inst);
    let mut best = f64::INFINITY;
    for trial in 0..trials {
        let mut rng = rng_from(derived_seed(seed, trial as u64));
        let weights: Vec<Mat> = (1..=stack.num_weights())
            .map(|i| {
                let w = stack.weight(i);
                w + frobenius_ball_matrix(w.nrows(), w.ncols(), radius, &mut rng)
            })
            .collect();
        let candidate = WeightStack::new(weights, stack.dims().m).expect("shapes preserved");
        let l = loss(&candidate, inst);
        if l < base_loss - 1e-12 {
            return Ok(DescentOutcome::Found {
                point: candidate,
                loss: l,
            });
        }
        best = best.min(l);
    }
    Ok(DescentOutcome::NotFound { best_loss: best })
}
