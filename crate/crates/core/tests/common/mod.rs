//! Shared helpers and independent oracles for the integration suites.
//! The oracles deliberately avoid the library's solution paths: gradients
//! come from central finite differences of the loss, and the rank-
//! constrained optimum comes from multi-restart alternating least squares.
#![allow(dead_code)] // each test target uses a different subset

use deeplin::linalg::Tolerances;
use deeplin::net::{loss, Instance, WeightStack};
use deeplin::sampling::{derived_seed, normal_matrix, rng_from};
use deeplin::Mat;

pub fn random_stack(d: &[usize], m: usize, seed: u64) -> WeightStack {
    let mut rng = rng_from(seed);
    let weights = (1..d.len())
        .map(|i| normal_matrix(d[i], d[i - 1], 1.0, &mut rng))
        .collect();
    WeightStack::new(weights, m).unwrap()
}

pub fn random_instance(d_x: usize, d_y: usize, m: usize, seed: u64) -> Instance {
    let mut rng = rng_from(seed);
    let x = normal_matrix(d_x, m, 1.0, &mut rng);
    let y = normal_matrix(d_y, m, 1.0, &mut rng);
    Instance::new(x, y)
        .unwrap()
        .validate(&Tolerances::default())
        .unwrap()
}

pub fn zero_stack(d: &[usize], m: usize) -> WeightStack {
    let weights = (1..d.len()).map(|i| Mat::zeros(d[i], d[i - 1])).collect();
    WeightStack::new(weights, m).unwrap()
}

/// Central finite differences of the loss in every weight entry.
pub fn fd_gradients(stack: &WeightStack, inst: &Instance, step: f64) -> Vec<Mat> {
    let mut out = Vec::new();
    for i in 1..=stack.num_weights() {
        let w = stack.weight(i);
        let mut g = Mat::zeros(w.nrows(), w.ncols());
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                let mut plus = w.clone();
                plus[(r, c)] += step;
                let mut minus = w.clone();
                minus[(r, c)] -= step;
                let lp = loss(&stack.with_weight(i, plus).unwrap(), inst);
                let lm = loss(&stack.with_weight(i, minus).unwrap(), inst);
                g[(r, c)] = (lp - lm) / (2.0 * step);
            }
        }
        out.push(g);
    }
    out
}

pub struct AlsOutcome {
    pub best_loss: f64,
    pub any_converged: bool,
}

/// Multi-restart alternating least squares on `R = UVᵀ` for the
/// rank-constrained problem `min ½‖UVᵀX − Y‖²`. Each half-step solves its
/// exact normal equations; a restart counts as converged when the loss
/// stops moving before the sweep cap.
pub fn als_rank_constrained(
    inst: &Instance,
    k: usize,
    restarts: usize,
    sweeps: usize,
    seed: u64,
) -> AlsOutcome {
    let x = inst.x();
    let y = inst.y();
    let xxt = x * x.transpose();
    let yxt = y * x.transpose();
    let d_x = inst.input_dim();

    let mut best_loss = f64::INFINITY;
    let mut any_converged = false;

    for restart in 0..restarts {
        let mut rng = rng_from(derived_seed(seed, restart as u64));
        // the first half-step overwrites U, so only V needs an init draw
        let mut v = normal_matrix(d_x, k, 1.0, &mut rng);
        let mut prev = f64::INFINITY;
        let mut converged = false;

        for _ in 0..sweeps {
            // fix V, solve for U: U (VᵀXXᵀV) = YXᵀV
            let vxxv = v.transpose() * &xxt * &v;
            let rhs_u = &yxt * &v;
            let Some(sol) = vxxv.lu().solve(&rhs_u.transpose()) else {
                break;
            };
            let u = sol.transpose();

            // fix U, solve for V: (UᵀU) Vᵀ (XXᵀ) = UᵀYXᵀ
            let utu = u.transpose() * &u;
            let rhs_v = u.transpose() * &yxt;
            let Some(a) = utu.lu().solve(&rhs_v) else {
                break;
            };
            let Some(vt) = xxt.clone().lu().solve(&a.transpose()) else {
                break;
            };
            v = vt;

            let cur = 0.5 * (&u * v.transpose() * x - y).norm_squared();
            if (prev - cur).abs() < 1e-13 * cur.max(1.0) {
                converged = true;
                prev = cur;
                break;
            }
            prev = cur;
        }

        if prev < best_loss {
            best_loss = prev;
        }
        any_converged |= converged;
    }

    AlsOutcome {
        best_loss,
        any_converged,
    }
}
