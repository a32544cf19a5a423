//! Sampled checks of the function-space optimality conditions for
//! nonlinear pipelines: composed Jacobians along a forward pass, sampled
//! lower envelopes of `σ_min(J)`, invertibility round trips, Monte-Carlo
//! directional derivatives of the risk with respect to a whole layer map,
//! and the explicit zero-excess-risk pipeline construction.
//!
//! Universally quantified conditions ("for all z") are only ever checked
//! at sampled resolution; reports carry the sample count and seed and
//! never claim more.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::sampling::{derived_seed, normal_vector, rng_from};

pub type Vector = DVector<f64>;

type EvalFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Tanh,
    Arctan,
    Padding,
    Truncation,
    Custom,
}

/// A differentiable layer map vanishing at the origin, with an analytic
/// Jacobian, a declared growth bound `sup ‖h(x)‖/‖x‖`, and an optional
/// declared inverse. Instances are cheap to clone.
#[derive(Clone)]
pub struct LayerMap {
    in_dim: usize,
    out_dim: usize,
    kind: LayerKind,
    eval: EvalFn,
    jacobian: JacobianFn,
    inverse: Option<EvalFn>,
    growth_bound: f64,
    twice_differentiable: bool,
}

impl fmt::Debug for LayerMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LayerMap")
            .field("kind", &self.kind)
            .field("in_dim", &self.in_dim)
            .field("out_dim", &self.out_dim)
            .field("growth_bound", &self.growth_bound)
            .field("has_inverse", &self.inverse.is_some())
            .finish()
    }
}

impl LayerMap {
    pub fn linear(a: Mat) -> Result<Self> {
        linalg::ensure_finite(&a, "layer matrix")?;
        let (sigma_max, _) = linalg::sigma_extrema(&a)?;
        let inverse: Option<EvalFn> = if a.is_square() {
            let lu = a.clone().lu();
            if lu.is_invertible() {
                Some(Arc::new(move |y: &Vector| {
                    lu.solve(y).expect("invertible by construction")
                }))
            } else {
                None
            }
        } else {
            None
        };
        let a_eval = a.clone();
        let a_jac = a;
        Ok(LayerMap {
            in_dim: a_eval.ncols(),
            out_dim: a_eval.nrows(),
            kind: LayerKind::Linear,
            eval: Arc::new(move |x| &a_eval * x),
            jacobian: Arc::new(move |_| a_jac.clone()),
            inverse,
            growth_bound: sigma_max,
            twice_differentiable: true,
        })
    }

    pub fn tanh(dim: usize) -> Self {
        LayerMap {
            in_dim: dim,
            out_dim: dim,
            kind: LayerKind::Tanh,
            eval: Arc::new(|x| x.map(f64::tanh)),
            jacobian: Arc::new(|x| {
                Mat::from_diagonal(&x.map(|v| {
                    let t = v.tanh();
                    1.0 - t * t
                }))
            }),
            inverse: Some(Arc::new(|y| y.map(f64::atanh))),
            growth_bound: 1.0,
            twice_differentiable: true,
        }
    }

    pub fn arctan(dim: usize) -> Self {
        LayerMap {
            in_dim: dim,
            out_dim: dim,
            kind: LayerKind::Arctan,
            eval: Arc::new(|x| x.map(f64::atan)),
            jacobian: Arc::new(|x| Mat::from_diagonal(&x.map(|v| 1.0 / (1.0 + v * v)))),
            inverse: Some(Arc::new(|y| y.map(f64::tan))),
            growth_bound: 1.0,
            twice_differentiable: true,
        }
    }

    /// Zero-pads to a wider dimension; keeps the input coordinates first.
    pub fn padding(in_dim: usize, out_dim: usize) -> Result<Self> {
        if out_dim < in_dim {
            return Err(Error::InvalidInput(format!(
                "padding cannot shrink {in_dim} → {out_dim}"
            )));
        }
        let jac = {
            let mut j = Mat::zeros(out_dim, in_dim);
            for i in 0..in_dim {
                j[(i, i)] = 1.0;
            }
            j
        };
        Ok(LayerMap {
            in_dim,
            out_dim,
            kind: LayerKind::Padding,
            eval: Arc::new(move |x| {
                let mut y = Vector::zeros(out_dim);
                y.rows_mut(0, in_dim).copy_from(x);
                y
            }),
            jacobian: Arc::new(move |_| jac.clone()),
            // left inverse on the range: drop the zero tail
            inverse: Some(Arc::new(move |y| y.rows(0, in_dim).into_owned())),
            growth_bound: 1.0,
            twice_differentiable: true,
        })
    }

    /// Keeps the first `out_dim` coordinates.
    pub fn truncation(in_dim: usize, out_dim: usize) -> Result<Self> {
        if out_dim > in_dim {
            return Err(Error::InvalidInput(format!(
                "truncation cannot grow {in_dim} → {out_dim}"
            )));
        }
        let jac = {
            let mut j = Mat::zeros(out_dim, in_dim);
            for i in 0..out_dim {
                j[(i, i)] = 1.0;
            }
            j
        };
        let inverse: Option<EvalFn> = if out_dim == in_dim {
            Some(Arc::new(|y: &Vector| y.clone()))
        } else {
            None // coordinates are lost; there is no declared inverse
        };
        Ok(LayerMap {
            in_dim,
            out_dim,
            kind: LayerKind::Truncation,
            eval: Arc::new(move |x| x.rows(0, out_dim).into_owned()),
            jacobian: Arc::new(move |_| jac.clone()),
            inverse,
            growth_bound: 1.0,
            twice_differentiable: true,
        })
    }

    /// Caller-supplied layer. The declared Jacobian, growth bound, and
    /// smoothness tag are verified at pipeline registration, not here.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        in_dim: usize,
        out_dim: usize,
        eval: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        jacobian: impl Fn(&Vector) -> Mat + Send + Sync + 'static,
        inverse: Option<EvalFn>,
        growth_bound: f64,
        twice_differentiable: bool,
    ) -> Self {
        LayerMap {
            in_dim,
            out_dim,
            kind: LayerKind::Custom,
            eval: Arc::new(eval),
            jacobian: Arc::new(jacobian),
            inverse,
            growth_bound,
            twice_differentiable,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn growth_bound(&self) -> f64 {
        self.growth_bound
    }

    pub fn is_twice_differentiable(&self) -> bool {
        self.twice_differentiable
    }

    pub fn has_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        debug_assert_eq!(x.len(), self.in_dim);
        (self.eval)(x)
    }

    pub fn jacobian_at(&self, x: &Vector) -> Mat {
        debug_assert_eq!(x.len(), self.in_dim);
        (self.jacobian)(x)
    }

    pub fn inverse_at(&self, y: &Vector) -> Option<Vector> {
        self.inverse.as_ref().map(|inv| inv(y))
    }

    /// Checks the layer's declared contract at sampled points: vanishing
    /// at the origin, Jacobian against central differences (step 1e-6),
    /// and the growth bound at scales 0.01, 1, and 100.
    pub fn check_contract(&self, seed: u64) -> Result<()> {
        let zero = Vector::zeros(self.in_dim);
        let at_zero = self.eval(&zero);
        if at_zero.norm() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "{:?} does not vanish at the origin (‖h(0)‖ = {:.3e})",
                self.kind,
                at_zero.norm()
            )));
        }

        let mut rng = rng_from(seed);
        let step = 1e-6;
        for _ in 0..20 {
            let x = normal_vector(self.in_dim, 1.0, &mut rng);
            let analytic = self.jacobian_at(&x);
            for j in 0..self.in_dim {
                let mut plus = x.clone();
                plus[j] += step;
                let mut minus = x.clone();
                minus[j] -= step;
                let col = (self.eval(&plus) - self.eval(&minus)) / (2.0 * step);
                for i in 0..self.out_dim {
                    let a = analytic[(i, j)];
                    let n = col[i];
                    if (a - n).abs() > 1e-5 * a.abs().max(n.abs()) + 1e-8 {
                        return Err(Error::InvalidInput(format!(
                            "{:?} Jacobian entry ({i},{j}) disagrees with finite \
                             differences: {a} vs {n}",
                            self.kind
                        )));
                    }
                }
            }
        }

        for scale in [0.01, 1.0, 100.0] {
            for _ in 0..20 {
                let x = normal_vector(self.in_dim, scale, &mut rng);
                let nx = x.norm();
                if nx == 0.0 {
                    continue;
                }
                let ratio = self.eval(&x).norm() / nx;
                if ratio > self.growth_bound + 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "{:?} exceeds its declared growth bound: ratio {ratio} > {}",
                        self.kind, self.growth_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A composition of layer maps with chained dimensions; every width must
/// be at least `min(d_x, d_y)`.
#[derive(Clone)]
pub struct Pipeline {
    layers: Vec<LayerMap>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pipeline{:?}", self.dims())
    }
}

impl Pipeline {
    /// Builds and registers a pipeline, verifying each layer's contract
    /// with seeds derived from `seed`.
    pub fn new(layers: Vec<LayerMap>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("pipeline needs at least one layer".into()));
        }
        for i in 1..layers.len() {
            if layers[i].in_dim != layers[i - 1].out_dim {
                return Err(Error::InvalidInput(format!(
                    "layer {} expects dimension {} but layer {} outputs {}",
                    i + 1,
                    layers[i].in_dim,
                    i,
                    layers[i - 1].out_dim
                )));
            }
        }
        let d_x = layers[0].in_dim;
        let d_y = layers.last().unwrap().out_dim;
        let k = d_x.min(d_y);
        for (i, layer) in layers.iter().enumerate() {
            if layer.out_dim < k && i + 1 < layers.len() {
                return Err(Error::InvalidInput(format!(
                    "layer {} narrows to {} below min(d_x, d_y) = {k}",
                    i + 1,
                    layer.out_dim
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.check_contract(derived_seed(seed, i as u64))?;
        }
        Ok(Pipeline { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer `hᵢ`, 1-based.
    pub fn layer(&self, i: usize) -> &LayerMap {
        &self.layers[i - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// The width chain `d₀ … d_{H+1}`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    /// Input dimension of layer `i`, i.e. `d_{i−1}`; `i = n+1` addresses
    /// the empty suffix on the output side.
    pub fn layer_input_dim(&self, i: usize) -> usize {
        if i <= self.layers.len() {
            self.layers[i - 1].in_dim
        } else {
            self.output_dim()
        }
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        self.eval_prefix(self.layers.len(), x)
    }

    /// `h_{upto:1}(x)`; `upto = 0` is the identity.
    pub fn eval_prefix(&self, upto: usize, x: &Vector) -> Vector {
        let mut z = x.clone();
        for layer in &self.layers[..upto] {
            z = layer.eval(&z);
        }
        z
    }
}

/// Chain-rule Jacobian of the suffix `h_{H+1:from_layer}` evaluated along
/// the forward pass starting at `x` (which lives in layer `from_layer`'s
/// input space). `from_layer = n+1` yields the identity.
pub fn compose_jacobian(p: &Pipeline, from_layer: usize, x: &Vector) -> Result<Mat> {
    let n = p.num_layers();
    if from_layer == 0 || from_layer > n + 1 {
        return Err(Error::InvalidInput(format!(
            "from_layer = {from_layer} outside 1..={}",
            n + 1
        )));
    }
    let expect = p.layer_input_dim(from_layer);
    if x.len() != expect {
        return Err(Error::InvalidInput(format!(
            "point has dimension {} but layer {from_layer} expects {expect}",
            x.len()
        )));
    }
    let mut jac = Mat::identity(expect, expect);
    let mut z = x.clone();
    for i in from_layer..=n {
        let layer = p.layer(i);
        jac = layer.jacobian_at(&z) * jac;
        z = layer.eval(&z);
    }
    Ok(jac)
}

/// Sampling plan: `n` standard normal points scaled by `scale`, seeded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Sampler {
    pub n: usize,
    pub scale: f64,
    pub seed: u64,
}

impl Sampler {
    pub fn standard(n: usize, seed: u64) -> Self {
        Sampler {
            n,
            scale: 1.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("sampler needs n ≥ 1".into()));
        }
        Ok(())
    }
}

/// Sampled lower envelope of `σ_min(J[h_{H+1:from_layer}](z))` over the
/// sampler's distribution. An estimate, not a proof over all z.
pub fn estimate_sigma_min_inf(p: &Pipeline, from_layer: usize, s: &Sampler) -> Result<f64> {
    s.validate()?;
    let dim = p.layer_input_dim(from_layer);
    let out_dim = p.output_dim();
    if out_dim > dim {
        log::warn!(
            "suffix maps {dim} → {out_dim}: σ_min cannot reach a full-row-rank bound"
        );
    }
    let mut rng = rng_from(s.seed);
    let mut min_sigma = f64::INFINITY;
    for _ in 0..s.n {
        let z = normal_vector(dim, s.scale, &mut rng);
        let jac = compose_jacobian(p, from_layer, &z)?;
        let (_, sigma_min) = linalg::sigma_extrema(&jac)?;
        min_sigma = min_sigma.min(sigma_min);
    }
    Ok(min_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremTag {
    T3,
    T4,
}

/// Evidence gathered for one sufficient-condition check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub theorem: TheoremTag,
    pub sigma_min_inf_estimate: f64,
    /// `[σ_min estimate]` for T3; `[ε₁ estimate, ε₂ estimate]` for T4.
    pub epsilon_estimates: Vec<f64>,
    /// Worst round-trip residual of the declared prefix inverse; absent
    /// for T3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invertibility_evidence: Option<f64>,
    pub twice_differentiable: bool,
    pub satisfied: bool,
    pub samples: usize,
    pub seed: u64,
}

/// Light continuity probe of the suffix Jacobian: finite differences of J
/// itself must stay bounded at a few sampled points.
fn jacobian_smoothness_ok(p: &Pipeline, from_layer: usize, s: &Sampler) -> Result<bool> {
    let dim = p.layer_input_dim(from_layer);
    let mut rng = rng_from(derived_seed(s.seed, 0x51));
    let delta = 1e-4;
    for _ in 0..3usize.min(s.n) {
        let z = normal_vector(dim, s.scale, &mut rng);
        let mut z2 = z.clone();
        z2[0] += delta;
        let j1 = compose_jacobian(p, from_layer, &z)?;
        let j2 = compose_jacobian(p, from_layer, &z2)?;
        let rate = (j2 - j1).norm() / delta;
        if !rate.is_finite() || rate > 1e8 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Checks the wide-input sufficient conditions: `d_x ≥ d_y`, the suffix
/// Jacobian's sampled `σ_min` at least `margin`, and a twice-differentiable
/// suffix.
pub fn check_theorem3(p: &Pipeline, s: &Sampler, margin: f64) -> Result<ConditionReport> {
    s.validate()?;
    if p.input_dim() < p.output_dim() {
        return Err(Error::WrongRegime(format!(
            "this check needs d_x ≥ d_y, got {} < {}",
            p.input_dim(),
            p.output_dim()
        )));
    }
    let sigma = estimate_sigma_min_inf(p, 2, s)?;
    let twice = (2..=p.num_layers()).all(|i| p.layer(i).is_twice_differentiable());
    let smooth = jacobian_smoothness_ok(p, 2, s)?;
    Ok(ConditionReport {
        theorem: TheoremTag::T3,
        sigma_min_inf_estimate: sigma,
        epsilon_estimates: vec![sigma],
        invertibility_evidence: None,
        twice_differentiable: twice,
        satisfied: sigma >= margin && twice && smooth,
        samples: s.n,
        seed: s.seed,
    })
}

/// Checks the tall-output sufficient conditions at split index `j`
/// (1-based): invertible prefix `h_{j−1:1}` with sampled
/// `‖h_{j−1:1}(u)‖ ≥ ε₁‖u‖`, suffix Jacobian sampled `σ_min ≥ ε₂`, and a
/// twice-differentiable suffix.
pub fn check_theorem4(
    p: &Pipeline,
    j: usize,
    s: &Sampler,
    margins: (f64, f64),
) -> Result<ConditionReport> {
    s.validate()?;
    let n = p.num_layers();
    if p.input_dim() > p.output_dim() {
        return Err(Error::WrongRegime(format!(
            "this check needs d_x ≤ d_y, got {} > {}",
            p.input_dim(),
            p.output_dim()
        )));
    }
    if j == 0 || j > n {
        return Err(Error::InvalidInput(format!("j = {j} outside 1..={n}")));
    }
    let dims = p.dims();
    if dims[j - 1] != p.input_dim() || dims[j] < p.output_dim() {
        return Err(Error::WrongRegime(format!(
            "split j = {j} needs d_{} = d_x and d_{} ≥ d_y, got {} and {}",
            j - 1,
            j,
            dims[j - 1],
            dims[j]
        )));
    }
    for i in 1..j {
        if !p.layer(i).has_inverse() {
            return Err(Error::NoDeclaredInverse(format!(
                "prefix layer {i} ({:?})",
                p.layer(i).kind()
            )));
        }
    }

    let (eps1, eps2) = margins;
    let mut rng = rng_from(s.seed);
    let mut min_ratio = f64::INFINITY;
    let mut worst_roundtrip = 0.0f64;
    for _ in 0..s.n {
        let u = normal_vector(p.input_dim(), s.scale, &mut rng);
        let nu = u.norm();
        if nu == 0.0 {
            continue;
        }
        let v = p.eval_prefix(j - 1, &u);
        min_ratio = min_ratio.min(v.norm() / nu);
        // unwind the declared inverses back to the input
        let mut back = v;
        for i in (1..j).rev() {
            back = p.layer(i).inverse_at(&back).expect("checked above");
        }
        worst_roundtrip = worst_roundtrip.max((back - &u).norm() / nu.max(1.0));
    }
    if j == 1 {
        min_ratio = 1.0; // the empty prefix is the identity
    }

    let sigma = estimate_sigma_min_inf(p, j + 1, s)?;
    let twice = (j + 1..=n).all(|i| p.layer(i).is_twice_differentiable());
    let smooth = jacobian_smoothness_ok(p, j + 1, s)?;
    let invertible_ok = worst_roundtrip < 1e-8;
    Ok(ConditionReport {
        theorem: TheoremTag::T4,
        sigma_min_inf_estimate: sigma,
        epsilon_estimates: vec![min_ratio, sigma],
        invertibility_evidence: Some(worst_roundtrip),
        twice_differentiable: twice,
        satisfied: invertible_ok && min_ratio >= eps1 && sigma >= eps2 && twice && smooth,
        samples: s.n,
        seed: s.seed,
    })
}

/// Monte-Carlo estimate (mean, standard error) of the directional
/// derivative of the risk `½E‖h(X) − h*(X)‖²` with respect to layer `i`
/// along the direction `η`:
/// `E[(h(X) − h*(X))ᵀ J[h_{H+1:i+1}](h_{i:1}(X)) η(h_{i−1:1}(X))]`.
pub fn frechet_directional(
    p: &Pipeline,
    i: usize,
    eta: &LayerMap,
    h_star: &LayerMap,
    s: &Sampler,
) -> Result<(f64, f64)> {
    s.validate()?;
    let n = p.num_layers();
    if i == 0 || i > n {
        return Err(Error::InvalidInput(format!("layer index {i} outside 1..={n}")));
    }
    let layer = p.layer(i);
    if eta.in_dim() != layer.in_dim() || eta.out_dim() != layer.out_dim() {
        return Err(Error::InvalidInput(format!(
            "direction maps {}→{} but layer {i} maps {}→{}",
            eta.in_dim(),
            eta.out_dim(),
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    if h_star.in_dim() != p.input_dim() || h_star.out_dim() != p.output_dim() {
        return Err(Error::InvalidInput("target dims do not match the pipeline".into()));
    }
    let zero = Vector::zeros(eta.in_dim());
    if eta.eval(&zero).norm() > 1e-12 {
        return Err(Error::InvalidInput("direction must vanish at the origin".into()));
    }

    let mut rng = rng_from(s.seed);
    let mut terms = Vec::with_capacity(s.n);
    for _ in 0..s.n {
        let x = normal_vector(p.input_dim(), s.scale, &mut rng);
        let pre = p.eval_prefix(i - 1, &x);
        let at = layer.eval(&pre);
        let jac = compose_jacobian(p, i + 1, &at)?;
        let residual = p.eval(&x) - h_star.eval(&x);
        let term = residual.dot(&(jac * eta.eval(&pre)));
        terms.push(term);
    }
    let n_f = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n_f;
    let std_err = if terms.len() > 1 {
        let var = terms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n_f - 1.0);
        (var / n_f).sqrt()
    } else {
        0.0
    };
    Ok((mean, std_err))
}

/// Builds the pipeline that realizes `h*` exactly along the width chain
/// `dims`: the target is embedded into the first wide-enough layer and
/// every remaining layer is the coordinate padding/truncation step, so the
/// composition reproduces `h*` bit for bit and the excess risk is zero.
pub fn realize_pipeline(h_star: &LayerMap, dims: &[usize]) -> Result<Pipeline> {
    if dims.len() < 2 {
        return Err(Error::InvalidInput("need at least two widths".into()));
    }
    let d_x = h_star.in_dim();
    let d_y = h_star.out_dim();
    if dims[0] != d_x || *dims.last().unwrap() != d_y {
        return Err(Error::WrongRegime(format!(
            "width chain {:?} does not match the target {}→{}",
            dims, d_x, d_y
        )));
    }

    let identity_step = |from: usize, to: usize| -> Result<LayerMap> {
        if to <= from {
            LayerMap::truncation(from, to)
        } else {
            LayerMap::padding(from, to)
        }
    };
    let embed = |target: &LayerMap, out: usize| -> LayerMap {
        let t_eval = target.clone();
        let t_jac = target.clone();
        let dy = target.out_dim();
        LayerMap::custom(
            target.in_dim(),
            out,
            move |x| {
                let mut y = Vector::zeros(out);
                y.rows_mut(0, dy).copy_from(&t_eval.eval(x));
                y
            },
            move |x| {
                let mut j = Mat::zeros(out, t_jac.in_dim());
                j.view_mut((0, 0), (dy, t_jac.in_dim()))
                    .copy_from(&t_jac.jacobian_at(x));
                j
            },
            None,
            target.growth_bound(),
            target.is_twice_differentiable(),
        )
    };

    // wide-throughout chain: embed at the first layer
    if dims[1..].iter().all(|&w| w >= d_y) {
        let mut layers = vec![embed(h_star, dims[1])];
        for i in 2..dims.len() {
            layers.push(identity_step(dims[i - 1], dims[i])?);
        }
        return Pipeline::new(layers, derived_seed(0x9EA1, d_y as u64));
    }

    // tall-output chain: carry x unchanged to a width-d_x layer, embed
    // there, and stay wide afterwards
    if d_x <= d_y {
        for j in 1..dims.len() {
            let prefix_ok = dims[1..j].iter().all(|&w| w >= d_x);
            let split_ok = dims[j - 1] == d_x && dims[j..].iter().all(|&w| w >= d_y);
            if prefix_ok && split_ok {
                let mut layers = Vec::new();
                for i in 1..j {
                    layers.push(identity_step(dims[i - 1], dims[i])?);
                }
                layers.push(embed(h_star, dims[j]));
                for i in j + 1..dims.len() {
                    layers.push(identity_step(dims[i - 1], dims[i])?);
                }
                return Pipeline::new(layers, derived_seed(0x9EA2, d_y as u64));
            }
        }
    }
    Err(Error::WrongRegime(format!(
        "width chain {:?} admits no exact realization of a {}→{} target",
        dims, d_x, d_y
    )))
}

/// Monte-Carlo estimate of the excess risk `½ E‖p(X) − h*(X)‖²`.
pub fn excess_risk(p: &Pipeline, h_star: &LayerMap, s: &Sampler) -> Result<f64> {
    s.validate()?;
    if h_star.in_dim() != p.input_dim() || h_star.out_dim() != p.output_dim() {
        return Err(Error::InvalidInput("target dims do not match the pipeline".into()));
    }
    if s.n == 1 {
        log::warn!("excess risk from a single sample: high variance");
    }
    let mut rng = rng_from(s.seed);
    let mut acc = 0.0;
    for _ in 0..s.n {
        let x = normal_vector(p.input_dim(), s.scale, &mut rng);
        acc += (p.eval(&x) - h_star.eval(&x)).norm_squared();
    }
    Ok(0.5 * acc / s.n as f64)
}

// ── pipeline spec files ──────────────────────────────────────────────

#[derive(Deserialize)]
struct PipelineSpecFile {
    layers: Vec<LayerSpec>,
    #[serde(default)]
    seed: u64,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Linear { matrix: String },
    Tanh { #[serde(default)] dim: Option<usize> },
    Arctan { #[serde(default)] dim: Option<usize> },
    Padding { out: usize },
    Truncation { out: usize },
}

/// Loads a pipeline from a JSON spec listing layers in order; linear
/// matrices are CSV paths resolved relative to the spec file.
pub fn load_pipeline_spec(path: &Path) -> Result<Pipeline> {
    let text = std::fs::read_to_string(path)?;
    let spec: PipelineSpecFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut width: Option<usize> = None;
    for (idx, layer) in spec.layers.iter().enumerate() {
        let built = match layer {
            LayerSpec::Linear { matrix } => {
                let a = linalg::read_matrix_csv(&base.join(matrix))?;
                LayerMap::linear(a)?
            }
            LayerSpec::Tanh { dim } => {
                let d = dim.or(width).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "layer {}: tanh needs an explicit dim when it comes first",
                        idx + 1
                    ))
                })?;
                LayerMap::tanh(d)
            }
            LayerSpec::Arctan { dim } => {
                let d = dim.or(width).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "layer {}: arctan needs an explicit dim when it comes first",
                        idx + 1
                    ))
                })?;
                LayerMap::arctan(d)
            }
            LayerSpec::Padding { out } => {
                let d = width.ok_or_else(|| {
                    Error::InvalidInput("padding cannot be the first layer".into())
                })?;
                LayerMap::padding(d, *out)?
            }
            LayerSpec::Truncation { out } => {
                let d = width.ok_or_else(|| {
                    Error::InvalidInput("truncation cannot be the first layer".into())
                })?;
                LayerMap::truncation(d, *out)?
            }
        };
        width = Some(built.out_dim());
        layers.push(built);
    }
    Pipeline::new(layers, spec.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::normal_matrix;

    fn linear_tanh_pipeline(seed: u64) -> Pipeline {
        let mut rng = rng_from(seed);
        let a = normal_matrix(3, 3, 0.7, &mut rng);
        let b = normal_matrix(2, 3, 0.7, &mut rng);
        Pipeline::new(
            vec![
                LayerMap::linear(a).unwrap(),
                LayerMap::tanh(3),
                LayerMap::linear(b).unwrap(),
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn builtin_layers_pass_their_contracts() {
        LayerMap::tanh(3).check_contract(1).unwrap();
        LayerMap::arctan(4).check_contract(2).unwrap();
        LayerMap::padding(2, 5).unwrap().check_contract(3).unwrap();
        LayerMap::truncation(5, 2).unwrap().check_contract(4).unwrap();
        let mut rng = rng_from(5);
        LayerMap::linear(normal_matrix(3, 4, 1.0, &mut rng))
            .unwrap()
            .check_contract(5)
            .unwrap();
    }

    #[test]
    fn contract_rejects_bad_jacobian_and_offset_maps() {
        let bad_jac = LayerMap::custom(
            2,
            2,
            |x| x.map(f64::tanh),
            |_| Mat::identity(2, 2), // wrong away from the origin
            None,
            1.0,
            true,
        );
        assert!(bad_jac.check_contract(7).is_err());

        let offset = LayerMap::custom(
            2,
            2,
            |x| x.add_scalar(1.0),
            |_| Mat::identity(2, 2),
            None,
            f64::INFINITY,
            true,
        );
        assert!(offset.check_contract(8).is_err());
    }

    #[test]
    fn all_linear_jacobian_is_the_product() {
        let mut rng = rng_from(11);
        let a = normal_matrix(4, 3, 1.0, &mut rng);
        let b = normal_matrix(2, 4, 1.0, &mut rng);
        let p = Pipeline::new(
            vec![
                LayerMap::linear(a.clone()).unwrap(),
                LayerMap::linear(b.clone()).unwrap(),
            ],
            11,
        )
        .unwrap();
        let x = normal_vector(3, 1.0, &mut rng);
        let jac = compose_jacobian(&p, 1, &x).unwrap();
        assert!((&jac - &b * &a).norm() < 1e-14);
        // independent of the evaluation point
        let x2 = normal_vector(3, 1.0, &mut rng);
        assert_eq!(jac, compose_jacobian(&p, 1, &x2).unwrap());
    }

    #[test]
    fn tanh_jacobian_at_origin_is_identity() {
        let p = Pipeline::new(vec![LayerMap::tanh(3)], 1).unwrap();
        let jac = compose_jacobian(&p, 1, &Vector::zeros(3)).unwrap();
        assert!((jac - Mat::identity(3, 3)).norm() < 1e-15);
    }

    #[test]
    fn composed_jacobian_matches_finite_differences() {
        let p = linear_tanh_pipeline(71);
        let mut rng = rng_from(71);
        let x = normal_vector(3, 1.0, &mut rng);
        let jac = compose_jacobian(&p, 1, &x).unwrap();
        let step = 1e-6;
        for j in 0..3 {
            let mut plus = x.clone();
            plus[j] += step;
            let mut minus = x.clone();
            minus[j] -= step;
            let col = (p.eval(&plus) - p.eval(&minus)) / (2.0 * step);
            for i in 0..2 {
                let a = jac[(i, j)];
                let n = col[i];
                assert!(
                    (a - n).abs() <= 1e-5 * a.abs().max(n.abs()) + 1e-8,
                    "entry ({i},{j}): {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn chain_rule_splits_at_any_layer() {
        let p = linear_tanh_pipeline(73);
        let mut rng = rng_from(74);
        let x = normal_vector(3, 1.0, &mut rng);
        let whole = compose_jacobian(&p, 1, &x).unwrap();
        for split in 2..=3 {
            let front_out = p.eval_prefix(split - 1, &x);
            let back = compose_jacobian(&p, split, &front_out).unwrap();
            // front part: layers 1..split-1
            let front = {
                let mut jac = Mat::identity(3, 3);
                let mut z = x.clone();
                for i in 1..split {
                    let layer = p.layer(i);
                    jac = layer.jacobian_at(&z) * jac;
                    z = layer.eval(&z);
                }
                jac
            };
            assert!((&back * &front - &whole).norm() < 1e-10);
        }
    }

    #[test]
    fn sigma_min_exact_for_linear_suffix() {
        let mut rng = rng_from(13);
        let a = normal_matrix(3, 3, 1.0, &mut rng);
        let b = normal_matrix(2, 3, 1.0, &mut rng);
        let p = Pipeline::new(
            vec![
                LayerMap::linear(a).unwrap(),
                LayerMap::linear(b.clone()).unwrap(),
            ],
            13,
        )
        .unwrap();
        let est = estimate_sigma_min_inf(&p, 2, &Sampler::standard(50, 14)).unwrap();
        let (_, expect) = linalg::sigma_extrema(&b).unwrap();
        assert!((est - expect).abs() < 1e-12);
    }

    #[test]
    fn tanh_suffix_saturates_at_large_scale() {
        let p = Pipeline::new(vec![LayerMap::linear(Mat::identity(3, 3)).unwrap(), LayerMap::tanh(3)], 15).unwrap();
        let wide = Sampler {
            n: 200,
            scale: 10.0,
            seed: 16,
        };
        let est = estimate_sigma_min_inf(&p, 2, &wide).unwrap();
        assert!(est < 1e-4, "saturated tanh Jacobian should be tiny, got {est}");
    }

    #[test]
    fn theorem3_regime_and_zero_layer() {
        // d_x < d_y is the wrong regime
        let tall = Pipeline::new(vec![LayerMap::padding(2, 3).unwrap()], 1).unwrap();
        assert!(matches!(
            check_theorem3(&tall, &Sampler::standard(10, 1), 0.5),
            Err(Error::WrongRegime(_))
        ));

        // a zero linear layer in the suffix kills σ_min
        let p = Pipeline::new(
            vec![
                LayerMap::linear(Mat::identity(3, 3)).unwrap(),
                LayerMap::linear(Mat::zeros(2, 3)).unwrap(),
            ],
            2,
        )
        .unwrap();
        let report = check_theorem3(&p, &Sampler::standard(20, 3), 0.1).unwrap();
        assert_eq!(report.sigma_min_inf_estimate, 0.0);
        assert!(!report.satisfied);
    }

    #[test]
    fn theorem4_identity_and_scaled_prefixes() {
        // prefix = identity linear layer, suffix = padding: ε₁ = 1
        let p = Pipeline::new(
            vec![
                LayerMap::linear(Mat::identity(2, 2)).unwrap(),
                LayerMap::padding(2, 3).unwrap(),
            ],
            4,
        )
        .unwrap();
        let report = check_theorem4(&p, 2, &Sampler::standard(50, 5), (0.9, 0.9)).unwrap();
        assert!(report.satisfied, "{report:?}");
        assert!((report.epsilon_estimates[0] - 1.0).abs() < 1e-12);
        assert!(report.invertibility_evidence.unwrap() < 1e-10);

        // prefix = 0.5·I: ε₁ estimate is 0.5
        let p = Pipeline::new(
            vec![
                LayerMap::linear(Mat::identity(2, 2) * 0.5).unwrap(),
                LayerMap::padding(2, 3).unwrap(),
            ],
            6,
        )
        .unwrap();
        let report = check_theorem4(&p, 2, &Sampler::standard(50, 7), (0.9, 0.9)).unwrap();
        assert!(!report.satisfied);
        assert!((report.epsilon_estimates[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn theorem4_arctan_prefix_fails_at_large_norm() {
        let p = Pipeline::new(
            vec![LayerMap::arctan(2), LayerMap::padding(2, 3).unwrap()],
            8,
        )
        .unwrap();
        let wide = Sampler {
            n: 100,
            scale: 100.0,
            seed: 9,
        };
        let report = check_theorem4(&p, 2, &wide, (0.5, 0.9)).unwrap();
        // ‖arctan(u)‖/‖u‖ → 0 for large inputs
        assert!(report.epsilon_estimates[0] < 0.05);
        assert!(!report.satisfied);
    }

    #[test]
    fn theorem4_rejects_missing_inverse() {
        let p = Pipeline::new(
            vec![
                LayerMap::truncation(2, 2).unwrap(), // fine: has inverse
                LayerMap::padding(2, 4).unwrap(),
                LayerMap::truncation(4, 2).unwrap(), // loses coordinates
                LayerMap::padding(2, 3).unwrap(),
            ],
            10,
        )
        .unwrap();
        assert!(matches!(
            check_theorem4(&p, 4, &Sampler::standard(5, 11), (0.5, 0.5)),
            Err(Error::NoDeclaredInverse(_))
        ));
    }

    #[test]
    fn frechet_zero_direction_and_realized_target() {
        let p = linear_tanh_pipeline(75);
        let zero_dir = LayerMap::custom(
            3,
            3,
            |x| Vector::zeros(x.len()),
            |_| Mat::zeros(3, 3),
            None,
            0.0,
            true,
        );
        // target = the pipeline itself: the residual factor vanishes
        let target = {
            let q = p.clone();
            let qj = p.clone();
            LayerMap::custom(
                3,
                2,
                move |x| q.eval(x),
                move |x| compose_jacobian(&qj, 1, x).unwrap(),
                None,
                f64::INFINITY,
                true,
            )
        };
        let s = Sampler::standard(64, 12);
        let (est, se) = frechet_directional(&p, 2, &zero_dir, &target, &s).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(se, 0.0);

        let dir = LayerMap::tanh(3);
        let (est, _) = frechet_directional(&p, 2, &dir, &target, &s).unwrap();
        assert!(est.abs() < 1e-12);
    }

    #[test]
    fn frechet_matches_common_random_number_finite_differences() {
        let p = linear_tanh_pipeline(76);
        let mut rng = rng_from(77);
        let target_mat = normal_matrix(2, 3, 1.0, &mut rng);
        let h_star = LayerMap::linear(target_mat).unwrap();
        let dir = LayerMap::tanh(3);
        let s = Sampler::standard(4096, 73);

        let (est, _) = frechet_directional(&p, 2, &dir, &h_star, &s).unwrap();

        // finite differences of the sampled risk with the same samples
        let risk_at = |t: f64| -> f64 {
            let perturbed_layer = {
                let base = p.layer(2).clone();
                let d = dir.clone();
                LayerMap::custom(
                    3,
                    3,
                    move |x| base.eval(x) + d.eval(x) * t,
                    |_| Mat::zeros(3, 3), // unused here
                    None,
                    f64::INFINITY,
                    true,
                )
            };
            let mut rng = rng_from(s.seed);
            let mut acc = 0.0;
            for _ in 0..s.n {
                let x = normal_vector(3, 1.0, &mut rng);
                let z = perturbed_layer.eval(&p.eval_prefix(1, &x));
                let out = p.layer(3).eval(&z);
                acc += (out - h_star.eval(&x)).norm_squared();
            }
            0.5 * acc / s.n as f64
        };
        let eps = 1e-4;
        let fd = (risk_at(eps) - risk_at(-eps)) / (2.0 * eps);
        assert!(
            (est - fd).abs() <= 1e-3 * est.abs().max(fd.abs()).max(1e-6),
            "estimate {est} vs finite difference {fd}"
        );
    }

    #[test]
    fn realized_pipeline_reproduces_linear_target_exactly() {
        let mut rng = rng_from(78);
        let a = normal_matrix(2, 3, 1.0, &mut rng);
        let h_star = LayerMap::linear(a).unwrap();
        let p = realize_pipeline(&h_star, &[3, 3, 2]).unwrap();
        for _ in 0..100 {
            let x = normal_vector(3, 1.0, &mut rng);
            assert_eq!(p.eval(&x), h_star.eval(&x));
        }
        let s = Sampler::standard(100, 79);
        assert_eq!(excess_risk(&p, &h_star, &s).unwrap(), 0.0);
    }

    #[test]
    fn realized_pipeline_suffix_is_isometry_like() {
        let mut rng = rng_from(80);
        let a = normal_matrix(2, 4, 1.0, &mut rng);
        let tanh_target = {
            let a2 = a.clone();
            let a3 = a.clone();
            LayerMap::custom(
                4,
                2,
                move |x| (&a2 * x).map(f64::tanh),
                move |x| {
                    let z = &a3 * x;
                    Mat::from_diagonal(&z.map(|v| {
                        let t = v.tanh();
                        1.0 - t * t
                    })) * &a3
                },
                None,
                linalg::sigma_extrema(&a).unwrap().0,
                true,
            )
        };
        let p = realize_pipeline(&tanh_target, &[4, 3, 5, 2]).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let x = normal_vector(4, 1.0, &mut rng);
            worst = worst.max((p.eval(&x) - tanh_target.eval(&x)).norm());
        }
        assert_eq!(worst, 0.0);
        let est = estimate_sigma_min_inf(&p, 2, &Sampler::standard(1000, 81)).unwrap();
        assert!(est >= 1.0 - 1e-12, "suffix σ_min estimate {est}");
    }

    #[test]
    fn realize_rejects_narrow_chains() {
        let mut rng = rng_from(82);
        let a = normal_matrix(3, 3, 1.0, &mut rng);
        let h_star = LayerMap::linear(a).unwrap();
        // middle width 1 < d_y: no exact realization
        assert!(matches!(
            realize_pipeline(&h_star, &[3, 1, 3]),
            Err(Error::WrongRegime(_))
        ));
    }

    #[test]
    fn realize_tall_output_embeds_at_the_split() {
        let mut rng = rng_from(83);
        let a = normal_matrix(4, 2, 1.0, &mut rng);
        let h_star = LayerMap::linear(a).unwrap();
        // x is carried to the width-2 layer, then embedded into width 5
        let p = realize_pipeline(&h_star, &[2, 3, 2, 5, 4]).unwrap();
        for _ in 0..200 {
            let x = normal_vector(2, 1.0, &mut rng);
            assert_eq!(p.eval(&x), h_star.eval(&x));
        }
    }

    #[test]
    fn scaled_pipeline_excess_risk_matches_direct_formula() {
        let mut rng = rng_from(84);
        let a = normal_matrix(2, 3, 1.0, &mut rng);
        let h_star = LayerMap::linear(a.clone()).unwrap();
        // pipeline = 2·h*: excess ½E‖h*‖² scaled by (2−1)² = 1
        let p = Pipeline::new(vec![LayerMap::linear(a * 2.0).unwrap()], 85).unwrap();
        let s = Sampler::standard(2000, 86);
        let got = excess_risk(&p, &h_star, &s).unwrap();
        let mut rng2 = rng_from(s.seed);
        let mut expect = 0.0;
        for _ in 0..s.n {
            let x = normal_vector(3, 1.0, &mut rng2);
            expect += h_star.eval(&x).norm_squared();
        }
        expect *= 0.5 / s.n as f64;
        assert!((got - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn pipeline_spec_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rng_from(87);
        let a = normal_matrix(3, 2, 1.0, &mut rng);
        linalg::write_matrix_csv(&dir.path().join("A.csv"), &a).unwrap();
        std::fs::write(
            dir.path().join("pipeline.json"),
            r#"{"layers": [
                {"kind": "linear", "matrix": "A.csv"},
                {"kind": "tanh"},
                {"kind": "padding", "out": 5},
                {"kind": "truncation", "out": 2}
            ]}"#,
        )
        .unwrap();
        let p = load_pipeline_spec(&dir.path().join("pipeline.json")).unwrap();
        assert_eq!(p.dims(), vec![2, 3, 3, 5, 2]);
        // sanity: evaluation runs
        let x = normal_vector(2, 1.0, &mut rng);
        assert_eq!(p.eval(&x).len(), 2);
    }
}
