//! Deep linear network model: layer dimensions, data instances, weight
//! stacks, the squared-error loss, its analytic per-layer gradients, and
//! the prefix/suffix partial products the certifier reasons about.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{self, ensure_finite, Mat, Tolerances, SPECTRUM_GAP_REL_TOL};

/// Layer widths `d₀ (input), d₁ … d_H (hidden), d_{H+1} (output)` plus the
/// sample count `m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: Vec<usize>,
    pub m: usize,
}

impl Dims {
    pub fn new(d: Vec<usize>, m: usize) -> Result<Self> {
        if d.len() < 2 {
            return Err(Error::InvalidInput(
                "need at least input and output widths".into(),
            ));
        }
        if d.iter().any(|&w| w == 0) || m == 0 {
            return Err(Error::InvalidInput(
                "all widths and the sample count must be positive".into(),
            ));
        }
        let dims = Dims { d, m };
        if dims.input_dim() > m || dims.output_dim() > m {
            return Err(Error::InvalidInput(format!(
                "sample count m = {m} must be at least the input and output widths ({}, {})",
                dims.input_dim(),
                dims.output_dim()
            )));
        }
        Ok(dims)
    }

    /// Number of hidden layers H.
    pub fn depth(&self) -> usize {
        self.d.len() - 2
    }

    /// Number of weight matrices, H + 1.
    pub fn num_weights(&self) -> usize {
        self.d.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.d[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.d.last().unwrap()
    }

    /// Bottleneck width k: the minimum width over all layers including
    /// input and output.
    pub fn bottleneck(&self) -> usize {
        *self.d.iter().min().unwrap()
    }

    /// Smallest layer index attaining the bottleneck width (ties broken by
    /// lowest index; certification results are invariant to this choice).
    pub fn bottleneck_layer(&self) -> usize {
        let k = self.bottleneck();
        self.d.iter().position(|&w| w == k).unwrap()
    }

    /// Every layer index attaining the bottleneck width.
    pub fn bottleneck_layers(&self) -> Vec<usize> {
        let k = self.bottleneck();
        self.d
            .iter()
            .enumerate()
            .filter(|(_, &w)| w == k)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when the bottleneck is strictly narrower than both the input
    /// and output layers.
    pub fn is_strict_bottleneck(&self) -> bool {
        self.bottleneck() < self.input_dim().min(self.output_dim())
    }
}

/// A data pair `(X, Y)` with `X` of shape `d_x × m` and `Y` of shape
/// `d_y × m`. Certification requires a validated instance: `XXᵀ` and `YXᵀ`
/// full rank and the spectrum of `YXᵀ(XXᵀ)⁻¹X` free of near-ties.
#[derive(Debug, Clone)]
pub struct Instance {
    x: Mat,
    y: Mat,
    validated: bool,
}

impl Instance {
    pub fn new(x: Mat, y: Mat) -> Result<Self> {
        ensure_finite(&x, "X")?;
        ensure_finite(&y, "Y")?;
        if x.ncols() != y.ncols() {
            return Err(Error::InvalidInput(format!(
                "X and Y disagree on the sample count ({} vs {})",
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() > x.ncols() || y.nrows() > y.ncols() {
            return Err(Error::InvalidInput(format!(
                "need d_x ≤ m and d_y ≤ m, got d_x = {}, d_y = {}, m = {}",
                x.nrows(),
                y.nrows(),
                x.ncols()
            )));
        }
        Ok(Instance {
            x,
            y,
            validated: false,
        })
    }

    pub fn x(&self) -> &Mat {
        &self.x
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn input_dim(&self) -> usize {
        self.x.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.y.nrows()
    }

    pub fn sample_count(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// Checks the data assumptions and, on success, marks the instance
    /// validated: `XXᵀ` invertible, `YXᵀ` full rank, and all singular
    /// values of `YXᵀ(XXᵀ)⁻¹X` separated by a relative gap above
    /// [`SPECTRUM_GAP_REL_TOL`].
    pub fn validate(mut self, tol: &Tolerances) -> Result<Self> {
        let d_x = self.input_dim();
        let d_y = self.output_dim();
        if linalg::numerical_rank(&self.x, tol)? != d_x {
            return Err(Error::AssumptionViolated(
                "XXᵀ is rank deficient".into(),
            ));
        }
        let yxt = &self.y * self.x.transpose();
        if linalg::numerical_rank(&yxt, tol)? != d_x.min(d_y) {
            return Err(Error::AssumptionViolated(
                "YXᵀ is rank deficient".into(),
            ));
        }
        let fitted = self.fitted_outputs()?;
        let s = linalg::singular_values(&fitted)?;
        let sigma_max = s[0];
        // the projection of Y onto row(X) has rank at most min(d_x, d_y);
        // values past that are structural zeros and exempt from the
        // distinctness requirement
        let leading = d_x.min(d_y);
        for i in 0..leading.saturating_sub(1) {
            let gap = (s[i] - s[i + 1]) / sigma_max;
            if gap <= SPECTRUM_GAP_REL_TOL {
                return Err(Error::AssumptionViolated(format!(
                    "singular values {} and {} of YXᵀ(XXᵀ)⁻¹X nearly tie (relative gap {gap:.3e})",
                    i,
                    i + 1
                )));
            }
        }
        self.validated = true;
        Ok(self)
    }

    pub fn require_validated(&self) -> Result<()> {
        if !self.validated {
            return Err(Error::InvalidInput(
                "instance has not passed assumption validation".into(),
            ));
        }
        Ok(())
    }

    /// `YXᵀ(XXᵀ)⁻¹`, computed through a Cholesky solve rather than an
    /// explicit inverse.
    pub fn least_squares_map(&self) -> Result<Mat> {
        let xxt = &self.x * self.x.transpose();
        let chol = nalgebra::Cholesky::new(xxt).ok_or_else(|| {
            Error::AssumptionViolated("XXᵀ is numerically singular".into())
        })?;
        let rhs = (&self.y * self.x.transpose()).transpose();
        Ok(chol.solve(&rhs).transpose())
    }

    /// `YXᵀ(XXᵀ)⁻¹X`: the projection of `Y` onto the row space of `X`.
    pub fn fitted_outputs(&self) -> Result<Mat> {
        Ok(self.least_squares_map()? * &self.x)
    }

    /// Criticality scale `max(1, ‖YXᵀ‖_F)`; gradients grow with the data,
    /// so zero tests are taken relative to this.
    pub fn gradient_scale(&self) -> f64 {
        (&self.y * self.x.transpose()).norm().max(1.0)
    }

    /// Reads `X.csv` / `Y.csv` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let x = linalg::read_matrix_csv(&dir.join("X.csv"))?;
        let y = linalg::read_matrix_csv(&dir.join("Y.csv"))?;
        Instance::new(x, y)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        linalg::write_matrix_csv(&dir.join("X.csv"), &self.x)?;
        linalg::write_matrix_csv(&dir.join("Y.csv"), &self.y)?;
        Ok(())
    }
}

/// Ordered weight matrices `W₁ … W_{H+1}` with `Wᵢ` of shape
/// `dᵢ × d_{i−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    weights: Vec<Mat>,
    dims: Dims,
}

#[derive(Serialize, Deserialize)]
struct DimsFile {
    d: Vec<usize>,
    m: usize,
}

impl WeightStack {
    pub fn new(weights: Vec<Mat>, m: usize) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("need at least one weight matrix".into()));
        }
        let mut d = Vec::with_capacity(weights.len() + 1);
        d.push(weights[0].ncols());
        for (i, w) in weights.iter().enumerate() {
            ensure_finite(w, &format!("W{}", i + 1))?;
            if w.ncols() != d[i] {
                return Err(Error::InvalidInput(format!(
                    "W{} has {} columns but the previous layer is {} wide",
                    i + 1,
                    w.ncols(),
                    d[i]
                )));
            }
            d.push(w.nrows());
        }
        let dims = Dims::new(d, m)?;
        Ok(WeightStack { weights, dims })
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    /// Weight matrix `Wᵢ`, 1-based as in `W₁ … W_{H+1}`.
    pub fn weight(&self, i: usize) -> &Mat {
        &self.weights[i - 1]
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    /// Replaces layer `i` (1-based), keeping everything else.
    pub fn with_weight(&self, i: usize, w: Mat) -> Result<Self> {
        let mut weights = self.weights.clone();
        weights[i - 1] = w;
        WeightStack::new(weights, self.dims.m)
    }

    pub fn check_compatible(&self, inst: &Instance) -> Result<()> {
        if self.dims.input_dim() != inst.input_dim()
            || self.dims.output_dim() != inst.output_dim()
            || self.dims.m != inst.sample_count()
        {
            return Err(Error::InvalidInput(format!(
                "stack dims {:?} (m = {}) incompatible with instance {}×{} → {}×{}",
                self.dims.d,
                self.dims.m,
                inst.input_dim(),
                inst.sample_count(),
                inst.output_dim(),
                inst.sample_count()
            )));
        }
        Ok(())
    }

    /// `W_hi ⋯ W_lo` (1-based, inclusive); an empty range yields the
    /// identity on the boundary dimension. Multiplication is a left fold
    /// in index order so repeated evaluations are bit-identical.
    pub fn product_range(&self, lo: usize, hi: usize) -> Mat {
        if lo > hi {
            let d = self.dims.d[lo - 1];
            return Mat::identity(d, d);
        }
        let mut acc = self.weights[lo - 1].clone();
        for i in lo..hi {
            acc = &self.weights[i] * acc;
        }
        acc
    }

    /// The end-to-end product `W_{H+1} ⋯ W₁`.
    pub fn forward_product(&self) -> Mat {
        self.product_range(1, self.num_weights())
    }

    /// Loads `W1.csv … W{H+1}.csv` plus `dims.json` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let dims_text = std::fs::read_to_string(dir.join("dims.json"))?;
        let file: DimsFile = serde_json::from_str(&dims_text)?;
        let mut weights = Vec::with_capacity(file.d.len().saturating_sub(1));
        for i in 1..file.d.len() {
            weights.push(linalg::read_matrix_csv(&dir.join(format!("W{i}.csv")))?);
        }
        let stack = WeightStack::new(weights, file.m)?;
        if stack.dims.d != file.d {
            return Err(Error::InvalidInput(format!(
                "dims.json declares {:?} but the weight files chain as {:?}",
                file.d, stack.dims.d
            )));
        }
        Ok(stack)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, w) in self.weights.iter().enumerate() {
            linalg::write_matrix_csv(&dir.join(format!("W{}.csv", i + 1)), w)?;
        }
        let file = DimsFile {
            d: self.dims.d.clone(),
            m: self.dims.m,
        };
        std::fs::write(
            dir.join("dims.json"),
            serde_json::to_string_pretty(&file)?,
        )?;
        Ok(())
    }
}

/// The residual matrix and the transposed prefix/suffix products that
/// assemble every per-layer gradient.
///
/// For `i = 1 … H+1`, `suffix_t(i) = W_{i+1}ᵀ ⋯ W_{H+1}ᵀ` and
/// `prefix_t(i) = W₁ᵀ ⋯ W_{i−1}ᵀ`, with identity conventions at the ends;
/// `residual_xt = (W_{H+1} ⋯ W₁ X − Y) Xᵀ`. The gradient with respect to
/// `Wᵢ` is `suffix_t(i) · residual_xt · prefix_t(i)`.
#[derive(Debug, Clone)]
pub struct PartialProducts {
    suffix_t: Vec<Mat>,
    prefix_t: Vec<Mat>,
    residual_xt: Mat,
}

impl PartialProducts {
    /// Transposed suffix product for layer `i` (1-based).
    pub fn suffix_t(&self, i: usize) -> &Mat {
        &self.suffix_t[i - 1]
    }

    /// Transposed prefix product for layer `i` (1-based).
    pub fn prefix_t(&self, i: usize) -> &Mat {
        &self.prefix_t[i - 1]
    }

    pub fn residual_xt(&self) -> &Mat {
        &self.residual_xt
    }

    pub fn gradient(&self, i: usize) -> Mat {
        self.suffix_t(i) * &self.residual_xt * self.prefix_t(i)
    }
}

/// `½ ‖W_{H+1} ⋯ W₁ X − Y‖²_F`.
pub fn loss(stack: &WeightStack, inst: &Instance) -> f64 {
    debug_assert!(stack.check_compatible(inst).is_ok());
    let residual = stack.forward_product() * inst.x() - inst.y();
    0.5 * residual.norm_squared()
}

/// All prefix/suffix products and the residual matrix in one pass.
pub fn partial_products(stack: &WeightStack, inst: &Instance) -> PartialProducts {
    debug_assert!(stack.check_compatible(inst).is_ok());
    let n = stack.num_weights();
    let d = &stack.dims().d;

    // prefix_t[i-1] = W₁ᵀ ⋯ W_{i−1}ᵀ, built front to back
    let mut prefix_t = Vec::with_capacity(n);
    prefix_t.push(Mat::identity(d[0], d[0]));
    for i in 2..=n {
        let prev: &Mat = &prefix_t[i - 2];
        prefix_t.push(prev * stack.weight(i - 1).transpose());
    }

    // suffix_t[i-1] = W_{i+1}ᵀ ⋯ W_{H+1}ᵀ, built back to front
    let mut suffix_t = vec![Mat::zeros(0, 0); n];
    suffix_t[n - 1] = Mat::identity(d[n], d[n]);
    for i in (1..n).rev() {
        suffix_t[i - 1] = stack.weight(i + 1).transpose() * &suffix_t[i];
    }

    let product = stack.forward_product();
    let residual_xt = (product * inst.x() - inst.y()) * inst.x().transpose();

    PartialProducts {
        suffix_t,
        prefix_t,
        residual_xt,
    }
}

/// Analytic per-layer gradients
/// `∂L/∂Wᵢ = W_{i+1}ᵀ ⋯ W_{H+1}ᵀ (W_{H+1} ⋯ W₁ X − Y) Xᵀ W₁ᵀ ⋯ W_{i−1}ᵀ`.
pub fn gradients(stack: &WeightStack, inst: &Instance) -> Vec<Mat> {
    let parts = partial_products(stack, inst);
    (1..=stack.num_weights()).map(|i| parts.gradient(i)).collect()
}

/// Turns residual-parameterized layers `Vᵢ` into the plain stack with
/// `Wᵢ = I + Vᵢ`. All layers must be square with equal dimension.
pub fn residual_to_plain(v: &[Mat], m: usize) -> Result<WeightStack> {
    if v.is_empty() {
        return Err(Error::InvalidInput("need at least one layer".into()));
    }
    let d = v[0].nrows();
    for (i, layer) in v.iter().enumerate() {
        if layer.nrows() != d || layer.ncols() != d {
            return Err(Error::InvalidInput(format!(
                "layer {} is {}×{}, expected square {d}×{d}",
                i + 1,
                layer.nrows(),
                layer.ncols()
            )));
        }
    }
    let weights = v
        .iter()
        .map(|layer| layer + Mat::identity(d, d))
        .collect();
    WeightStack::new(weights, m)
}
