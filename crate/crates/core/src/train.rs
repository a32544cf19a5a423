//! Synthetic instance generation under the data assumptions, a full-batch
//! gradient-descent driver with backtracking, and the experiment runner
//! that ties generation, training, certification, and escape verification
//! together into reproducible JSON reports.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::certify::{self, Certificate, Verdict};
use crate::error::{Error, Result};
use crate::escape;
use crate::linalg::{self, Mat, Tolerances};
use crate::net::{self, Dims, Instance, WeightStack};
use crate::sampling::{derived_seed, normal_matrix, rng_from};

/// Data-generating model for synthetic instances.
#[derive(Debug, Clone)]
pub enum GenModel {
    /// X and Y independent standard normal.
    GenericGaussian,
    /// `Y = R_true · X + σ · Ξ` with standard normal noise Ξ.
    LinearGaussian { r_true: Mat, noise_sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Auto,
    Fixed(f64),
}

/// Gradient-descent configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdConfig {
    pub step_size: StepSize,
    pub max_iters: usize,
    /// Stop when the largest per-layer gradient norm drops below
    /// `grad_stop · max(1, ‖YXᵀ‖_F)`.
    pub grad_stop: f64,
    pub record_every: usize,
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            step_size: StepSize::Auto,
            max_iters: 100_000,
            grad_stop: 1e-9,
            record_every: 100,
            seed: 0,
        }
    }
}

impl GdConfig {
    fn validate(&self) -> Result<()> {
        if !(self.grad_stop > 0.0) {
            return Err(Error::InvalidInput("grad_stop must be positive".into()));
        }
        if self.max_iters == 0 || self.record_every == 0 {
            return Err(Error::InvalidInput(
                "max_iters and record_every must be positive".into(),
            ));
        }
        if let StepSize::Fixed(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::InvalidInput("step size must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iter: usize,
    pub loss: f64,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceDigest {
    pub d: Vec<usize>,
    pub m: usize,
    /// Singular values of `YXᵀ(XXᵀ)⁻¹X`.
    pub spectrum: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SeedRecord {
    pub instance: Option<u64>,
    pub init: Option<u64>,
    pub gd: Option<u64>,
}

/// Summary of one training run: recorded trajectory, the certificate of
/// the final point, and everything needed to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub trajectory: Vec<TrajectoryPoint>,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_certificate: Certificate,
    pub instance_digest: InstanceDigest,
    pub wall_clock_ms: f64,
    pub seeds: SeedRecord,
}

impl RunReport {
    /// Zeroes the timing field so reports can be compared byte for byte.
    pub fn clear_timing(&mut self) {
        self.wall_clock_ms = 0.0;
    }
}

fn instance_digest(dims: &Dims, inst: &Instance) -> Result<InstanceDigest> {
    Ok(InstanceDigest {
        d: dims.d.clone(),
        m: dims.m,
        spectrum: linalg::singular_values(&inst.fitted_outputs()?)?,
    })
}

/// Draws a validated instance, resampling up to 10 times when a draw
/// violates the full-rank or distinct-spectrum assumptions.
pub fn generate_instance(dims: &Dims, model: &GenModel, seed: u64) -> Result<Instance> {
    if let GenModel::LinearGaussian { r_true, .. } = model {
        if r_true.nrows() != dims.output_dim() || r_true.ncols() != dims.input_dim() {
            return Err(Error::InvalidInput(format!(
                "R_true is {}×{}, expected {}×{}",
                r_true.nrows(),
                r_true.ncols(),
                dims.output_dim(),
                dims.input_dim()
            )));
        }
    }
    let tol = Tolerances::default();
    let mut last_reason = String::new();
    for attempt in 0..10u64 {
        let mut rng = rng_from(derived_seed(seed, attempt));
        let x = normal_matrix(dims.input_dim(), dims.m, 1.0, &mut rng);
        let y = match model {
            GenModel::GenericGaussian => normal_matrix(dims.output_dim(), dims.m, 1.0, &mut rng),
            GenModel::LinearGaussian { r_true, noise_sigma } => {
                r_true * &x + normal_matrix(dims.output_dim(), dims.m, *noise_sigma, &mut rng)
            }
        };
        match Instance::new(x, y).and_then(|inst| inst.validate(&tol)) {
            Ok(inst) => return Ok(inst),
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(Error::GenerationFailed {
        attempts: 10,
        reason: last_reason,
    })
}

/// Random weight stack with per-layer entries `N(0, scale²/fan_in)`.
pub fn init_weights(dims: &Dims, scale: f64, seed: u64) -> Result<WeightStack> {
    if !(scale > 0.0) {
        return Err(Error::InvalidInput("init scale must be positive".into()));
    }
    let mut rng = rng_from(seed);
    let weights: Vec<Mat> = (1..dims.d.len())
        .map(|i| {
            let std = scale / (dims.d[i - 1] as f64).sqrt();
            normal_matrix(dims.d[i], dims.d[i - 1], std, &mut rng)
        })
        .collect();
    let stack = WeightStack::new(weights, dims.m)?;
    let rank = linalg::numerical_rank(&stack.forward_product(), &Tolerances::default())?;
    log::debug!(
        "initialized stack {:?}: product rank {} (bottleneck {})",
        dims.d,
        rank,
        dims.bottleneck()
    );
    Ok(stack)
}

/// Conservative local smoothness estimate: `σ_max²(X) · ∏ᵢ max(1, σ_max(Wᵢ))²`.
fn smoothness_bound(stack: &WeightStack, inst: &Instance) -> f64 {
    let (sx, _) = linalg::sigma_extrema(inst.x()).expect("finite data");
    let mut lambda = sx * sx;
    for i in 1..=stack.num_weights() {
        let (sw, _) = linalg::sigma_extrema(stack.weight(i)).expect("finite weights");
        let bound = sw.max(1.0);
        lambda *= bound * bound;
    }
    lambda
}

/// Full-batch gradient descent with Armijo backtracking (`c = 1e-4`,
/// halving); recorded losses are monotone non-increasing by construction.
pub fn gradient_descent(
    w0: &WeightStack,
    inst: &Instance,
    cfg: &GdConfig,
    tol: &Tolerances,
) -> Result<(WeightStack, RunReport)> {
    inst.require_validated()?;
    w0.check_compatible(inst)?;
    cfg.validate()?;
    let started = Instant::now();

    let stop_threshold = cfg.grad_stop * inst.gradient_scale();
    let mut w = w0.clone();
    let mut current_loss = net::loss(&w, inst);
    if !current_loss.is_finite() {
        return Err(Error::DivergenceDetected { iter: 0 });
    }
    let initial_loss = current_loss;

    let mut base_step = match cfg.step_size {
        StepSize::Fixed(s) => s,
        StepSize::Auto => 0.9 / smoothness_bound(&w, inst),
    };

    let mut trajectory = Vec::new();
    let mut iterations = 0usize;
    for iter in 0..cfg.max_iters {
        iterations = iter;
        if cfg.step_size == StepSize::Auto && iter > 0 && iter % 100 == 0 {
            base_step = 0.9 / smoothness_bound(&w, inst);
        }
        let grads = net::gradients(&w, inst);
        let max_grad = grads.iter().map(|g| g.norm()).fold(0.0f64, f64::max);
        if iter % cfg.record_every == 0 {
            trajectory.push(TrajectoryPoint {
                iter,
                loss: current_loss,
                max_grad_norm: max_grad,
            });
        }
        if max_grad <= stop_threshold {
            break;
        }
        let grad_norm_sq: f64 = grads.iter().map(|g| g.norm_squared()).sum();

        // backtrack until the Armijo decrease holds; the strict inequality
        // stops the loop at the floating-point floor instead of accepting
        // bitwise-identical states forever
        let mut step = base_step;
        let mut accepted = false;
        while step > 1e-30 {
            let weights: Vec<Mat> = (1..=w.num_weights())
                .map(|i| w.weight(i) - &grads[i - 1] * step)
                .collect();
            let candidate = WeightStack::new(weights, w.dims().m).expect("shapes preserved");
            let l = net::loss(&candidate, inst);
            if l.is_finite() && l < current_loss && l <= current_loss - 1e-4 * step * grad_norm_sq
            {
                w = candidate;
                current_loss = l;
                accepted = true;
                break;
            }
            step /= 2.0;
        }
        if !accepted {
            // no strict decrease at any representable step
            log::debug!("stopped at the numerical floor at iteration {iter}");
            break;
        }
        iterations = iter + 1;
    }

    let grads = net::gradients(&w, inst);
    let max_grad = grads.iter().map(|g| g.norm()).fold(0.0f64, f64::max);
    trajectory.push(TrajectoryPoint {
        iter: iterations,
        loss: current_loss,
        max_grad_norm: max_grad,
    });

    let final_certificate = certify::classify(&w, inst, tol)?;
    let report = RunReport {
        trajectory,
        iterations,
        initial_loss,
        final_loss: current_loss,
        final_certificate,
        instance_digest: instance_digest(w.dims(), inst)?,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        seeds: SeedRecord {
            instance: None,
            init: None,
            gd: Some(cfg.seed),
        },
    };
    Ok((w, report))
}

// ── experiment runner ────────────────────────────────────────────────

/// Data model as written in experiment specs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Generic,
    Linear {
        noise_sigma: f64,
        /// Path to a CSV for the true map; a seeded random map when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r_true: Option<String>,
    },
}

impl ModelSpec {
    pub fn instantiate(&self, dims: &Dims, seed: u64) -> Result<GenModel> {
        match self {
            ModelSpec::Generic => Ok(GenModel::GenericGaussian),
            ModelSpec::Linear { noise_sigma, r_true } => {
                let r = match r_true {
                    Some(path) => linalg::read_matrix_csv(std::path::Path::new(path))?,
                    None => {
                        let mut rng = rng_from(derived_seed(seed, 0xD1A5));
                        normal_matrix(dims.output_dim(), dims.input_dim(), 1.0, &mut rng)
                    }
                };
                Ok(GenModel::LinearGaussian {
                    r_true: r,
                    noise_sigma: *noise_sigma,
                })
            }
        }
    }
}

/// Experiment description: dims, trial count, model, seeds, and knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub d: Vec<usize>,
    pub m: usize,
    pub trials: usize,
    pub model: ModelSpec,
    pub master_seed: u64,
    #[serde(default)]
    pub gd: GdSettings,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Run an ascent-witness check on every certified saddle.
    #[serde(default)]
    pub escape_verify: bool,
}

fn default_init_scale() -> f64 {
    1.0
}

/// GD knobs as written in experiment specs (seed comes from the trial).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdSettings {
    pub step_size: StepSize,
    pub max_iters: usize,
    pub grad_stop: f64,
    pub record_every: usize,
}

impl Default for GdSettings {
    fn default() -> Self {
        let cfg = GdConfig::default();
        GdSettings {
            step_size: cfg.step_size,
            max_iters: cfg.max_iters,
            grad_stop: cfg.grad_stop,
            record_every: cfg.record_every,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscapeCheck {
    pub ascent_found: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_increase: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Completed {
        report: RunReport,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        escape: Option<EscapeCheck>,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub outcome: TrialOutcome,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub global_min: usize,
    pub saddle: usize,
    pub not_critical: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub trials: Vec<TrialReport>,
    pub verdict_counts: VerdictCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_global_min_loss_gap: Option<f64>,
}

impl ExperimentReport {
    pub fn clear_timing(&mut self) {
        for trial in &mut self.trials {
            if let TrialOutcome::Completed { report, .. } = &mut trial.outcome {
                report.clear_timing();
            }
        }
    }
}

fn run_trial(spec: &ExperimentSpec, dims: &Dims, trial: usize, tol: &Tolerances) -> Result<(RunReport, Option<EscapeCheck>)> {
    let instance_seed = derived_seed(spec.master_seed, 3 * trial as u64);
    let init_seed = derived_seed(spec.master_seed, 3 * trial as u64 + 1);
    let gd_seed = derived_seed(spec.master_seed, 3 * trial as u64 + 2);

    let model = spec.model.instantiate(dims, spec.master_seed)?;
    let inst = generate_instance(dims, &model, instance_seed)?;
    let w0 = init_weights(dims, spec.init_scale, init_seed)?;
    let cfg = GdConfig {
        step_size: spec.gd.step_size,
        max_iters: spec.gd.max_iters,
        grad_stop: spec.gd.grad_stop,
        record_every: spec.gd.record_every,
        seed: gd_seed,
    };
    let (w, mut report) = gradient_descent(&w0, &inst, &cfg, tol)?;
    report.seeds = SeedRecord {
        instance: Some(instance_seed),
        init: Some(init_seed),
        gd: Some(gd_seed),
    };

    let escape_check = if spec.escape_verify && report.final_certificate.verdict == Verdict::Saddle
    {
        let witness = if w.num_weights() > 1
            && stack_inner_is_zero(&w, tol)
        {
            escape::witness_ascent_degenerate(&w, &inst, 1e-3, gd_seed, tol)
        } else {
            escape::witness_ascent_nondegenerate(&w, &inst, gd_seed, tol)
        };
        Some(match witness {
            Ok(wit) => EscapeCheck {
                ascent_found: true,
                loss_increase: Some(wit.loss_increase),
                error: None,
            },
            Err(e) => EscapeCheck {
                ascent_found: false,
                loss_increase: None,
                error: Some(e.to_string()),
            },
        })
    } else {
        None
    };
    Ok((report, escape_check))
}

fn stack_inner_is_zero(stack: &WeightStack, tol: &Tolerances) -> bool {
    let n = stack.num_weights();
    let inner = stack.product_range(1, n - 1);
    let scale = (1..n)
        .map(|i| stack.weight(i).norm())
        .product::<f64>()
        .max(1.0);
    inner.norm() <= tol.zero_tol * scale
}

/// One generate → init → descend → certify run, driven by the CLI's flag
/// syntax: model is `generic`, `linear`, or `linear:<noise_sigma>`.
pub fn train_once(
    widths: &[usize],
    m: usize,
    model: &str,
    seed: u64,
    cfg_path: Option<&std::path::Path>,
) -> Result<RunReport> {
    let dims = Dims::new(widths.to_vec(), m)?;
    let model = parse_model_flag(model, &dims, seed)?;
    let settings: GdSettings = match cfg_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => GdSettings::default(),
    };
    let instance_seed = derived_seed(seed, 0);
    let init_seed = derived_seed(seed, 1);
    let inst = generate_instance(&dims, &model, instance_seed)?;
    let w0 = init_weights(&dims, 1.0, init_seed)?;
    let cfg = GdConfig {
        step_size: settings.step_size,
        max_iters: settings.max_iters,
        grad_stop: settings.grad_stop,
        record_every: settings.record_every,
        seed,
    };
    let (_, mut report) = gradient_descent(&w0, &inst, &cfg, &Tolerances::default())?;
    report.seeds = SeedRecord {
        instance: Some(instance_seed),
        init: Some(init_seed),
        gd: Some(seed),
    };
    Ok(report)
}

fn parse_model_flag(s: &str, dims: &Dims, seed: u64) -> Result<GenModel> {
    if s == "generic" {
        return Ok(GenModel::GenericGaussian);
    }
    if let Some(rest) = s.strip_prefix("linear") {
        let noise_sigma = if rest.is_empty() {
            0.0
        } else {
            rest.strip_prefix(':')
                .ok_or_else(|| Error::InvalidInput(format!("bad model flag {s:?}")))?
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad noise sigma in {s:?}: {e}")))?
        };
        return ModelSpec::Linear {
            noise_sigma,
            r_true: None,
        }
        .instantiate(dims, seed);
    }
    Err(Error::InvalidInput(format!(
        "model must be \"generic\", \"linear\", or \"linear:<sigma>\", got {s:?}"
    )))
}

/// Runs every trial of the experiment; per-trial failures are recorded in
/// the report rather than aborting the batch.
pub fn end_to_end_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let dims = Dims::new(spec.d.clone(), spec.m)?;
    let tol = Tolerances::default();
    let mut trials = Vec::with_capacity(spec.trials);
    let mut counts = VerdictCounts::default();
    let mut max_gap: Option<f64> = None;

    for trial in 0..spec.trials {
        let outcome = match run_trial(spec, &dims, trial, &tol) {
            Ok((report, escape)) => {
                match report.final_certificate.verdict {
                    Verdict::GlobalMin => {
                        counts.global_min += 1;
                        let gap = report.final_certificate.loss_gap;
                        max_gap = Some(max_gap.map_or(gap, |g: f64| g.max(gap)));
                    }
                    Verdict::Saddle => counts.saddle += 1,
                    Verdict::NotCritical => counts.not_critical += 1,
                }
                TrialOutcome::Completed { report, escape }
            }
            Err(e) => {
                counts.failed += 1;
                TrialOutcome::Failed {
                    error: e.to_string(),
                }
            }
        };
        trials.push(TrialReport { trial, outcome });
    }

    Ok(ExperimentReport {
        spec: spec.clone(),
        trials,
        verdict_counts: counts,
        max_global_min_loss_gap: max_gap,
    })
}
