//! Command-line front end: closed-form relaxed solves, certification of
//! weight stacks, ascent witnesses, synthetic training runs, batch
//! experiments, and nonlinear condition probes. Matrices travel as CSV,
//! everything else as JSON.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use deeplin::certify::{self, Verdict};
use deeplin::escape;
use deeplin::linalg::{self, Tolerances};
use deeplin::net::{Instance, WeightStack};
use deeplin::probe::{self, Sampler};
use deeplin::relaxed;
use deeplin::train;
use deeplin::{Error, Result};

#[derive(Parser)]
#[command(name = "deeplin", version, about = "Loss-landscape analysis for deep linear networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TolArgs {
    /// Relative singular-value cutoff for numerical rank.
    #[arg(long = "tol-rank", default_value_t = 1e-8)]
    tol_rank: f64,
    /// Scaled gradient-norm cutoff for criticality.
    #[arg(long = "tol-grad", default_value_t = 1e-8)]
    tol_grad: f64,
    /// Projector-distance cutoff for subspace equality.
    #[arg(long = "tol-subspace", default_value_t = 1e-6)]
    tol_subspace: f64,
    /// Scaled cutoff for matrix-is-zero tests.
    #[arg(long = "tol-zero", default_value_t = 1e-8)]
    tol_zero: f64,
}

impl TolArgs {
    fn build(&self) -> Tolerances {
        Tolerances {
            rank_rel_tol: self.tol_rank,
            grad_tol: self.tol_grad,
            subspace_tol: self.tol_subspace,
            zero_tol: self.tol_zero,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the rank-constrained relaxed problem in closed form.
    SolveRelaxed {
        /// Directory with X.csv and Y.csv.
        #[arg(long)]
        instance: PathBuf,
        /// Rank bound; defaults to min(d_x, d_y).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify a weight stack against an instance.
    Certify {
        /// Directory with W1.csv … W{H+1}.csv and dims.json.
        #[arg(long)]
        weights: PathBuf,
        /// Directory with X.csv and Y.csv.
        #[arg(long)]
        instance: PathBuf,
        #[command(flatten)]
        tol: TolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a strict-ascent witness at a critical point.
    Escape {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        instance: PathBuf,
        /// Perturbation radius for the degenerate construction.
        #[arg(long, default_value_t = 1e-2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        tol: TolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an instance, train from random init, and certify the result.
    Train {
        /// Comma-separated layer widths, e.g. 4,2,5.
        #[arg(long)]
        dims: String,
        /// Sample count.
        #[arg(long)]
        m: usize,
        /// Data model: "generic" or "linear[:noise_sigma]".
        #[arg(long, default_value = "generic")]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional JSON file with gradient-descent settings.
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a batch experiment from a JSON spec.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe the nonlinear sufficient conditions on a pipeline spec.
    ProbeNonlinear {
        #[arg(long)]
        pipeline: PathBuf,
        /// Which set of conditions: 3 or 4.
        #[arg(long)]
        theorem: u8,
        /// Split index for the tall-output conditions.
        #[arg(long)]
        j: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Required margin(s): σ_min for theorem 3; "ε1,ε2" for theorem 4.
        #[arg(long, default_value = "0.1")]
        margin: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RelaxedSolutionFile {
    r_star: String,
    optimal_loss: f64,
    low_rank_term: f64,
    projection_term: f64,
    k: usize,
    spectrum: Vec<f64>,
}

fn matrix_to_csv_string(a: &deeplin::Mat) -> String {
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
    out
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SolveRelaxed { instance, k, out } => {
            let tol = Tolerances::default();
            let inst = Instance::load(&instance)?.validate(&tol)?;
            let k = k.unwrap_or_else(|| inst.input_dim().min(inst.output_dim()));
            let (sol, decomp) = relaxed::optimal_loss(&inst, k)?;
            let spectrum = linalg::singular_values(&inst.fitted_outputs()?)?;
            write_json(
                &out,
                &RelaxedSolutionFile {
                    r_star: matrix_to_csv_string(&sol.r_star),
                    optimal_loss: sol.optimal_loss,
                    low_rank_term: decomp.low_rank_term,
                    projection_term: decomp.projection_term,
                    k,
                    spectrum,
                },
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Certify {
            weights,
            instance,
            tol,
            out,
        } => {
            let tol = tol.build();
            let stack = WeightStack::load(&weights)?;
            let inst = Instance::load(&instance)?.validate(&tol)?;
            let cert = certify::classify(&stack, &inst, &tol)?;
            write_json(&out, &cert)?;
            println!("{:?}", cert.verdict);
            Ok(match cert.verdict {
                Verdict::GlobalMin => ExitCode::SUCCESS,
                Verdict::Saddle => ExitCode::from(2),
                Verdict::NotCritical => ExitCode::from(3),
            })
        }
        Command::Escape {
            weights,
            instance,
            epsilon,
            seed,
            tol,
            out,
        } => {
            let tol = tol.build();
            let stack = WeightStack::load(&weights)?;
            let inst = Instance::load(&instance)?.validate(&tol)?;
            let witness =
                match escape::witness_ascent_degenerate(&stack, &inst, epsilon, seed, &tol) {
                    Ok(w) => w,
                    Err(Error::UseHessianPath) => {
                        escape::witness_ascent_nondegenerate(&stack, &inst, seed, &tol)?
                    }
                    Err(e) => return Err(e),
                };
            #[derive(Serialize)]
            struct WitnessFile {
                loss_increase: f64,
                i_star: usize,
                delta_hat_norm: f64,
                trials_used: usize,
                seed: u64,
                point: Vec<String>,
            }
            write_json(
                &out,
                &WitnessFile {
                    loss_increase: witness.loss_increase,
                    i_star: witness.i_star,
                    delta_hat_norm: witness.delta_hat_norm,
                    trials_used: witness.trials_used,
                    seed: witness.seed,
                    point: (1..=witness.point.num_weights())
                        .map(|i| matrix_to_csv_string(witness.point.weight(i)))
                        .collect(),
                },
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            dims,
            m,
            model,
            seed,
            cfg,
            out,
        } => {
            let widths: Vec<usize> = dims
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|e| Error::InvalidInput(format!("bad width {p:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            let report = train::train_once(&widths, m, &model, seed, cfg.as_deref())?;
            write_json(&out, &report)?;
            println!(
                "verdict: {:?} (loss {:.6e}, gap {:.3e})",
                report.final_certificate.verdict,
                report.final_loss,
                report.final_certificate.loss_gap
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment { spec, out } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec: train::ExperimentSpec = serde_json::from_str(&text)?;
            let report = train::end_to_end_experiment(&spec)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &report)?;
            println!(
                "trials: {}  global-min: {}  saddle: {}  not-critical: {}  failed: {}",
                report.trials.len(),
                report.verdict_counts.global_min,
                report.verdict_counts.saddle,
                report.verdict_counts.not_critical,
                report.verdict_counts.failed
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ProbeNonlinear {
            pipeline,
            theorem,
            j,
            samples,
            seed,
            margin,
            out,
        } => {
            let p = probe::load_pipeline_spec(&pipeline)?;
            let sampler = Sampler::standard(samples, seed);
            let report = match theorem {
                3 => {
                    let m: f64 = margin
                        .trim()
                        .parse()
                        .map_err(|e| Error::InvalidInput(format!("bad margin: {e}")))?;
                    probe::check_theorem3(&p, &sampler, m)?
                }
                4 => {
                    let parts: Vec<&str> = margin.split(',').collect();
                    if parts.len() != 2 {
                        return Err(Error::InvalidInput(
                            "theorem 4 needs --margin e1,e2".into(),
                        ));
                    }
                    let e1: f64 = parts[0]
                        .trim()
                        .parse()
                        .map_err(|e| Error::InvalidInput(format!("bad ε1: {e}")))?;
                    let e2: f64 = parts[1]
                        .trim()
                        .parse()
                        .map_err(|e| Error::InvalidInput(format!("bad ε2: {e}")))?;
                    let j = j.ok_or_else(|| {
                        Error::InvalidInput("theorem 4 needs --j".into())
                    })?;
                    probe::check_theorem4(&p, j, &sampler, (e1, e2))?
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "theorem must be 3 or 4, got {other}"
                    )))
                }
            };
            write_json(&out, &report)?;
            println!("satisfied: {}", report.satisfied);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
