//! Command implementations behind the `corrdp` binary.
//!
//! Every command reads a JSON config and is deterministic given it. Commands
//! return their output as text plus a status; the binary decides where to
//! write it.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::accountant::{
    bernstein_failure_prob, evr_gate, verification_failure_prob, AccountingReport, Adjacency,
    Calibrator, PldBaseSample, PrivacyParams, Release, DEFAULT_TAU,
};
use crate::baseline::calibrate_sigma_unamplified;
use crate::error::{Error, Result};
use crate::harness::{train, TrainingConfig, TrainingMode, TrainingTrace};
use crate::matrix::{ParticipationSchema, StrategyMatrix};
use crate::numerics::derive_seed;
use crate::optimizer::{optimize, OptimizationResult, OptimizerConfig};
use crate::oracle::adaptivity_counterexample_check;

#[derive(Debug, Parser)]
#[command(
    name = "corrdp",
    version,
    about = "Privacy accounting and strategy optimization for correlated-noise DP training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    Calibrate,
    Verify,
    RmseSweep,
    Optimize,
    Counterexample,
    Train,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Verification aborted or a checked claim failed.
    Failure,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Failure => 2,
        }
    }
}

/// Text output of a command; `side` holds a secondary artifact (e.g. run metadata).
#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub status: Status,
    pub body: String,
    pub side: Option<String>,
}

/// Named constructions, sized by the schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixSpec {
    Identity,
    PrefixSum,
    /// Coefficients are zero-padded or truncated to the schema length.
    Toeplitz {
        coeffs: Vec<f64>,
    },
    Blt {
        weights: Vec<f64>,
        decays: Vec<f64>,
    },
    /// A matrix in the serialized `{order, family, payload}` form.
    Matrix {
        matrix: StrategyMatrix,
    },
}

impl MatrixSpec {
    pub fn build(&self, n: usize) -> Result<StrategyMatrix> {
        let m = match self {
            MatrixSpec::Identity => StrategyMatrix::identity(n)?,
            MatrixSpec::PrefixSum => StrategyMatrix::prefix_sum(n)?,
            MatrixSpec::Toeplitz { coeffs } => StrategyMatrix::toeplitz_with_order(coeffs, n)?,
            MatrixSpec::Blt { weights, decays } => StrategyMatrix::blt(weights, decays, n)?,
            MatrixSpec::Matrix { matrix } => matrix.clone(),
        };
        if m.order() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: m.order(),
            });
        }
        Ok(m)
    }
}

fn default_delta() -> f64 {
    8e-6
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_samples() -> usize {
    1_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrateConfig {
    pub epsilon: f64,
    /// Verification threshold; calibration targets `delta / tau`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub schema: ParticipationSchema,
    pub matrix: MatrixSpec,
    #[serde(default = "default_samples")]
    pub sample_count: usize,
    #[serde(default = "default_samples")]
    pub verify_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adjacency: Adjacency,
}

/// [`AccountingReport`] plus the verification run behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutput {
    #[serde(flatten)]
    pub report: AccountingReport,
    pub tau: f64,
    pub sigma_unamplified: f64,
    pub verify_sample_count: usize,
    pub verify_delta_hat: f64,
    /// Failure probability union-bounded over the verified directions.
    pub union_failure_prob: f64,
    pub release: Release,
}

pub fn cmd_calibrate(config: &CalibrateConfig) -> Result<Output> {
    let out = calibrate_report(config)?;
    let status = if matches!(out.release, Release::Proceed { .. }) {
        Status::Success
    } else {
        Status::Failure
    };
    Ok(Output {
        status,
        body: to_json(&out)?,
        side: None,
    })
}

pub fn calibrate_report(config: &CalibrateConfig) -> Result<CalibrationOutput> {
    let target = PrivacyParams::new(config.epsilon, config.delta)?;
    let c = config.matrix.build(config.schema.iterations())?;
    let calibrator = Calibrator::new(
        config.epsilon,
        config.delta,
        config.sample_count,
        config.seed,
    )
    .with_tau(config.tau)
    .with_adjacency(config.adjacency);
    let cal = calibrator.calibrate(&c, &config.schema)?;

    let modes = c.mode_vectors(&config.schema)?;
    let verify = PldBaseSample::draw(&modes, config.verify_samples, derive_seed(config.seed, 1))?;
    let est = verify.estimate_delta(config.epsilon, cal.sigma, modes.gram(), config.adjacency)?;
    let release = evr_gate(&target, est.delta_hat, config.tau)?;
    let report = AccountingReport {
        epsilon: config.epsilon,
        delta: config.delta,
        delta_prime: calibrator.target_delta(),
        sigma_star: cal.sigma,
        sample_count: config.sample_count,
        std_error: est.std_error,
        bernstein_failure_prob: bernstein_failure_prob(
            config.verify_samples as u64,
            config.tau,
            config.delta,
        )?,
        adjacency: config.adjacency,
        seed: config.seed,
        matrix_fingerprint: c.fingerprint(),
    };
    Ok(CalibrationOutput {
        report,
        tau: config.tau,
        sigma_unamplified: cal.sigma_unamplified,
        verify_sample_count: config.verify_samples,
        verify_delta_hat: est.delta_hat,
        union_failure_prob: verification_failure_prob(
            config.verify_samples as u64,
            config.tau,
            config.delta,
            config.adjacency,
        )?,
        release,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub schema: ParticipationSchema,
    pub matrix: MatrixSpec,
    pub sigma: f64,
    #[serde(default = "default_samples")]
    pub verify_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub release: Release,
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    pub delta_hat_add: f64,
    pub delta_hat_remove: f64,
    pub std_error_add: f64,
    pub std_error_remove: f64,
    pub sample_count: usize,
    pub failure_prob: f64,
    pub seed: u64,
    pub matrix_fingerprint: String,
}

/// Estimate-verify-release at `verify_samples` for both adjacencies.
pub fn cmd_verify(config: &VerifyConfig) -> Result<Output> {
    let report = verify_report(config)?;
    let status = if matches!(report.release, Release::Proceed { .. }) {
        Status::Success
    } else {
        Status::Failure
    };
    Ok(Output {
        status,
        body: to_json(&report)?,
        side: None,
    })
}

pub fn verify_report(config: &VerifyConfig) -> Result<VerifyReport> {
    let target = PrivacyParams::new(config.epsilon, config.delta)?;
    let c = config.matrix.build(config.schema.iterations())?;
    let modes = c.mode_vectors(&config.schema)?;
    let base = PldBaseSample::draw(&modes, config.verify_samples, config.seed)?;
    let [add, remove] =
        base.estimate_directions(config.epsilon, config.sigma, modes.gram(), Adjacency::Both)?;
    let (add, remove) = (
        add.expect("add requested"),
        remove.expect("remove requested"),
    );
    let release = evr_gate(&target, add.delta_hat.max(remove.delta_hat), config.tau)?;
    Ok(VerifyReport {
        release,
        epsilon: config.epsilon,
        delta: config.delta,
        sigma: config.sigma,
        delta_hat_add: add.delta_hat,
        delta_hat_remove: remove.delta_hat,
        std_error_add: add.std_error,
        std_error_remove: remove.std_error,
        sample_count: config.verify_samples,
        failure_prob: verification_failure_prob(
            config.verify_samples as u64,
            config.tau,
            config.delta,
            Adjacency::Both,
        )?,
        seed: config.seed,
        matrix_fingerprint: c.fingerprint(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub spec: MatrixSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseSweepConfig {
    pub epsilons: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub schema: ParticipationSchema,
    pub matrices: Vec<NamedMatrix>,
    #[serde(default = "default_samples")]
    pub sample_count: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub family: String,
    pub rmse_unamp: f64,
    pub rmse_amp: f64,
    pub pct_improvement: f64,
}

pub fn rmse_sweep(config: &RmseSweepConfig) -> Result<Vec<SweepRow>> {
    let n = config.schema.iterations();
    let mut rows = Vec::new();
    for named in &config.matrices {
        let c = named.spec.build(n)?;
        for &eps in &config.epsilons {
            let calibrator = Calibrator::new(eps, config.delta, config.sample_count, config.seed)
                .with_tau(config.tau);
            let amp = calibrator.calibrate(&c, &config.schema)?;
            let unamp =
                calibrate_sigma_unamplified(eps, calibrator.target_delta(), &c, &config.schema)?;
            let rmse_amp = c.rmse(amp.sigma)?;
            let rmse_unamp = c.rmse(unamp)?;
            rows.push(SweepRow {
                eps,
                family: named.name.clone(),
                rmse_unamp,
                rmse_amp,
                pct_improvement: 100.0 * (1.0 - rmse_amp / rmse_unamp),
            });
        }
    }
    Ok(rows)
}

pub fn cmd_rmse_sweep(config: &RmseSweepConfig) -> Result<Output> {
    let rows = rmse_sweep(config)?;
    Ok(Output {
        status: Status::Success,
        body: to_csv(&rows)?,
        side: None,
    })
}

pub fn cmd_optimize(config: &OptimizerConfig) -> Result<Output> {
    let result: OptimizationResult = optimize(config)?;
    Ok(Output {
        status: Status::Success,
        body: to_json(&result)?,
        side: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleConfig {
    #[serde(default = "default_sigmas")]
    pub sigmas: Vec<f64>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
}

fn default_sigmas() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}

fn default_alphas() -> Vec<f64> {
    vec![0.0, 0.5f64.exp(), 1.0f64.exp()]
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            sigmas: default_sigmas(),
            alphas: default_alphas(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexamplePoint {
    pub sigma: f64,
    pub alpha: f64,
    /// Divergence when the second contribution has the opposite sign.
    pub h_opposite: f64,
    /// Divergence predicted from `|C|`.
    pub h_same: f64,
    /// Whether the point enters the strictness check (`alpha > 0`).
    pub checked: bool,
    pub strict: bool,
}

pub fn counterexample_grid(config: &CounterexampleConfig) -> Result<Vec<CounterexamplePoint>> {
    let mut points = Vec::new();
    for &sigma in &config.sigmas {
        for &alpha in &config.alphas {
            let (h_opposite, h_same) = adaptivity_counterexample_check(sigma, alpha)?;
            points.push(CounterexamplePoint {
                sigma,
                alpha,
                h_opposite,
                h_same,
                checked: alpha > 0.0,
                strict: h_opposite > h_same,
            });
        }
    }
    Ok(points)
}

pub fn cmd_counterexample(config: &CounterexampleConfig) -> Result<Output> {
    let points = counterexample_grid(config)?;
    let ok = points.iter().all(|p| !p.checked || p.strict);
    Ok(Output {
        status: if ok { Status::Success } else { Status::Failure },
        body: to_json(&points)?,
        side: None,
    })
}

fn default_repeats() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    /// Shared settings; `mode` and the seeds are overridden per run.
    pub training: TrainingConfig,
    pub matrix: MatrixSpec,
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_samples")]
    pub sample_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub mode: TrainingMode,
    pub repeat: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub noise_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: TrainingMode,
    pub sigma: f64,
    pub mean_final_loss: f64,
    pub final_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub sigma_amplified: f64,
    pub sigma_unamplified: f64,
    pub modes: Vec<ModeSummary>,
    /// `|mean(shuffle_fixed) - mean(practical_bib)|`.
    pub batching_gap: f64,
    /// `mean(unamplified_sigma) - mean(practical_bib)`.
    pub amplification_gap: f64,
    pub matrix_fingerprint: String,
}

/// Runs the three modes over `repeats` seed triples.
pub fn train_comparison(
    config: &TrainCommandConfig,
) -> Result<(TrainSummary, Vec<(usize, TrainingTrace)>)> {
    let schema = config.training.schema;
    let c = config.matrix.build(schema.iterations())?;
    let calibrator = Calibrator::new(
        config.epsilon,
        config.delta,
        config.sample_count,
        config.seed,
    )
    .with_tau(config.tau);
    let amplified = calibrator.calibrate(&c, &schema)?.sigma;
    let unamplified =
        calibrate_sigma_unamplified(config.epsilon, calibrator.target_delta(), &c, &schema)?;

    let modes = [
        (TrainingMode::PracticalBib, amplified),
        (TrainingMode::ShuffleFixed, amplified),
        (TrainingMode::UnamplifiedSigma, unamplified),
    ];
    let mut traces = Vec::new();
    let mut summaries = Vec::new();
    for (mode, sigma) in modes {
        let mut finals = Vec::with_capacity(config.repeats);
        for r in 0..config.repeats {
            let base = derive_seed(config.seed, 1000 + r as u64);
            let run = TrainingConfig {
                mode,
                data_seed: derive_seed(base, 0),
                assignment_seed: derive_seed(base, 1),
                noise_seed: derive_seed(base, 2),
                ..config.training.clone()
            };
            let trace = train(&run, &c, sigma)?;
            finals.push(trace.final_loss());
            traces.push((r, trace));
        }
        let mean = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
        summaries.push(ModeSummary {
            mode,
            sigma,
            mean_final_loss: mean,
            final_losses: finals,
        });
    }
    let mean = |m: TrainingMode| {
        summaries
            .iter()
            .find(|s| s.mode == m)
            .map_or(f64::NAN, |s| s.mean_final_loss)
    };
    let summary = TrainSummary {
        sigma_amplified: amplified,
        sigma_unamplified: unamplified,
        batching_gap: (mean(TrainingMode::ShuffleFixed) - mean(TrainingMode::PracticalBib)).abs(),
        amplification_gap: mean(TrainingMode::UnamplifiedSigma) - mean(TrainingMode::PracticalBib),
        modes: summaries,
        matrix_fingerprint: c.fingerprint(),
    };
    Ok((summary, traces))
}

/// CSV traces as the body, the JSON summary as the side output.
pub fn cmd_train(config: &TrainCommandConfig) -> Result<Output> {
    let (summary, traces) = train_comparison(config)?;
    let rows: Vec<TrainRow> = traces
        .iter()
        .flat_map(|(repeat, t)| {
            t.steps.iter().map(move |s| TrainRow {
                mode: t.mode,
                repeat: *repeat,
                step: s.step,
                loss: s.loss,
                grad_norm: s.grad_norm,
                noise_norm: s.noise_norm,
            })
        })
        .collect();
    Ok(Output {
        status: Status::Success,
        body: to_csv(&rows)?,
        side: Some(to_json(&summary)?),
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Dispatches a subcommand; `config` is required except for `counterexample`.
pub fn run_command(command: Command, config: Option<&Path>) -> Result<Output> {
    let need =
        || config.ok_or_else(|| Error::InvalidParameter("--config <path> is required".into()));
    match command {
        Command::Calibrate => cmd_calibrate(&read_config(need()?)?),
        Command::Verify => cmd_verify(&read_config(need()?)?),
        Command::RmseSweep => cmd_rmse_sweep(&read_config(need()?)?),
        Command::Optimize => cmd_optimize(&read_config(need()?)?),
        Command::Counterexample => match config {
            Some(p) => cmd_counterexample(&read_config(p)?),
            None => cmd_counterexample(&CounterexampleConfig::default()),
        },
        Command::Train => cmd_train(&read_config(need()?)?),
    }
}

/// Writes the body to `out` (or stdout) and the side output next to it with a `.json` extension (or to stderr).
pub fn emit(output: &Output, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, &output.body)?;
            if let Some(side) = &output.side {
                std::fs::write(path.with_extension("json"), side)?;
            }
        }
        None => {
            print!("{}", output.body);
            if let Some(side) = &output.side {
                eprint!("{side}");
            }
        }
    }
    Ok(())
}
