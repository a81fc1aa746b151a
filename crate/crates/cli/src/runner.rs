//! Batch execution, invariant checks, and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gradsqueeze_core::algorithms::Algorithm;
use gradsqueeze_core::analysis::{self, ResidualBoundReport, Trajectory};
use gradsqueeze_core::compression::CompressorSpec;
use gradsqueeze_core::simulator::{
    format_metric_float, metrics_to_csv, run_experiment, summarize, MetricsRow, Summary,
    TrainConfig,
};

use crate::config::ExperimentBatch;
use crate::HarnessError;

/// Gates applied by the checker (tolerances of the exact identities).
const EQ_UPDATE_TOL: f64 = 1e-10;
const AUX_SEQUENCE_TOL: f64 = 1e-10;
const TELESCOPING_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Run the analysis checkers after each experiment (forces trajectory
    /// recording).
    pub checks: bool,
    /// Bandwidth grid (bits/second) for the per-iteration time table.
    pub bandwidth_sweep: Vec<f64>,
}

/// Verdicts for one run. `None` entries are checks that do not apply to the
/// algorithm (no residual state) or to the compressor (no known contraction
/// factor).
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub eq_update_max_dev: Option<f64>,
    pub aux_sequence_max_dev: Option<f64>,
    pub telescoping_residual: Option<f64>,
    pub residual_bound: Option<ResidualBoundReport>,
    pub descent_lhs_rhs: Option<(f64, f64)>,
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub config: TrainConfig,
    pub metrics: Vec<MetricsRow>,
    pub summary: Summary,
    pub checks: Option<CheckReport>,
}

#[derive(Debug, Clone)]
pub struct BatchResults {
    pub outcomes: Vec<RunOutcome>,
    pub out_dir: PathBuf,
}

fn run_checks(config: &TrainConfig, trajectory: &Trajectory) -> Result<CheckReport, HarnessError> {
    let mut report = CheckReport {
        eq_update_max_dev: None,
        aux_sequence_max_dev: None,
        telescoping_residual: None,
        residual_bound: None,
        descent_lhs_rhs: None,
        failures: Vec::new(),
    };
    let runtime = |e: gradsqueeze_core::Error| HarnessError::Runtime(e.to_string());

    // The closed-form identities hold for the residual-tracking schemes;
    // qsgd/topk_sgd drop compression error by design.
    if config.algorithm.uses_error_feedback() {
        let dev = analysis::eq_update_max_deviation(trajectory).map_err(runtime)?;
        if dev > EQ_UPDATE_TOL {
            report.failures.push(format!(
                "closed-form update deviation {dev:.3e} > {EQ_UPDATE_TOL:.0e}"
            ));
        }
        report.eq_update_max_dev = Some(dev);

        let aux = analysis::aux_sequence_max_deviation(trajectory).map_err(runtime)?;
        if aux > AUX_SEQUENCE_TOL {
            report.failures.push(format!(
                "shifted-iterate deviation {aux:.3e} > {AUX_SEQUENCE_TOL:.0e}"
            ));
        }
        report.aux_sequence_max_dev = Some(aux);

        let constant_gamma = trajectory
            .steps
            .windows(2)
            .all(|w| w[0].gamma == w[1].gamma);
        if constant_gamma {
            let resid = analysis::telescoping_check(trajectory).map_err(runtime)?;
            if resid > TELESCOPING_TOL {
                report.failures.push(format!(
                    "telescoping residual {resid:.3e} > {TELESCOPING_TOL:.0e}"
                ));
            }
            report.telescoping_residual = Some(resid);
        }
    }

    // Residual-magnitude bound needs a known contraction factor.
    if config.algorithm.uses_error_feedback() {
        if let Some(alpha_sq) = config
            .worker_compressor
            .contraction_alpha_sq(config.problem.model_dim())
        {
            let bound = analysis::residual_bound_check(
                trajectory,
                alpha_sq,
                config.problem.noise_sigma(),
                config.workers,
                0.0,
            )
            .map_err(runtime)?;
            if !bound.vacuous && !bound.satisfied {
                report.failures.push(format!(
                    "residual bound violated: max |delta|^2 {:.3e} > {:.3e}",
                    bound.max_delta_sq, bound.bound
                ));
            }
            if !bound.trend_ok {
                report.failures.push(format!(
                    "residual norms trend upward: slope {:.3e} (se {:.3e})",
                    bound.trend_slope, bound.trend_slope_se
                ));
            }
            report.residual_bound = Some(bound);
        }
    }

    Ok(report)
}

/// Single-realization descent inequality, reported for orientation on
/// quadratic problems where the smoothness constant and optimal value are
/// known exactly.
fn descent_numbers(
    config: &TrainConfig,
    metrics: &[MetricsRow],
    gamma0: f64,
) -> Option<(f64, f64)> {
    use gradsqueeze_core::problems::Problem;
    let problem = Problem::build(&config.problem, config.workers, config.seed).ok()?;
    let smoothness = problem.smoothness()?;
    let fstar = problem.optimal_value()?;
    let f0 = metrics.first()?.loss;
    let grad_norm_sqs: Vec<f64> = metrics.iter().map(|r| r.grad_norm_sq).collect();
    let max_residual = metrics
        .iter()
        .map(|r| r.server_delta_norm.max(r.max_worker_delta_norm))
        .fold(0.0, f64::max);
    let report = analysis::descent_inequality(
        &grad_norm_sqs,
        gamma0,
        smoothness,
        problem.noise_sigma(),
        2.0 * max_residual,
        f0 - fstar,
        config.workers,
    )
    .ok()?;
    Some((report.lhs, report.rhs))
}

/// Execute every experiment in the batch. Reports are written even when a
/// checker fails so the failure can be inspected; the error is returned
/// afterwards.
pub fn run_batch(batch: &ExperimentBatch, opts: &RunOptions) -> Result<BatchResults, HarnessError> {
    let mut outcomes = Vec::with_capacity(batch.experiments.len());
    for named in &batch.experiments {
        let mut config = named.config.clone();
        if opts.checks {
            config.record_analysis = true;
        }
        let run = run_experiment(&config).map_err(|e| match e {
            gradsqueeze_core::Error::InvalidConfig { .. }
            | gradsqueeze_core::Error::InvalidSpec(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Runtime(format!("`{}`: {other}", named.name)),
        })?;
        let summary = summarize(&run.metrics)
            .map_err(|e| HarnessError::Runtime(format!("`{}`: {e}", named.name)))?;

        let mut checks = None;
        if opts.checks {
            let trajectory = run
                .trajectory
                .as_ref()
                .expect("record_analysis was forced on");
            let mut report = run_checks(&config, trajectory)?;
            report.descent_lhs_rhs = descent_numbers(&config, &run.metrics, run.gamma0);
            checks = Some(report);
        }

        println!(
            "ran `{}` ({}): final loss {:.6e}, metric {:.6e}, {} bits, {:.3}s simulated",
            named.name,
            config.algorithm.name(),
            summary.final_loss,
            summary.theorem_metric,
            summary.total_bits_up + summary.total_bits_down,
            summary.total_sim_time_s,
        );

        outcomes.push(RunOutcome {
            name: named.name.clone(),
            config,
            metrics: run.metrics,
            summary,
            checks,
        });
    }

    let results = BatchResults {
        outcomes,
        out_dir: opts.out_dir.clone(),
    };
    emit_report(&results, &opts.bandwidth_sweep)?;

    let failed: Vec<String> = results
        .outcomes
        .iter()
        .filter(|o| o.checks.as_ref().is_some_and(|c| !c.passed()))
        .map(|o| o.name.clone())
        .collect();
    if !failed.is_empty() {
        return Err(HarnessError::Checker(format!(
            "invariant checks failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(results)
}

fn io_err(context: &str, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{context}: {e}"))
}

/// Write per-run metrics CSVs, the comparison summary (text + CSV), the
/// checker report, and the optional bandwidth-sweep table. Refuses to write
/// anything for an empty batch.
pub fn emit_report(results: &BatchResults, bandwidth_sweep: &[f64]) -> Result<(), HarnessError> {
    if results.outcomes.is_empty() {
        return Err(HarnessError::Runtime(
            "emit_report called with no results; nothing written".into(),
        ));
    }
    let dir = &results.out_dir;
    fs::create_dir_all(dir).map_err(|e| io_err("creating output directory", e))?;

    for o in &results.outcomes {
        let path = dir.join(format!("{}_metrics.csv", o.name));
        fs::write(&path, metrics_to_csv(&o.metrics))
            .map_err(|e| io_err("writing metrics CSV", e))?;
    }

    fs::write(dir.join("summary.csv"), summary_csv(results))
        .map_err(|e| io_err("writing summary CSV", e))?;

    let mut text = summary_table(results);
    if !bandwidth_sweep.is_empty() {
        let sweep = bandwidth_table(results, bandwidth_sweep);
        fs::write(dir.join("bandwidth_sweep.csv"), sweep.csv)
            .map_err(|e| io_err("writing bandwidth sweep", e))?;
        text.push('\n');
        text.push_str(&sweep.table);
    }
    fs::write(dir.join("summary.txt"), &text).map_err(|e| io_err("writing summary", e))?;

    if results.outcomes.iter().any(|o| o.checks.is_some()) {
        fs::write(dir.join("checks.txt"), checks_report(results))
            .map_err(|e| io_err("writing checks report", e))?;
    }
    Ok(())
}

fn summary_csv(results: &BatchResults) -> String {
    let mut out = String::from(
        "name,algorithm,final_loss,theorem_metric,total_bits_up,total_bits_down,total_sim_time_s,max_server_delta_norm,max_worker_delta_norm\n",
    );
    for o in &results.outcomes {
        let s = &o.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            o.name,
            o.config.algorithm.name(),
            format_metric_float(s.final_loss),
            format_metric_float(s.theorem_metric),
            s.total_bits_up,
            s.total_bits_down,
            format_metric_float(s.total_sim_time_s),
            format_metric_float(s.max_server_delta_norm),
            format_metric_float(s.max_worker_delta_norm),
        );
    }
    out
}

fn summary_table(results: &BatchResults) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<14} {:>13} {:>14} {:>14} {:>12}",
        "name", "algorithm", "final_loss", "theorem_metric", "total_bits", "sim_time_s"
    );
    for o in &results.outcomes {
        let s = &o.summary;
        let _ = writeln!(
            out,
            "{:<24} {:<14} {:>13.6e} {:>14.6e} {:>14} {:>12.4}",
            o.name,
            o.config.algorithm.name(),
            s.final_loss,
            s.theorem_metric,
            s.total_bits_up + s.total_bits_down,
            s.total_sim_time_s,
        );
    }
    out
}

struct SweepOutput {
    csv: String,
    table: String,
}

/// Seconds per iteration at each bandwidth: compute time plus the run's mean
/// bits per iteration over the shared server link.
fn bandwidth_table(results: &BatchResults, bandwidths: &[f64]) -> SweepOutput {
    let mut csv =
        String::from("name,bandwidth_bits_per_s,inverse_bandwidth,seconds_per_iteration\n");
    let mut table = String::from("seconds per iteration vs inverse server bandwidth\n");
    let _ = write!(table, "{:>14}", "1/bandwidth");
    for o in &results.outcomes {
        let _ = write!(table, " {:>22}", o.name);
    }
    table.push('\n');

    let mean_bits: Vec<f64> = results
        .outcomes
        .iter()
        .map(|o| {
            let total: u64 = o.metrics.iter().map(|r| r.bits_up + r.bits_down).sum();
            total as f64 / o.metrics.len() as f64
        })
        .collect();

    for &bw in bandwidths {
        let _ = write!(table, "{:>14.3e}", 1.0 / bw);
        for (o, &bits) in results.outcomes.iter().zip(&mean_bits) {
            let secs = o.config.cost_model.per_worker_compute + bits / bw;
            let _ = write!(table, " {:>22.6e}", secs);
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                o.name,
                format_metric_float(bw),
                format_metric_float(1.0 / bw),
                format_metric_float(secs)
            );
        }
        table.push('\n');
    }
    SweepOutput { csv, table }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn checks_report(results: &BatchResults) -> String {
    let mut out = String::new();
    for o in &results.outcomes {
        let Some(c) = &o.checks else { continue };
        let _ = writeln!(out, "== {} ({})", o.name, o.config.algorithm.name());
        match c.eq_update_max_dev {
            Some(dev) => {
                let _ = writeln!(
                    out,
                    "closed-form update max deviation: {dev:.3e} (tolerance {EQ_UPDATE_TOL:.0e}) {}",
                    verdict(dev <= EQ_UPDATE_TOL)
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "closed-form update identity: not applicable (no residual state)"
                );
            }
        }
        if let Some(dev) = c.aux_sequence_max_dev {
            let _ = writeln!(
                out,
                "shifted-iterate step deviation:   {dev:.3e} (tolerance {AUX_SEQUENCE_TOL:.0e}) {}",
                verdict(dev <= AUX_SEQUENCE_TOL)
            );
        }
        if let Some(resid) = c.telescoping_residual {
            let _ = writeln!(
                out,
                "telescoping relative residual:    {resid:.3e} (tolerance {TELESCOPING_TOL:.0e}) {}",
                verdict(resid <= TELESCOPING_TOL)
            );
        }
        if let Some(b) = &c.residual_bound {
            if b.vacuous {
                let _ = writeln!(
                    out,
                    "residual bound: vacuous for alpha^2 = {} (no admissible rho)",
                    b.params.alpha_sq
                );
            } else {
                let _ = writeln!(
                    out,
                    "residual bound: max |delta|^2 {:.3e} <= {:.3e} (alpha^2 {}, rho {}, G-hat {:.3}) {}",
                    b.max_delta_sq,
                    b.bound,
                    b.params.alpha_sq,
                    b.params.rho,
                    b.params.grad_bound,
                    verdict(b.satisfied)
                );
                let _ = writeln!(
                    out,
                    "residual tail trend: slope {:.3e} (se {:.3e}) {}",
                    b.trend_slope,
                    b.trend_slope_se,
                    verdict(b.trend_ok)
                );
            }
        }
        if let Some((lhs, rhs)) = c.descent_lhs_rhs {
            let _ = writeln!(
                out,
                "descent inequality (single realization, informational): lhs {lhs:.4e} vs rhs {rhs:.4e}"
            );
        }
        let _ = writeln!(out, "overall: {}", verdict(c.passed()));
        out.push('\n');
    }
    out
}

/// Parse a comma-separated bandwidth list (`"1e6,1e7,1e9"`).
pub fn parse_bandwidths(list: &str) -> Result<Vec<f64>, HarnessError> {
    list.split(',')
        .map(|tok| {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("bad bandwidth value `{tok}`")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err(HarnessError::Config(format!(
                    "bandwidth must be positive and finite, got `{tok}`"
                )));
            }
            Ok(v)
        })
        .collect()
}

/// Run output location: flag override, then the file's own `out_dir`, then a
/// name-derived default.
pub fn resolve_out_dir(batch: &ExperimentBatch, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| batch.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&batch.name))
}

/// `Algorithm` list for help text.
pub fn algorithm_names() -> String {
    [
        Algorithm::Doublesqueeze,
        Algorithm::Memsgd,
        Algorithm::Qsgd,
        Algorithm::TopkSgd,
        Algorithm::Vanilla,
    ]
    .iter()
    .map(|a| a.name())
    .collect::<Vec<_>>()
    .join(", ")
}

/// Compressor summary used in run logs.
pub fn compressor_label(spec: &CompressorSpec) -> String {
    match spec {
        CompressorSpec::TopK { k } => format!("top_k(k={k})"),
        CompressorSpec::RandomQuantize { levels } => format!("random_quantize(levels={levels})"),
        CompressorSpec::RandomSparsify { keep_prob } => {
            format!("random_sparsify(p={keep_prob})")
        }
        CompressorSpec::Clip {
            mantissa_bits_zeroed,
            decimal_illustration,
        } => {
            if *decimal_illustration {
                "clip(decimal)".into()
            } else {
                format!("clip(m={mantissa_bits_zeroed})")
            }
        }
        other => other.kind_name().to_string(),
    }
}
