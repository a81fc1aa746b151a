//! Experiment-batch config files.
//!
//! A batch file is TOML with three sections:
//!
//! ```toml
//! [batch]                    # optional metadata
//! name = "demo"
//! out_dir = "runs/demo"
//! paired_seeds = true        # default: enforce shared problem + seed
//!
//! [defaults]                 # template applied to every experiment
//! algorithm = "vanilla"
//! workers = 8
//! iterations = 400
//! gamma = 0.05               # or { smoothness=.., sigma=.., epsilon=.. }
//!                            # or { initial=.., factor=10, every=160 }
//! seed = 42
//! worker_compressor = { kind = "top_k", k = 5 }
//! server_compressor = { kind = "identity" }
//!
//! [defaults.problem]
//! kind = "quadratic"         # quadratic | logistic | mlp
//! dim = 50
//! noise_sigma = 1.0
//!
//! [defaults.cost_model]
//! server_bandwidth = 1e9
//! per_worker_compute = 0.05
//! wire_bits_per_real = 32
//!
//! [[experiment]]             # one entry per run; overrides defaults
//! name = "doublesqueeze-topk"
//! algorithm = "doublesqueeze"
//! server_compressor = { kind = "top_k", k = 5 }
//! ```
//!
//! In paired mode every experiment must share the problem and seed, so data
//! draws are identical across algorithms and differences reflect the
//! algorithm alone.

use serde::Deserialize;
use std::path::PathBuf;

use gradsqueeze_core::algorithms::Algorithm;
use gradsqueeze_core::compression::CompressorSpec;
use gradsqueeze_core::problems::ProblemSpec;
use gradsqueeze_core::simulator::{CostModel, GammaSchedule, TrainConfig};

use crate::HarnessError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatchMeta {
    name: Option<String>,
    out_dir: Option<String>,
    paired_seeds: Option<bool>,
}

/// Overlayable subset of a train config: every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverlay {
    algorithm: Option<Algorithm>,
    worker_compressor: Option<CompressorSpec>,
    server_compressor: Option<CompressorSpec>,
    workers: Option<i64>,
    iterations: Option<i64>,
    gamma: Option<GammaSchedule>,
    seed: Option<i64>,
    problem: Option<ProblemSpec>,
    cost_model: Option<CostModel>,
    record_analysis: Option<bool>,
    parallel_workers: Option<bool>,
}

impl RawOverlay {
    fn merged_over(&self, base: &RawOverlay) -> RawOverlay {
        RawOverlay {
            algorithm: self.algorithm.or(base.algorithm),
            worker_compressor: self
                .worker_compressor
                .clone()
                .or_else(|| base.worker_compressor.clone()),
            server_compressor: self
                .server_compressor
                .clone()
                .or_else(|| base.server_compressor.clone()),
            workers: self.workers.or(base.workers),
            iterations: self.iterations.or(base.iterations),
            gamma: self.gamma.clone().or_else(|| base.gamma.clone()),
            seed: self.seed.or(base.seed),
            problem: self.problem.clone().or_else(|| base.problem.clone()),
            cost_model: self.cost_model.clone().or_else(|| base.cost_model.clone()),
            record_analysis: self.record_analysis.or(base.record_analysis),
            parallel_workers: self.parallel_workers.or(base.parallel_workers),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    name: String,
    #[serde(flatten)]
    overlay: RawOverlay,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBatchFile {
    batch: Option<RawBatchMeta>,
    defaults: Option<RawOverlay>,
    #[serde(default)]
    experiment: Vec<RawExperiment>,
}

/// One fully resolved run.
#[derive(Debug, Clone)]
pub struct NamedConfig {
    pub name: String,
    pub config: TrainConfig,
}

/// A resolved batch of runs.
#[derive(Debug, Clone)]
pub struct ExperimentBatch {
    pub name: String,
    pub out_dir: Option<PathBuf>,
    pub paired_seeds: bool,
    pub experiments: Vec<NamedConfig>,
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config(format!("`{}`: {}", field.into(), message.into()))
}

fn positive_count(value: Option<i64>, field: String, what: &str) -> Result<usize, HarnessError> {
    let v = value.ok_or_else(|| config_err(&field, format!("missing required {what}")))?;
    if v < 1 {
        return Err(config_err(&field, format!("{what} must be >= 1, got {v}")));
    }
    Ok(v as usize)
}

fn resolve_experiment(
    overlay: &RawOverlay,
    path: &str,
    name: &str,
) -> Result<TrainConfig, HarnessError> {
    if name.is_empty()
        || !name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
    {
        return Err(config_err(
            format!("{path}.name"),
            "names must be nonempty and use only [A-Za-z0-9._-]",
        ));
    }
    let algorithm = overlay
        .algorithm
        .ok_or_else(|| config_err(format!("{path}.algorithm"), "missing required algorithm"))?;
    let workers = positive_count(overlay.workers, format!("{path}.workers"), "worker count")?;
    let iterations = positive_count(
        overlay.iterations,
        format!("{path}.iterations"),
        "iteration count",
    )?;
    let gamma = overlay
        .gamma
        .clone()
        .ok_or_else(|| config_err(format!("{path}.gamma"), "missing required learning rate"))?;
    let seed = overlay
        .seed
        .ok_or_else(|| config_err(format!("{path}.seed"), "missing required seed"))?
        as u64;
    let problem = overlay
        .problem
        .clone()
        .ok_or_else(|| config_err(format!("{path}.problem"), "missing required problem"))?;

    let config = TrainConfig {
        algorithm,
        worker_compressor: overlay
            .worker_compressor
            .clone()
            .unwrap_or(CompressorSpec::Identity),
        server_compressor: overlay
            .server_compressor
            .clone()
            .unwrap_or(CompressorSpec::Identity),
        workers,
        iterations,
        gamma,
        seed,
        problem,
        cost_model: overlay.cost_model.clone().unwrap_or_default(),
        record_analysis: overlay.record_analysis.unwrap_or(false),
        parallel_workers: overlay.parallel_workers.unwrap_or(false),
    };
    config
        .validate()
        .map_err(|e| config_err(path, e.to_string()))?;
    Ok(config)
}

/// Parse and fully validate a batch file; the first problem is reported with
/// its field path (TOML syntax errors carry line/column information).
pub fn parse_config(text: &str) -> Result<ExperimentBatch, HarnessError> {
    let raw: RawBatchFile =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    if raw.experiment.is_empty() {
        return Err(config_err("experiment", "batch declares no experiments"));
    }
    let meta = raw.batch.unwrap_or_default();
    let defaults = raw.defaults.unwrap_or_default();

    let mut experiments = Vec::with_capacity(raw.experiment.len());
    for (i, exp) in raw.experiment.iter().enumerate() {
        let merged = exp.overlay.merged_over(&defaults);
        let path = format!("experiment[{i}]");
        let config = resolve_experiment(&merged, &path, &exp.name)?;
        experiments.push(NamedConfig {
            name: exp.name.clone(),
            config,
        });
    }

    for i in 1..experiments.len() {
        if experiments[..i]
            .iter()
            .any(|e| e.name == experiments[i].name)
        {
            return Err(config_err(
                format!("experiment[{i}].name"),
                format!("duplicate name `{}`", experiments[i].name),
            ));
        }
    }

    let paired_seeds = meta.paired_seeds.unwrap_or(true);
    if paired_seeds {
        let first = &experiments[0].config;
        for (i, e) in experiments.iter().enumerate().skip(1) {
            if e.config.seed != first.seed || e.config.problem != first.problem {
                return Err(config_err(
                    format!("experiment[{i}]"),
                    "paired_seeds requires every experiment to share the problem and seed \
                     (set batch.paired_seeds = false to allow divergence)",
                ));
            }
        }
    }

    Ok(ExperimentBatch {
        name: meta.name.unwrap_or_else(|| "batch".to_string()),
        out_dir: meta.out_dir.map(PathBuf::from),
        paired_seeds,
        experiments,
    })
}

/// Flag-level overrides applied to every batch member.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub algorithm: Option<Algorithm>,
    pub workers: Option<usize>,
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

pub fn apply_overrides(
    batch: &mut ExperimentBatch,
    overrides: &CliOverrides,
) -> Result<(), HarnessError> {
    for e in batch.experiments.iter_mut() {
        if let Some(a) = overrides.algorithm {
            e.config.algorithm = a;
        }
        if let Some(w) = overrides.workers {
            e.config.workers = w;
        }
        if let Some(t) = overrides.iterations {
            e.config.iterations = t;
        }
        if let Some(lr) = overrides.lr {
            e.config.gamma = GammaSchedule::Constant(lr);
        }
        if let Some(s) = overrides.seed {
            e.config.seed = s;
        }
        e.config.validate().map_err(|err| {
            HarnessError::Config(format!("after flag overrides, `{}`: {err}", e.name))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [defaults]
        algorithm = "vanilla"
        workers = 2
        iterations = 10
        gamma = 0.1
        seed = 7

        [defaults.problem]
        kind = "quadratic"
        dim = 4

        [[experiment]]
        name = "base"
    "#;

    #[test]
    fn minimal_config_parses_to_batch_of_one() {
        let batch = parse_config(MINIMAL).unwrap();
        assert_eq!(batch.experiments.len(), 1);
        assert_eq!(batch.experiments[0].name, "base");
        assert_eq!(batch.experiments[0].config.iterations, 10);
        assert!(batch.paired_seeds);
    }

    #[test]
    fn negative_iterations_rejected_with_field_path() {
        let text = MINIMAL.replace("iterations = 10", "iterations = -3");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("experiment[0].iterations"), "{msg}");
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{MINIMAL}\nnot_a_key = 1\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn missing_required_field_names_the_field() {
        let text = MINIMAL.replace("seed = 7", "");
        let msg = parse_config(&text).unwrap_err().to_string();
        assert!(msg.contains("experiment[0].seed"), "{msg}");
    }

    #[test]
    fn paired_seeds_enforced() {
        let text = format!("{MINIMAL}\n[[experiment]]\nname = \"other\"\nseed = 8\n");
        let msg = parse_config(&text).unwrap_err().to_string();
        assert!(msg.contains("paired_seeds"), "{msg}");

        let relaxed = format!(
            "[batch]\npaired_seeds = false\n{MINIMAL}\n[[experiment]]\nname = \"other\"\nseed = 8\n"
        );
        assert!(parse_config(&relaxed).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let text = format!("{MINIMAL}\n[[experiment]]\nname = \"base\"\n");
        let msg = parse_config(&text).unwrap_err().to_string();
        assert!(msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn algorithm_compressor_mismatch_is_config_error() {
        let text = MINIMAL.replace("algorithm = \"vanilla\"", "algorithm = \"qsgd\"");
        let msg = parse_config(&text).unwrap_err().to_string();
        assert!(msg.contains("ternary"), "{msg}");
    }
}
