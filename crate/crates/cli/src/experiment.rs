//! End-to-end pipeline driven by one TOML file: fit, sample, cluster,
//! calibrate, run every strategy, report. Each seed and λ gets its own
//! subdirectory; the resolved config sits at the top of the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use maskprop::hac::{cluster_dataset, TreeFile, DEFAULT_MASK_CAP};
use maskprop::io::{load_masks, read_json, write_json, write_masks};
use maskprop::metrics::{compute_report, export_curve, write_curve, MetricsReport};
use maskprop::rng::splitmix64;
use maskprop::{EngineConfig, ForestResult, MaskRecord, Strategy};
use serde::{Deserialize, Serialize};

use crate::commands::{calibrate, fit_models, run_with, sample_models, AnnotatorSpec, CalibrationFile};
use crate::error::{CliError, CliResult};

const CALIBRATION_STREAM: u64 = 0xca11_b7a7_e000_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labeled masks the mixtures are fitted to.
    pub masks: PathBuf,
    /// Held-out labeled masks for calibration; sampled from the fitted model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_masks: Option<PathBuf>,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Synthetic masks per class drawn for each seed.
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_annotator")]
    pub annotator: String,
    /// Derive K_pa at this ε from the calibration trees; otherwise `engine.k_pa` is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kpa_epsilon: Option<f64>,
    #[serde(default)]
    pub engine: EngineConfig,
}

fn default_components() -> usize {
    5
}
fn default_per_class() -> usize {
    1000
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_lambdas() -> Vec<f64> {
    vec![1.0]
}
fn default_strategies() -> Vec<String> {
    vec!["selection".into()]
}
fn default_annotator() -> String {
    "oracle".into()
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub lambda: f64,
    pub strategy: String,
    pub k_pa: f64,
    pub quantity: u64,
    pub quality: Option<f64>,
    pub correct_fraction: Option<f64>,
    pub clusters_annotated: u64,
    pub questions_asked: u64,
    pub wall_seconds: f64,
}

impl ExperimentConfig {
    /// Makes relative paths absolute against `base`.
    pub fn resolve(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.masks);
        if let Some(p) = &mut self.calibration_masks {
            fix(p);
        }
        self
    }

    /// Everything that can be checked before any compute.
    pub fn preflight(&self) -> CliResult<(Vec<Strategy>, AnnotatorSpec)> {
        for path in std::iter::once(&self.masks).chain(&self.calibration_masks) {
            if !path.is_file() {
                return Err(CliError::Data(format!("dataset {} does not exist", path.display())));
            }
        }
        if self.seeds.is_empty() || self.lambdas.is_empty() || self.strategies.is_empty() {
            return Err(CliError::Usage("seeds, lambdas and strategies must be nonempty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l >= 0.0)) {
            return Err(CliError::Usage(format!("lambda must be nonnegative, got {l}")));
        }
        if self.components == 0 || self.per_class == 0 {
            return Err(CliError::Usage("components and per_class must be positive".into()));
        }
        if let Some(eps) = self.kpa_epsilon {
            if !(0.0..=1.0).contains(&eps) {
                return Err(CliError::Usage(format!("kpa_epsilon must lie in [0, 1], got {eps}")));
            }
        }
        self.engine.validate()?;
        let strategies = self
            .strategies
            .iter()
            .map(|s| s.parse::<Strategy>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?;
        let annotator: AnnotatorSpec = self.annotator.parse()?;
        if matches!(annotator, AnnotatorSpec::Queue(_)) {
            return Err(CliError::Usage("experiments need an oracle or noisy annotator".into()));
        }
        Ok((strategies, annotator))
    }
}

pub fn run_experiment_file(config_path: &Path, out: &Path, resume: bool) -> CliResult<Vec<SummaryRow>> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", config_path.display())))?;
    let config: ExperimentConfig = toml::from_str(&text)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    run_experiment(config.resolve(&base.canonicalize()?), out, resume)
}

struct Stage<'a> {
    resume: bool,
    name: &'a str,
}

impl Stage<'_> {
    /// Runs `make` unless resuming and `path` already exists; writes through a temp file.
    fn json<T, F>(&self, path: &Path, make: F) -> CliResult<T>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> CliResult<T>,
    {
        if self.resume && path.is_file() {
            return read_json(path).map_err(|e| CliError::from(e).in_stage(self.name));
        }
        let value = make().map_err(|e| e.in_stage(self.name))?;
        let tmp = path.with_extension("tmp");
        write_json(&tmp, &value).map_err(|e| CliError::from(e).in_stage(self.name))?;
        fs::rename(&tmp, path)?;
        Ok(value)
    }

    fn masks<F>(&self, path: &Path, make: F) -> CliResult<Vec<MaskRecord>>
    where
        F: FnOnce() -> CliResult<Vec<MaskRecord>>,
    {
        if self.resume && path.is_file() {
            return load_masks(path).map_err(|e| CliError::from(e).in_stage(self.name));
        }
        let masks = make().map_err(|e| e.in_stage(self.name))?;
        let tmp = path.with_extension("tmp");
        write_masks(&tmp, &masks).map_err(|e| CliError::from(e).in_stage(self.name))?;
        fs::rename(&tmp, path)?;
        Ok(masks)
    }
}

fn prepare_dir(out: &Path, resume: bool) -> CliResult<()> {
    if out.exists() && !resume && fs::read_dir(out)?.next().is_some() {
        return Err(CliError::Usage(format!(
            "{} is not empty; experiments write to a fresh directory (or pass --resume)",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn run_experiment(config: ExperimentConfig, out: &Path, resume: bool) -> CliResult<Vec<SummaryRow>> {
    let (strategies, annotator) = config.preflight()?;
    prepare_dir(out, resume)?;
    let resolved = toml::to_string_pretty(&config).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(out.join("config.toml"), resolved)?;

    let source = load_masks(&config.masks).map_err(|e| CliError::from(e).in_stage("load"))?;
    let held_out = match &config.calibration_masks {
        Some(p) => Some(load_masks(p).map_err(|e| CliError::from(e).in_stage("load"))?),
        None => None,
    };

    let mut summary = Vec::new();
    for &seed in &config.seeds {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let stage = |name| Stage { resume, name };
        let model = stage("fit").json(&dir.join("model.json"), || fit_models(&source, config.components, 200, seed))?;
        let masks = stage("sample").masks(&dir.join("masks.jsonl"), || sample_models(&model, config.per_class, seed))?;
        let cal_masks = match &held_out {
            Some(m) => m.clone(),
            None => stage("sample").masks(&dir.join("calibration-masks.jsonl"), || {
                sample_models(&model, config.per_class, splitmix64(seed ^ CALIBRATION_STREAM))
            })?,
        };

        for &lambda in &config.lambdas {
            let ldir = dir.join(format!("lambda-{lambda}"));
            fs::create_dir_all(&ldir)?;
            let trees: TreeFile =
                stage("cluster").json(&ldir.join("trees.json"), || Ok(cluster_dataset(&masks, lambda, DEFAULT_MASK_CAP)?))?;
            let mut engine = EngineConfig { feature_score_weight: lambda, rng_seed: seed, ..config.engine.clone() };
            if let Some(eps) = config.kpa_epsilon {
                let cal_trees: TreeFile = stage("calibrate").json(&ldir.join("calibration-trees.json"), || {
                    Ok(cluster_dataset(&cal_masks, lambda, DEFAULT_MASK_CAP)?)
                })?;
                let cal: CalibrationFile = stage("calibrate").json(&ldir.join("calibration.json"), || {
                    calibrate(&cal_trees, &cal_masks, &engine, eps, maskprop::calibration::DEFAULT_BINS)
                })?;
                engine.k_pa = cal.k_pa;
            }

            for strategy in &strategies {
                let sdir = ldir.join(strategy.name().replace(':', "-"));
                fs::create_dir_all(&sdir)?;
                let result: ForestResult = stage("run")
                    .json(&sdir.join("result.json"), || run_with(&trees, &masks, *strategy, &annotator, &engine))?;
                let report: MetricsReport =
                    stage("report").json(&sdir.join("report.json"), || Ok(compute_report(&result, &masks)?))?;
                let label = format!("seed{seed}-lambda{lambda}-{}", strategy.name());
                let rows = export_curve(&result, &masks, &label).map_err(|e| CliError::from(e).in_stage("curve"))?;
                write_curve(sdir.join("curve.csv"), &rows, false).map_err(|e| CliError::from(e).in_stage("curve"))?;
                let a = &report.aggregate;
                summary.push(SummaryRow {
                    seed,
                    lambda,
                    strategy: strategy.name(),
                    k_pa: engine.k_pa,
                    quantity: a.quantity,
                    quality: a.quality,
                    correct_fraction: a.correct_fraction,
                    clusters_annotated: a.clusters_annotated,
                    questions_asked: a.questions_asked,
                    wall_seconds: a.wall_seconds,
                });
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(maskprop::Error::from)?;
    for row in &summary {
        w.serialize(row).map_err(maskprop::Error::from)?;
    }
    w.flush()?;
    Ok(summary)
}
