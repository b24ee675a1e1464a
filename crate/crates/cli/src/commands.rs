use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskprop::calibration::{derive_kpa, learn_likelihoods, LikelihoodTable};
use maskprop::engine::checkpoint::RunCheckpoint;
use maskprop::gmm::{fit_gmm, sample_synthetic, ClassProfile, FitOptions, ModelFile};
use maskprop::hac::{cluster_dataset, TreeFile};
use maskprop::io::{group_by_class, load_masks, read_json, write_json, write_masks};
use maskprop::metrics::{compute_report, export_curve, write_curve};
use maskprop::rng::splitmix64;
use maskprop::service::{GoldQuestion, SessionSpec, SessionStore, StoreOptions};
use maskprop::synth::{generate, Scenario};
use maskprop::{run_forest, EngineConfig, ForestResult, MaskRecord, NoisyOracle, OracleAnnotator, Strategy};
use serde::{Deserialize, Serialize};

use crate::args::{CalibrateArgs, Cli, Command, RunArgs};
use crate::error::{CliError, CliResult};

pub const CALIBRATION_VERSION: u32 = 1;

/// Output of `calibrate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub version: u32,
    pub epsilon: f64,
    pub k_pa: f64,
    pub table: LikelihoodTable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotatorSpec {
    Oracle,
    Noisy(f64),
    Queue(String),
}

impl FromStr for AnnotatorSpec {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        if s == "oracle" {
            return Ok(AnnotatorSpec::Oracle);
        }
        if let Some(rate) = s.strip_prefix("noisy:") {
            return rate
                .parse::<f64>()
                .ok()
                .filter(|r| (0.0..=1.0).contains(r))
                .map(AnnotatorSpec::Noisy)
                .ok_or_else(|| CliError::Usage(format!("noise rate in {s:?} must be a number in [0, 1]")));
        }
        match s.strip_prefix("queue:") {
            Some(id) if !id.is_empty() => Ok(AnnotatorSpec::Queue(id.to_string())),
            _ => Err(CliError::Usage(format!("unknown annotator {s:?}; use oracle, noisy:<rate> or queue:<session>"))),
        }
    }
}

pub fn require_out(out: &Option<PathBuf>) -> CliResult<&Path> {
    out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
}

/// Engine settings from an optional TOML file, with `--seed` taking precedence.
pub fn engine_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<EngineConfig> {
    let mut config: EngineConfig = match path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = seed {
        config.rng_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_trees(path: &Path) -> CliResult<TreeFile> {
    let trees: TreeFile = read_json(path)?;
    trees.check_version()?;
    Ok(trees)
}

pub fn load_result(path: &Path) -> CliResult<ForestResult> {
    let result: ForestResult = read_json(path)?;
    result.check_version()?;
    Ok(result)
}

fn parse_strategy(s: &str) -> CliResult<Strategy> {
    s.parse().map_err(|e: maskprop::Error| CliError::Usage(e.to_string()))
}

pub fn fit_models(masks: &[MaskRecord], k: usize, max_iterations: usize, seed: u64) -> CliResult<ModelFile> {
    let mut models = Vec::new();
    let mut profiles = Vec::new();
    for (class, records) in group_by_class(masks) {
        let options = FitOptions { max_iterations, seed, ..FitOptions::default() };
        models.push(fit_gmm(&records, k, options)?);
        profiles.push(ClassProfile::from_records(class, &records));
    }
    Ok(ModelFile::new(models, profiles))
}

pub fn sample_models(file: &ModelFile, n: usize, seed: u64) -> CliResult<Vec<MaskRecord>> {
    file.check_version()?;
    let mut out = Vec::with_capacity(n * file.models.len());
    for (i, (model, profile)) in file.models.iter().zip(&file.profiles).enumerate() {
        out.extend(sample_synthetic(model, profile, n, splitmix64(seed ^ i as u64))?);
    }
    Ok(out)
}

pub fn calibrate(trees: &TreeFile, masks: &[MaskRecord], config: &EngineConfig, epsilon: f64, bins: usize) -> CliResult<CalibrationFile> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CliError::Usage(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let table = learn_likelihoods(&trees.trees, masks, config.k_iou, config.k_a, bins)?;
    let k_pa = derive_kpa(&table, epsilon);
    Ok(CalibrationFile { version: CALIBRATION_VERSION, epsilon, k_pa, table })
}

pub fn run_with(trees: &TreeFile, masks: &[MaskRecord], strategy: Strategy, annotator: &AnnotatorSpec, config: &EngineConfig) -> CliResult<ForestResult> {
    Ok(match annotator {
        AnnotatorSpec::Oracle => run_forest(trees, masks, strategy, config, |_| OracleAnnotator::new(config.k_iou))?,
        AnnotatorSpec::Noisy(rate) => {
            let noisy = NoisyOracle::new(config.k_iou, *rate, config.rng_seed)?;
            run_forest(trees, masks, strategy, config, |_| noisy)?
        }
        AnnotatorSpec::Queue(_) => return Err(CliError::Usage("queue annotators run through a session store".into())),
    })
}

fn load_gold(path: &Path) -> CliResult<Vec<GoldQuestion>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn run_queue(cli: &Cli, args: &RunArgs, session: &str, config: EngineConfig) -> CliResult<()> {
    let store = SessionStore::open(&args.store, StoreOptions::default())?;
    if store.session_ids().iter().any(|s| s == session) {
        let state = store.state(session)?;
        if state.is_finished() {
            let out = require_out(&cli.out)?;
            write_json(out, &state.checkpoint.into_result()?)?;
            eprintln!("session {session} finished; result written to {}", out.display());
        } else {
            println!("{}", serde_json::to_string_pretty(&state.progress()).map_err(maskprop::Error::from)?);
            eprintln!("session {session} is waiting for answers; rerun once it drains");
        }
        return Ok(());
    }
    let trees = load_trees(&args.tree)?;
    let masks = load_masks(&args.masks)?;
    let gold = match &args.gold {
        Some(p) => load_gold(p)?,
        None => Vec::new(),
    };
    let checkpoint = RunCheckpoint::start(trees, masks, parse_strategy(&args.strategy)?, config.clone())?;
    let spec = SessionSpec::new(session, gold, args.gold_rate, config.rng_seed);
    store.create_session(spec, checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&store.progress(session)?).map_err(maskprop::Error::from)?);
    eprintln!("session {session} created in {}", args.store.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::FitGmm { input, k, max_iterations } => {
            let out = require_out(&cli.out)?;
            let file = fit_models(&load_masks(input)?, *k, *max_iterations, seed)?;
            write_json(out, &file)?;
            eprintln!("fitted {} class model(s)", file.models.len());
        }
        Command::Sample { model, n } => {
            let out = require_out(&cli.out)?;
            let masks = sample_models(&read_json(model)?, *n, seed)?;
            write_masks(out, &masks)?;
            eprintln!("wrote {} masks", masks.len());
        }
        Command::Synth { per_class, classes } => {
            let out = require_out(&cli.out)?;
            let masks = generate(&Scenario { classes: *classes, ..Scenario::default() }, *per_class, seed)?;
            write_masks(out, &masks)?;
            eprintln!("wrote {} masks", masks.len());
        }
        Command::Cluster { input, lambda, cap } => {
            let out = require_out(&cli.out)?;
            if !(*lambda >= 0.0) {
                return Err(CliError::Usage(format!("lambda must be nonnegative, got {lambda}")));
            }
            let trees = cluster_dataset(&load_masks(input)?, *lambda, *cap)?;
            write_json(out, &trees)?;
            eprintln!("clustered {} class(es)", trees.trees.len());
        }
        Command::Calibrate(CalibrateArgs { trees, masks, epsilon, bins }) => {
            let out = require_out(&cli.out)?;
            let config = engine_config(cli.config.as_deref(), cli.seed)?;
            let file = calibrate(&load_trees(trees)?, &load_masks(masks)?, &config, *epsilon, *bins)?;
            write_json(out, &file)?;
            eprintln!("K_pa = {}", file.k_pa);
        }
        Command::Run(args) => {
            let config = engine_config(cli.config.as_deref(), cli.seed)?;
            let annotator: AnnotatorSpec = args.annotator.parse()?;
            if let AnnotatorSpec::Queue(session) = &annotator {
                return run_queue(cli, args, session, config);
            }
            let out = require_out(&cli.out)?;
            let strategy = parse_strategy(&args.strategy)?;
            let result = run_with(&load_trees(&args.tree)?, &load_masks(&args.masks)?, strategy, &annotator, &config)?;
            write_json(out, &result)?;
        }
        Command::Serve(args) => crate::server::serve_blocking(args)?,
        Command::Report { result, masks } => {
            let report = compute_report(&load_result(result)?, &load_masks(masks)?)?;
            match &cli.out {
                Some(out) => write_json(out, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).map_err(maskprop::Error::from)?),
            }
        }
        Command::Curve { result, masks, run, append } => {
            let out = require_out(&cli.out)?;
            let result = load_result(result)?;
            let label = run.clone().unwrap_or_else(|| result.strategy.name());
            let rows = export_curve(&result, &load_masks(masks)?, &label)?;
            write_curve(out, &rows, *append)?;
        }
        Command::Experiment { resume } => {
            let config = cli.config.as_deref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
            let out = require_out(&cli.out)?;
            crate::experiment::run_experiment_file(config, out, *resume)?;
        }
    }
    Ok(())
}
