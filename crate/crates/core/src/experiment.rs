//! Declarative experiment configs, multi-seed runs and ablation tables.
//!
//! A config is a TOML document:
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//! output_dir = "runs/moons"
//!
//! [dataset]
//! kind = "two_moons"      # or "swiss_roll", "csv"
//! rotation_deg = 30.0
//!
//! [train]
//! epochs = 200
//! learning_rate = 0.003
//! [train.weights]
//! lambda_geom = 0.1
//!
//! [attack]
//! epsilon = 0.1
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_swiss_roll_shift, gen_two_moons_shift, read_bundle, DatasetBundle, SwissRollShift, TwoMoonsShift};
use crate::error::{GamaError, Result};
use crate::metrics::{evaluate, GeoAlignOptions, MetricsReport};
use crate::model::Checkpoint;
use crate::perturb::AttackConfig;
use crate::trainer::{fit_with_state, FitReport, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    #[serde(default)]
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons(TwoMoonsShift),
    SwissRoll(SwissRollShift),
    Csv(CsvSource),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::TwoMoons(TwoMoonsShift::default())
    }
}

impl DatasetSpec {
    /// Generated data uses `seed` for sampling; CSV data uses it for the split.
    pub fn build(&self, seed: u64) -> Result<DatasetBundle> {
        match self {
            Self::TwoMoons(c) => gen_two_moons_shift(c, seed),
            Self::SwissRoll(c) => gen_swiss_roll_shift(c, seed),
            Self::Csv(c) => read_bundle(&c.path, seed, c.shots),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub random_start: Option<u64>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 10,
            step_size: None,
            random_start: None,
        }
    }
}

impl AttackSpec {
    pub fn resolve(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size.unwrap_or(self.epsilon / 4.0),
            random_start: self.random_start,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub attack: AttackSpec,
    pub geoalign: GeoAlignOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            attack: AttackSpec::default(),
            geoalign: GeoAlignOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| GamaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GamaError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            GamaError::Config(msg) => GamaError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(GamaError::Config("at least one seed is required".into()));
        }
        self.train.validate()?;
        self.attack.resolve().map(|_| ())
    }
}

/// Outcome of training and evaluating one seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub fit: FitReport,
    pub metrics: MetricsReport,
    /// Target-label reads counted between bundle creation and final evaluation.
    pub label_reads_before_eval: usize,
    pub loss_csv: String,
    pub checkpoint: Checkpoint,
}

/// Failure of a single seed; carries the last good state when training diverged.
#[derive(Debug)]
pub struct RunFailure {
    pub seed: u64,
    pub error: GamaError,
    pub last_good: Option<Box<TrainState>>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "seed {}: {}", self.seed, self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub fn run_seed(cfg: &ExperimentConfig, train: &TrainConfig, seed: u64) -> std::result::Result<SeedRun, RunFailure> {
    let fail = |error| RunFailure {
        seed,
        error,
        last_good: None,
    };
    let bundle = cfg.dataset.build(seed).map_err(fail)?;
    let attack = cfg.attack.resolve().map_err(fail)?;
    let mut tc = train.clone();
    tc.seed = seed;
    let fit = fit_with_state(&bundle, &tc).map_err(|(error, last_good)| RunFailure {
        seed,
        error,
        last_good,
    })?;
    let label_reads_before_eval = bundle.target_label_reads();
    let geo = GeoAlignOptions { seed, ..cfg.geoalign };
    let metrics = evaluate(&fit.best.spec, &fit.best.params, &bundle, &attack, &geo).map_err(fail)?;
    Ok(SeedRun {
        seed,
        loss_csv: fit.state.loss_csv(),
        fit: fit.report,
        metrics,
        label_reads_before_eval,
        checkpoint: fit.best,
    })
}

/// Runs every configured seed in parallel; results come back in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, train: &TrainConfig) -> std::result::Result<Vec<SeedRun>, RunFailure> {
    cfg.seeds.par_iter().map(|&s| run_seed(cfg, train, s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Geom,
    On,
    Off,
}

impl Component {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "geom" => Some(Self::Geom),
            "on" => Some(Self::On),
            "off" => Some(Self::Off),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Geom => "geom",
            Self::On => "on",
            Self::Off => "off",
        }
    }

    /// Zeroes the component's weight and, for perturbation terms, its step size.
    pub fn drop_from(self, cfg: &mut TrainConfig) -> Vec<(String, f64)> {
        match self {
            Self::Geom => {
                cfg.weights.lambda_geom = 0.0;
                vec![("lambda_geom".into(), 0.0)]
            }
            Self::On => {
                cfg.weights.lambda_on = 0.0;
                cfg.perturb.alpha = 0.0;
                vec![("lambda_on".into(), 0.0), ("alpha".into(), 0.0)]
            }
            Self::Off => {
                cfg.weights.lambda_off = 0.0;
                cfg.perturb.beta = 0.0;
                vec![("lambda_off".into(), 0.0), ("beta".into(), 0.0)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, f64)>,
    pub train: TrainConfig,
}

/// `full`, one `no_<component>` variant per dropped component, and optionally
/// the `source_only` baseline with every auxiliary term and step size zeroed.
pub fn ablation_variants(base: &TrainConfig, drops: &[Component], source_only: bool) -> Vec<Variant> {
    let mut out = vec![Variant {
        name: "full".into(),
        overrides: Vec::new(),
        train: base.clone(),
    }];
    for &c in drops {
        let mut train = base.clone();
        let overrides = c.drop_from(&mut train);
        out.push(Variant {
            name: format!("no_{}", c.name()),
            overrides,
            train,
        });
    }
    if source_only {
        let mut train = base.clone();
        let overrides = [Component::Geom, Component::On, Component::Off]
            .iter()
            .flat_map(|c| c.drop_from(&mut train))
            .collect();
        out.push(Variant {
            name: "source_only".into(),
            overrides,
            train,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub target_accuracy: f64,
    pub robust_accuracy: f64,
    pub geoalign: f64,
    pub label_reads_before_eval: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub overrides: Vec<(String, f64)>,
    pub per_seed: Vec<SeedMetrics>,
    pub target_accuracy: MeanStd,
    pub robust_accuracy: MeanStd,
    pub geoalign: MeanStd,
}

impl VariantSummary {
    pub fn from_runs(variant: &Variant, runs: &[SeedRun]) -> Self {
        let per_seed: Vec<SeedMetrics> = runs
            .iter()
            .map(|r| SeedMetrics {
                seed: r.seed,
                target_accuracy: r.metrics.target_accuracy,
                robust_accuracy: r.metrics.robust_accuracy,
                geoalign: r.metrics.geoalign,
                label_reads_before_eval: r.label_reads_before_eval,
            })
            .collect();
        let col = |f: fn(&SeedMetrics) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            name: variant.name.clone(),
            overrides: variant.overrides.clone(),
            target_accuracy: col(|m| m.target_accuracy),
            robust_accuracy: col(|m| m.robust_accuracy),
            geoalign: col(|m| m.geoalign),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub dropped: Vec<Component>,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "variant,seed,target_accuracy,robust_accuracy,geoalign";

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// One row per variant and seed, then `mean` and `std` rows per variant.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for v in &self.variants {
            for m in &v.per_seed {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    v.name, m.seed, m.target_accuracy, m.robust_accuracy, m.geoalign
                )
                .unwrap();
            }
            for (label, pick) in [("mean", 0), ("std", 1)] {
                let g = |s: MeanStd| if pick == 0 { s.mean } else { s.std };
                writeln!(
                    out,
                    "{},{label},{},{},{}",
                    v.name,
                    g(v.target_accuracy),
                    g(v.robust_accuracy),
                    g(v.geoalign)
                )
                .unwrap();
            }
        }
        out
    }
}

/// Trains every variant on every seed (shared seeds across variants).
pub fn run_ablation(
    cfg: &ExperimentConfig,
    drops: &[Component],
    source_only: bool,
) -> std::result::Result<(AblationReport, Vec<Vec<SeedRun>>), RunFailure> {
    let variants = ablation_variants(&cfg.train, drops, source_only);
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(v, s)| run_seed(cfg, &variants[v].train, s))
        .collect::<std::result::Result<_, _>>()?;
    let mut grouped: Vec<Vec<SeedRun>> = vec![Vec::new(); variants.len()];
    for ((v, _), run) in jobs.into_iter().zip(runs) {
        grouped[v].push(run);
    }
    let report = AblationReport {
        seeds: cfg.seeds.clone(),
        dropped: drops.to_vec(),
        variants: variants
            .iter()
            .zip(&grouped)
            .map(|(v, runs)| VariantSummary::from_runs(v, runs))
            .collect(),
    };
    Ok((report, grouped))
}
