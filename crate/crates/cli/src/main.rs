//! `gama` command-line interface.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 numeric failure
//! (divergence or non-finite losses). Relative output paths are resolved
//! under `$GAMA_OUTPUT_ROOT` when it is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gama::data::{
    gen_swiss_roll_shift, gen_two_moons_shift, load_embeddings, read_bundle, write_bundle, write_embeddings,
    DatasetBundle, SwissRollShift, TwoMoonsShift,
};
use gama::experiment::{run_ablation, AttackSpec, Component, ExperimentConfig, RunFailure};
use gama::geometry::GeodesicMetric;
use gama::metrics::{embed, evaluate, geoalign, GeoAlignOptions};
use gama::model::{load_checkpoint, save_checkpoint, Checkpoint};
use gama::trainer::fit_with_state;
use gama::GamaError;

const OUTPUT_ROOT_VAR: &str = "GAMA_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "gama", version, about = "Geometry-aware manifold alignment for domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per configured seed.
    Train(TrainArgs),
    /// Clean and PGD-robust accuracy of a checkpoint on a dataset's target test split.
    Eval(EvalArgs),
    /// Hard-min geodesic alignment score between two embedding sets.
    Geoalign(GeoalignArgs),
    /// Train the full model and component ablations on shared seeds.
    Ablate(AblateArgs),
    /// Write a synthetic domain-shift dataset as CSV plus JSON sidecar.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct Overrides {
    /// Replace the configured seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Components to drop, comma separated: geom, on, off.
    #[arg(long, value_delimiter = ',', default_value = "geom,on,off")]
    drop: Vec<String>,
    /// Skip the source-only baseline.
    #[arg(long)]
    no_baseline: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DataSource {
    /// Dataset CSV (a JSON sidecar next to it restores the exact splits).
    #[arg(long, conflicts_with = "config")]
    data: Option<PathBuf>,
    /// Experiment config whose dataset section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for generated data or for splitting a CSV without sidecar.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataSource {
    fn bundle(&self) -> Result<DatasetBundle> {
        match (&self.data, &self.config) {
            (Some(csv), _) => Ok(read_bundle(csv, self.seed, 0)?),
            (None, Some(cfg)) => Ok(ExperimentConfig::load(cfg)?.dataset.build(self.seed)?),
            (None, None) => bail!(GamaError::Config("one of --data or --config is required".into())),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Defaults to epsilon / 4.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Graph,
    Kernel,
}

#[derive(Args)]
struct GeoalignArgs {
    /// Source embeddings CSV.
    #[arg(long, requires = "target", conflicts_with = "checkpoint")]
    source: Option<PathBuf>,
    /// Target embeddings CSV.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    /// Embed a dataset with this checkpoint instead of reading embedding files.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value = "graph")]
    metric: MetricArg,
    /// Per-domain subsample cap.
    #[arg(long, default_value_t = gama::metrics::GEOALIGN_CAP)]
    cap: usize,
    /// Also write both embedding sets as CSV into this directory.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    TwoMoons,
    SwissRoll,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: Generator,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_per_domain: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Two-moons only.
    #[arg(long)]
    rotation_deg: Option<f64>,
    /// Swiss roll only.
    #[arg(long)]
    stretch: Option<f64>,
    /// Labeled target samples per class.
    #[arg(long, default_value_t = 0)]
    shots: usize,
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig> {
    if !path.exists() {
        bail!(GamaError::Config(format!("config file {} not found", path.display())));
    }
    let mut cfg = ExperimentConfig::load(path)?;
    if !ov.seeds.is_empty() {
        cfg.seeds = ov.seeds.clone();
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = ov.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(o) = &ov.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    cfg.output_dir = output_path(&cfg.output_dir);
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.toml"), cfg.to_toml_string())?;
    for &seed in &cfg.seeds {
        let dir = cfg.output_dir.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        let bundle = cfg.dataset.build(seed)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let fit = match fit_with_state(&bundle, &tc) {
            Ok(fit) => fit,
            Err((error, state)) => {
                if let Some(state) = state {
                    let path = dir.join("checkpoint.last_good.txt");
                    save_checkpoint(&path, &state.checkpoint(seed))?;
                    write(&dir.join("loss.csv"), state.loss_csv())?;
                    eprintln!("last good parameters saved to {}", path.display());
                }
                return Err(RunFailure {
                    seed,
                    error,
                    last_good: None,
                }
                .into());
            }
        };
        save_checkpoint(&dir.join("checkpoint.txt"), &fit.best)?;
        write(&dir.join("loss.csv"), fit.state.loss_csv())?;
        let report = serde_json::json!({
            "config": tc,
            "dataset": bundle.meta,
            "fit": fit.report,
        });
        write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        let best = fit
            .report
            .best_selection_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.2}%"));
        println!(
            "seed {seed}: {} epochs, best epoch {} ({} {best}), {:.2}s -> {}",
            fit.report.epochs_run,
            fit.report.best_epoch,
            fit.report.selection,
            fit.report.wall_time_s,
            dir.display()
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt: Checkpoint = load_checkpoint(&args.checkpoint)?;
    let bundle = args.source.bundle()?;
    let attack = AttackSpec {
        epsilon: args.epsilon,
        steps: args.steps,
        step_size: args.step_size,
        random_start: None,
    }
    .resolve()?;
    let geo = GeoAlignOptions {
        k: args.k,
        seed: args.source.seed,
        ..GeoAlignOptions::default()
    };
    let report = evaluate(&ckpt.spec, &ckpt.params, &bundle, &attack, &geo)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "checkpoint": args.checkpoint,
        "seed": ckpt.seed,
        "metrics": report,
    }))?;
    if let Some(out) = &args.output {
        let out = output_path(out);
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write(&out, &json)?;
    }
    println!("{json}");
    Ok(())
}

fn geoalign_cmd(args: &GeoalignArgs) -> Result<()> {
    let (source, target) = match (&args.source, &args.target, &args.checkpoint, &args.data) {
        (Some(s), Some(t), _, _) => (load_embeddings(s)?, load_embeddings(t)?),
        (None, None, Some(ck), Some(data)) => {
            let ckpt = load_checkpoint(ck)?;
            let bundle = read_bundle(data, args.seed, 0)?;
            if ckpt.spec.input_dim() != bundle.dim() {
                bail!(GamaError::Parameter(format!(
                    "checkpoint expects {} features, dataset has {}",
                    ckpt.spec.input_dim(),
                    bundle.dim()
                )));
            }
            (
                embed(&ckpt.spec, &ckpt.params, &bundle.all_source_features())?,
                embed(&ckpt.spec, &ckpt.params, &bundle.all_target_features())?,
            )
        }
        _ => bail!(GamaError::Config(
            "give --source and --target, or --checkpoint and --data".into()
        )),
    };
    if source.dim() != target.dim() {
        bail!(GamaError::Parameter(format!(
            "embedding dimensions differ: {} vs {}",
            source.dim(),
            target.dim()
        )));
    }
    if let Some(dir) = &args.dump {
        let dir = output_path(dir);
        create_dir(&dir)?;
        write_embeddings(&source, &dir.join("source_embeddings.csv"))?;
        write_embeddings(&target, &dir.join("target_embeddings.csv"))?;
    }
    let opts = GeoAlignOptions {
        k: args.k,
        metric: match args.metric {
            MetricArg::Graph => GeodesicMetric::Graph,
            MetricArg::Kernel => GeodesicMetric::Kernel,
        },
        cap: args.cap,
        seed: args.seed,
    };
    println!("{}", geoalign(&source, &target, &opts)?);
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    let drops = args
        .drop
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            Component::parse(s).ok_or_else(|| GamaError::Config(format!("unknown component `{s}` (geom, on, off)")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (report, runs) = run_ablation(&cfg, &drops, !args.no_baseline)?;
    create_dir(&cfg.output_dir)?;
    write(&cfg.output_dir.join("config.toml"), cfg.to_toml_string())?;
    write(&cfg.output_dir.join("ablation.csv"), report.to_csv())?;
    write(
        &cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    for (variant, seed_runs) in report.variants.iter().zip(&runs) {
        for run in seed_runs {
            let dir = cfg.output_dir.join(&variant.name).join(format!("seed_{}", run.seed));
            create_dir(&dir)?;
            write(&dir.join("loss.csv"), &run.loss_csv)?;
            save_checkpoint(&dir.join("checkpoint.txt"), &run.checkpoint)?;
        }
    }
    println!("variant,target_accuracy,robust_accuracy,geoalign");
    for v in &report.variants {
        let overrides: Vec<String> = v.overrides.iter().map(|(k, x)| format!("{k}={x}")).collect();
        println!(
            "{},{:.2} ± {:.2},{:.2} ± {:.2},{:.4} ± {:.4}{}",
            v.name,
            v.target_accuracy.mean,
            v.target_accuracy.std,
            v.robust_accuracy.mean,
            v.robust_accuracy.std,
            v.geoalign.mean,
            v.geoalign.std,
            if overrides.is_empty() {
                String::new()
            } else {
                format!("  [{}]", overrides.join(" "))
            }
        );
    }
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let bundle = match args.kind {
        Generator::TwoMoons => {
            let mut c = TwoMoonsShift {
                shots: args.shots,
                ..TwoMoonsShift::default()
            };
            if let Some(n) = args.n_per_domain {
                c.n_per_domain = n;
            }
            if let Some(n) = args.noise {
                c.noise = n;
            }
            if let Some(r) = args.rotation_deg {
                c.rotation_deg = r;
            }
            gen_two_moons_shift(&c, args.seed)?
        }
        Generator::SwissRoll => {
            let mut c = SwissRollShift {
                shots: args.shots,
                ..SwissRollShift::default()
            };
            if let Some(n) = args.n_per_domain {
                c.n_per_domain = n;
            }
            if let Some(n) = args.noise {
                c.noise = n;
            }
            if let Some(s) = args.stretch {
                c.stretch = s;
            }
            gen_swiss_roll_shift(&c, args.seed)?
        }
    };
    let out = output_path(&args.out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let side = write_bundle(&bundle, &out)?;
    println!("wrote {} and {}", out.display(), side.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let gama_err = err.chain().find_map(|e| {
        e.downcast_ref::<GamaError>()
            .or_else(|| e.downcast_ref::<RunFailure>().map(|f| &f.error))
    });
    match gama_err {
        Some(GamaError::Diverged { .. } | GamaError::Numeric { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Geoalign(a) => geoalign_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
