mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use netfx::diffcore::DiffError;
use netfx::dwr_model::ModelError;
use netfx::evalkit::{
    effects_tsv, evaluate_model, exposure_scatter_csv, interference_sweep, oracle_report, run_experiment,
    sweep_csv, EffectReport, EvalError, OracleModel, OutcomeModel, TrainedModel,
};
use netfx::reweighter::ReweightError;
use netfx::synthgen::{generate_benchmark, load_bundle, write_bundle, Bundle};
use netfx::trainer::{
    check_gradients, fit, make_split, restore_checkpoint, save_checkpoint, write_history, TrainError,
};
use netfx::tsv;

#[derive(Parser)]
#[command(name = "netfx", version, about = "Network treatment-effect estimation with dual weighting regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a semi-synthetic benchmark bundle.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a model on a bundle and write a checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Score a checkpoint, the oracle, or the repetition protocol on a bundle.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the generating oracle itself.
        #[arg(long)]
        oracle: bool,
        /// Worker threads for repetitions.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the experiment across interference scales.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scales; overrides `[sweep] scales`.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of the outcome and discriminator gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Use this bundle instead of generating one from the config.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Double one analytic gradient coordinate before comparing.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

/// A failed numerical check, as opposed to bad input.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn diff_numerical(e: &DiffError) -> bool {
    matches!(e, DiffError::NonFinite { .. })
}

fn model_numerical(e: &ModelError) -> bool {
    matches!(e, ModelError::Diff(d) if diff_numerical(d))
}

fn train_numerical(e: &TrainError) -> bool {
    match e {
        TrainError::Diverged { .. } | TrainError::Reweight(ReweightError::Diverged { .. }) => true,
        TrainError::Diff(d) | TrainError::Reweight(ReweightError::Diff(d)) => diff_numerical(d),
        TrainError::Model(m) => model_numerical(m),
        _ => false,
    }
}

fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<NumericalFailure>()
            || c.downcast_ref::<TrainError>().is_some_and(train_numerical)
            || c.downcast_ref::<DiffError>().is_some_and(diff_numerical)
            || c.downcast_ref::<ModelError>().is_some_and(model_numerical)
            || c.downcast_ref::<EvalError>().is_some_and(|e| match e {
                EvalError::Train(t) => train_numerical(t),
                EvalError::Model(m) => model_numerical(m),
                _ => false,
            })
    })
}

struct Run {
    loaded: config::Loaded,
    out: PathBuf,
}

impl Run {
    fn open(common: &Common) -> Result<Self> {
        let loaded = config::load(&common.config)?;
        let out = common
            .out
            .clone()
            .or_else(|| loaded.config.output.clone())
            .unwrap_or_else(|| PathBuf::from("netfx-out"));
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let run = Self { loaded, out };
        run.write("config.toml", &run.loaded.text)?;
        let resolved = serde_json::to_string_pretty(&run.loaded.config)? + "\n";
        run.write("resolved_config.json", &resolved)?;
        Ok(run)
    }

    fn cfg(&self) -> &config::RunConfig {
        &self.loaded.config
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }
}

fn open_bundle(dir: &Path) -> Result<Bundle> {
    load_bundle(dir).with_context(|| format!("loading bundle {}", dir.display()))
}

fn generate(common: &Common) -> Result<()> {
    let run = Run::open(common)?;
    let bundle = generate_benchmark(&run.cfg().generator, run.cfg().seed)?;
    write_bundle(&run.out, &bundle, Some(&run.loaded.text))?;
    let s = bundle.summary();
    println!(
        "bundle {}: n={} edges={} treated_fraction={:.4} mean_exposure={:.4}",
        run.out.display(),
        s.n,
        s.edges,
        s.treated_fraction,
        s.mean_exposure
    );
    Ok(())
}

fn train(common: &Common, bundle_dir: &Path) -> Result<()> {
    let run = Run::open(common)?;
    let bundle = open_bundle(bundle_dir)?;
    let cfg = &run.cfg().train;
    let fitted = fit(&bundle.dataset, cfg)?;
    save_checkpoint(&run.path("checkpoint.bin"), cfg, &fitted.model, &fitted.pi)?;
    write_history(&run.path("history.jsonl"), &fitted.history)?;
    run.write(
        "weights.tsv",
        &tsv::render(
            &["id", "w"],
            fitted.weights.w.iter().enumerate().map(|(i, w)| vec![i.to_string(), tsv::fmt_f64(*w)]),
        ),
    )?;
    if let Some(last) = fitted.history.last() {
        println!(
            "trained {} for {} epochs: outcome_loss={:.6} heldout_mse={:.6} weights in [{:.4}, {:.4}]",
            cfg.model.mode(),
            fitted.history.len(),
            last.outcome_loss,
            last.heldout_mse,
            last.weight_min,
            last.weight_max
        );
    }
    println!("checkpoint {} (config hash {})", run.path("checkpoint.bin").display(), cfg.hash());
    Ok(())
}

fn write_model_outputs(run: &Run, model: &dyn OutcomeModel, bundle: &Bundle) -> Result<()> {
    let z_eval = run.cfg().eval.z_eval.values(&bundle.dataset.z_true)?;
    run.write("effects.tsv", &effects_tsv(&model.effects(&z_eval)?))?;
    if let Some(z_hat) = model.exposure() {
        run.write("exposure_scatter.csv", &exposure_scatter_csv(z_hat, &bundle.dataset.z_true))?;
    }
    Ok(())
}

fn evaluate(common: &Common, bundle_dir: &Path, checkpoint: Option<&Path>, oracle: bool, jobs: usize) -> Result<()> {
    let run = Run::open(common)?;
    let bundle = open_bundle(bundle_dir)?;
    let cfg = run.cfg();
    let report: EffectReport = if oracle {
        let model = OracleModel {
            oracle: &bundle.oracle,
            z_true: &bundle.dataset.z_true,
        };
        write_model_outputs(&run, &model, &bundle)?;
        oracle_report(&bundle, &cfg.eval, cfg.train.split_fraction, cfg.seed)?
    } else if let Some(path) = checkpoint {
        let restored = restore_checkpoint(path, Some(&cfg.train))?;
        if restored.model.in_dim != bundle.dataset.x.dim() {
            bail!(
                "checkpoint expects {} covariates but bundle {} has {}",
                restored.model.in_dim,
                bundle_dir.display(),
                bundle.dataset.x.dim()
            );
        }
        let model = TrainedModel::new(&restored.model, &bundle)?;
        write_model_outputs(&run, &model, &bundle)?;
        let split = make_split(bundle.dataset.n(), restored.config.split_fraction, restored.config.seed)?;
        let metrics = evaluate_model(&model, &bundle, &split, &cfg.eval.z_eval, restored.config.seed)?;
        EffectReport::from_runs(vec![restored.config.seed], vec![metrics])
    } else {
        run_experiment(&bundle, &cfg.train, &cfg.eval, cfg.seed, jobs)?
    };
    run.write_json("report.json", &report)?;
    print!("{}", report.table());
    println!("{} repetition(s); report {}", report.repetitions, run.path("report.json").display());
    Ok(())
}

fn sweep(common: &Common, scales: Option<&[f64]>, jobs: usize) -> Result<()> {
    let run = Run::open(common)?;
    let cfg = run.cfg();
    let scales = scales.unwrap_or(&cfg.sweep.scales);
    let rows = interference_sweep(&cfg.generator, &cfg.train, &cfg.eval, scales, cfg.seed, jobs)?;
    run.write("sweep.csv", &sweep_csv(&rows))?;
    run.write_json("sweep.json", &rows)?;
    for row in &rows {
        let get = |name| row.report.summary(true, name).and_then(|m| m.mean).unwrap_or(f64::NAN);
        println!(
            "scale {:<6} sqrt_pehe_de {:.4} sqrt_pehe_se {:.4}",
            row.scale,
            get("sqrt_pehe_de"),
            get("sqrt_pehe_se")
        );
    }
    println!("sweep {}", run.path("sweep.csv").display());
    Ok(())
}

fn gradcheck(common: &Common, bundle_dir: Option<&Path>, corrupt: bool) -> Result<()> {
    let run = Run::open(common)?;
    let cfg = run.cfg();
    let bundle = match bundle_dir {
        Some(dir) => open_bundle(dir)?,
        None => generate_benchmark(&cfg.generator, cfg.seed)?,
    };
    let reports = check_gradients(&bundle.dataset, &cfg.train, &cfg.gradcheck.options(cfg.seed), corrupt)?;
    run.write_json("gradcheck.json", &reports)?;
    for (name, r) in [("dwr loss", &reports.dwr), ("pi loss", &reports.pi)] {
        println!(
            "{name:<9} {} max_rel_err={:.3e} at {}[{}, {}] (analytic {:.6e}, numeric {:.6e}; {} coordinates)",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_rel_err,
            r.block,
            r.row,
            r.col,
            r.analytic,
            r.numeric,
            r.coords_checked
        );
    }
    if !reports.passed() {
        let bad = if reports.dwr.passed { &reports.pi } else { &reports.dwr };
        return Err(NumericalFailure(format!(
            "gradient check failed at {}[{}, {}] (flat index {}): relative error {:.3e} exceeds {:.1e}",
            bad.block, bad.row, bad.col, bad.flat_index, bad.max_rel_err, cfg.gradcheck.tol
        ))
        .into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Train { common, bundle } => train(common, bundle),
        Command::Evaluate {
            common,
            bundle,
            checkpoint,
            oracle,
            jobs,
        } => evaluate(common, bundle, checkpoint.as_deref(), *oracle, *jobs),
        Command::Sweep { common, scales, jobs } => sweep(common, scales.as_deref(), *jobs),
        Command::Gradcheck {
            common,
            bundle,
            corrupt,
        } => gradcheck(common, bundle.as_deref(), *corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_numerical(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
