use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use netfx::diffcore::GradCheckOptions;
use netfx::evalkit::EvalConfig;
use netfx::synthgen::{FeatureSource, GeneratorConfig, GraphSource};
use netfx::trainer::TrainConfig;

pub const SEED_ENV: &str = "NETFX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter block; omit to check all of them.
    pub max_coords_per_block: Option<usize>,
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_block: Some(25),
            skip_kinks: true,
        }
    }
}

impl GradCheckConfig {
    pub fn options(&self, seed: u64) -> GradCheckOptions {
        GradCheckOptions {
            h: self.h,
            tol: self.tol,
            max_coords_per_block: self.max_coords_per_block,
            seed,
            skip_kinks: self.skip_kinks,
        }
    }
}

/// Everything one invocation needs. The master `seed` drives generation,
/// training and evaluation alike.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub gradcheck: GradCheckConfig,
}

/// A parsed config together with the exact text it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub text: String,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
        ),
        Err(_) => None,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let config = parse(&text, base, env_seed).with_context(|| format!("in config {}", path.display()))?;
    Ok(Loaded { config, text })
}

pub fn parse(text: &str, base: &Path, env_seed: Option<u64>) -> Result<RunConfig> {
    let table: toml::Table = toml::from_str(text)?;
    if table
        .get("train")
        .and_then(|t| t.as_table())
        .is_some_and(|t| t.contains_key("seed"))
    {
        bail!("[train] seed is not allowed; set the top-level `seed`");
    }
    let mut config: RunConfig = table.try_into()?;
    if let Some(seed) = env_seed {
        config.seed = seed;
    }
    config.train.seed = config.seed;
    config.train.validate()?;
    match &mut config.generator.graph {
        GraphSource::EdgeList { path } if path.is_relative() => *path = base.join(&*path),
        _ => {}
    }
    match &mut config.generator.features {
        FeatureSource::File { path } if path.is_relative() => *path = base.join(&*path),
        _ => {}
    }
    Ok(config)
}
