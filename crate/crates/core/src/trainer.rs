//! Bi-level training: each outer epoch refreshes the density-ratio weights
//! on the current representation, then takes one weighted outcome step.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::checkpoint::{self, CheckpointError};
use crate::diffcore::{
    adam_step, compare_gradients, grad, grad_check, select_coords, AdamConfig, AdamState, DiffError, GradCheckOptions,
    GradCheckReport, ParamSet, Tape, Var,
};
use crate::dwr_model::{DwrModel, GraphInputs, ModelConfig, ModelError};
use crate::reweighter::{
    decorrelation_report, make_calibration, pi_features, pi_loss_tape, sample_weights, stack_for_pi,
    DecorrelationReport, PiConfig, PiNet, PiTrainer, ReweightError, WeightVector,
};
use crate::rng;
use crate::synthgen::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reweight(#[from] ReweightError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} ({stage})")]
    Diverged { epoch: usize, stage: String },
    #[error("checkpoint {path} was trained with config hash {found}, expected {expected}")]
    ConfigMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub outer_epochs: usize,
    pub pi_epochs_per_outer: usize,
    pub lr_outcome: f64,
    pub lr_pi: f64,
    pub split_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub pi: PiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_epochs: 300,
            pi_epochs_per_outer: 5,
            lr_outcome: 1e-3,
            lr_pi: 1e-3,
            split_fraction: 0.8,
            seed: 0,
            model: ModelConfig::default(),
            pi: PiConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.outer_epochs == 0 {
            return Err(TrainError::Config("outer_epochs must be positive".into()));
        }
        if self.model.use_weights && self.pi_epochs_per_outer == 0 {
            return Err(TrainError::Config("pi_epochs_per_outer must be positive".into()));
        }
        for (name, lr) in [("lr_outcome", self.lr_outcome), ("lr_pi", self.lr_pi)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        self.model.validate()?;
        self.pi.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Transductive split: heldout outcomes are excluded from the loss only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

pub fn make_split(n: usize, fraction: f64, seed: u64) -> Result<Split, TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(TrainError::Config(format!(
            "split of {n} nodes at {fraction} leaves one side empty"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut rng::stream(seed, "split"));
    let mut train = ids[..n_train].to_vec();
    let mut heldout = ids[n_train..].to_vec();
    train.sort_unstable();
    heldout.sort_unstable();
    Ok(Split { train, heldout })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: String,
    /// Weighted outcome loss on train ids, before the step.
    pub outcome_loss: f64,
    pub unweighted_train_mse: f64,
    pub heldout_mse: f64,
    /// Discriminator loss after this epoch's updates (absent without weights).
    pub pi_loss: Option<f64>,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub unweighted: DecorrelationReport,
    pub weighted: DecorrelationReport,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub config: TrainConfig,
    pub model: DwrModel,
    pub pi: PiNet,
    pub split: Split,
    pub weights: WeightVector,
    pub history: Vec<EpochRecord>,
}

fn mse(pred: &[f64], y: &[f64], ids: &[usize]) -> f64 {
    ids.iter().map(|&i| (pred[i] - y[i]).powi(2)).sum::<f64>() / ids.len() as f64
}

/// Weighted outcome loss over `ids`, as recorded on a tape.
pub fn outcome_loss(
    tape: &mut Tape,
    model: &DwrModel,
    params: &ParamSet,
    inputs: &GraphInputs,
    y: &Arc<Vec<f64>>,
    w: &Arc<Vec<f64>>,
    ids: &Arc<Vec<usize>>,
) -> Result<Var, ModelError> {
    let f = model.forward(tape, params, inputs, None)?;
    Ok(tape.weighted_mse(f.y_hat, Arc::clone(y), Arc::clone(w), Arc::clone(ids))?)
}

/// Fresh calibration, `epochs` discriminator steps and the resulting weights
/// for one representation snapshot.
pub fn refresh_weights(
    trainer: &mut PiTrainer,
    pi_config: &PiConfig,
    r: &crate::diffcore::Matrix,
    t: &[f64],
    z: &[f64],
    epochs: usize,
    seed: u64,
) -> Result<(WeightVector, Option<f64>), ReweightError> {
    let obs = pi_features(r, t, z)?;
    let (tp, zp) = make_calibration(t, z, seed)?;
    let cal = pi_features(r, &tp, &zp)?;
    let losses = trainer.train(&obs, &cal, epochs)?;
    let probs = trainer.net.probabilities(&obs)?;
    let w = sample_weights(&probs, pi_config.clip_eps, pi_config.normalize)?;
    Ok((w, losses.last().copied()))
}

fn diverged(epoch: usize, stage: &str) -> impl Fn(DiffError) -> TrainError + '_ {
    move |e| match e {
        DiffError::NonFinite { op } => TrainError::Diverged {
            epoch,
            stage: format!("{stage}: non-finite value in {op}"),
        },
        other => TrainError::Diff(other),
    }
}

/// Runs the alternating optimization.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult, TrainError> {
    config.validate()?;
    let n = dataset.n();
    let inputs = GraphInputs::new(&dataset.net, &dataset.x, &dataset.t)?;
    let split = make_split(n, config.split_fraction, config.seed)?;
    let mut model = DwrModel::new(config.model.clone(), dataset.x.dim(), config.seed)?;
    let pi_in = config.model.representation_dim() + 2;
    let mut pi = PiTrainer::new(
        PiNet::new(pi_in, &config.pi.hidden_widths, config.seed),
        config.lr_pi,
        config.pi.optimizer,
    );
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig::with_lr(config.lr_outcome);
    let y = Arc::new(dataset.y.clone());
    let ids = Arc::new(split.train.clone());
    let t = &inputs.t;
    let mut dropout_rng = rng::stream(config.seed, "dropout");
    let mut history = Vec::with_capacity(config.outer_epochs);
    let mut weights = WeightVector::ones(n);

    for epoch in 0..config.outer_epochs {
        let mut tape = Tape::new();
        let drop = (config.model.dropout > 0.0).then_some(&mut dropout_rng);
        let f = model
            .forward(&mut tape, &model.params, &inputs, drop)
            .map_err(|e| match e {
                ModelError::Diff(d) => diverged(epoch, "forward")(d),
                other => other.into(),
            })?;
        let r = tape.value(f.r).clone();
        let z_hat: Vec<f64> = tape.value(f.z_hat).column(0).iter().map(|z| z.clamp(0.0, 1.0)).collect();

        let pi_loss = if config.model.use_weights {
            let cal_seed = rng::derive_seed(config.seed, &format!("calibration/{epoch}"));
            let (w, loss) = refresh_weights(&mut pi, &config.pi, &r, t, &z_hat, config.pi_epochs_per_outer, cal_seed)
                .map_err(|e| match e {
                    ReweightError::Diverged { step } => TrainError::Diverged {
                        epoch,
                        stage: format!("discriminator step {step}"),
                    },
                    other => other.into(),
                })?;
            weights = w;
            loss
        } else {
            None
        };

        let w = Arc::new(weights.w.clone());
        let loss = tape
            .weighted_mse(f.y_hat, Arc::clone(&y), Arc::clone(&w), Arc::clone(&ids))
            .map_err(diverged(epoch, "outcome loss"))?;
        let outcome_loss = tape.scalar(loss)?;
        if !outcome_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                stage: "outcome loss".into(),
            });
        }
        let y_hat = tape.value(f.y_hat).column(0).to_vec();
        let ones = vec![1.0; n];
        history.push(EpochRecord {
            epoch,
            mode: config.model.mode().to_string(),
            outcome_loss,
            unweighted_train_mse: mse(&y_hat, &y, &split.train),
            heldout_mse: mse(&y_hat, &y, &split.heldout),
            pi_loss,
            weight_mean: weights.mean(),
            weight_min: weights.min(),
            weight_max: weights.max(),
            unweighted: decorrelation_report(&r, t, &z_hat, &ones),
            weighted: decorrelation_report(&r, t, &z_hat, &weights.w),
        });

        let grads = tape.backward(loss, &model.params)?;
        adam_step(&mut model.params, &grads, &mut adam, &adam_cfg).map_err(diverged(epoch, "outcome step"))?;
    }

    Ok(FitResult {
        config: config.clone(),
        model,
        pi: pi.net,
        split,
        weights,
        history,
    })
}

/// Writes the history as JSON lines.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for record in history {
        serde_json::to_writer(&mut out, record).expect("history record serializes");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    config_hash: String,
    config: TrainConfig,
    in_dim: usize,
    pi_in_dim: usize,
}

const CHECKPOINT_KIND: &str = "dwr";

pub fn save_checkpoint(path: &Path, config: &TrainConfig, model: &DwrModel, pi: &PiNet) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config_hash: config.hash(),
        config: config.clone(),
        in_dim: model.in_dim,
        pi_in_dim: pi.in_dim,
    };
    let meta = serde_json::to_value(meta).expect("meta serializes");
    checkpoint::write(path, &meta, &[("model", &model.params), ("pi", &pi.params)])?;
    Ok(())
}

/// A restored model, discriminator and the config they were trained with.
#[derive(Debug, Clone)]
pub struct Restored {
    pub config: TrainConfig,
    pub model: DwrModel,
    pub pi: PiNet,
}

/// Restores a checkpoint. With `expected`, the stored config hash must match.
pub fn restore_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Restored, TrainError> {
    let bad = |detail: String| TrainError::BadCheckpoint {
        path: path.to_path_buf(),
        detail,
    };
    let decoded = checkpoint::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(decoded.header.meta.clone()).map_err(|e| bad(e.to_string()))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(bad(format!("unexpected kind `{}`", meta.kind)));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(bad("stored config does not match its hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != meta.config_hash {
            return Err(TrainError::ConfigMismatch {
                path: path.to_path_buf(),
                expected: cfg.hash(),
                found: meta.config_hash,
            });
        }
    }
    let params = |group: &str| {
        decoded
            .group(group)
            .cloned()
            .ok_or_else(|| bad(format!("missing `{group}` parameters")))
    };
    let model = DwrModel::new(meta.config.model.clone(), meta.in_dim, 0)?.with_params(params("model")?)?;
    let pi = PiNet::new(meta.pi_in_dim, &meta.config.pi.hidden_widths, 0).with_params(params("pi")?)?;
    Ok(Restored {
        config: meta.config,
        model,
        pi,
    })
}

/// Finite-difference checks of both training losses at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReports {
    pub dwr: GradCheckReport,
    pub pi: GradCheckReport,
}

impl GradientReports {
    pub fn passed(&self) -> bool {
        self.dwr.passed && self.pi.passed
    }
}

/// Checks the weighted outcome loss (weights from the untrained discriminator,
/// held fixed) and the discriminator loss at the initial parameters of
/// `config`. Zero-initialized biases put ReLU units exactly on their kink
/// for inputs that are all zero, so every bias is first moved to a seeded
/// draw from `U(-0.1, 0.1)`. With `corrupt_dwr`, the analytic DWR gradient of the checked
/// coordinate with the largest magnitude is doubled before comparison.
pub fn check_gradients(
    dataset: &Dataset,
    config: &TrainConfig,
    opts: &GradCheckOptions,
    corrupt_dwr: bool,
) -> Result<GradientReports, TrainError> {
    config.validate()?;
    let inputs = GraphInputs::new(&dataset.net, &dataset.x, &dataset.t)?;
    let split = make_split(dataset.n(), config.split_fraction, config.seed)?;
    let mut model = DwrModel::new(config.model.clone(), dataset.x.dim(), config.seed)?;
    let mut pi = PiNet::new(config.model.representation_dim() + 2, &config.pi.hidden_widths, config.seed);
    let mut jitter = rng::stream(config.seed, "grad_check_point");
    for p in model.params.iter_mut().chain(pi.params.iter_mut()) {
        if p.name.ends_with(".bias") {
            p.value.mapv_inplace(|_| jitter.random_range(-0.1..0.1));
        }
    }

    let eval = model.evaluate(&dataset.net, &inputs)?;
    let obs = pi_features(&eval.r, &inputs.t, &eval.z_hat)?;
    let (tp, zp) = make_calibration(&inputs.t, &eval.z_hat, rng::derive_seed(config.seed, "calibration/0"))?;
    let cal = pi_features(&eval.r, &tp, &zp)?;
    let weights = if config.model.use_weights {
        sample_weights(&pi.probabilities(&obs)?, config.pi.clip_eps, config.pi.normalize)?
    } else {
        WeightVector::ones(dataset.n())
    };

    let y = Arc::new(dataset.y.clone());
    let w = Arc::new(weights.w);
    let ids = Arc::new(split.train);
    let dwr_loss = |tape: &mut Tape, p: &ParamSet| {
        outcome_loss(tape, &model, p, &inputs, &y, &w, &ids).map_err(|e| match e {
            ModelError::Diff(d) => d,
            other => DiffError::Shape {
                op: "dwr_loss",
                detail: other.to_string(),
            },
        })
    };
    let (_, mut analytic) = grad(&model.params, dwr_loss)?;
    if corrupt_dwr {
        let flat = analytic.to_flat();
        let target = select_coords(&model.params, opts)
            .into_iter()
            .max_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs()))
            .expect("at least one coordinate");
        let (id, r, c) = model.params.locate(target).expect("coordinate in range");
        analytic.blocks[id.0][[r, c]] *= 2.0;
    }
    let dwr = compare_gradients(&model.params, dwr_loss, &analytic, opts)?;

    let (stacked, labels) = stack_for_pi(&obs, &cal)?;
    let pi_report = grad_check(&pi.params, |tape, p| pi_loss_tape(tape, p, &pi, &stacked, &labels), opts)?;
    Ok(GradientReports { dwr, pi: pi_report })
}
