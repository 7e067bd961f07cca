//! Effect-estimation metrics and the repetition / sweep protocols.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Matrix;
use crate::dwr_model::{DwrModel, GraphInputs, ModelError};
use crate::rng;
use crate::synthgen::{generate_benchmark, Bundle, GeneratorConfig, NodeEffects, Oracle, SynthError};
use crate::trainer::{fit, make_split, Split, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// `√((1/n) Σ (τ̂_i − τ_i)²)`.
pub fn pehe(tau_hat: &[f64], tau: &[f64]) -> Result<f64, EvalError> {
    check_pair(tau_hat, tau)?;
    let mse = tau_hat.iter().zip(tau).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / tau.len() as f64;
    Ok(mse.sqrt())
}

/// `|mean(τ̂) − mean(τ)|`.
pub fn mae_ate(tau_hat: &[f64], tau: &[f64]) -> Result<f64, EvalError> {
    check_pair(tau_hat, tau)?;
    let n = tau.len() as f64;
    Ok((tau_hat.iter().sum::<f64>() / n - tau.iter().sum::<f64>() / n).abs())
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn exposure_recovery(z_hat: &[f64], z_true: &[f64]) -> Result<f64, EvalError> {
    check_pair(z_hat, z_true)?;
    pearson(z_hat, z_true).ok_or(EvalError::ZeroVariance("exposure"))
}

/// Anything that predicts per-node outcomes at arbitrary `(t_i, z_i)`.
pub trait OutcomeModel {
    fn n(&self) -> usize;
    fn outcomes(&self, t: &[u8], z: &[f64]) -> Result<Vec<f64>, EvalError>;
    /// The model's own exposure estimate, if it has one.
    fn exposure(&self) -> Option<&[f64]>;

    fn effects(&self, z_eval: &[f64]) -> Result<NodeEffects, EvalError> {
        let n = self.n();
        let (zeros, ones) = (vec![0.0; n], vec![1.0; n]);
        let (t0, t1) = (vec![0u8; n], vec![1u8; n]);
        let y1_z = self.outcomes(&t1, z_eval)?;
        let y0_z = self.outcomes(&t0, z_eval)?;
        let y0_0 = self.outcomes(&t0, &zeros)?;
        let y1_1 = self.outcomes(&t1, &ones)?;
        Ok(NodeEffects {
            de: (0..n).map(|i| y1_z[i] - y0_z[i]).collect(),
            se: (0..n).map(|i| y0_z[i] - y0_0[i]).collect(),
            te: (0..n).map(|i| y1_1[i] - y0_0[i]).collect(),
        })
    }
}

/// The oracle viewed as a model; its exposure is the true one.
pub struct OracleModel<'a> {
    pub oracle: &'a Oracle,
    pub z_true: &'a [f64],
}

impl OutcomeModel for OracleModel<'_> {
    fn n(&self) -> usize {
        self.oracle.n()
    }

    fn outcomes(&self, t: &[u8], z: &[f64]) -> Result<Vec<f64>, EvalError> {
        if t.len() != self.n() || z.len() != self.n() {
            return Err(EvalError::Length(t.len(), self.n()));
        }
        Ok((0..self.n()).map(|i| self.oracle.potential_outcome(i, t[i], z[i])).collect())
    }

    fn exposure(&self) -> Option<&[f64]> {
        Some(self.z_true)
    }
}

/// A trained network frozen at its representation of one dataset.
pub struct TrainedModel<'a> {
    pub model: &'a DwrModel,
    pub r: Matrix,
    pub z_hat: Vec<f64>,
}

impl<'a> TrainedModel<'a> {
    pub fn new(model: &'a DwrModel, bundle: &Bundle) -> Result<Self, EvalError> {
        let d = &bundle.dataset;
        let inputs = GraphInputs::new(&d.net, &d.x, &d.t)?;
        let eval = model.evaluate(&d.net, &inputs)?;
        Ok(Self {
            model,
            r: eval.r,
            z_hat: eval.z_hat,
        })
    }
}

impl OutcomeModel for TrainedModel<'_> {
    fn n(&self) -> usize {
        self.r.nrows()
    }

    fn outcomes(&self, t: &[u8], z: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.model.predict(&self.r, t, z)?)
    }

    fn exposure(&self) -> Option<&[f64]> {
        Some(&self.z_hat)
    }
}

/// RMSE against noiseless oracle outcomes at `t_i ~ Bernoulli(0.5)`,
/// `z_i ~ U(0, 1)`, restricted to `ids`.
pub fn counterfactual_rmse(
    model: &dyn OutcomeModel,
    oracle: &Oracle,
    ids: &[usize],
    seed: u64,
) -> Result<f64, EvalError> {
    let n = model.n();
    if oracle.n() != n {
        return Err(EvalError::Length(n, oracle.n()));
    }
    let mut r = rng::stream(seed, "counterfactual");
    let mut t = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        t.push(u8::from(r.random::<f64>() < 0.5));
        z.push(r.random::<f64>());
    }
    let pred = model.outcomes(&t, &z)?;
    let truth: Vec<f64> = (0..n).map(|i| oracle.potential_outcome(i, t[i], z[i])).collect();
    let p: Vec<f64> = ids.iter().map(|&i| pred[i]).collect();
    let q: Vec<f64> = ids.iter().map(|&i| truth[i]).collect();
    pehe(&p, &q)
}

/// Exposure at which direct and spillover effects are evaluated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZEval {
    /// Each node's realized ground-truth exposure.
    #[default]
    Realized,
    /// The same exposure for every node.
    Fixed { value: f64 },
}

impl ZEval {
    pub fn values(&self, z_true: &[f64]) -> Result<Vec<f64>, EvalError> {
        match self {
            ZEval::Realized => Ok(z_true.to_vec()),
            ZEval::Fixed { value } if (0.0..=1.0).contains(value) => Ok(vec![*value; z_true.len()]),
            ZEval::Fixed { value } => Err(EvalError::Config(format!("z_eval {value} outside [0, 1]"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub z_eval: ZEval,
    pub repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            z_eval: ZEval::Realized,
            repetitions: 10,
        }
    }
}

/// One evaluation of one model on one node subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sqrt_pehe_de: f64,
    pub mae_de: f64,
    pub sqrt_pehe_se: f64,
    pub mae_se: f64,
    pub sqrt_pehe_te: f64,
    pub mae_te: f64,
    pub cf_rmse: f64,
    pub exposure_pearson: Option<f64>,
}

pub const METRIC_NAMES: [&str; 8] = [
    "sqrt_pehe_de",
    "mae_de",
    "sqrt_pehe_se",
    "mae_se",
    "sqrt_pehe_te",
    "mae_te",
    "cf_rmse",
    "exposure_pearson",
];

impl Metrics {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.sqrt_pehe_de),
            Some(self.mae_de),
            Some(self.sqrt_pehe_se),
            Some(self.mae_se),
            Some(self.sqrt_pehe_te),
            Some(self.mae_te),
            Some(self.cf_rmse),
            self.exposure_pearson,
        ]
    }
}

/// Within-sample (train ids) and out-of-sample (heldout ids) metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub within: Metrics,
    pub out_of_sample: Metrics,
}

fn subset(v: &[f64], ids: &[usize]) -> Vec<f64> {
    ids.iter().map(|&i| v[i]).collect()
}

fn metrics_on(
    model: &dyn OutcomeModel,
    est: &NodeEffects,
    truth: &NodeEffects,
    oracle: &Oracle,
    z_true: &[f64],
    ids: &[usize],
    seed: u64,
) -> Result<Metrics, EvalError> {
    let pair = |a: &[f64], b: &[f64]| (subset(a, ids), subset(b, ids));
    let (de_hat, de) = pair(&est.de, &truth.de);
    let (se_hat, se) = pair(&est.se, &truth.se);
    let (te_hat, te) = pair(&est.te, &truth.te);
    Ok(Metrics {
        sqrt_pehe_de: pehe(&de_hat, &de)?,
        mae_de: mae_ate(&de_hat, &de)?,
        sqrt_pehe_se: pehe(&se_hat, &se)?,
        mae_se: mae_ate(&se_hat, &se)?,
        sqrt_pehe_te: pehe(&te_hat, &te)?,
        mae_te: mae_ate(&te_hat, &te)?,
        cf_rmse: counterfactual_rmse(model, oracle, ids, seed)?,
        exposure_pearson: model
            .exposure()
            .and_then(|z| pearson(&subset(z, ids), &subset(z_true, ids))),
    })
}

/// Scores `model` against the bundle oracle on both sides of `split`.
pub fn evaluate_model(
    model: &dyn OutcomeModel,
    bundle: &Bundle,
    split: &Split,
    z_eval: &ZEval,
    seed: u64,
) -> Result<SplitMetrics, EvalError> {
    let z_true = &bundle.dataset.z_true;
    let z = z_eval.values(z_true)?;
    let truth = bundle.oracle.effects(&z)?;
    let est = model.effects(&z)?;
    Ok(SplitMetrics {
        within: metrics_on(model, &est, &truth, &bundle.oracle, z_true, &split.train, seed)?,
        out_of_sample: metrics_on(model, &est, &truth, &bundle.oracle, z_true, &split.heldout, seed)?,
    })
}

/// Mean and sample standard deviation of each metric; `None` where no
/// repetition produced a value. A single repetition reports std 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub repetitions: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<SplitMetrics>,
    pub within: Vec<MetricSummary>,
    pub out_of_sample: Vec<MetricSummary>,
}

pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, std))
}

fn summarize(runs: &[Metrics]) -> Vec<MetricSummary> {
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = runs.iter().filter_map(|m| m.values()[k]).collect();
            let ms = mean_std(&vals);
            MetricSummary {
                name: name.to_string(),
                mean: ms.map(|(m, _)| m),
                std: ms.map(|(_, s)| s),
            }
        })
        .collect()
}

impl EffectReport {
    pub fn from_runs(seeds: Vec<u64>, runs: Vec<SplitMetrics>) -> Self {
        let within: Vec<Metrics> = runs.iter().map(|r| r.within).collect();
        let oos: Vec<Metrics> = runs.iter().map(|r| r.out_of_sample).collect();
        Self {
            repetitions: runs.len(),
            seeds,
            within: summarize(&within),
            out_of_sample: summarize(&oos),
            runs,
        }
    }

    pub fn summary(&self, out_of_sample: bool, name: &str) -> Option<&MetricSummary> {
        let list = if out_of_sample { &self.out_of_sample } else { &self.within };
        list.iter().find(|m| m.name == name)
    }

    /// Fixed-width table of means and standard deviations.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>24} {:>24}", "metric", "within", "out-of-sample");
        let cell = |m: &MetricSummary| match (m.mean, m.std) {
            (Some(a), Some(b)) => format!("{a:.4} ± {b:.4}"),
            _ => "n/a".to_string(),
        };
        for (a, b) in self.within.iter().zip(&self.out_of_sample) {
            let _ = writeln!(out, "{:<18} {:>24} {:>24}", a.name, cell(a), cell(b));
        }
        out
    }
}

/// Seed of repetition `k` under master `seed`.
pub fn repetition_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, &format!("repetition/{k}"))
}

/// Trains and scores one repetition.
pub fn run_repetition(
    bundle: &Bundle,
    train: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<SplitMetrics, EvalError> {
    let cfg = TrainConfig {
        seed,
        ..train.clone()
    };
    let fitted = fit(&bundle.dataset, &cfg)?;
    let model = TrainedModel::new(&fitted.model, bundle)?;
    evaluate_model(&model, bundle, &fitted.split, &eval.z_eval, seed)
}

/// Runs `f(k)` for `k in 0..count` on up to `jobs` threads, keeping order.
pub fn parallel_map<T, F>(count: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return (0..count).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<T>>> = (0..count).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= count {
                    break;
                }
                let v = f(k);
                *slots[k].lock().expect("slot") = Some(v);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every index ran"))
        .collect()
}

/// Repeats training under derived seeds and aggregates the metrics.
pub fn run_experiment(
    bundle: &Bundle,
    train: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
    jobs: usize,
) -> Result<EffectReport, EvalError> {
    if eval.repetitions == 0 {
        return Err(EvalError::Config("repetitions must be positive".into()));
    }
    let seeds: Vec<u64> = (0..eval.repetitions).map(|k| repetition_seed(seed, k)).collect();
    let runs = parallel_map(seeds.len(), jobs, |k| run_repetition(bundle, train, eval, seeds[k]));
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(EffectReport::from_runs(seeds, runs))
}

/// Oracle-as-model evaluation on a split drawn from `seed`; every effect error is zero.
pub fn oracle_report(bundle: &Bundle, eval: &EvalConfig, fraction: f64, seed: u64) -> Result<EffectReport, EvalError> {
    let split = make_split(bundle.dataset.n(), fraction, seed)?;
    let model = OracleModel {
        oracle: &bundle.oracle,
        z_true: &bundle.dataset.z_true,
    };
    let run = evaluate_model(&model, bundle, &split, &eval.z_eval, seed)?;
    Ok(EffectReport::from_runs(vec![seed], vec![run]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub report: EffectReport,
}

/// Regenerates the benchmark at each interference scale (all else fixed)
/// and runs the experiment on each.
pub fn interference_sweep(
    generator: &GeneratorConfig,
    train: &TrainConfig,
    eval: &EvalConfig,
    scales: &[f64],
    seed: u64,
    jobs: usize,
) -> Result<Vec<SweepRow>, EvalError> {
    if let Some(s) = scales.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(EvalError::Config(format!("interference scale {s} must be finite and >= 0")));
    }
    scales
        .iter()
        .map(|&scale| {
            let mut g = generator.clone();
            g.params.interference_scale = scale;
            let bundle = generate_benchmark(&g, seed)?;
            Ok(SweepRow {
                scale,
                report: run_experiment(&bundle, train, eval, seed, jobs)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, crate::tsv::fmt_f64)
}

/// `scale,split,metric,mean,std`, one row per scale, split and metric.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scale,split,metric,mean,std\n");
    for row in rows {
        for (split, list) in [("within", &row.report.within), ("out_of_sample", &row.report.out_of_sample)] {
            for m in list {
                let _ = writeln!(
                    out,
                    "{},{split},{},{},{}",
                    crate::tsv::fmt_f64(row.scale),
                    m.name,
                    fmt_opt(m.mean),
                    fmt_opt(m.std)
                );
            }
        }
    }
    out
}

/// `id,z_hat,z_true` rows.
pub fn exposure_scatter_csv(z_hat: &[f64], z_true: &[f64]) -> String {
    let mut out = String::from("id,z_hat,z_true\n");
    for (i, (a, b)) in z_hat.iter().zip(z_true).enumerate() {
        let _ = writeln!(out, "{i},{},{}", crate::tsv::fmt_f64(*a), crate::tsv::fmt_f64(*b));
    }
    out
}

/// `id DE SE TE` table of per-node estimates.
pub fn effects_tsv(effects: &NodeEffects) -> String {
    crate::tsv::render(
        &["id", "DE", "SE", "TE"],
        (0..effects.de.len()).map(|i| {
            vec![
                i.to_string(),
                crate::tsv::fmt_f64(effects.de[i]),
                crate::tsv::fmt_f64(effects.se[i]),
                crate::tsv::fmt_f64(effects.te[i]),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{GeneratorConfig, GraphSource};
    use proptest::prelude::*;

    #[test]
    fn pehe_examples() {
        let tau = [1.0, -2.0, 0.5];
        assert_eq!(pehe(&tau, &tau).unwrap(), 0.0);
        let shifted: Vec<f64> = tau.iter().map(|v| v + 0.7).collect();
        assert!((pehe(&shifted, &tau).unwrap() - 0.7).abs() < 1e-12);
        assert!((pehe(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((pehe(&[3.0, 4.0], &[0.0, 0.0]).unwrap() - 3.5355).abs() < 1e-4);
        assert!(pehe(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_examples() {
        let tau = [1.0, 2.0];
        assert_eq!(mae_ate(&tau, &tau).unwrap(), 0.0);
        assert_eq!(mae_ate(&[2.0, 1.0], &tau).unwrap(), 0.0);
        assert!((mae_ate(&[1.3, 2.3], &tau).unwrap() - 0.3).abs() < 1e-12);
        assert!(mae_ate(&[], &[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let z = [0.1, 0.4, 0.35, 0.9, 0.6];
        assert!((exposure_recovery(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = z.iter().map(|v| 2.0 - v).collect();
        assert!((exposure_recovery(&neg, &z).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(exposure_recovery(&[0.5; 5], &z), Err(EvalError::ZeroVariance(_))));
    }

    #[test]
    fn permuted_exposure_is_uncorrelated() {
        use rand::seq::SliceRandom;
        let n = 2000;
        let mut r = rng::stream(3, "test");
        let z: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let bound = 3.0 / (n as f64).sqrt();
        let mut within = 0;
        for seed in 0..30 {
            let mut p = z.clone();
            p.shuffle(&mut rng::stream(seed, "perm"));
            within += usize::from(exposure_recovery(&p, &z).unwrap().abs() <= bound);
        }
        assert!(within >= 29, "{within}/30");
    }

    #[test]
    fn std_conventions() {
        assert_eq!(mean_std(&[2.5]), Some((2.5, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn bundle(scale: f64) -> Bundle {
        let mut cfg = GeneratorConfig {
            graph: GraphSource::ErdosRenyi { n: 40, p: 0.12 },
            dim: 4,
            ..Default::default()
        };
        cfg.params.interference_scale = scale;
        generate_benchmark(&cfg, 4).unwrap()
    }

    #[test]
    fn oracle_as_model_scores_zero() {
        let b = bundle(1.0);
        let report = oracle_report(&b, &EvalConfig::default(), 0.8, 1).unwrap();
        for m in [report.runs[0].within, report.runs[0].out_of_sample] {
            for v in m.values().into_iter().take(7) {
                assert_eq!(v, Some(0.0));
            }
            assert!((m.exposure_pearson.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(report.within.iter().all(|s| s.std == Some(0.0)));
    }

    #[test]
    fn zero_model_counterfactual_rmse_is_outcome_rms() {
        struct Zero(usize);
        impl OutcomeModel for Zero {
            fn n(&self) -> usize {
                self.0
            }
            fn outcomes(&self, t: &[u8], _: &[f64]) -> Result<Vec<f64>, EvalError> {
                Ok(vec![0.0; t.len()])
            }
            fn exposure(&self) -> Option<&[f64]> {
                None
            }
        }
        let b = bundle(1.0);
        let ids: Vec<usize> = (0..40).collect();
        let got = counterfactual_rmse(&Zero(40), &b.oracle, &ids, 6).unwrap();
        let mut r = rng::stream(6, "counterfactual");
        let mut sq = 0.0;
        for i in 0..40 {
            let t = u8::from(r.random::<f64>() < 0.5);
            let z = r.random::<f64>();
            sq += b.oracle.potential_outcome(i, t, z).powi(2);
        }
        assert!((got - (sq / 40.0).sqrt()).abs() < 1e-12);
        assert_eq!(got, counterfactual_rmse(&Zero(40), &b.oracle, &ids, 6).unwrap());
    }

    #[test]
    fn zero_interference_spillover_pehe_is_estimate_rms() {
        let b = bundle(0.0);
        let cfg = TrainConfig {
            outer_epochs: 3,
            pi_epochs_per_outer: 1,
            ..Default::default()
        };
        let fitted = fit(&b.dataset, &cfg).unwrap();
        let m = TrainedModel::new(&fitted.model, &b).unwrap();
        let metrics = evaluate_model(&m, &b, &fitted.split, &ZEval::Realized, 0).unwrap();
        let se = m.effects(&b.dataset.z_true).unwrap().se;
        let sub = subset(&se, &fitted.split.train);
        let rms = (sub.iter().map(|v| v * v).sum::<f64>() / sub.len() as f64).sqrt();
        assert!((metrics.within.sqrt_pehe_se - rms).abs() < 1e-12);
    }

    #[test]
    fn experiment_is_reproducible_and_sweep_has_one_row_per_scale() {
        let b = bundle(1.0);
        let train = TrainConfig {
            outer_epochs: 2,
            pi_epochs_per_outer: 1,
            ..Default::default()
        };
        let eval = EvalConfig {
            repetitions: 2,
            ..Default::default()
        };
        let a = run_experiment(&b, &train, &eval, 9, 1).unwrap();
        let c = run_experiment(&b, &train, &eval, 9, 2).unwrap();
        assert_eq!(a, c);
        assert!(a.summary(false, "sqrt_pehe_de").unwrap().std.unwrap() > 0.0);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<EffectReport>(&json).unwrap(), a);

        let gen = GeneratorConfig {
            graph: GraphSource::ErdosRenyi { n: 30, p: 0.15 },
            dim: 3,
            ..Default::default()
        };
        let eval1 = EvalConfig {
            repetitions: 1,
            ..Default::default()
        };
        let rows = interference_sweep(&gen, &train, &eval1, &[0.0, 1.0], 2, 1).unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * METRIC_NAMES.len());
        assert_eq!(csv, sweep_csv(&interference_sweep(&gen, &train, &eval1, &[0.0, 1.0], 2, 1).unwrap()));
    }

    proptest! {
        #[test]
        fn pehe_and_mae_identities(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
            prop_assert!((pehe(&a, &b).unwrap().powi(2) - mse).abs() <= 1e-9 * mse.max(1.0));
            let mean_abs = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            prop_assert!(mae_ate(&a, &b).unwrap() <= mean_abs + 1e-12);
        }
    }
}
