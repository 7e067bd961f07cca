use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AttentionMap, Covariates, SynthError};
use crate::rng;

/// Coefficients of the treatment and outcome models.
///
/// `alpha*` drive the Gibbs conditionals; `beta0`/`beta1` are the treated and
/// control outcome coefficients applied to `x_i + x̄_i`; the spillover slope
/// is `interference_scale · beta2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    pub alpha0: Vec<f64>,
    pub alpha1: Vec<f64>,
    pub alpha2: f64,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub beta2: f64,
    pub interference_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

/// How to draw [`OracleParams`]. Unset values come from the default
/// distributions: `alpha ~ N(0, 1)`, `beta0 ~ U(1, 2)`, `beta1, beta2 ~ U(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamSpec {
    /// Multiplies the drawn `alpha0` and `alpha1` vectors.
    pub alpha_scale: f64,
    pub alpha0: Option<Vec<f64>>,
    pub alpha1: Option<Vec<f64>>,
    pub alpha2: Option<f64>,
    pub interference_scale: f64,
    pub noise_sd: f64,
}

impl Default for ParamSpec {
    fn default() -> Self {
        Self {
            alpha_scale: 1.0,
            alpha0: None,
            alpha1: None,
            alpha2: None,
            interference_scale: 1.0,
            noise_sd: 0.0,
        }
    }
}

impl OracleParams {
    pub fn dim(&self) -> usize {
        self.beta0.len()
    }

    /// Effective spillover slope `interference_scale · beta2`.
    pub fn spillover_slope(&self) -> f64 {
        self.interference_scale * self.beta2
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let d = self.beta0.len();
        for (name, v) in [("alpha0", &self.alpha0), ("alpha1", &self.alpha1), ("beta1", &self.beta1)] {
            if v.len() != d {
                return Err(SynthError::Param(format!("{name} has length {} (expected {d})", v.len())));
            }
        }
        let finite = |v: f64| v.is_finite();
        if !self.alpha0.iter().chain(&self.alpha1).copied().all(finite) || !finite(self.alpha2) {
            return Err(SynthError::Param("alpha coefficients must be finite".into()));
        }
        if !self.beta0.iter().all(|b| (1.0..=2.0).contains(b)) {
            return Err(SynthError::Param("beta0 entries must lie in [1, 2]".into()));
        }
        if !self.beta1.iter().all(|b| (0.0..=1.0).contains(b)) || !(0.0..=1.0).contains(&self.beta2) {
            return Err(SynthError::Param("beta1 entries and beta2 must lie in [0, 1]".into()));
        }
        if !(self.interference_scale >= 0.0) || !self.interference_scale.is_finite() {
            return Err(SynthError::Param("interference_scale must be finite and >= 0".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(SynthError::Param("noise_sd must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Draws coefficients of dimension `d`. Each coefficient has its own seeded
/// stream, so overriding one leaves the others unchanged.
pub fn draw_params(d: usize, spec: &ParamSpec, seed: u64) -> Result<OracleParams, SynthError> {
    let normals = |label: &str| -> Vec<f64> {
        let mut r = rng::stream(seed, label);
        (0..d).map(|_| StandardNormal.sample(&mut r)).collect()
    };
    let uniforms = |label: &str, lo: f64, hi: f64, k: usize| -> Vec<f64> {
        let mut r = rng::stream(seed, label);
        (0..k).map(|_| r.random_range(lo..hi)).collect()
    };
    let pick = |fixed: &Option<Vec<f64>>, label: &str| -> Result<Vec<f64>, SynthError> {
        match fixed {
            Some(v) if v.len() != d => Err(SynthError::Param(format!(
                "{label} has length {} (expected {d})",
                v.len()
            ))),
            Some(v) => Ok(v.clone()),
            None => Ok(normals(label).into_iter().map(|a| a * spec.alpha_scale).collect()),
        }
    };
    let params = OracleParams {
        alpha0: pick(&spec.alpha0, "alpha0")?,
        alpha1: pick(&spec.alpha1, "alpha1")?,
        alpha2: spec.alpha2.unwrap_or_else(|| {
            let mut r = rng::stream(seed, "alpha2");
            StandardNormal.sample(&mut r)
        }),
        beta0: uniforms("beta0", 1.0, 2.0, d),
        beta1: uniforms("beta1", 0.0, 1.0, d),
        beta2: uniforms("beta2", 0.0, 1.0, 1)[0],
        interference_scale: spec.interference_scale,
        noise_sd: spec.noise_sd,
        seed,
    };
    params.validate()?;
    Ok(params)
}

fn dot(a: &[f64], b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Closed-form potential outcomes of the generating model.
///
/// `po(i, t, z) = β_t·x_i + β_t·x̄_i + s·z` with `β_1 = beta0`,
/// `β_0 = beta1` and spillover slope `s`; no noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub params: OracleParams,
    pub attention: AttentionMap,
    treated_base: Vec<f64>,
    control_base: Vec<f64>,
}

/// Per-node effect targets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeEffects {
    pub de: Vec<f64>,
    pub se: Vec<f64>,
    pub te: Vec<f64>,
}

impl Oracle {
    pub fn new(params: OracleParams, attention: AttentionMap, x: &Covariates) -> Result<Self, SynthError> {
        params.validate()?;
        if x.dim() != params.dim() || x.n() != attention.n() {
            return Err(SynthError::Dimension(format!(
                "covariates {}x{}, attention over {} nodes, coefficients of length {}",
                x.n(),
                x.dim(),
                attention.n(),
                params.dim()
            )));
        }
        let m = x.matrix();
        let xbar: Array2<f64> = attention.mix(m);
        let mut treated_base = Vec::with_capacity(x.n());
        let mut control_base = Vec::with_capacity(x.n());
        for i in 0..x.n() {
            treated_base.push(dot(&params.beta0, m.row(i)) + dot(&params.beta0, xbar.row(i)));
            control_base.push(dot(&params.beta1, m.row(i)) + dot(&params.beta1, xbar.row(i)));
        }
        Ok(Self {
            params,
            attention,
            treated_base,
            control_base,
        })
    }

    pub fn n(&self) -> usize {
        self.treated_base.len()
    }

    pub fn potential_outcome(&self, i: usize, t: u8, z: f64) -> f64 {
        let base = if t == 1 {
            self.treated_base[i]
        } else {
            self.control_base[i]
        };
        base + self.params.spillover_slope() * z
    }

    /// Direct and spillover effects at `z_eval`, total effect from
    /// `(t=0, z=0)` to `(t=1, z=1)`.
    pub fn effects(&self, z_eval: &[f64]) -> Result<NodeEffects, SynthError> {
        if z_eval.len() != self.n() {
            return Err(SynthError::Dimension(format!(
                "{} evaluation exposures for {} nodes",
                z_eval.len(),
                self.n()
            )));
        }
        if let Some(i) = z_eval.iter().position(|z| !(0.0..=1.0).contains(z)) {
            return Err(SynthError::Param(format!("z_eval[{i}] outside [0, 1]")));
        }
        let mut out = NodeEffects::default();
        for (i, &z) in z_eval.iter().enumerate() {
            out.de.push(self.potential_outcome(i, 1, z) - self.potential_outcome(i, 0, z));
            out.se.push(self.potential_outcome(i, 0, z) - self.potential_outcome(i, 0, 0.0));
            out.te.push(self.potential_outcome(i, 1, 1.0) - self.potential_outcome(i, 0, 0.0));
        }
        Ok(out)
    }

    /// Observed outcomes for `(t, z)` plus `N(0, noise_sd²)` noise drawn
    /// in node order from `seed`.
    pub fn outcomes(&self, t: &[u8], z: &[f64], seed: u64) -> Result<Vec<f64>, SynthError> {
        if t.len() != self.n() || z.len() != self.n() {
            return Err(SynthError::Dimension("treatment/exposure length".into()));
        }
        let noise: Vec<f64> = if self.params.noise_sd > 0.0 {
            let dist = Normal::new(0.0, self.params.noise_sd)
                .map_err(|e| SynthError::Param(e.to_string()))?;
            let mut r = rng::stream(seed, "noise");
            (0..self.n()).map(|_| dist.sample(&mut r)).collect()
        } else {
            vec![0.0; self.n()]
        };
        Ok((0..self.n())
            .map(|i| self.potential_outcome(i, t[i], z[i]) + noise[i])
            .collect())
    }
}

/// Outcomes of the linear generating model.
pub fn generate_outcomes(
    x: &Covariates,
    attention: &AttentionMap,
    t: &[u8],
    z: &[f64],
    params: &OracleParams,
    seed: u64,
) -> Result<Vec<f64>, SynthError> {
    Oracle::new(params.clone(), attention.clone(), x)?.outcomes(t, z, seed)
}
