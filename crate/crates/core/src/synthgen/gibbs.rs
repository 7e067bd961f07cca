use rand::Rng as _;

use super::{AttentionMap, Covariates, OracleParams, SynthError};
use crate::diffcore::sigmoid_scalar;
use crate::netgraph::Network;
use crate::rng::{self, Rng};

/// Sequential-sweep Gibbs sampler for the treatment field.
///
/// The conditional of node `i` is `Bernoulli(σ(s_i))` with
/// `s_i = α0·x_i + α1·x̄_i + α2 z_i`; only the exposure term changes
/// between updates, so the covariate part is cached.
#[derive(Debug, Clone)]
pub struct GibbsSampler<'a> {
    attention: &'a AttentionMap,
    static_score: Vec<f64>,
    alpha2: f64,
}

impl<'a> GibbsSampler<'a> {
    pub fn new(
        net: &Network,
        x: &Covariates,
        attention: &'a AttentionMap,
        params: &OracleParams,
    ) -> Result<Self, SynthError> {
        if attention.n() != net.n() || x.n() != net.n() {
            return Err(SynthError::Dimension(format!(
                "graph has {} nodes, attention {}, covariates {}",
                net.n(),
                attention.n(),
                x.n()
            )));
        }
        for i in 0..net.n() {
            if !attention.row(i).map(|(j, _)| j).eq(net.neighbors(i).iter().copied()) {
                return Err(SynthError::Attention {
                    row: i,
                    detail: "support differs from the graph neighborhood".into(),
                });
            }
        }
        if params.alpha0.len() != x.dim() || params.alpha1.len() != x.dim() {
            return Err(SynthError::Dimension("alpha length differs from covariate dimension".into()));
        }
        let m = x.matrix();
        let xbar = attention.mix(m);
        let static_score = (0..net.n())
            .map(|i| {
                let own: f64 = params.alpha0.iter().zip(m.row(i)).map(|(a, v)| a * v).sum();
                let peer: f64 = params.alpha1.iter().zip(xbar.row(i)).map(|(a, v)| a * v).sum();
                own + peer
            })
            .collect();
        Ok(Self {
            attention,
            static_score,
            alpha2: params.alpha2,
        })
    }

    /// Probability that node `i` is treated given the other nodes' states.
    pub fn conditional(&self, i: usize, t: &[u8]) -> f64 {
        let z: f64 = self.attention.row(i).map(|(j, w)| w * f64::from(t[j])).sum();
        sigmoid_scalar(self.static_score[i] + self.alpha2 * z)
    }

    /// One pass over the nodes in id order, updating `t` in place.
    pub fn sweep(&self, t: &mut [u8], rng: &mut Rng) {
        for i in 0..t.len() {
            let p = self.conditional(i, t);
            let u: f64 = rng.random();
            t[i] = u8::from(u < p);
        }
    }

    /// Runs `sweeps` sweeps starting from `initial`.
    pub fn run_from(&self, initial: Vec<u8>, sweeps: usize, rng: &mut Rng) -> Vec<u8> {
        let mut t = initial;
        for _ in 0..sweeps {
            self.sweep(&mut t, rng);
        }
        t
    }
}

/// Draws treatments by Gibbs sampling from a `Bernoulli(0.5)` start and
/// returns the state after `sweeps` full sweeps (`burn_in` of them are
/// discarded warm-up, so `sweeps ≥ burn_in` is required).
pub fn gibbs_sample_treatments(
    net: &Network,
    x: &Covariates,
    attention: &AttentionMap,
    params: &OracleParams,
    sweeps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<u8>, SynthError> {
    if burn_in > sweeps {
        return Err(SynthError::Param(format!(
            "burn_in {burn_in} exceeds sweeps {sweeps}"
        )));
    }
    let sampler = GibbsSampler::new(net, x, attention, params)?;
    let mut r = rng::stream(seed, "gibbs");
    let initial: Vec<u8> = (0..net.n()).map(|_| u8::from(r.random::<f64>() < 0.5)).collect();
    Ok(sampler.run_from(initial, sweeps, &mut r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::graphs;
    use crate::synthgen::{draw_params, ground_truth_attention, spectral_embed, ParamSpec};

    fn zero_alpha(d: usize) -> ParamSpec {
        ParamSpec {
            alpha0: Some(vec![0.0; d]),
            alpha1: Some(vec![0.0; d]),
            alpha2: Some(0.0),
            ..Default::default()
        }
    }

    #[test]
    fn zero_alpha_gives_fair_coin_treatments() {
        let net = graphs::erdos_renyi(2000, 0.004, 5).unwrap();
        let x = spectral_embed(&net, 4, 5).unwrap();
        let a = ground_truth_attention(&x, &net).unwrap();
        let p = draw_params(4, &zero_alpha(4), 5).unwrap();
        // Binomial(2000, 1/2) has sd ≈ 0.0112 in the fraction; 0.48..0.52 is about ±1.8 sd.
        let mut inside = 0;
        for seed in 0..10 {
            let t = gibbs_sample_treatments(&net, &x, &a, &p, 20, 10, seed).unwrap();
            let frac = t.iter().map(|&v| f64::from(v)).sum::<f64>() / 2000.0;
            inside += usize::from((0.48..=0.52).contains(&frac));
        }
        assert!(inside >= 8, "{inside}/10 seeds inside the band");
    }

    #[test]
    fn all_ones_is_absorbing_for_huge_alpha2() {
        let net = graphs::cycle(12).unwrap();
        let x = spectral_embed(&net, 2, 1).unwrap();
        let a = ground_truth_attention(&x, &net).unwrap();
        let mut spec = zero_alpha(2);
        spec.alpha2 = Some(1e6);
        let p = draw_params(2, &spec, 1).unwrap();
        let sampler = GibbsSampler::new(&net, &x, &a, &p).unwrap();
        let mut r = rng::stream(3, "test");
        assert_eq!(sampler.run_from(vec![1; 12], 50, &mut r), vec![1; 12]);
    }

    #[test]
    fn treated_neighbor_never_lowers_the_conditional() {
        let net = graphs::erdos_renyi(60, 0.1, 2).unwrap();
        let x = spectral_embed(&net, 3, 2).unwrap();
        let a = ground_truth_attention(&x, &net).unwrap();
        let mut spec = ParamSpec::default();
        spec.alpha2 = Some(1.3);
        let p = draw_params(3, &spec, 2).unwrap();
        let sampler = GibbsSampler::new(&net, &x, &a, &p).unwrap();
        let mut r = rng::stream(9, "test");
        let t: Vec<u8> = (0..60).map(|_| u8::from(r.random::<f64>() < 0.5)).collect();
        for i in 0..60 {
            for &j in net.neighbors(i) {
                let mut lo = t.clone();
                lo[j] = 0;
                let mut hi = t.clone();
                hi[j] = 1;
                assert!(sampler.conditional(i, &hi) >= sampler.conditional(i, &lo));
            }
        }
    }

    #[test]
    fn deterministic_given_seed_and_checks_schedule() {
        let net = graphs::cycle(30).unwrap();
        let x = spectral_embed(&net, 2, 4).unwrap();
        let a = ground_truth_attention(&x, &net).unwrap();
        let p = draw_params(2, &ParamSpec::default(), 4).unwrap();
        let run = || gibbs_sample_treatments(&net, &x, &a, &p, 1, 0, 8).unwrap();
        assert_eq!(run(), run());
        assert!(gibbs_sample_treatments(&net, &x, &a, &p, 5, 6, 8).is_err());
    }
}
