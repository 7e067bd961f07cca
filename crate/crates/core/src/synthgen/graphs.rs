//! Built-in random graph generators.
//!
//! Every generator returns a graph without isolated nodes: a node that ends
//! up with no edge is joined to one uniformly chosen other node, drawn from
//! the same seeded stream.

use rand::Rng as _;

use super::SynthError;
use crate::netgraph::Network;
use crate::rng::{self, Rng};

fn check_n(n: usize, min: usize) -> Result<(), SynthError> {
    if n < min {
        return Err(SynthError::Param(format!("graph needs at least {min} nodes, got {n}")));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(SynthError::Param(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn finish(n: usize, mut edges: Vec<(usize, usize)>, r: &mut Rng) -> Result<Network, SynthError> {
    let mut degree = vec![0usize; n];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    for i in 0..n {
        if degree[i] == 0 {
            let mut j = r.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            edges.push((i, j));
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    Ok(Network::from_edges(n, &edges)?)
}

/// Ring `0 - 1 - … - (n-1) - 0`.
pub fn cycle(n: usize) -> Result<Network, SynthError> {
    check_n(n, 3)?;
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Ok(Network::from_edges(n, &edges)?)
}

/// `G(n, p)`: every pair is an edge independently with probability `p`.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Network, SynthError> {
    check_n(n, 2)?;
    check_prob("p", p)?;
    let mut r = rng::stream(seed, "graph");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    finish(n, edges, &mut r)
}

/// Stochastic block model with consecutive blocks of the given sizes.
pub fn stochastic_block(sizes: &[usize], p_in: f64, p_out: f64, seed: u64) -> Result<Network, SynthError> {
    let n: usize = sizes.iter().sum();
    check_n(n, 2)?;
    check_prob("p_in", p_in)?;
    check_prob("p_out", p_out)?;
    let block: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let mut r = rng::stream(seed, "graph");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if block[i] == block[j] { p_in } else { p_out };
            if r.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    finish(n, edges, &mut r)
}

/// Preferential attachment: each new node links to `m` distinct existing
/// nodes chosen with probability proportional to degree, starting from a
/// clique on `m + 1` nodes.
pub fn barabasi_albert(n: usize, m: usize, seed: u64) -> Result<Network, SynthError> {
    if m == 0 {
        return Err(SynthError::Param("barabasi_albert needs m >= 1".into()));
    }
    check_n(n, m + 2)?;
    let mut r = rng::stream(seed, "graph");
    let mut edges = Vec::new();
    // Each endpoint appears once per incident edge, so uniform picks are degree-proportional.
    let mut endpoints = Vec::new();
    for a in 0..=m {
        for b in a + 1..=m {
            edges.push((a, b));
            endpoints.extend([a, b]);
        }
    }
    for v in m + 1..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let u = endpoints[r.random_range(0..endpoints.len())];
            if !targets.contains(&u) {
                targets.push(u);
            }
        }
        for u in targets {
            edges.push((u, v));
            endpoints.extend([u, v]);
        }
    }
    finish(n, edges, &mut r)
}
