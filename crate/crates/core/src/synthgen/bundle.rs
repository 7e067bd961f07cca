//! Benchmark configuration and the on-disk bundle format.
//!
//! A bundle directory holds `edges.tsv`, `features.tsv` (`id x_1 … x_d`),
//! `data.tsv` (`id t z_true y`), `attention.tsv` (`i j a_ij`) and
//! `oracle.json` (coefficients, seed, generator config and summary).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graphs;
use super::{
    compute_exposure, draw_params, ground_truth_attention, gibbs_sample_treatments, spectral_embed,
    AttentionMap, Covariates, Dataset, Oracle, OracleParams, ParamSpec, SynthError,
};
use crate::netgraph::Network;
use crate::tsv::{self, fmt_f64};

pub const BUNDLE_FILES: [&str; 5] = [
    "edges.tsv",
    "features.tsv",
    "data.tsv",
    "attention.tsv",
    "oracle.json",
];

/// Where the network comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSource {
    EdgeList { path: PathBuf },
    Cycle { n: usize },
    ErdosRenyi { n: usize, p: f64 },
    StochasticBlock { sizes: Vec<usize>, p_in: f64, p_out: f64 },
    BarabasiAlbert { n: usize, m: usize },
}

/// Where node covariates come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSource {
    /// Row-normalized spectral embedding of the graph.
    #[default]
    Spectral,
    /// A features file in the `features.tsv` layout.
    File { path: PathBuf },
    /// Every node gets the same covariate vector `(1, …, 1) / √d`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub graph: GraphSource,
    pub features: FeatureSource,
    /// Covariate dimension (ignored for file features, which carry their own).
    pub dim: usize,
    pub params: ParamSpec,
    pub sweeps: usize,
    pub burn_in: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            graph: GraphSource::Cycle { n: 4 },
            features: FeatureSource::Spectral,
            dim: 10,
            params: ParamSpec::default(),
            sweeps: 20,
            burn_in: 10,
        }
    }
}

/// A generated (or reloaded) benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub dataset: Dataset,
    pub oracle: Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub n: usize,
    pub edges: usize,
    pub treated_fraction: f64,
    pub mean_exposure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleFile {
    seed: u64,
    params: OracleParams,
    generator: GeneratorConfig,
    summary: BundleSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_text: Option<String>,
}

impl Bundle {
    pub fn summary(&self) -> BundleSummary {
        let d = &self.dataset;
        BundleSummary {
            n: d.n(),
            edges: d.net.num_edges(),
            treated_fraction: d.treated_fraction(),
            mean_exposure: d.z_true.iter().sum::<f64>() / d.n().max(1) as f64,
        }
    }

    pub fn attention(&self) -> &AttentionMap {
        &self.oracle.attention
    }
}

fn build_graph(source: &GraphSource, seed: u64) -> Result<Network, SynthError> {
    match source {
        GraphSource::EdgeList { path } => Ok(Network::load_edge_list(path)?),
        GraphSource::Cycle { n } => graphs::cycle(*n),
        GraphSource::ErdosRenyi { n, p } => graphs::erdos_renyi(*n, *p, seed),
        GraphSource::StochasticBlock { sizes, p_in, p_out } => {
            graphs::stochastic_block(sizes, *p_in, *p_out, seed)
        }
        GraphSource::BarabasiAlbert { n, m } => graphs::barabasi_albert(*n, *m, seed),
    }
}

fn build_features(config: &GeneratorConfig, net: &Network, seed: u64) -> Result<Covariates, SynthError> {
    match &config.features {
        FeatureSource::Spectral => spectral_embed(net, config.dim, seed),
        FeatureSource::File { path } => load_features(path, net.n()),
        FeatureSource::Constant => {
            if config.dim == 0 {
                return Err(SynthError::BadDimension { d: 0, n: net.n() });
            }
            let v = 1.0 / (config.dim as f64).sqrt();
            Covariates::new(Array2::from_elem((net.n(), config.dim), v))
        }
    }
}

/// Runs the full generating pipeline for `config` under master `seed`.
pub fn generate_benchmark(config: &GeneratorConfig, seed: u64) -> Result<Bundle, SynthError> {
    let net = build_graph(&config.graph, seed)?;
    net.require_no_isolated()?;
    let x = build_features(config, &net, seed)?;
    let attention = ground_truth_attention(&x, &net)?;
    let params = draw_params(x.dim(), &config.params, seed)?;
    let t = gibbs_sample_treatments(&net, &x, &attention, &params, config.sweeps, config.burn_in, seed)?;
    let z = compute_exposure(&attention, &t)?;
    let oracle = Oracle::new(params, attention, &x)?;
    let y = oracle.outcomes(&t, &z, seed)?;
    let dataset = Dataset::new(net, x, t, y, z)?;
    Ok(Bundle {
        config: config.clone(),
        seed,
        dataset,
        oracle,
    })
}

/// Writes the bundle files into `dir` (created if needed). `config_text`, if
/// given, is stored verbatim in `oracle.json`.
pub fn write_bundle(dir: &Path, bundle: &Bundle, config_text: Option<&str>) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| SynthError::Bundle {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let d = &bundle.dataset;
    d.net.save_edge_list(&dir.join("edges.tsv"))?;

    let dim = d.x.dim();
    let mut header = vec!["id".to_string()];
    header.extend((0..dim).map(|k| format!("x{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let features = tsv::render(
        &header,
        d.x.matrix().rows().into_iter().enumerate().map(|(i, row)| {
            std::iter::once(i.to_string())
                .chain(row.iter().map(|&v| fmt_f64(v)))
                .collect()
        }),
    );
    tsv::write_string(&dir.join("features.tsv"), &features)?;

    let data = tsv::render(
        &["id", "t", "z_true", "y"],
        (0..d.n()).map(|i| {
            vec![
                i.to_string(),
                d.t[i].to_string(),
                fmt_f64(d.z_true[i]),
                fmt_f64(d.y[i]),
            ]
        }),
    );
    tsv::write_string(&dir.join("data.tsv"), &data)?;

    let attention = bundle.attention();
    let att = tsv::render(
        &["i", "j", "a_ij"],
        (0..attention.n()).flat_map(|i| {
            attention
                .row(i)
                .map(move |(j, w)| vec![i.to_string(), j.to_string(), fmt_f64(w)])
        }),
    );
    tsv::write_string(&dir.join("attention.tsv"), &att)?;

    let file = OracleFile {
        seed: bundle.seed,
        params: bundle.oracle.params.clone(),
        generator: bundle.config.clone(),
        summary: bundle.summary(),
        config_text: config_text.map(str::to_string),
    };
    let json = serde_json::to_string_pretty(&file).expect("oracle file serializes") + "\n";
    tsv::write_string(&dir.join("oracle.json"), &json)?;
    Ok(())
}

/// Reads a features table (`id x_1 … x_d`, one row per node `0..n`).
pub fn load_features(path: &Path, n: usize) -> Result<Covariates, SynthError> {
    let text = tsv::read_to_string(path)?;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut dim = None;
    for (line, fields) in tsv::records(&text) {
        let width = *dim.get_or_insert(fields.len());
        tsv::expect_fields(path, line, &fields, width)?;
        if width < 2 {
            return Err(fields[0].error(path, "expected an id and at least one feature").into());
        }
        let id = fields[0].parse_usize(path)?;
        if id >= n {
            return Err(fields[0].error(path, format!("node id {id} outside 0..{n}")).into());
        }
        if rows[id].is_some() {
            return Err(fields[0].error(path, format!("duplicate row for node {id}")).into());
        }
        rows[id] = Some(fields[1..].iter().map(|f| f.parse_f64(path)).collect::<Result<_, _>>()?);
    }
    let dim = dim.map_or(0, |w| w - 1);
    let mut x = Array2::zeros((n, dim));
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| SynthError::Bundle {
            path: path.to_path_buf(),
            detail: format!("no features for node {i}"),
        })?;
        for (k, v) in row.into_iter().enumerate() {
            x[[i, k]] = v;
        }
    }
    Covariates::new(x)
}

fn bundle_error(path: PathBuf, detail: impl Into<String>) -> SynthError {
    SynthError::Bundle {
        path,
        detail: detail.into(),
    }
}

fn load_data(path: &Path, n: usize) -> Result<(Vec<u8>, Vec<f64>, Vec<f64>), SynthError> {
    let text = tsv::read_to_string(path)?;
    let mut t = vec![0u8; n];
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut seen = vec![false; n];
    for (line, fields) in tsv::records(&text) {
        tsv::expect_fields(path, line, &fields, 4)?;
        let id = fields[0].parse_usize(path)?;
        if id >= n || seen[id] {
            return Err(fields[0].error(path, format!("unexpected or repeated node id {id}")).into());
        }
        seen[id] = true;
        t[id] = match fields[1].text {
            "0" => 0,
            "1" => 1,
            other => return Err(fields[1].error(path, format!("treatment must be 0 or 1, found `{other}`")).into()),
        };
        z[id] = fields[2].parse_f64(path)?;
        y[id] = fields[3].parse_f64(path)?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(bundle_error(path.to_path_buf(), format!("no row for node {i}")));
    }
    Ok((t, z, y))
}

fn load_attention(path: &Path, net: &Network) -> Result<AttentionMap, SynthError> {
    let text = tsv::read_to_string(path)?;
    let index = crate::netgraph::EdgeIndex::neighbors(net);
    let mut weights = vec![f64::NAN; index.n_entries()];
    for (line, fields) in tsv::records(&text) {
        tsv::expect_fields(path, line, &fields, 3)?;
        let i = fields[0].parse_usize(path)?;
        let j = fields[1].parse_usize(path)?;
        if i >= net.n() {
            return Err(fields[0].error(path, format!("node id {i} outside the graph")).into());
        }
        let range = index.row(i);
        let at = index.col[range.clone()]
            .binary_search(&j)
            .map_err(|_| fields[1].error(path, format!("({i}, {j}) is not an edge")))?;
        weights[range.start + at] = fields[2].parse_f64(path)?;
    }
    if weights.iter().any(|w| w.is_nan()) {
        return Err(bundle_error(path.to_path_buf(), "missing weights for some edges"));
    }
    AttentionMap::from_weights(net, weights)
}

/// Loads and cross-validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<Bundle, SynthError> {
    let net = Network::load_edge_list(&dir.join("edges.tsv"))?;
    net.require_no_isolated()?;
    let oracle_path = dir.join("oracle.json");
    let file: OracleFile = serde_json::from_str(&tsv::read_to_string(&oracle_path)?)
        .map_err(|e| bundle_error(oracle_path.clone(), e.to_string()))?;
    let x = load_features(&dir.join("features.tsv"), net.n())?;
    let data_path = dir.join("data.tsv");
    let (t, z, y) = load_data(&data_path, net.n())?;
    let attention = load_attention(&dir.join("attention.tsv"), &net)?;
    let recomputed = compute_exposure(&attention, &t)?;
    if let Some(i) = (0..net.n()).find(|&i| (recomputed[i] - z[i]).abs() > 1e-12) {
        return Err(bundle_error(
            data_path,
            format!("z_true of node {i} disagrees with attention and treatments"),
        ));
    }
    let oracle = Oracle::new(file.params, attention, &x)?;
    let dataset = Dataset::new(net, x, t, y, z)?;
    Ok(Bundle {
        config: file.generator,
        seed: file.seed,
        dataset,
        oracle,
    })
}

/// Hex SHA-256 over the bundle files, in a fixed order.
pub fn bundle_hash(dir: &Path) -> Result<String, SynthError> {
    let mut h = Sha256::new();
    for name in BUNDLE_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| bundle_error(path.clone(), e.to_string()))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
