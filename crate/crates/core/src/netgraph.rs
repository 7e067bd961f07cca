//! Undirected simple graphs with dense 0-based node ids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tsv::{self, TableError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{path}:{line}:{column}: negative node id `{text}`")]
    NegativeId {
        path: PathBuf,
        line: usize,
        column: usize,
        text: String,
    },
    #[error("self-loop on node {node}{}", location(.line))]
    SelfLoop { node: usize, line: Option<usize> },
    #[error("edge ({i}, {j}) references a node outside [0, {n})")]
    OutOfRange { i: usize, j: usize, n: usize },
    #[error("node {node} is isolated (no neighbors); peer exposure is undefined")]
    IsolatedNode { node: usize },
    #[error("graph is empty")]
    Empty,
}

fn location(line: &Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

/// Undirected graph stored as sorted, symmetric neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub isolated: usize,
    pub isolated_nodes: Vec<usize>,
}

impl Network {
    /// Builds a graph on `n` nodes from undirected edges. Each edge may be
    /// listed in either or both directions; duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(GraphError::OutOfRange { i, j, n });
            }
            if i == j {
                return Err(GraphError::SelfLoop { node: i, line: None });
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once as `(min, max)`, sorted.
    pub fn canonical_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors
            .get(i)
            .is_some_and(|list| list.binary_search(&j).is_ok())
    }

    pub fn degree_stats(&self) -> DegreeStats {
        let degrees: Vec<usize> = self.neighbors.iter().map(Vec::len).collect();
        let isolated_nodes: Vec<usize> = degrees
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mean = if degrees.is_empty() {
            0.0
        } else {
            degrees.iter().sum::<usize>() as f64 / degrees.len() as f64
        };
        DegreeStats {
            min: degrees.iter().copied().min().unwrap_or(0),
            max: degrees.iter().copied().max().unwrap_or(0),
            mean,
            isolated: isolated_nodes.len(),
            isolated_nodes,
        }
    }

    /// Rejects empty graphs and graphs with a degree-0 node.
    pub fn require_no_isolated(&self) -> Result<(), GraphError> {
        if self.neighbors.is_empty() {
            return Err(GraphError::Empty);
        }
        match self.neighbors.iter().position(Vec::is_empty) {
            Some(node) => Err(GraphError::IsolatedNode { node }),
            None => Ok(()),
        }
    }

    /// Applies a node relabeling: node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self, GraphError> {
        let edges: Vec<_> = self
            .canonical_edges()
            .into_iter()
            .map(|(i, j)| (perm[i], perm[j]))
            .collect();
        Self::from_edges(self.n(), &edges)
    }

    pub fn parse_edge_list(text: &str, path: &Path) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        let mut max_id: Option<usize> = None;
        for (line, fields) in tsv::records(text) {
            tsv::expect_fields(path, line, &fields, 2)?;
            let mut ids = [0usize; 2];
            for (slot, field) in ids.iter_mut().zip(&fields) {
                if field.text.starts_with('-') && field.text[1..].parse::<u64>().is_ok() {
                    return Err(GraphError::NegativeId {
                        path: path.to_path_buf(),
                        line: field.line,
                        column: field.column,
                        text: field.text.to_string(),
                    });
                }
                *slot = field.parse_usize(path)?;
            }
            if ids[0] == ids[1] {
                return Err(GraphError::SelfLoop {
                    node: ids[0],
                    line: Some(line),
                });
            }
            max_id = Some(max_id.map_or(ids[0].max(ids[1]), |m| m.max(ids[0]).max(ids[1])));
            edges.push((ids[0], ids[1]));
        }
        let n = max_id.map_or(0, |m| m + 1);
        Self::from_edges(n, &edges)
    }

    pub fn load_edge_list(path: &Path) -> Result<Self, GraphError> {
        let text = tsv::read_to_string(path)?;
        Self::parse_edge_list(&text, path)
    }

    /// Canonical text form: one line per undirected edge, smaller id first,
    /// sorted lexicographically.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (i, j) in self.canonical_edges() {
            out.push_str(&format!("{i}\t{j}\n"));
        }
        out
    }

    pub fn save_edge_list(&self, path: &Path) -> Result<(), GraphError> {
        Ok(tsv::write_string(path, &self.to_edge_list())?)
    }
}

/// Compressed sparse rows over directed neighbor pairs, optionally with a
/// self entry per row. Used by the attention and aggregation kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeIndex {
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
}

impl EdgeIndex {
    pub fn neighbors(net: &Network) -> Self {
        Self::build(net, false)
    }

    /// Rows cover `N(i) ∪ {i}`, sorted by column.
    pub fn with_self(net: &Network) -> Self {
        Self::build(net, true)
    }

    fn build(net: &Network, self_loops: bool) -> Self {
        let mut row_ptr = Vec::with_capacity(net.n() + 1);
        let mut col = Vec::new();
        row_ptr.push(0);
        for i in 0..net.n() {
            let list = net.neighbors(i);
            if self_loops {
                let at = list.partition_point(|&j| j < i);
                col.extend_from_slice(&list[..at]);
                col.push(i);
                col.extend_from_slice(&list[at..]);
            } else {
                col.extend_from_slice(list);
            }
            row_ptr.push(col.len());
        }
        Self { row_ptr, col }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_entries(&self) -> usize {
        self.col.len()
    }

    pub fn row(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// Row id of every entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.n_entries());
        for i in 0..self.n_rows() {
            rows.extend(std::iter::repeat_n(i, self.row(i).len()));
        }
        rows
    }
}
