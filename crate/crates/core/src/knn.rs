//! Exact k-nearest-neighbour graphs over latent embeddings, stored in CSR
//! form, plus the symmetrize / self-loop / normalization passes used before
//! message passing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::engine::Csr;

pub const GRAPH_MAGIC: &[u8; 5] = b"NBGR1";

const FLAG_SYMMETRIZED: u8 = 1;
const FLAG_SELF_LOOPS: u8 = 2;
const FLAG_COEFFICIENTS: u8 = 4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need more than k = {k} nodes, got {n}")]
    TooFewNodes { n: usize, k: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("embedding buffer of {len} values is not a multiple of dim {dim}")]
    DimMismatch { len: usize, dim: usize },
    #[error("non-finite embedding value at node {node}")]
    NonFinite { node: usize },
    #[error("malformed graph: {0}")]
    Invalid(String),
    #[error("graph file: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a graph file (bad magic)")]
    BadMagic,
}

/// Directed graph in CSR form. Row `i` lists the out-neighbours of node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub symmetrized: bool,
    pub self_loops: bool,
    /// Per-edge `1 / sqrt(deg_i deg_j)`, aligned with `indices`.
    pub coefficients: Option<Vec<f32>>,
}

impl Graph {
    /// Builds a graph from per-node neighbour lists (sorted and deduplicated here).
    pub fn from_adjacency(mut adjacency: Vec<Vec<usize>>) -> Result<Self, GraphError> {
        let n = adjacency.len();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for (i, row) in adjacency.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&j) = row.iter().find(|&&j| j >= n) {
                return Err(GraphError::Invalid(format!("edge {i} -> {j} out of range")));
            }
            indices.extend_from_slice(row);
            offsets.push(indices.len());
        }
        Ok(Self {
            n,
            offsets,
            indices,
            symmetrized: false,
            self_loops: false,
            coefficients: None,
        })
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n {
                return Err(GraphError::Invalid(format!("edge {i} -> {j} out of range")));
            }
            adjacency[i].push(j);
        }
        Self::from_adjacency(adjacency)
    }

    pub fn edgeless(n: usize) -> Self {
        Self {
            n,
            offsets: vec![0; n + 1],
            indices: Vec::new(),
            symmetrized: true,
            self_loops: false,
            coefficients: None,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.n).map(|i| self.neighbors(i).to_vec()).collect()
    }

    /// Union of the edge set with its reverse.
    pub fn symmetrize(&self) -> Self {
        let mut adjacency = self.adjacency();
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                adjacency[j].push(i);
            }
        }
        let mut g = Self::from_adjacency(adjacency).expect("indices already in range");
        g.symmetrized = true;
        g.self_loops = self.self_loops;
        g
    }

    /// Adds `(i, i)` for every node that lacks it.
    pub fn add_self_loops(&self) -> Self {
        let mut adjacency = self.adjacency();
        for (i, row) in adjacency.iter_mut().enumerate() {
            row.push(i);
        }
        let mut g = Self::from_adjacency(adjacency).expect("indices already in range");
        g.symmetrized = self.symmetrized;
        g.self_loops = true;
        g
    }

    /// Materializes `c_ij = 1 / sqrt(deg_i deg_j)` with degrees taken from
    /// the current edge set.
    pub fn gcn_coefficients(&self) -> Self {
        let deg: Vec<f64> = (0..self.n).map(|i| self.degree(i) as f64).collect();
        let mut coefficients = Vec::with_capacity(self.num_edges());
        for i in 0..self.n {
            for &j in self.neighbors(i) {
                coefficients.push((1.0 / (deg[i] * deg[j]).sqrt()) as f32);
            }
        }
        Self {
            coefficients: Some(coefficients),
            ..self.clone()
        }
    }

    /// Symmetrize, add self-loops and materialize coefficients.
    pub fn normalized(&self) -> Self {
        self.symmetrize().add_self_loops().gcn_coefficients()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::Invalid(msg));
        if self.offsets.len() != self.n + 1 || self.offsets[0] != 0 {
            return bad(format!(
                "{} offsets for {} nodes",
                self.offsets.len(),
                self.n
            ));
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("offsets decrease".into());
        }
        if *self.offsets.last().expect("nonempty") != self.indices.len() {
            return bad("last offset differs from edge count".into());
        }
        for i in 0..self.n {
            let row = self.neighbors(i);
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {i} not strictly ascending"));
            }
            if row.last().is_some_and(|&j| j >= self.n) {
                return bad(format!("row {i} has an out-of-range column"));
            }
            if self.self_loops && !row.contains(&i) {
                return bad(format!("node {i} lacks a self-loop"));
            }
            if self.symmetrized {
                if let Some(&j) = row.iter().find(|&&j| !self.has_edge(j, i)) {
                    return bad(format!("edge {i} -> {j} has no reverse"));
                }
            }
        }
        if let Some(c) = &self.coefficients {
            if c.len() != self.indices.len() {
                return bad(format!(
                    "{} coefficients for {} edges",
                    c.len(),
                    self.indices.len()
                ));
            }
        }
        Ok(())
    }

    /// Sparse matrix for propagation ops; values are the coefficients if present.
    pub fn to_csr(&self) -> Arc<Csr> {
        Arc::new(Csr {
            n: self.n,
            offsets: self.offsets.clone(),
            indices: self.indices.clone(),
            values: self.coefficients.clone(),
        })
    }

    /// Node `perm[i]` of the result is node `i` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut adjacency = vec![Vec::new(); self.n];
        for i in 0..self.n {
            adjacency[perm[i]] = self.neighbors(i).iter().map(|&j| perm[j]).collect();
        }
        let mut g = Self::from_adjacency(adjacency).expect("permutation in range");
        g.symmetrized = self.symmetrized;
        g.self_loops = self.self_loops;
        if self.coefficients.is_some() {
            g = g.gcn_coefficients();
        }
        g
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            GRAPH_MAGIC.len() + 17 + 8 * (self.offsets.len() + self.indices.len()),
        );
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.indices.len() as u64).to_le_bytes());
        let mut flags = 0;
        if self.symmetrized {
            flags |= FLAG_SYMMETRIZED;
        }
        if self.self_loops {
            flags |= FLAG_SELF_LOOPS;
        }
        if self.coefficients.is_some() {
            flags |= FLAG_COEFFICIENTS;
        }
        out.push(flags);
        for &o in &self.offsets {
            out.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for &j in &self.indices {
            out.extend_from_slice(&(j as u64).to_le_bytes());
        }
        if let Some(c) = &self.coefficients {
            for v in c {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != GRAPH_MAGIC {
            return Err(GraphError::BadMagic);
        }
        let mut u64_buf = [0u8; 8];
        let mut read_u64 = |r: &mut &[u8]| -> Result<usize, GraphError> {
            r.read_exact(&mut u64_buf)?;
            usize::try_from(u64::from_le_bytes(u64_buf))
                .map_err(|_| GraphError::Invalid("count exceeds address space".into()))
        };
        let n = read_u64(&mut r)?;
        let e = read_u64(&mut r)?;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let flags = flags[0];
        let need = (n + 1 + e) * 8
            + if flags & FLAG_COEFFICIENTS != 0 {
                e * 4
            } else {
                0
            };
        if r.len() < need {
            return Err(GraphError::Invalid(format!(
                "truncated: {} bytes left, {need} needed",
                r.len()
            )));
        }
        let offsets = (0..=n)
            .map(|_| read_u64(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let indices = (0..e)
            .map(|_| read_u64(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let coefficients = if flags & FLAG_COEFFICIENTS != 0 {
            let mut c = Vec::with_capacity(e);
            let mut buf = [0u8; 4];
            for _ in 0..e {
                r.read_exact(&mut buf)?;
                c.push(f32::from_le_bytes(buf));
            }
            Some(c)
        } else {
            None
        };
        let g = Self {
            n,
            offsets,
            indices,
            symmetrized: flags & FLAG_SYMMETRIZED != 0,
            self_loops: flags & FLAG_SELF_LOOPS != 0,
            coefficients,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GraphError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// The `k` nearest other nodes of `i` by (distance, index), ascending by index.
fn nearest(emb: &[f32], dim: usize, n: usize, i: usize, k: usize) -> Vec<usize> {
    let q = &emb[i * dim..(i + 1) * dim];
    // Sorted ascending by (distance, index); the last entry is the current worst.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for j in 0..n {
        if j == i {
            continue;
        }
        let d = squared_distance(q, &emb[j * dim..(j + 1) * dim]);
        if best.len() == k && (d, j) >= best[k - 1] {
            continue;
        }
        let pos = best.partition_point(|&e| e < (d, j));
        best.insert(pos, (d, j));
        best.truncate(k);
    }
    let mut out: Vec<usize> = best.into_iter().map(|(_, j)| j).collect();
    out.sort_unstable();
    out
}

/// Directed exact kNN graph: node `i` points at its `k` nearest other nodes
/// under Euclidean distance, ties going to the smaller index.
pub fn build_knn(emb: &[f32], dim: usize, k: usize) -> Result<Graph, GraphError> {
    if k == 0 {
        return Err(GraphError::ZeroK);
    }
    if dim == 0 || !emb.len().is_multiple_of(dim) {
        return Err(GraphError::DimMismatch {
            len: emb.len(),
            dim,
        });
    }
    let n = emb.len() / dim;
    if n <= k {
        return Err(GraphError::TooFewNodes { n, k });
    }
    if let Some(pos) = emb.iter().position(|v| !v.is_finite()) {
        return Err(GraphError::NonFinite { node: pos / dim });
    }
    let adjacency: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| nearest(emb, dim, n, i, k))
        .collect();
    Graph::from_adjacency(adjacency)
}

/// One graph over training nodes followed by test nodes.
#[derive(Debug, Clone)]
pub struct TransductiveGraph {
    pub graph: Graph,
    pub n_train: usize,
    pub n_test: usize,
}

impl TransductiveGraph {
    pub fn train_nodes(&self) -> Vec<usize> {
        (0..self.n_train).collect()
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        (self.n_train..self.n_train + self.n_test).collect()
    }

    pub fn train_mask(&self) -> Vec<bool> {
        (0..self.graph.n).map(|i| i < self.n_train).collect()
    }
}

/// Directed kNN graph over `train` then `test` embeddings.
pub fn assemble_transductive(
    train: &[f32],
    test: &[f32],
    dim: usize,
    k: usize,
) -> Result<TransductiveGraph, GraphError> {
    for part in [train, test] {
        if dim == 0 || part.len() % dim != 0 {
            return Err(GraphError::DimMismatch {
                len: part.len(),
                dim,
            });
        }
    }
    let mut all = Vec::with_capacity(train.len() + test.len());
    all.extend_from_slice(train);
    all.extend_from_slice(test);
    Ok(TransductiveGraph {
        graph: build_knn(&all, dim, k)?,
        n_train: train.len() / dim,
        n_test: test.len() / dim,
    })
}
