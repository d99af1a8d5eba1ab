//! Undirected graph storage, GCN normalization and the homophily measure.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::par::Exec;

/// Immutable undirected simple graph in compressed sparse layout.
///
/// Edges are stored once as `(j, k)` with `j < k` and get dense ids in
/// lexicographic order. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    neighbor_edges: Vec<usize>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl Graph {
    /// Builds a graph from raw pairs, dropping self-loops and merging
    /// duplicates in either orientation.
    pub fn build(num_nodes: usize, raw_edges: &[(usize, usize)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(raw_edges.len());
        for &(a, b) in raw_edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::Structural(format!(
                    "edge ({a}, {b}) has an endpoint outside [0, {num_nodes})"
                )));
            }
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();

        let mut degree = vec![0usize; num_nodes];
        for &(j, k) in &edges {
            degree[j] += 1;
            degree[k] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..num_nodes].to_vec();
        let mut neighbors = vec![0usize; 2 * edges.len()];
        let mut neighbor_edges = vec![0usize; 2 * edges.len()];
        let mut edge_index = HashMap::with_capacity(edges.len());
        // Edges are sorted, so pushing in edge order leaves every neighbor
        // list sorted: j's list gets k in increasing order, and k's list gets
        // j (< k) in increasing order before any of its larger neighbors.
        for (id, &(j, k)) in edges.iter().enumerate() {
            neighbors[fill[j]] = k;
            neighbor_edges[fill[j]] = id;
            fill[j] += 1;
            neighbors[fill[k]] = j;
            neighbor_edges[fill[k]] = id;
            fill[k] += 1;
            edge_index.insert((j, k), id);
        }
        for i in 0..num_nodes {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            debug_assert!(neighbors[lo..hi].windows(2).all(|w| w[0] < w[1]));
        }
        Ok(Self {
            num_nodes,
            edges,
            offsets,
            neighbors,
            neighbor_edges,
            edge_index,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(j, k)` with `j < k`, indexed by edge id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Sorted neighbor list of `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Edge ids aligned with [`Graph::neighbors`].
    pub fn neighbor_edge_ids(&self, i: usize) -> &[usize] {
        &self.neighbor_edges[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_index.get(&(a.min(b), a.max(b))).copied()
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` in sparse form.
    pub fn normalized_adjacency(&self) -> NormalizedAdjacency {
        let scale: Vec<f64> = (0..self.num_nodes)
            .map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt())
            .collect();
        let mut offsets = Vec::with_capacity(self.num_nodes + 1);
        let mut cols = Vec::with_capacity(self.neighbors.len() + self.num_nodes);
        let mut values = Vec::with_capacity(cols.capacity());
        offsets.push(0);
        for i in 0..self.num_nodes {
            let mut inserted_self = false;
            for &j in self.neighbors(i) {
                if !inserted_self && j > i {
                    cols.push(i);
                    values.push(scale[i] * scale[i]);
                    inserted_self = true;
                }
                cols.push(j);
                values.push(scale[i] * scale[j]);
            }
            if !inserted_self {
                cols.push(i);
                values.push(scale[i] * scale[i]);
            }
            offsets.push(cols.len());
        }
        NormalizedAdjacency {
            n: self.num_nodes,
            offsets,
            cols,
            values,
        }
    }

    /// Dense `D̃^{-1/2} (A + I) D̃^{-1/2}`.
    pub fn normalized_adjacency_dense(&self) -> DenseMatrix {
        self.normalized_adjacency().to_dense()
    }

    /// Mean over nodes with at least one neighbor of the fraction of
    /// neighbors sharing the node's label.
    pub fn homophily_beta(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.num_nodes {
            return Err(Error::Structural(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        if self.edges.is_empty() {
            return Err(Error::Degenerate("homophily of a graph without edges".into()));
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for i in 0..self.num_nodes {
            let nb = self.neighbors(i);
            if nb.is_empty() {
                continue;
            }
            let same = nb.iter().filter(|&&j| labels[j] == labels[i]).count();
            total += same as f64 / nb.len() as f64;
            counted += 1;
        }
        Ok(total / counted as f64)
    }
}

/// Linear operator applied by a GCN layer. The operator must be symmetric,
/// since backpropagation reuses `apply` for the transpose.
pub trait Propagate: Sync {
    fn dim(&self) -> usize;
    fn propagate(&self, h: &DenseMatrix, exec: Exec) -> Result<DenseMatrix>;
}

impl Propagate for DenseMatrix {
    fn dim(&self) -> usize {
        self.rows()
    }

    fn propagate(&self, h: &DenseMatrix, exec: Exec) -> Result<DenseMatrix> {
        self.matmul_with(h, exec)
    }
}

/// Symmetric normalized adjacency with self-connections, CSR layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for p in self.offsets[i]..self.offsets[i + 1] {
                m.set(i, self.cols[p], self.values[p]);
            }
        }
        m
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[i]..self.offsets[i + 1]).map(move |p| (self.cols[p], self.values[p]))
    }
}

impl Propagate for NormalizedAdjacency {
    fn dim(&self) -> usize {
        self.n
    }

    fn propagate(&self, h: &DenseMatrix, exec: Exec) -> Result<DenseMatrix> {
        if h.rows() != self.n {
            return Err(Error::Shape {
                op: "propagate",
                lhs: (self.n, self.n),
                rhs: h.shape(),
            });
        }
        let width = h.cols();
        let mut out = DenseMatrix::zeros(self.n, width);
        exec.for_each_chunk_mut(out.as_mut_slice(), width.max(1), |i, out_row| {
            if width == 0 {
                return;
            }
            for p in self.offsets[i]..self.offsets[i + 1] {
                let v = self.values[p];
                for (o, &x) in out_row.iter_mut().zip(h.row(self.cols[p])) {
                    *o += v * x;
                }
            }
        });
        Ok(out)
    }
}
