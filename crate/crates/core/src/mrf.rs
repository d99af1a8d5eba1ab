//! Pairwise factors, star-shaped pieces and the redistributed piecewise
//! objective.
//!
//! Every node `p` owns one piece: the depth-1 tree made of `p` and its
//! neighbors. A factor that appears in several pieces is split between them
//! by exponents (the redistribution) that sum to one across pieces, so the
//! pieces' log-factors add up to the global log-score. Each piece is
//! normalized exactly by sum-product on the star.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{log_sum_exp_unchecked, DenseMatrix};
use crate::par::Exec;

/// How the per-edge scale `α` of the pairwise factor is parametrized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientMode {
    /// One learned scalar per edge.
    Edge,
    /// One learned scalar shared by all edges.
    Layer,
    /// `α ≡ 1`, not learned.
    None,
}

/// Shared compatibility matrix and edge coefficients.
///
/// `K` is stored as an unconstrained matrix `M` and read as `(M + Mᵀ)/2`,
/// so any update to `M` keeps `K` exactly symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseParams {
    pub raw: DenseMatrix,
    /// Length `num_edges` (edge), 1 (layer) or 0 (none).
    pub alpha: Vec<f64>,
    pub mode: CoefficientMode,
}

impl PairwiseParams {
    /// Zero compatibility, coefficients at `alpha_init`.
    pub fn new(num_classes: usize, num_edges: usize, mode: CoefficientMode, alpha_init: f64) -> Self {
        let len = match mode {
            CoefficientMode::Edge => num_edges,
            CoefficientMode::Layer => 1,
            CoefficientMode::None => 0,
        };
        Self {
            raw: DenseMatrix::zeros(num_classes, num_classes),
            alpha: vec![alpha_init; len],
            mode,
        }
    }

    /// Parameters whose compatibility matrix is the symmetric part of `k`.
    pub fn with_compat(k: DenseMatrix, num_edges: usize, mode: CoefficientMode, alpha: f64) -> Self {
        let mut p = Self::new(k.rows(), num_edges, mode, alpha);
        p.raw = k;
        p
    }

    pub fn num_classes(&self) -> usize {
        self.raw.rows()
    }

    /// `K = (M + Mᵀ)/2`.
    pub fn compat(&self) -> DenseMatrix {
        let c = self.num_classes();
        let mut k = DenseMatrix::zeros(c, c);
        for a in 0..c {
            for b in 0..c {
                k.set(a, b, 0.5 * (self.raw.get(a, b) + self.raw.get(b, a)));
            }
        }
        k
    }

    #[inline]
    pub fn alpha(&self, edge_id: usize) -> f64 {
        match self.mode {
            CoefficientMode::Edge => self.alpha[edge_id],
            CoefficientMode::Layer => self.alpha[0],
            CoefficientMode::None => 1.0,
        }
    }

    /// Checks that the coefficient vector fits the mode and the graph.
    pub fn validate(&self, num_edges: usize) -> Result<()> {
        let expect = match self.mode {
            CoefficientMode::Edge => num_edges,
            CoefficientMode::Layer => 1,
            CoefficientMode::None => 0,
        };
        if self.alpha.len() != expect || self.raw.rows() != self.raw.cols() {
            return Err(Error::Shape {
                op: "pairwise params",
                lhs: (self.alpha.len(), self.raw.rows()),
                rhs: (expect, self.raw.cols()),
            });
        }
        Ok(())
    }
}

/// `log φ_jk(y_j, y_k) = α_jk · K(y_j, y_k)`.
pub fn pairwise_log_factor(pp: &PairwiseParams, edge_id: usize, y_j: usize, y_k: usize) -> f64 {
    let k = 0.5 * (pp.raw.get(y_j, y_k) + pp.raw.get(y_k, y_j));
    pp.alpha(edge_id) * k
}

/// A node and its neighbors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StarPiece {
    pub center: usize,
    /// Sorted neighbors of `center`.
    pub leaves: Vec<usize>,
    /// Global edge id of `(center, leaves[t])`.
    pub edge_ids: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RedistributionScheme {
    /// Unary factor of `i` split evenly over its `d(i)+1` pieces.
    Average,
    /// Unary factor of `i` given entirely to the piece centered at `i`.
    Center,
}

/// Exponents applied to each factor inside one piece.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceWeights {
    pub center: f64,
    /// Aligned with `StarPiece::leaves`.
    pub leaves: Vec<f64>,
    /// Aligned with `StarPiece::edge_ids`.
    pub edges: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Redistribution {
    pub scheme: RedistributionScheme,
    /// One entry per piece.
    pub weights: Vec<PieceWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarDecomposition {
    pub pieces: Vec<StarPiece>,
    pub redistribution: Redistribution,
}

/// One star piece per node, with exponents for `scheme`. Pairwise factors
/// get exponent ½ in each of their two pieces under both schemes.
pub fn build_pieces(g: &Graph, scheme: RedistributionScheme) -> StarDecomposition {
    let n = g.num_nodes();
    let mut pieces = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for p in 0..n {
        let leaves = g.neighbors(p).to_vec();
        let edge_ids = g.neighbor_edge_ids(p).to_vec();
        let (center, leaf_w) = match scheme {
            RedistributionScheme::Average => (
                1.0 / (g.degree(p) + 1) as f64,
                leaves.iter().map(|&l| 1.0 / (g.degree(l) + 1) as f64).collect(),
            ),
            RedistributionScheme::Center => (1.0, vec![0.0; leaves.len()]),
        };
        weights.push(PieceWeights {
            center,
            leaves: leaf_w,
            edges: vec![0.5; leaves.len()],
        });
        pieces.push(StarPiece {
            center: p,
            leaves,
            edge_ids,
        });
    }
    StarDecomposition {
        pieces,
        redistribution: Redistribution { scheme, weights },
    }
}

impl StarDecomposition {
    /// Largest deviation from one of any node's or edge's summed exponents.
    pub fn partition_of_unity_error(&self, num_nodes: usize, num_edges: usize) -> f64 {
        let mut node_sum = vec![0.0; num_nodes];
        let mut edge_sum = vec![0.0; num_edges];
        for (piece, w) in self.pieces.iter().zip(&self.redistribution.weights) {
            node_sum[piece.center] += w.center;
            for t in 0..piece.leaves.len() {
                node_sum[piece.leaves[t]] += w.leaves[t];
                edge_sum[piece.edge_ids[t]] += w.edges[t];
            }
        }
        node_sum
            .iter()
            .chain(&edge_sum)
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Number of pieces containing each node.
    pub fn node_piece_counts(&self, num_nodes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_nodes];
        for piece in &self.pieces {
            counts[piece.center] += 1;
            for &l in &piece.leaves {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Redistributed log-factor sum of one piece at a full assignment.
pub fn redistributed_piece_log_factor(
    piece: &StarPiece,
    weights: &PieceWeights,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    labels: &[usize],
) -> f64 {
    let yc = labels[piece.center];
    let mut total = weights.center * scores.get(piece.center, yc);
    for t in 0..piece.leaves.len() {
        let l = piece.leaves[t];
        total += weights.leaves[t] * scores.get(l, labels[l]);
        total += weights.edges[t] * pairwise_log_factor(pp, piece.edge_ids[t], yc, labels[l]);
    }
    total
}

/// Exact marginals of one redistributed piece distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceMarginals {
    pub log_partition: f64,
    pub center: Vec<f64>,
    /// Aligned with `StarPiece::leaves`.
    pub leaves: Vec<Vec<f64>>,
    /// `pairwise[t](a, b) = P(y_center = a, y_leaf_t = b)`.
    pub pairwise: Vec<DenseMatrix>,
}

/// Upward messages and center belief of a piece.
struct StarPass {
    /// `a_t(y_c, y_l) = e_l·s_l(y_l) + w_t·α_t·K(y_c, y_l)`, one c×c table per leaf.
    leaf_tables: Vec<DenseMatrix>,
    /// `m_t(y_c) = LSE_{y_l} a_t(y_c, y_l)`
    messages: Vec<Vec<f64>>,
    /// `b(y_c) = e_c·s_c(y_c) + Σ_t m_t(y_c)`
    belief: Vec<f64>,
    log_partition: f64,
}

fn star_pass(piece: &StarPiece, weights: &PieceWeights, scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix) -> StarPass {
    let c = k.rows();
    let mut belief: Vec<f64> = scores.row(piece.center).iter().map(|s| weights.center * s).collect();
    let mut leaf_tables = Vec::with_capacity(piece.leaves.len());
    let mut messages = Vec::with_capacity(piece.leaves.len());
    for t in 0..piece.leaves.len() {
        let s_leaf = scores.row(piece.leaves[t]);
        let coupling = weights.edges[t] * pp.alpha(piece.edge_ids[t]);
        let mut table = DenseMatrix::zeros(c, c);
        let mut msg = vec![0.0; c];
        for a in 0..c {
            let row = table.row_mut(a);
            for b in 0..c {
                row[b] = weights.leaves[t] * s_leaf[b] + coupling * k.get(a, b);
            }
            msg[a] = log_sum_exp_unchecked(row);
            belief[a] += msg[a];
        }
        leaf_tables.push(table);
        messages.push(msg);
    }
    let log_partition = log_sum_exp_unchecked(&belief);
    StarPass {
        leaf_tables,
        messages,
        belief,
        log_partition,
    }
}

/// `log Z̄` of a redistributed piece, by the star closed form.
pub fn piece_log_partition(piece: &StarPiece, weights: &PieceWeights, scores: &DenseMatrix, pp: &PairwiseParams) -> f64 {
    star_pass(piece, weights, scores, pp, &pp.compat()).log_partition
}

pub fn piece_marginals(piece: &StarPiece, weights: &PieceWeights, scores: &DenseMatrix, pp: &PairwiseParams) -> PieceMarginals {
    marginals_with(piece, weights, scores, pp, &pp.compat())
}

fn marginals_with(piece: &StarPiece, weights: &PieceWeights, scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix) -> PieceMarginals {
    let c = k.rows();
    let pass = star_pass(piece, weights, scores, pp, k);
    let log_z = pass.log_partition;
    let center: Vec<f64> = pass.belief.iter().map(|b| (b - log_z).exp()).collect();
    let mut leaves = Vec::with_capacity(piece.leaves.len());
    let mut pairwise = Vec::with_capacity(piece.leaves.len());
    for t in 0..piece.leaves.len() {
        let mut joint = DenseMatrix::zeros(c, c);
        let mut leaf = vec![0.0; c];
        for a in 0..c {
            let base = pass.belief[a] - pass.messages[t][a] - log_z;
            let table = pass.leaf_tables[t].row(a);
            let row = joint.row_mut(a);
            for b in 0..c {
                row[b] = (base + table[b]).exp();
                leaf[b] += row[b];
            }
        }
        leaves.push(leaf);
        pairwise.push(joint);
    }
    PieceMarginals {
        log_partition: log_z,
        center,
        leaves,
        pairwise,
    }
}

/// Gradients of the piecewise objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGrads {
    /// `n × c`, with respect to the unary scores.
    pub scores: DenseMatrix,
    /// `c × c`, with respect to the raw matrix `M` (not `K`).
    pub raw_compat: DenseMatrix,
    /// Aligned with `PairwiseParams::alpha`.
    pub alpha: Vec<f64>,
}

fn check_inputs(r: &DenseMatrix, scores: &DenseMatrix, pp: &PairwiseParams, decomp: &StarDecomposition, g: &Graph) -> Result<()> {
    let n = g.num_nodes();
    let c = pp.num_classes();
    if r.shape() != (n, c) || scores.shape() != (n, c) {
        return Err(Error::Shape {
            op: "piecewise objective",
            lhs: r.shape(),
            rhs: scores.shape(),
        });
    }
    if decomp.pieces.len() != n {
        return Err(Error::Structural(format!("{} pieces for {n} nodes", decomp.pieces.len())));
    }
    pp.validate(g.num_edges())
}

/// `Σ_i r_i·s_i + Σ_(j,k) α_jk · r_jᵀ K r_k` (the expected global log-score
/// under the factorized distribution `r`).
fn expected_log_score(r: &DenseMatrix, scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix, g: &Graph) -> f64 {
    let c = k.rows();
    let mut total = 0.0;
    for i in 0..g.num_nodes() {
        total += r.row(i).iter().zip(scores.row(i)).map(|(a, b)| a * b).sum::<f64>();
    }
    for (e, &(j, l)) in g.edges().iter().enumerate() {
        let (rj, rl) = (r.row(j), r.row(l));
        let mut quad = 0.0;
        for a in 0..c {
            if rj[a] == 0.0 {
                continue;
            }
            let krow = k.row(a);
            quad += rj[a] * krow.iter().zip(rl).map(|(x, y)| x * y).sum::<f64>();
        }
        total += pp.alpha(e) * quad;
    }
    total
}

/// `E_r[ℓ̄_pw] = Σ_i r_i·s_i + Σ_(j,k) α_jk r_jᵀ K r_k − Σ_P log Z̄_P`.
///
/// `r` holds one label distribution per node: a point mass for labeled
/// nodes and the proposal row for the others.
pub fn expected_piecewise_objective(
    r: &DenseMatrix,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    decomp: &StarDecomposition,
    g: &Graph,
) -> Result<f64> {
    expected_piecewise_objective_with(r, scores, pp, decomp, g, Exec::default())
}

pub fn expected_piecewise_objective_with(
    r: &DenseMatrix,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    decomp: &StarDecomposition,
    g: &Graph,
    exec: Exec,
) -> Result<f64> {
    check_inputs(r, scores, pp, decomp, g)?;
    let k = pp.compat();
    let log_z = exec.map_range(decomp.pieces.len(), |p| {
        star_pass(&decomp.pieces[p], &decomp.redistribution.weights[p], scores, pp, &k).log_partition
    });
    if let Some(p) = log_z.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFinite { piece: decomp.pieces[p].center });
    }
    let value = expected_log_score(r, scores, pp, &k, g) - log_z.iter().sum::<f64>();
    if !value.is_finite() {
        return Err(Error::NonFinite { piece: 0 });
    }
    Ok(value)
}

/// `ℓ̄_pw` at a full labeling.
pub fn piecewise_log_likelihood(
    labels: &[usize],
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    decomp: &StarDecomposition,
    g: &Graph,
) -> Result<f64> {
    let mut r = DenseMatrix::zeros(g.num_nodes(), pp.num_classes());
    for (i, &y) in labels.iter().enumerate() {
        r.set(i, y, 1.0);
    }
    expected_piecewise_objective(&r, scores, pp, decomp, g)
}

pub fn objective_gradients(
    r: &DenseMatrix,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    decomp: &StarDecomposition,
    g: &Graph,
) -> Result<ObjectiveGrads> {
    objective_and_gradients_with(r, scores, pp, decomp, g, Exec::default()).map(|(_, grads)| grads)
}

/// Per-piece share of the objective's `−log Z̄` term and its gradients.
struct PieceContribution {
    log_partition: f64,
    center: Vec<f64>,
    leaves: Vec<f64>,
    compat: Vec<f64>,
    alpha: Vec<f64>,
}

fn piece_contribution(piece: &StarPiece, w: &PieceWeights, scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix) -> PieceContribution {
    let c = k.rows();
    let m = marginals_with(piece, w, scores, pp, k);
    let center = m.center.iter().map(|mu| -w.center * mu).collect();
    let mut leaves = Vec::with_capacity(piece.leaves.len() * c);
    let mut compat = vec![0.0; c * c];
    let mut alpha = Vec::with_capacity(piece.leaves.len());
    for t in 0..piece.leaves.len() {
        leaves.extend(m.leaves[t].iter().map(|mu| -w.leaves[t] * mu));
        let coupling = w.edges[t] * pp.alpha(piece.edge_ids[t]);
        let joint = m.pairwise[t].as_slice();
        let mut d_alpha = 0.0;
        for (idx, &mu) in joint.iter().enumerate() {
            compat[idx] -= coupling * mu;
            d_alpha += mu * k.as_slice()[idx];
        }
        alpha.push(-w.edges[t] * d_alpha);
    }
    PieceContribution {
        log_partition: m.log_partition,
        center,
        leaves,
        compat,
        alpha,
    }
}

/// Objective value and gradients in one pass over the pieces.
///
/// Pieces are processed independently under `exec` and their contributions
/// are reduced in piece order, so the result does not depend on the
/// execution policy.
pub fn objective_and_gradients_with(
    r: &DenseMatrix,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    decomp: &StarDecomposition,
    g: &Graph,
    exec: Exec,
) -> Result<(f64, ObjectiveGrads)> {
    check_inputs(r, scores, pp, decomp, g)?;
    let c = pp.num_classes();
    let k = pp.compat();

    let parts = exec.map_range(decomp.pieces.len(), |p| {
        piece_contribution(&decomp.pieces[p], &decomp.redistribution.weights[p], scores, pp, &k)
    });

    // ∂/∂K treating K as a free c×c matrix; symmetrized into ∂/∂M below.
    let mut d_k = DenseMatrix::zeros(c, c);
    let mut d_edge_alpha = vec![0.0; g.num_edges()];
    let mut d_scores = r.clone();
    for (e, &(j, l)) in g.edges().iter().enumerate() {
        let (rj, rl) = (r.row(j), r.row(l));
        let alpha = pp.alpha(e);
        let mut quad = 0.0;
        for a in 0..c {
            if rj[a] == 0.0 {
                continue;
            }
            let d_row = d_k.row_mut(a);
            for b in 0..c {
                let w = rj[a] * rl[b];
                d_row[b] += alpha * w;
                quad += w * k.get(a, b);
            }
        }
        d_edge_alpha[e] += quad;
    }
    let mut objective = expected_log_score(r, scores, pp, &k, g);

    for (piece, part) in decomp.pieces.iter().zip(&parts) {
        if !part.log_partition.is_finite() {
            return Err(Error::NonFinite { piece: piece.center });
        }
        objective -= part.log_partition;
        for (d, g) in d_scores.row_mut(piece.center).iter_mut().zip(&part.center) {
            *d += g;
        }
        for (t, &l) in piece.leaves.iter().enumerate() {
            for (d, g) in d_scores.row_mut(l).iter_mut().zip(&part.leaves[t * c..(t + 1) * c]) {
                *d += g;
            }
            d_edge_alpha[piece.edge_ids[t]] += part.alpha[t];
        }
        for (d, g) in d_k.as_mut_slice().iter_mut().zip(&part.compat) {
            *d += g;
        }
    }
    if !objective.is_finite() {
        return Err(Error::NonFinite { piece: 0 });
    }

    let mut d_raw = DenseMatrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            d_raw.set(a, b, 0.5 * (d_k.get(a, b) + d_k.get(b, a)));
        }
    }
    let d_alpha = match pp.mode {
        CoefficientMode::Edge => d_edge_alpha,
        CoefficientMode::Layer => vec![d_edge_alpha.iter().sum()],
        CoefficientMode::None => Vec::new(),
    };
    Ok((
        objective,
        ObjectiveGrads {
            scores: d_scores,
            raw_compat: d_raw,
            alpha: d_alpha,
        },
    ))
}
