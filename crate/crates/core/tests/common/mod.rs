#![allow(dead_code)]

pub mod checks;

use epfgnn_core::graph::Graph;
use epfgnn_core::mrf::{CoefficientMode, PairwiseParams, RedistributionScheme};
use epfgnn_core::numerics::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Erdős–Rényi style graph; may contain isolated nodes.
pub fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Graph {
    let mut edges = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((j, k));
            }
        }
    }
    Graph::build(n, &edges).unwrap()
}

pub fn random_pairwise(c: usize, num_edges: usize, mode: CoefficientMode, rng: &mut impl Rng) -> PairwiseParams {
    let mut pp = PairwiseParams::new(c, num_edges, mode, 1.0);
    pp.raw = random_matrix(c, c, 1.0, rng);
    for a in pp.alpha.iter_mut() {
        *a = rng.gen_range(-1.5..1.5);
    }
    pp
}

pub fn random_distributions(n: usize, c: usize, rng: &mut impl Rng) -> DenseMatrix {
    let mut r = DenseMatrix::zeros(n, c);
    for i in 0..n {
        let w: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 0.05).collect();
        let s: f64 = w.iter().sum();
        for (y, v) in w.iter().enumerate() {
            r.set(i, y, v / s);
        }
    }
    r
}

pub fn all_modes() -> [CoefficientMode; 3] {
    [CoefficientMode::Edge, CoefficientMode::Layer, CoefficientMode::None]
}

pub fn both_schemes() -> [RedistributionScheme; 2] {
    [RedistributionScheme::Average, RedistributionScheme::Center]
}

/// Symmetrized compatibility read directly from the raw matrix.
pub fn compat(pp: &PairwiseParams) -> DenseMatrix {
    let c = pp.raw.rows();
    let mut k = DenseMatrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            k.set(a, b, 0.5 * (pp.raw.get(a, b) + pp.raw.get(b, a)));
        }
    }
    k
}

pub fn alpha_of(pp: &PairwiseParams, e: usize) -> f64 {
    match pp.mode {
        CoefficientMode::Edge => pp.alpha[e],
        CoefficientMode::Layer => pp.alpha[0],
        CoefficientMode::None => 1.0,
    }
}

/// Global log-score `Σ s_i(y_i) + Σ α_e K(y_j, y_k)`.
pub fn global_log_score(g: &Graph, scores: &DenseMatrix, pp: &PairwiseParams, labels: &[usize]) -> f64 {
    let k = compat(pp);
    let mut total: f64 = (0..g.num_nodes()).map(|i| scores.get(i, labels[i])).sum();
    for (e, &(j, l)) in g.edges().iter().enumerate() {
        total += alpha_of(pp, e) * k.get(labels[j], labels[l]);
    }
    total
}

/// Unary exponent of node `v` inside the piece centered at `center`.
pub fn unary_exponent(g: &Graph, scheme: RedistributionScheme, center: usize, v: usize) -> f64 {
    match scheme {
        RedistributionScheme::Average => 1.0 / (g.degree(v) as f64 + 1.0),
        RedistributionScheme::Center => {
            if v == center {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Calls `f` for every labeling in `{0..c}^n`.
pub fn for_each_labeling(n: usize, c: usize, mut f: impl FnMut(&[usize])) {
    let mut y = vec![0usize; n];
    loop {
        f(&y);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            y[i] += 1;
            if y[i] < c {
                break;
            }
            y[i] = 0;
            i += 1;
        }
    }
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Relative error between two gradient blocks: `‖a − b‖ / max(‖a‖, ‖b‖)`,
/// or the absolute difference when both are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
