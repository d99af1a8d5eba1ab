//! Exact inference on small graphs by enumerating every joint labeling.
//!
//! All quantities are computed in log space from the global log-score
//! `Σ_i s_i(y_i) + Σ_(j,k) α_jk K(y_j, y_k)`. Enumeration is split into
//! fixed-size blocks that run under the given [`Exec`]; block results are
//! reduced in block order.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mrf::PairwiseParams;
use crate::numerics::DenseMatrix;
use crate::par::Exec;
use crate::trainer::Proposal;

/// Largest number of joint configurations the oracle will enumerate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleLimit(pub u64);

impl Default for OracleLimit {
    fn default() -> Self {
        OracleLimit(1 << 20)
    }
}

const BLOCK: u64 = 4096;

/// Joint log-score of a full labeling.
pub fn log_score(labels: &[usize], scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix, g: &Graph) -> f64 {
    let unary: f64 = labels.iter().enumerate().map(|(i, &y)| scores.get(i, y)).sum();
    let pair: f64 = g
        .edges()
        .iter()
        .enumerate()
        .map(|(e, &(j, l))| pp.alpha(e) * k.get(labels[j], labels[l]))
        .sum();
    unary + pair
}

/// Streaming log-sum-exp accumulator.
#[derive(Clone, Copy, Debug)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    fn new() -> Self {
        Lse {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn merge(&mut self, other: Lse) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    fn value(self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Enumeration over the free (unobserved) nodes with observed nodes held
/// at their labels.
struct Space<'a> {
    observed: &'a [Option<usize>],
    free: Vec<usize>,
    classes: usize,
    total: u64,
}

impl<'a> Space<'a> {
    fn new(observed: &'a [Option<usize>], classes: usize, limit: OracleLimit) -> Result<Self> {
        let free: Vec<usize> = (0..observed.len()).filter(|&i| observed[i].is_none()).collect();
        let configurations = (classes as f64).powi(free.len() as i32);
        if configurations > limit.0 as f64 {
            return Err(Error::OracleLimit {
                configurations,
                limit: limit.0,
            });
        }
        Ok(Space {
            observed,
            free,
            classes,
            total: configurations as u64,
        })
    }

    /// Calls `f(labels)` for every configuration with index in
    /// `[start, end)`, the first free node being the fastest digit.
    fn visit(&self, start: u64, end: u64, mut f: impl FnMut(&[usize])) {
        let c = self.classes as u64;
        let mut labels: Vec<usize> = self.observed.iter().map(|o| o.unwrap_or(0)).collect();
        let mut t = start;
        for &i in &self.free {
            labels[i] = (t % c) as usize;
            t /= c;
        }
        for _ in start..end {
            f(&labels);
            for &i in &self.free {
                labels[i] += 1;
                if labels[i] < self.classes {
                    break;
                }
                labels[i] = 0;
            }
        }
    }

    fn blocks<T: Send>(&self, exec: Exec, f: impl Fn(u64, u64) -> T + Sync) -> Vec<T> {
        let n_blocks = self.total.div_ceil(BLOCK) as usize;
        exec.map_range(n_blocks, |b| {
            let start = b as u64 * BLOCK;
            f(start, (start + BLOCK).min(self.total))
        })
    }

    fn log_partition(&self, scores: &DenseMatrix, pp: &PairwiseParams, k: &DenseMatrix, g: &Graph, exec: Exec) -> f64 {
        let parts = self.blocks(exec, |s, e| {
            let mut acc = Lse::new();
            self.visit(s, e, |y| acc.push(log_score(y, scores, pp, k, g)));
            acc
        });
        let mut total = Lse::new();
        for p in parts {
            total.merge(p);
        }
        total.value()
    }
}

fn check(scores: &DenseMatrix, pp: &PairwiseParams, g: &Graph, observed: &[Option<usize>]) -> Result<()> {
    if scores.rows() != g.num_nodes() || scores.cols() != pp.num_classes() || observed.len() != g.num_nodes() {
        return Err(Error::Shape {
            op: "exact oracle",
            lhs: scores.shape(),
            rhs: (g.num_nodes(), pp.num_classes()),
        });
    }
    if observed.iter().flatten().any(|&y| y >= pp.num_classes()) {
        return Err(Error::Structural("observed label out of range".into()));
    }
    pp.validate(g.num_edges())
}

/// `log Z` of the joint model.
pub fn exact_log_partition(scores: &DenseMatrix, pp: &PairwiseParams, g: &Graph, limit: OracleLimit, exec: Exec) -> Result<f64> {
    let observed = vec![None; g.num_nodes()];
    check(scores, pp, g, &observed)?;
    let space = Space::new(&observed, pp.num_classes(), limit)?;
    Ok(space.log_partition(scores, pp, &pp.compat(), g, exec))
}

/// Exact posterior marginals `p(y_i | y_L)`, one row per unobserved node
/// in ascending node order (the row layout of a [`Proposal`]).
pub fn exact_posterior_marginals(
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    g: &Graph,
    observed: &[Option<usize>],
    limit: OracleLimit,
    exec: Exec,
) -> Result<DenseMatrix> {
    check(scores, pp, g, observed)?;
    let c = pp.num_classes();
    let space = Space::new(observed, c, limit)?;
    let m = space.free.len();
    let k = pp.compat();
    let log_z = space.log_partition(scores, pp, &k, g, exec);
    let parts = space.blocks(exec, |s, e| {
        let mut acc = vec![0.0; m * c];
        space.visit(s, e, |y| {
            let p = (log_score(y, scores, pp, &k, g) - log_z).exp();
            for (r, &i) in space.free.iter().enumerate() {
                acc[r * c + y[i]] += p;
            }
        });
        acc
    });
    let mut out = DenseMatrix::zeros(m, c);
    for part in parts {
        for (o, v) in out.as_mut_slice().iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok(out)
}

/// `log p(y_L)`: the observed-data log-likelihood.
pub fn exact_observed_log_likelihood(
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    g: &Graph,
    observed: &[Option<usize>],
    limit: OracleLimit,
    exec: Exec,
) -> Result<f64> {
    check(scores, pp, g, observed)?;
    let c = pp.num_classes();
    let k = pp.compat();
    let all = vec![None; g.num_nodes()];
    let log_z = Space::new(&all, c, limit)?.log_partition(scores, pp, &k, g, exec);
    let log_z_l = Space::new(observed, c, limit)?.log_partition(scores, pp, &k, g, exec);
    Ok(log_z_l - log_z)
}

/// `(E_q[log score], E_q[log q])` by enumeration over the free nodes.
fn proposal_expectations(
    space: &Space<'_>,
    q: &Proposal,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    k: &DenseMatrix,
    g: &Graph,
    exec: Exec,
) -> Result<(f64, f64)> {
    if q.unlabeled() != space.free.as_slice() || q.num_classes() != space.classes {
        return Err(Error::Structural("proposal does not match the observed set".into()));
    }
    let parts = space.blocks(exec, |s, e| {
        let (mut score, mut log_q) = (0.0, 0.0);
        space.visit(s, e, |y| {
            let lq: f64 = space.free.iter().map(|&i| q.get(i).unwrap()[y[i]].ln()).sum();
            if lq == f64::NEG_INFINITY {
                return;
            }
            let p = lq.exp();
            score += p * log_score(y, scores, pp, k, g);
            log_q += p * lq;
        });
        (score, log_q)
    });
    Ok(parts.into_iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y)))
}

/// `E_q[log p(y_U, y_L)] + H(q)`, a lower bound on `log p(y_L)`.
pub fn exact_elbo(
    q: &Proposal,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    g: &Graph,
    observed: &[Option<usize>],
    limit: OracleLimit,
    exec: Exec,
) -> Result<f64> {
    check(scores, pp, g, observed)?;
    let c = pp.num_classes();
    let k = pp.compat();
    let all = vec![None; g.num_nodes()];
    let log_z = Space::new(&all, c, limit)?.log_partition(scores, pp, &k, g, exec);
    let space = Space::new(observed, c, limit)?;
    let (score, log_q) = proposal_expectations(&space, q, scores, pp, &k, g, exec)?;
    Ok(score - log_z - log_q)
}

/// `KL(q ‖ p(y_U | y_L))`, computed directly from the posterior.
pub fn exact_kl(
    q: &Proposal,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    g: &Graph,
    observed: &[Option<usize>],
    limit: OracleLimit,
    exec: Exec,
) -> Result<f64> {
    check(scores, pp, g, observed)?;
    let k = pp.compat();
    let space = Space::new(observed, pp.num_classes(), limit)?;
    let log_z_l = space.log_partition(scores, pp, &k, g, exec);
    let (score, log_q) = proposal_expectations(&space, q, scores, pp, &k, g, exec)?;
    Ok(log_q - (score - log_z_l))
}
