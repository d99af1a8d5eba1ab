//! Randomized self-checks of the piece inference and gradient code against
//! enumeration and finite differences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mrf::{self, CoefficientMode, PairwiseParams, RedistributionScheme};
use crate::numerics::{log_sum_exp, DenseMatrix, RngStreams, StreamPurpose};
use crate::oracle::{self, OracleLimit};
use crate::par::Exec;
use crate::trainer::{update_site, Proposal};

#[derive(Clone, Debug)]
pub struct SelfCheckConfig {
    pub trials: usize,
    /// Node count of the instances used by the exact-inference checks.
    pub nodes: usize,
    pub classes: usize,
    pub seed: u64,
    pub limit: OracleLimit,
    /// Perturbs the analytic gradient; the gradient check must then fail.
    pub corrupt_gradient: bool,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            nodes: 6,
            classes: 3,
            seed: 0,
            limit: OracleLimit::default(),
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn random_instance(n: usize, c: usize, mode: CoefficientMode, rng: &mut impl Rng) -> (Graph, DenseMatrix, PairwiseParams) {
    let mut edges = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            if rng.gen::<f64>() < 0.45 {
                edges.push((j, k));
            }
        }
    }
    let g = Graph::build(n, &edges).expect("edges in range");
    let scores = DenseMatrix::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut pp = PairwiseParams::new(c, g.num_edges(), mode, 1.0);
    for v in pp.raw.as_mut_slice() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for a in &mut pp.alpha {
        *a = rng.gen_range(-1.5..1.5);
    }
    (g, scores, pp)
}

/// Star-piece log-partitions and center marginals against enumeration of
/// the redistributed piece factor.
pub fn piece_check(cfg: &SelfCheckConfig) -> CheckOutcome {
    let mut rng = RngStreams::new(cfg.seed).stream(StreamPurpose::Oracle, 0);
    let mut worst: f64 = 0.0;
    for t in 0..cfg.trials {
        let n = rng.gen_range(1..=7usize);
        let c = rng.gen_range(2..=4usize);
        let scheme = [RedistributionScheme::Average, RedistributionScheme::Center][t % 2];
        let (g, scores, pp) = random_instance(n, c, CoefficientMode::Edge, &mut rng);
        let decomp = mrf::build_pieces(&g, scheme);
        for (piece, w) in decomp.pieces.iter().zip(&decomp.redistribution.weights) {
            let mut nodes = vec![piece.center];
            nodes.extend(&piece.leaves);
            let total = c.pow(nodes.len() as u32);
            let mut labels = vec![0; n];
            let mut terms = Vec::with_capacity(total);
            for code in 0..total {
                let mut x = code;
                for &v in &nodes {
                    labels[v] = x % c;
                    x /= c;
                }
                terms.push(mrf::redistributed_piece_log_factor(piece, w, &scores, &pp, &labels));
            }
            let log_z = log_sum_exp(&terms).expect("non-empty");
            let m = mrf::piece_marginals(piece, w, &scores, &pp);
            worst = worst.max((m.log_partition - log_z).abs());
            let mut center = vec![0.0; c];
            for (code, term) in terms.iter().enumerate() {
                center[code % c] += (term - log_z).exp();
            }
            for (a, b) in center.iter().zip(&m.center) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckOutcome {
        name: "piece enumeration",
        trials: cfg.trials,
        max_error: worst,
        tolerance: 1e-10,
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
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

/// Objective gradients for scores, `M` and `α` against central finite
/// differences, cycling through schemes and coefficient modes.
pub fn gradient_check(cfg: &SelfCheckConfig) -> Result<CheckOutcome> {
    let mut rng = RngStreams::new(cfg.seed).stream(StreamPurpose::Oracle, 1);
    let modes = [CoefficientMode::Edge, CoefficientMode::Layer, CoefficientMode::None];
    let mut worst: f64 = 0.0;
    for t in 0..cfg.trials {
        let n = rng.gen_range(2..=8usize);
        let c = rng.gen_range(2..=4usize);
        let scheme = [RedistributionScheme::Average, RedistributionScheme::Center][t % 2];
        let (g, scores, pp) = random_instance(n, c, modes[(t / 2) % 3], &mut rng);
        let decomp = mrf::build_pieces(&g, scheme);
        let mut r = DenseMatrix::zeros(n, c);
        for v in r.as_mut_slice() {
            *v = rng.gen::<f64>() + 0.05;
        }
        for i in 0..n {
            let s: f64 = r.row(i).iter().sum();
            r.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let mut grads = mrf::objective_gradients(&r, &scores, &pp, &decomp, &g)?;
        if cfg.corrupt_gradient {
            grads.scores.as_mut_slice()[0] += 1e-3;
        }
        let objective = |s: &DenseMatrix, p: &PairwiseParams| mrf::expected_piecewise_objective(&r, s, p, &decomp, &g).expect("finite");

        let mut x = scores.as_slice().to_vec();
        let fd = central_diff(&mut x, &mut |v| objective(&DenseMatrix::from_vec(n, c, v.to_vec()).unwrap(), &pp));
        worst = worst.max(rel_error(grads.scores.as_slice(), &fd));

        let mut x = pp.raw.as_slice().to_vec();
        let fd = central_diff(&mut x, &mut |v| {
            let mut p = pp.clone();
            p.raw = DenseMatrix::from_vec(c, c, v.to_vec()).unwrap();
            objective(&scores, &p)
        });
        worst = worst.max(rel_error(grads.raw_compat.as_slice(), &fd));

        let mut x = pp.alpha.clone();
        let fd = central_diff(&mut x, &mut |v| {
            let mut p = pp.clone();
            p.alpha = v.to_vec();
            objective(&scores, &p)
        });
        worst = worst.max(rel_error(&grads.alpha, &fd));
    }
    Ok(CheckOutcome {
        name: "objective gradients",
        trials: cfg.trials,
        max_error: worst,
        tolerance: 1e-6,
    })
}

/// Exact ELBO monotonicity under single-site mean-field updates and the
/// `log p(y_L) − ELBO = KL` identity, on `cfg.nodes`-node instances.
pub fn elbo_check(cfg: &SelfCheckConfig) -> Result<CheckOutcome> {
    let configurations = (cfg.classes as f64).powi(cfg.nodes as i32);
    if configurations > cfg.limit.0 as f64 {
        return Err(Error::OracleLimit {
            configurations,
            limit: cfg.limit.0,
        });
    }
    let mut rng = RngStreams::new(cfg.seed).stream(StreamPurpose::Oracle, 2);
    let exec = Exec::default();
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let (g, scores, pp) = random_instance(cfg.nodes, cfg.classes, CoefficientMode::Edge, &mut rng);
        let observed: Vec<Option<usize>> = (0..cfg.nodes)
            .map(|_| (rng.gen::<f64>() < 0.3).then(|| rng.gen_range(0..cfg.classes)))
            .collect();
        let noise = DenseMatrix::from_vec(cfg.nodes, cfg.classes, (0..cfg.nodes * cfg.classes).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
        let mut q = Proposal::from_scores(&noise, &observed);
        let ll = oracle::exact_observed_log_likelihood(&scores, &pp, &g, &observed, cfg.limit, exec)?;
        let k = pp.compat();
        let mut prev = oracle::exact_elbo(&q, &scores, &pp, &g, &observed, cfg.limit, exec)?;
        for i in q.unlabeled().to_vec() {
            update_site(&mut q, i, &scores, &pp, &k, &observed, &g);
            let elbo = oracle::exact_elbo(&q, &scores, &pp, &g, &observed, cfg.limit, exec)?;
            worst = worst.max(prev - elbo);
            let kl = oracle::exact_kl(&q, &scores, &pp, &g, &observed, cfg.limit, exec)?;
            worst = worst.max((ll - elbo - kl).abs());
            prev = elbo;
        }
    }
    Ok(CheckOutcome {
        name: "elbo ascent and identity",
        trials: cfg.trials,
        max_error: worst,
        tolerance: 1e-9,
    })
}

pub fn run_all(cfg: &SelfCheckConfig) -> Result<Vec<CheckOutcome>> {
    let elbo = elbo_check(cfg)?;
    Ok(vec![piece_check(cfg), gradient_check(cfg)?, elbo])
}
