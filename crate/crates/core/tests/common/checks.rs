//! Measurements shared by the regular tests and the acceptance runner.
//! Each returns the worst error observed so callers can apply their own
//! tolerance.

use super::*;
use epfgnn_core::backbone::{self, ForwardCache, ForwardMode, GcnParams};
use epfgnn_core::dataset::{generate_synthetic, planetoid_split, Dataset, Split, SyntheticParams};
use epfgnn_core::mrf::{self, PairwiseParams};
use epfgnn_core::numerics::{AdamConfig, AdamState, WeightDecay};
use epfgnn_core::oracle::{exact_elbo, exact_kl, exact_observed_log_likelihood, OracleLimit};
use epfgnn_core::par::Exec;
use epfgnn_core::trainer::{dropout_stream, observed_from_split, train, update_site, Phase, Proposal, TrainConfig};

/// Star on `0..=leaves` plus a few extra nodes and edges so that leaf
/// degrees vary.
fn random_star(rng: &mut impl Rng) -> Graph {
    let leaves = rng.gen_range(0..=6usize);
    let extra = rng.gen_range(0..=3usize);
    let n = 1 + leaves + extra;
    let mut edges: Vec<(usize, usize)> = (1..=leaves).map(|l| (0, l)).collect();
    for j in 1..n {
        for k in j + 1..n {
            if rng.gen::<f64>() < 0.3 {
                edges.push((j, k));
            }
        }
    }
    Graph::build(n, &edges).unwrap()
}

struct Enumerated {
    log_z: f64,
    center: Vec<f64>,
    leaves: Vec<Vec<f64>>,
    pairwise: Vec<DenseMatrix>,
}

/// Enumerates the piece centered at node 0 with exponents computed here.
fn enumerate_piece(g: &Graph, scheme: RedistributionScheme, scores: &DenseMatrix, pp: &PairwiseParams) -> Enumerated {
    let c = scores.cols();
    let leaves = g.neighbors(0).to_vec();
    let k = compat(pp);
    let mut logs = Vec::new();
    let mut configs = Vec::new();
    for_each_labeling(leaves.len() + 1, c, |y| {
        let mut v = unary_exponent(g, scheme, 0, 0) * scores.get(0, y[0]);
        for (t, &l) in leaves.iter().enumerate() {
            v += unary_exponent(g, scheme, 0, l) * scores.get(l, y[t + 1]);
            let e = g.edge_id(0, l).unwrap();
            v += 0.5 * alpha_of(pp, e) * k.get(y[0], y[t + 1]);
        }
        logs.push(v);
        configs.push(y.to_vec());
    });
    let log_z = lse(&logs);
    let mut center = vec![0.0; c];
    let mut leaf_m = vec![vec![0.0; c]; leaves.len()];
    let mut pairwise = vec![DenseMatrix::zeros(c, c); leaves.len()];
    for (v, y) in logs.iter().zip(&configs) {
        let p = (v - log_z).exp();
        center[y[0]] += p;
        for t in 0..leaves.len() {
            leaf_m[t][y[t + 1]] += p;
            let cur = pairwise[t].get(y[0], y[t + 1]);
            pairwise[t].set(y[0], y[t + 1], cur + p);
        }
    }
    Enumerated {
        log_z,
        center,
        leaves: leaf_m,
        pairwise,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Piece log-partitions and all piece marginals against enumeration.
pub fn piece_oracle_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let g = random_star(&mut rng);
        let c = rng.gen_range(2..=4);
        let scheme = both_schemes()[trial % 2];
        let mode = all_modes()[trial % 3];
        let scores = random_matrix(g.num_nodes(), c, 2.0, &mut rng);
        let pp = random_pairwise(c, g.num_edges(), mode, &mut rng);
        let decomp = mrf::build_pieces(&g, scheme);
        let (piece, w) = (&decomp.pieces[0], &decomp.redistribution.weights[0]);
        assert_eq!(piece.center, 0);

        let expect = enumerate_piece(&g, scheme, &scores, &pp);
        worst = worst.max((mrf::piece_log_partition(piece, w, &scores, &pp) - expect.log_z).abs());
        let m = mrf::piece_marginals(piece, w, &scores, &pp);
        worst = worst.max((m.log_partition - expect.log_z).abs());
        worst = worst.max(max_diff(&m.center, &expect.center));
        for t in 0..piece.leaves.len() {
            worst = worst.max(max_diff(&m.leaves[t], &expect.leaves[t]));
            worst = worst.max(m.pairwise[t].max_abs_diff(&expect.pairwise[t]));
        }
    }
    worst
}

struct GradInstance {
    g: Graph,
    features: DenseMatrix,
    r: DenseMatrix,
    gcn: GcnParams,
    base: PairwiseParams,
    dropout_seed: u64,
}

fn grad_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    let n = rng.gen_range(2..=10);
    let c = rng.gen_range(2..=4);
    let f = rng.gen_range(1..=6);
    let hidden = rng.gen_range(1..=8);
    let g = random_graph(n, 0.4, rng);
    let features = random_matrix(n, f, 1.0, rng);
    let r = random_distributions(n, c, rng);
    let base = random_pairwise(c, g.num_edges(), CoefficientMode::Edge, rng);
    let dropout_seed = rng.gen();
    // Finite differences are meaningless across a ReLU kink, so redraw the
    // weights until every pre-activation is either exactly zero (an
    // all-zero input row) or clearly away from it.
    loop {
        let gcn = GcnParams {
            w0: random_matrix(f, hidden, 1.0, rng),
            w1: random_matrix(hidden, c, 1.0, rng),
        };
        let inst = GradInstance {
            g: g.clone(),
            features: features.clone(),
            r: r.clone(),
            gcn,
            base: base.clone(),
            dropout_seed,
        };
        let (_, cache) = scores_of(&inst, &inst.gcn);
        if cache.pre_hidden().as_slice().iter().all(|&p| p == 0.0 || p.abs() > 1e-3) {
            return inst;
        }
    }
}

fn with_mode(base: &PairwiseParams, mode: CoefficientMode) -> PairwiseParams {
    let mut pp = base.clone();
    pp.mode = mode;
    pp.alpha = match mode {
        CoefficientMode::Edge => base.alpha.clone(),
        CoefficientMode::Layer => vec![base.alpha.first().copied().unwrap_or(0.7)],
        CoefficientMode::None => Vec::new(),
    };
    pp
}

/// Train-mode forward with a dropout mask that is fixed across calls.
fn scores_of(inst: &GradInstance, gcn: &GcnParams) -> (DenseMatrix, ForwardCache) {
    let adj = inst.g.normalized_adjacency();
    let mut rng = ChaCha8Rng::seed_from_u64(inst.dropout_seed);
    let mode = ForwardMode::Train {
        keep_prob: 0.8,
        rng: &mut rng,
    };
    backbone::forward(gcn, &inst.features, &adj, mode, Exec::Sequential).unwrap()
}

fn gradient_case(inst: &GradInstance, scheme: RedistributionScheme, mode: CoefficientMode) -> Vec<(&'static str, f64)> {
    const H: f64 = 1e-5;
    let pp = with_mode(&inst.base, mode);
    let decomp = mrf::build_pieces(&inst.g, scheme);
    let objective = |s: &DenseMatrix, p: &PairwiseParams| mrf::expected_piecewise_objective(&inst.r, s, p, &decomp, &inst.g).unwrap();
    let (scores, cache) = scores_of(inst, &inst.gcn);
    let grads = mrf::objective_gradients(&inst.r, &scores, &pp, &decomp, &inst.g).unwrap();
    let (n, c) = scores.shape();
    let mut errors = Vec::new();

    let mut x = scores.as_slice().to_vec();
    let fd = central_diff(&mut x, H, |v| objective(&DenseMatrix::from_vec(n, c, v.to_vec()).unwrap(), &pp));
    errors.push(("scores", rel_error(grads.scores.as_slice(), &fd)));

    let mut x = pp.raw.as_slice().to_vec();
    let fd = central_diff(&mut x, H, |v| {
        let mut p = pp.clone();
        p.raw = DenseMatrix::from_vec(c, c, v.to_vec()).unwrap();
        objective(&scores, &p)
    });
    errors.push(("K", rel_error(grads.raw_compat.as_slice(), &fd)));

    let mut x = pp.alpha.clone();
    let fd = central_diff(&mut x, H, |v| {
        let mut p = pp.clone();
        p.alpha = v.to_vec();
        objective(&scores, &p)
    });
    errors.push(("alpha", rel_error(&grads.alpha, &fd)));

    let adj = inst.g.normalized_adjacency();
    let back = backbone::backward(&inst.gcn, &inst.features, &adj, &cache, &grads.scores, Exec::Sequential).unwrap();
    let (fr, hc) = inst.gcn.w0.shape();
    let mut x = inst.gcn.w0.as_slice().to_vec();
    let fd = central_diff(&mut x, H, |v| {
        let p = GcnParams {
            w0: DenseMatrix::from_vec(fr, hc, v.to_vec()).unwrap(),
            w1: inst.gcn.w1.clone(),
        };
        objective(&scores_of(inst, &p).0, &pp)
    });
    errors.push(("W0", rel_error(back.w0.as_slice(), &fd)));
    let mut x = inst.gcn.w1.as_slice().to_vec();
    let fd = central_diff(&mut x, H, |v| {
        let p = GcnParams {
            w0: inst.gcn.w0.clone(),
            w1: DenseMatrix::from_vec(hc, c, v.to_vec()).unwrap(),
        };
        objective(&scores_of(inst, &p).0, &pp)
    });
    errors.push(("W1", rel_error(back.w1.as_slice(), &fd)));
    errors
}

/// Worst relative finite-difference error per parameter block over every
/// scheme and coefficient mode.
pub fn gradient_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..instances {
        let inst = grad_instance(&mut rng);
        for scheme in both_schemes() {
            for mode in all_modes() {
                for (block, err) in gradient_case(&inst, scheme, mode) {
                    match worst.iter_mut().find(|(b, _)| *b == block) {
                        Some(w) => w.1 = w.1.max(err),
                        None => worst.push((block, err)),
                    }
                }
            }
        }
    }
    worst
}

/// Summed redistributed piece log-factors against the global log-score.
pub fn redistribution_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.gen_range(1..=12);
        let c = rng.gen_range(2..=5);
        let g = random_graph(n, 0.35, &mut rng);
        let scores = random_matrix(n, c, 3.0, &mut rng);
        let pp = random_pairwise(c, g.num_edges(), all_modes()[trial % 3], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let global = global_log_score(&g, &scores, &pp, &labels);
        for scheme in both_schemes() {
            let decomp = mrf::build_pieces(&g, scheme);
            let summed: f64 = decomp
                .pieces
                .iter()
                .zip(&decomp.redistribution.weights)
                .map(|(p, w)| mrf::redistributed_piece_log_factor(p, w, &scores, &pp, &labels))
                .sum();
            worst = worst.max((summed - global).abs());
        }
    }
    worst
}

/// Change of the expected objective under per-node score shifts.
pub fn shift_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = rng.gen_range(1..=12);
        let c = rng.gen_range(2..=4);
        let g = random_graph(n, 0.35, &mut rng);
        let scores = random_matrix(n, c, 2.0, &mut rng);
        let pp = random_pairwise(c, g.num_edges(), all_modes()[trial % 3], &mut rng);
        let r = random_distributions(n, c, &mut rng);
        let mut shifted = scores.clone();
        for i in 0..n {
            let delta = rng.gen_range(-50.0..50.0);
            shifted.row_mut(i).iter_mut().for_each(|v| *v += delta);
        }
        for scheme in both_schemes() {
            let decomp = mrf::build_pieces(&g, scheme);
            let a = mrf::expected_piecewise_objective(&r, &scores, &pp, &decomp, &g).unwrap();
            let b = mrf::expected_piecewise_objective(&r, &shifted, &pp, &decomp, &g).unwrap();
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest ELBO decrease over single-site mean-field updates and largest
/// violation of `log p(y_L) = ELBO + KL`.
pub fn elbo_ascent(instances: usize, seed: u64) -> (f64, f64) {
    let lim = OracleLimit::default();
    let seq = Exec::Sequential;
    let mut rng = rng(seed);
    let mut worst_drop: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for trial in 0..instances {
        let n = rng.gen_range(2..=10);
        let c = if n > 8 { 2 } else { rng.gen_range(2..=3) };
        let g = random_graph(n, 0.4, &mut rng);
        let s = random_matrix(n, c, 2.0, &mut rng);
        let pp = random_pairwise(c, g.num_edges(), all_modes()[trial % 3], &mut rng);
        let k = pp.compat();
        let obs: Vec<Option<usize>> = (0..n).map(|_| (rng.gen::<f64>() < 0.3).then(|| rng.gen_range(0..c))).collect();
        let mut q = Proposal::from_scores(&random_matrix(n, c, 3.0, &mut rng), &obs);
        let ll = exact_observed_log_likelihood(&s, &pp, &g, &obs, lim, seq).unwrap();
        let mut prev = exact_elbo(&q, &s, &pp, &g, &obs, lim, seq).unwrap();
        for _sweep in 0..3 {
            for i in q.unlabeled().to_vec() {
                update_site(&mut q, i, &s, &pp, &k, &obs, &g);
                let elbo = exact_elbo(&q, &s, &pp, &g, &obs, lim, seq).unwrap();
                let kl = exact_kl(&q, &s, &pp, &g, &obs, lim, seq).unwrap();
                worst_drop = worst_drop.max(prev - elbo);
                worst_identity = worst_identity.max((ll - elbo - kl).abs());
                prev = elbo;
            }
        }
    }
    (worst_drop, worst_identity)
}

/// Piecewise log-likelihood on edgeless graphs against the softmax
/// log-likelihood.
pub fn edgeless_error(trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=15);
        let c = rng.gen_range(2..=6);
        let g = Graph::build(n, &[]).unwrap();
        let scores = random_matrix(n, c, 4.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let expect: f64 = (0..n).map(|i| scores.get(i, labels[i]) - lse(scores.row(i))).sum();
        for scheme in both_schemes() {
            for mode in all_modes() {
                let pp = random_pairwise(c, 0, mode, &mut rng);
                let decomp = mrf::build_pieces(&g, scheme);
                let got = mrf::piecewise_log_likelihood(&labels, &scores, &pp, &decomp, &g).unwrap();
                worst = worst.max((got - expect).abs());
            }
        }
    }
    worst
}

pub fn small_dataset(seed: u64, homophily: f64) -> (Dataset, Split) {
    let ds = generate_synthetic(&SyntheticParams {
        num_nodes: 150,
        num_classes: 3,
        edges_per_node: 3,
        homophily_target: homophily,
        feature_dim: 24,
        feature_noise: 0.3,
        seed,
    })
    .unwrap()
    .row_normalize_features();
    let split = planetoid_split(&ds, 5, 30, 60, seed).unwrap();
    (ds, split)
}

pub fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        warm_start_epochs: 30,
        em_rounds: 2,
        m_epochs: 10,
        hidden: 8,
        patience: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Trains with `α = 0` under center redistribution and replays the run as
/// plain supervised training: cross-entropy on the labeled set during the
/// warm start, then soft-target cross-entropy against
/// `softmax(scores)` on every node during each M-step. Returns the largest
/// relative deviation of logged losses and objectives and the largest
/// absolute deviation of the final weights.
pub fn zero_alpha_trajectory(seed: u64) -> (f64, f64) {
    let (ds, split) = small_dataset(seed, 0.8);
    let config = TrainConfig {
        alpha_init: 0.0,
        redistribution: RedistributionScheme::Center,
        coefficient: CoefficientMode::Edge,
        exec: Exec::Sequential,
        ..quick_config(seed + 14)
    };
    let outcome = train(&ds, &split, &config).unwrap();

    let adj = ds.graph.normalized_adjacency();
    let n = ds.num_nodes();
    let c = ds.num_classes;
    let mut gcn = GcnParams::init(ds.num_features(), config.hidden, c, config.seed);
    let adam = |wd| AdamConfig {
        lr: config.lr,
        weight_decay: wd,
        decay: WeightDecay::Coupled,
        ..AdamConfig::default()
    };
    let mut s0 = AdamState::for_matrix(&gcn.w0, adam(config.weight_decay));
    let mut s1 = AdamState::for_matrix(&gcn.w1, adam(0.0));
    let mut worst_trace: f64 = 0.0;

    let warm_trace = outcome.report.trace("warm", "train_loss");
    assert_eq!(warm_trace.len(), config.warm_start_epochs);
    for (epoch, logged) in warm_trace.iter().enumerate() {
        let mut rng = dropout_stream(config.seed, Phase::Warm { epoch });
        let mode = ForwardMode::Train {
            keep_prob: config.keep_prob,
            rng: &mut rng,
        };
        let (loss, g) = backbone::supervised_loss_and_grad(&gcn, &ds.features, &adj, &ds.labels, &split.train, mode, Exec::Sequential).unwrap();
        worst_trace = worst_trace.max(rel_gap(loss, *logged));
        s0.step(gcn.w0.as_mut_slice(), g.w0.as_slice()).unwrap();
        s1.step(gcn.w1.as_mut_slice(), g.w1.as_slice()).unwrap();
    }

    let observed = observed_from_split(&ds.labels, &split);
    let leaf_constant = 2.0 * ds.graph.num_edges() as f64 * (c as f64).ln();
    for round in 0..config.em_rounds {
        let scores = backbone::unary_log_factors(&gcn, &ds.features, &adj).unwrap();
        let mut targets = DenseMatrix::zeros(n, c);
        for i in 0..n {
            match observed[i] {
                Some(y) => targets.set(i, y, 1.0),
                None => {
                    let z = lse(scores.row(i));
                    for y in 0..c {
                        targets.set(i, y, (scores.get(i, y) - z).exp());
                    }
                }
            }
        }
        let weights = vec![1.0 / n as f64; n];
        let trace = outcome.report.trace(&format!("m{round}"), "objective");
        assert_eq!(trace.len(), config.m_epochs);
        for (epoch, logged) in trace.iter().enumerate() {
            let mut rng = dropout_stream(config.seed, Phase::MStep { round, epoch });
            let mode = ForwardMode::Train {
                keep_prob: config.keep_prob,
                rng: &mut rng,
            };
            let (s, cache) = backbone::forward(&gcn, &ds.features, &adj, mode, Exec::Sequential).unwrap();
            let (ce, grad) = backbone::soft_cross_entropy(&s, &targets, &weights).unwrap();
            worst_trace = worst_trace.max(rel_gap(-(n as f64) * ce - leaf_constant, *logged));
            let g = backbone::backward(&gcn, &ds.features, &adj, &cache, &grad, Exec::Sequential).unwrap();
            s0.step(gcn.w0.as_mut_slice(), g.w0.as_slice()).unwrap();
            s1.step(gcn.w1.as_mut_slice(), g.w1.as_slice()).unwrap();
        }
    }
    assert!(outcome.last_pairwise.raw.as_slice().iter().all(|&v| v == 0.0));
    assert!(outcome.last_pairwise.alpha.iter().all(|&v| v == 0.0));
    let weights = outcome.last_gcn.w0.max_abs_diff(&gcn.w0).max(outcome.last_gcn.w1.max_abs_diff(&gcn.w1));
    (worst_trace, weights)
}
