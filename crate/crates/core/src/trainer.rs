//! EM training: supervised warm start, mean-field E-steps and piecewise
//! M-steps, with best-validation model selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, ForwardMode, GcnParams};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedAdjacency};
use crate::mrf::{self, CoefficientMode, PairwiseParams, RedistributionScheme, StarDecomposition};
use crate::numerics::{argmax, softmax_into, AdamConfig, AdamState, DenseMatrix, RngStreams, StreamPurpose, WeightDecay};
use crate::par::Exec;

/// Per-node observed label: `Some` for labeled nodes, `None` otherwise.
pub type Observed = [Option<usize>];

/// Observed labels for the training set of `split`.
pub fn observed_from_split(labels: &[usize], split: &Split) -> Vec<Option<usize>> {
    let mut obs = vec![None; labels.len()];
    for &i in &split.train {
        obs[i] = Some(labels[i]);
    }
    obs
}

/// Fully factorized distribution over the labels of unlabeled nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    unlabeled: Vec<usize>,
    row_of: Vec<Option<usize>>,
    q: DenseMatrix,
}

impl Proposal {
    /// `q_i = softmax(s_i)` for every unlabeled node.
    pub fn from_scores(scores: &DenseMatrix, observed: &Observed) -> Self {
        let unlabeled: Vec<usize> = (0..scores.rows()).filter(|&i| observed[i].is_none()).collect();
        let mut row_of = vec![None; scores.rows()];
        let mut q = DenseMatrix::zeros(unlabeled.len(), scores.cols());
        for (r, &i) in unlabeled.iter().enumerate() {
            row_of[i] = Some(r);
            softmax_into(scores.row(i), q.row_mut(r));
        }
        Self { unlabeled, row_of, q }
    }

    pub fn uniform(num_classes: usize, observed: &Observed) -> Self {
        Self::from_scores(&DenseMatrix::zeros(observed.len(), num_classes), observed)
    }

    /// Builds a proposal from explicit rows, one per unlabeled node in
    /// ascending node order.
    pub fn from_rows(observed: &Observed, q: DenseMatrix) -> Result<Self> {
        let mut p = Self::uniform(q.cols(), observed);
        if p.q.shape() != q.shape() {
            return Err(Error::Shape {
                op: "proposal rows",
                lhs: p.q.shape(),
                rhs: q.shape(),
            });
        }
        p.q = q;
        Ok(p)
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn num_classes(&self) -> usize {
        self.q.cols()
    }

    pub fn rows(&self) -> &DenseMatrix {
        &self.q
    }

    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.row_of[node].map(|r| self.q.row(r))
    }

    pub fn get_mut(&mut self, node: usize) -> Option<&mut [f64]> {
        self.row_of[node].map(|r| self.q.row_mut(r))
    }

    /// Per-node label distributions: the proposal row for unlabeled nodes
    /// and a point mass for labeled ones.
    pub fn distributions(&self, observed: &Observed) -> DenseMatrix {
        let n = observed.len();
        let mut r = DenseMatrix::zeros(n, self.num_classes());
        for i in 0..n {
            match (observed[i], self.get(i)) {
                (Some(y), _) => r.set(i, y, 1.0),
                (None, Some(row)) => r.row_mut(i).copy_from_slice(row),
                (None, None) => unreachable!("unlabeled node without a proposal row"),
            }
        }
        r
    }

    /// Row-wise argmax for unlabeled nodes, observed label otherwise.
    pub fn predictions(&self, observed: &Observed) -> Vec<usize> {
        (0..observed.len())
            .map(|i| observed[i].unwrap_or_else(|| argmax(self.get(i).expect("unlabeled row"))))
            .collect()
    }
}

/// Mean-field update of one unlabeled node against the original MRF
/// factors. Returns the total-variation change of the row.
pub fn update_site(
    q: &mut Proposal,
    node: usize,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    k: &DenseMatrix,
    observed: &Observed,
    g: &Graph,
) -> f64 {
    let c = scores.cols();
    let mut logits = scores.row(node).to_vec();
    for (&j, &e) in g.neighbors(node).iter().zip(g.neighbor_edge_ids(node)) {
        let alpha = pp.alpha(e);
        if alpha == 0.0 {
            continue;
        }
        match observed[j] {
            Some(yj) => {
                for (y, l) in logits.iter_mut().enumerate() {
                    *l += alpha * k.get(y, yj);
                }
            }
            None => {
                let qj = q.get(j).expect("unlabeled row");
                for (y, l) in logits.iter_mut().enumerate() {
                    *l += alpha * k.row(y).iter().zip(qj).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    let mut fresh = vec![0.0; c];
    softmax_into(&logits, &mut fresh);
    let row = q.get_mut(node).expect("unlabeled row");
    let tv = 0.5 * row.iter().zip(&fresh).map(|(a, b)| (a - b).abs()).sum::<f64>();
    row.copy_from_slice(&fresh);
    tv
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EStepStats {
    pub sweeps: usize,
    /// Largest per-node total-variation change in the last sweep.
    pub max_change: f64,
}

/// Sequential mean-field sweeps in ascending node order, stopping after
/// `sweeps` sweeps or once no row moves by `tolerance` in total variation.
pub fn e_step(
    q: &mut Proposal,
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    observed: &Observed,
    g: &Graph,
    sweeps: usize,
    tolerance: f64,
) -> EStepStats {
    let k = pp.compat();
    let mut stats = EStepStats {
        sweeps: 0,
        max_change: 0.0,
    };
    let nodes = q.unlabeled.clone();
    for _ in 0..sweeps {
        let mut max_change: f64 = 0.0;
        for &i in &nodes {
            max_change = max_change.max(update_site(q, i, scores, pp, &k, observed, g));
        }
        stats.sweeps += 1;
        stats.max_change = max_change;
        if max_change < tolerance {
            break;
        }
    }
    stats
}

/// Runs a final E-step from `q` and returns one label per node.
pub fn predict(
    scores: &DenseMatrix,
    pp: &PairwiseParams,
    q: &Proposal,
    observed: &Observed,
    g: &Graph,
    sweeps: usize,
    tolerance: f64,
) -> Vec<usize> {
    let mut q = q.clone();
    e_step(&mut q, scores, pp, observed, g, sweeps, tolerance);
    q.predictions(observed)
}

/// Fraction of `nodes` whose prediction equals the label; 0 for an empty set.
pub fn evaluate(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    if nodes.is_empty() {
        return 0.0;
    }
    let hits = nodes.iter().filter(|&&i| predictions[i] == labels[i]).count();
    hits as f64 / nodes.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warm_start_epochs: usize,
    pub em_rounds: usize,
    pub e_sweeps: usize,
    pub e_tolerance: f64,
    pub m_epochs: usize,
    /// Sweeps of the final E-step run by the prediction rule.
    pub predict_sweeps: usize,
    pub hidden: usize,
    pub keep_prob: f64,
    pub lr: f64,
    /// Learning rate for `K` and `α`; `None` uses `lr`.
    pub pairwise_lr: Option<f64>,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecay,
    pub redistribution: RedistributionScheme,
    pub coefficient: CoefficientMode,
    pub alpha_init: f64,
    /// Window of the warm-start early-stopping rule; 0 disables it.
    pub patience: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warm_start_epochs: 200,
            em_rounds: 5,
            e_sweeps: 10,
            e_tolerance: 1e-4,
            m_epochs: 50,
            predict_sweeps: 100,
            hidden: 16,
            keep_prob: 0.5,
            lr: 0.01,
            pairwise_lr: None,
            weight_decay: 5e-4,
            weight_decay_mode: WeightDecay::Coupled,
            redistribution: RedistributionScheme::Average,
            coefficient: CoefficientMode::Edge,
            alpha_init: 1.0,
            patience: 10,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("e_sweeps", self.e_sweeps),
            ("m_epochs", self.m_epochs),
            ("predict_sweeps", self.predict_sweeps),
            ("hidden", self.hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.e_tolerance > 0.0) {
            return Err(Error::Config("e_tolerance must be positive".into()));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config("keep_prob must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.pairwise_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.alpha_init.is_finite() {
            return Err(Error::Config("weight_decay must be non-negative and alpha_init finite".into()));
        }
        Ok(())
    }

    fn backbone_adam(&self, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay,
            decay: self.weight_decay_mode,
            ..AdamConfig::default()
        }
    }

    fn pairwise_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.pairwise_lr.unwrap_or(self.lr),
            ..AdamConfig::default()
        }
    }
}

/// Training phases that consume dropout randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warm { epoch: usize },
    MStep { round: usize, epoch: usize },
}

/// Dropout stream for one epoch. Streams depend only on the phase, so
/// runs with different schedules share randomness where they overlap.
pub fn dropout_stream(seed: u64, phase: Phase) -> rand_chacha::ChaCha8Rng {
    let index = match phase {
        Phase::Warm { epoch } => epoch as u64,
        Phase::MStep { round, epoch } => (1u64 << 40) | ((round as u64) << 20) | epoch as u64,
    };
    RngStreams::new(seed).stream(StreamPurpose::Dropout, index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<TraceRecord>,
    pub selected_checkpoint: String,
    pub selected_val_accuracy: f64,
    pub final_test_accuracy: f64,
}

impl TrainReport {
    fn push(&mut self, phase: &str, step: usize, metric: &str, value: f64) {
        self.records.push(TraceRecord {
            phase: phase.to_string(),
            step,
            metric: metric.to_string(),
            value,
        });
    }

    /// Values of one metric in one phase, in step order.
    pub fn trace(&self, phase: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.phase == phase && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// One JSON object per line: all trace records, then a `summary` record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).expect("plain record")).unwrap();
        }
        for (metric, value) in [
            ("selected_val_accuracy", self.selected_val_accuracy),
            ("final_test_accuracy", self.final_test_accuracy),
        ] {
            let r = TraceRecord {
                phase: "summary".into(),
                step: 0,
                metric: metric.into(),
                value,
            };
            writeln!(out, "{}", serde_json::to_string(&r).unwrap()).unwrap();
        }
        writeln!(
            out,
            "{}",
            serde_json::json!({"phase": "summary", "selected_checkpoint": self.selected_checkpoint})
        )
        .unwrap();
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let mut report = TrainReport::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: "<report>".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if let Some(id) = v.get("selected_checkpoint").and_then(|x| x.as_str()) {
                report.selected_checkpoint = id.to_string();
                continue;
            }
            let r: TraceRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
                path: "<report>".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            match (r.phase.as_str(), r.metric.as_str()) {
                ("summary", "selected_val_accuracy") => report.selected_val_accuracy = r.value,
                ("summary", "final_test_accuracy") => report.final_test_accuracy = r.value,
                _ => report.records.push(r),
            }
        }
        Ok(report)
    }
}

/// Adam states for every parameter block.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub w0: AdamState,
    pub w1: AdamState,
    pub raw_compat: AdamState,
    pub alpha: AdamState,
}

impl Optimizers {
    pub fn new(gcn: &GcnParams, pp: &PairwiseParams, config: &TrainConfig) -> Self {
        Self {
            w0: AdamState::for_matrix(&gcn.w0, config.backbone_adam(config.weight_decay)),
            w1: AdamState::for_matrix(&gcn.w1, config.backbone_adam(0.0)),
            raw_compat: AdamState::for_matrix(&pp.raw, config.pairwise_adam()),
            alpha: AdamState::new(pp.alpha.len(), config.pairwise_adam()),
        }
    }
}

/// Everything the M-step reads but does not change.
pub struct ModelInputs<'a> {
    pub features: &'a DenseMatrix,
    pub adj: &'a NormalizedAdjacency,
    pub graph: &'a Graph,
    pub pieces: &'a StarDecomposition,
}

/// Full-batch gradient ascent on the expected piecewise objective with the
/// proposal held fixed. The ascent direction is the objective divided by
/// the node count. Returns the objective at the start of every epoch.
#[allow(clippy::too_many_arguments)]
pub fn m_step(
    gcn: &mut GcnParams,
    pp: &mut PairwiseParams,
    opt: &mut Optimizers,
    inputs: &ModelInputs<'_>,
    targets: &DenseMatrix,
    config: &TrainConfig,
    round: usize,
) -> Result<Vec<f64>> {
    let n = inputs.graph.num_nodes() as f64;
    let mut trace = Vec::with_capacity(config.m_epochs);
    for epoch in 0..config.m_epochs {
        let mut rng = dropout_stream(config.seed, Phase::MStep { round, epoch });
        let mode = ForwardMode::Train {
            keep_prob: config.keep_prob,
            rng: &mut rng,
        };
        let (scores, cache) = backbone::forward(gcn, inputs.features, inputs.adj, mode, config.exec)?;
        let (objective, grads) =
            mrf::objective_and_gradients_with(targets, &scores, pp, inputs.pieces, inputs.graph, config.exec)?;
        trace.push(objective);

        let mut descent = grads.scores;
        descent.scale(-1.0 / n);
        let g = backbone::backward(gcn, inputs.features, inputs.adj, &cache, &descent, config.exec)?;
        opt.w0.step(gcn.w0.as_mut_slice(), g.w0.as_slice())?;
        opt.w1.step(gcn.w1.as_mut_slice(), g.w1.as_slice())?;

        let d_raw: Vec<f64> = grads.raw_compat.as_slice().iter().map(|x| -x / n).collect();
        opt.raw_compat.step(pp.raw.as_mut_slice(), &d_raw)?;
        if pp.mode != CoefficientMode::None {
            let d_alpha: Vec<f64> = grads.alpha.iter().map(|x| -x / n).collect();
            opt.alpha.step(&mut pp.alpha, &d_alpha)?;
        }
    }
    Ok(trace)
}

/// Model state retained at a phase boundary.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub id: String,
    pub gcn: GcnParams,
    pub pairwise: PairwiseParams,
    pub proposal: Proposal,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub gcn: GcnParams,
    pub pairwise: PairwiseParams,
    pub proposal: Proposal,
    pub report: TrainReport,
    pub predictions: Vec<usize>,
    /// Parameters after the last training step, whether selected or not.
    pub last_gcn: GcnParams,
    pub last_pairwise: PairwiseParams,
}

struct Session<'a> {
    ds: &'a Dataset,
    split: &'a Split,
    config: &'a TrainConfig,
    observed: Vec<Option<usize>>,
    adj: NormalizedAdjacency,
    report: TrainReport,
    best: Option<Checkpoint>,
}

impl Session<'_> {
    fn eval_scores(&self, gcn: &GcnParams) -> Result<DenseMatrix> {
        backbone::forward::<rand_chacha::ChaCha8Rng>(gcn, &self.ds.features, &self.adj, ForwardMode::Eval, self.config.exec)
            .map(|(s, _)| s)
    }

    fn predict_with(&self, gcn: &GcnParams, pp: &PairwiseParams, q: &Proposal) -> Result<Vec<usize>> {
        let scores = self.eval_scores(gcn)?;
        Ok(predict(
            &scores,
            pp,
            q,
            &self.observed,
            &self.ds.graph,
            self.config.predict_sweeps,
            self.config.e_tolerance,
        ))
    }

    /// Records validation accuracy for a phase boundary and keeps the
    /// checkpoint if it beats the best so far.
    fn boundary(&mut self, id: &str, gcn: &GcnParams, pp: &PairwiseParams, q: &Proposal) -> Result<()> {
        let preds = self.predict_with(gcn, pp, q)?;
        let acc = evaluate(&preds, &self.ds.labels, &self.split.validation);
        self.report.push(id, 0, "boundary_val_acc", acc);
        if self.best.as_ref().map_or(true, |b| acc > b.val_accuracy) {
            self.best = Some(Checkpoint {
                id: id.to_string(),
                gcn: gcn.clone(),
                pairwise: pp.clone(),
                proposal: q.clone(),
                val_accuracy: acc,
            });
        }
        Ok(())
    }
}

/// Supervised warm start of the backbone on the labeled set, with the
/// windowed validation-loss stopping rule when `patience > 0`.
fn warm_start(
    session: &mut Session<'_>,
    gcn: &mut GcnParams,
    opt: &mut Optimizers,
) -> Result<()> {
    let config = session.config;
    let ds = session.ds;
    let mut val_losses: Vec<f64> = Vec::new();
    let (val_targets, val_weights) =
        backbone::one_hot_targets(ds.num_nodes(), ds.num_classes, &ds.labels, &session.split.validation);
    for epoch in 0..config.warm_start_epochs {
        let mut rng = dropout_stream(config.seed, Phase::Warm { epoch });
        let mode = ForwardMode::Train {
            keep_prob: config.keep_prob,
            rng: &mut rng,
        };
        let (loss, grads) = backbone::supervised_loss_and_grad(
            gcn,
            &ds.features,
            &session.adj,
            &ds.labels,
            &session.split.train,
            mode,
            config.exec,
        )?;
        opt.w0.step(gcn.w0.as_mut_slice(), grads.w0.as_slice())?;
        opt.w1.step(gcn.w1.as_mut_slice(), grads.w1.as_slice())?;
        session.report.push("warm", epoch, "train_loss", loss);

        if session.split.validation.is_empty() {
            continue;
        }
        let scores = session.eval_scores(gcn)?;
        let (val_loss, _) = backbone::soft_cross_entropy(&scores, &val_targets, &val_weights)?;
        let preds: Vec<usize> = (0..scores.rows()).map(|i| argmax(scores.row(i))).collect();
        session.report.push("warm", epoch, "val_loss", val_loss);
        session
            .report
            .push("warm", epoch, "val_acc", evaluate(&preds, &ds.labels, &session.split.validation));
        let window = config.patience;
        if window > 0 && val_losses.len() >= window {
            let recent = &val_losses[val_losses.len() - window..];
            let mean = recent.iter().sum::<f64>() / window as f64;
            if val_loss > mean {
                log::debug!("warm start stopped at epoch {epoch}");
                val_losses.push(val_loss);
                break;
            }
        }
        val_losses.push(val_loss);
    }
    Ok(())
}

/// Warm start, then `em_rounds` of (E-step, M-step). Returns the
/// checkpoint with the best validation accuracy over all phase boundaries.
pub fn train(ds: &Dataset, split: &Split, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    split.validate(ds.num_nodes())?;
    if split.train.is_empty() {
        return Err(Error::Config("the labeled set is empty".into()));
    }
    let observed = observed_from_split(&ds.labels, split);
    let mut session = Session {
        ds,
        split,
        config,
        observed,
        adj: ds.graph.normalized_adjacency(),
        report: TrainReport::default(),
        best: None,
    };
    let pieces = mrf::build_pieces(&ds.graph, config.redistribution);

    let mut gcn = GcnParams::init(ds.num_features(), config.hidden, ds.num_classes, config.seed);
    let mut pp = PairwiseParams::new(ds.num_classes, ds.graph.num_edges(), config.coefficient, config.alpha_init);
    let mut opt = Optimizers::new(&gcn, &pp, config);

    warm_start(&mut session, &mut gcn, &mut opt)?;
    let mut q = Proposal::from_scores(&session.eval_scores(&gcn)?, &session.observed);
    session.boundary("warm", &gcn, &pp, &q)?;

    for round in 0..config.em_rounds {
        let scores = session.eval_scores(&gcn)?;
        let stats = e_step(
            &mut q,
            &scores,
            &pp,
            &session.observed,
            &ds.graph,
            config.e_sweeps,
            config.e_tolerance,
        );
        let e_id = format!("e{round}");
        session.report.push(&e_id, 0, "sweeps", stats.sweeps as f64);
        session.report.push(&e_id, 0, "max_change", stats.max_change);
        session.boundary(&e_id, &gcn, &pp, &q)?;

        let targets = q.distributions(&session.observed);
        let inputs = ModelInputs {
            features: &ds.features,
            adj: &session.adj,
            graph: &ds.graph,
            pieces: &pieces,
        };
        let trace = m_step(&mut gcn, &mut pp, &mut opt, &inputs, &targets, config, round)?;
        let m_id = format!("m{round}");
        for (epoch, v) in trace.iter().enumerate() {
            session.report.push(&m_id, epoch, "objective", *v);
        }
        session.boundary(&m_id, &gcn, &pp, &q)?;
    }

    let best = session.best.take().expect("warm boundary always records a checkpoint");
    let predictions = session.predict_with(&best.gcn, &best.pairwise, &best.proposal)?;
    session.report.selected_checkpoint = best.id.clone();
    session.report.selected_val_accuracy = best.val_accuracy;
    session.report.final_test_accuracy = evaluate(&predictions, &ds.labels, &split.test);
    Ok(TrainOutcome {
        gcn: best.gcn,
        pairwise: best.pairwise,
        proposal: best.proposal,
        report: session.report,
        predictions,
        last_gcn: gcn,
        last_pairwise: pp,
    })
}
