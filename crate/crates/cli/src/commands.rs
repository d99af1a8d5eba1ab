//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use epfgnn_core::backbone;
use epfgnn_core::checkpoint::{self, Model};
use epfgnn_core::dataset::{generate_synthetic, load_dataset, ratio_split, save_generic, Loaded, SyntheticParams};
use epfgnn_core::mrf::{CoefficientMode, PairwiseParams, RedistributionScheme};
use epfgnn_core::selfcheck::{self, SelfCheckConfig};
use epfgnn_core::trainer::{evaluate, observed_from_split, predict, train, Proposal, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    let path = cfg.dataset.as_ref().expect("validated config has a dataset");
    let mut loaded = load_dataset(path).map_err(|e| match e {
        epfgnn_core::Error::Config(m) => CliError::Config(format!("dataset: {m}")),
        e => e.into(),
    })?;
    if cfg.normalize_features {
        loaded.dataset = loaded.dataset.row_normalize_features();
    }
    Ok(loaded)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub selected_checkpoint: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std_test_accuracy: f64,
    pub mean_val_accuracy: f64,
    pub per_seed: Vec<SeedResult>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Aggregate {
    pub fn new(per_seed: Vec<SeedResult>) -> Self {
        let test: Vec<f64> = per_seed.iter().map(|r| r.test_accuracy).collect();
        let val: Vec<f64> = per_seed.iter().map(|r| r.val_accuracy).collect();
        let (mean, std) = mean_std(&test);
        Self {
            runs: per_seed.len(),
            mean_test_accuracy: mean,
            std_test_accuracy: std,
            mean_val_accuracy: mean_std(&val).0,
            per_seed,
        }
    }
}

/// Trains every seed of `cfg`, writing per-seed artifacts under `out` when
/// given.
fn sweep(cfg: &RunConfig, loaded: &Loaded, train_cfg: &TrainConfig, out: Option<&Path>, quiet: bool) -> Result<Aggregate, CliError> {
    let ds = &loaded.dataset;
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = cfg.split.build(ds, loaded.split.as_ref(), seed)?;
        let run_cfg = TrainConfig {
            seed,
            ..train_cfg.clone()
        };
        let outcome = train(ds, &split, &run_cfg)?;
        let result = SeedResult {
            seed,
            selected_checkpoint: outcome.report.selected_checkpoint.clone(),
            val_accuracy: outcome.report.selected_val_accuracy,
            test_accuracy: outcome.report.final_test_accuracy,
        };
        if let Some(out) = out {
            let dir = out.join(format!("seed-{seed}"));
            create_dir(&dir)?;
            write_file(&dir.join("report.jsonl"), outcome.report.to_json_lines())?;
            write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&result).unwrap())?;
            let model = Model {
                gcn: outcome.gcn,
                pairwise: Some(outcome.pairwise),
            };
            checkpoint::save(&model, &dir.join("model.ckpt"))?;
        }
        if !quiet {
            println!(
                "seed {seed}: test {:.2}% val {:.2}% (checkpoint {})",
                100.0 * result.test_accuracy,
                100.0 * result.val_accuracy,
                result.selected_checkpoint
            );
        }
        results.push(result);
    }
    Ok(Aggregate::new(results))
}

fn write_effective_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())
}

pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let loaded = load(cfg)?;
    let out = cfg.out.as_deref();
    if let Some(out) = out {
        write_effective_config(cfg, out)?;
    }
    let agg = sweep(cfg, &loaded, &cfg.train, out, quiet)?;
    if let Some(out) = out {
        write_file(&out.join("aggregate.json"), serde_json::to_string_pretty(&agg).unwrap())?;
    }
    println!(
        "test accuracy {:.2} ± {:.2}% over {} seeds",
        100.0 * agg.mean_test_accuracy,
        100.0 * agg.std_test_accuracy,
        agg.runs
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Scores a saved model on the split of the first configured seed using
/// the prediction rule, starting the final E-step from `softmax(scores)`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint_path: &Path, quiet: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    let loaded = load(cfg)?;
    let ds = &loaded.dataset;
    if model.gcn.w0.rows() != ds.num_features() || model.gcn.num_classes() != ds.num_classes {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {} features and {} classes, dataset has {} and {}",
            model.gcn.w0.rows(),
            model.gcn.num_classes(),
            ds.num_features(),
            ds.num_classes
        )));
    }
    let pp = match model.pairwise {
        Some(pp) => {
            pp.validate(ds.graph.num_edges())?;
            pp
        }
        None => PairwiseParams::new(ds.num_classes, ds.graph.num_edges(), CoefficientMode::None, 1.0),
    };
    let seed = cfg.seeds[0];
    let split = cfg.split.build(ds, loaded.split.as_ref(), seed)?;
    let observed = observed_from_split(&ds.labels, &split);
    let scores = backbone::unary_log_factors(&model.gcn, &ds.features, &ds.graph.normalized_adjacency())?;
    let q = Proposal::from_scores(&scores, &observed);
    let preds = predict(&scores, &pp, &q, &observed, &ds.graph, cfg.train.predict_sweeps, cfg.train.e_tolerance);
    let result = Evaluation {
        checkpoint: checkpoint_path.to_path_buf(),
        seed,
        val_accuracy: evaluate(&preds, &ds.labels, &split.validation),
        test_accuracy: evaluate(&preds, &ds.labels, &split.test),
    };
    if let Some(out) = &cfg.out {
        create_dir(out)?;
        write_file(&out.join("evaluation.json"), serde_json::to_string_pretty(&result).unwrap())?;
    }
    if !quiet {
        println!("checkpoint {}", checkpoint_path.display());
    }
    println!(
        "val accuracy {:.2}%, test accuracy {:.2}%",
        100.0 * result.val_accuracy,
        100.0 * result.test_accuracy
    );
    Ok(())
}

pub fn cmd_homophily(dataset: &Path) -> Result<(), CliError> {
    let loaded = load_dataset(dataset).map_err(|e| match e {
        epfgnn_core::Error::Config(m) => CliError::Config(format!("dataset: {m}")),
        e => e.into(),
    })?;
    let ds = &loaded.dataset;
    println!("nodes\t{}", ds.num_nodes());
    println!("edges\t{}", ds.graph.num_edges());
    if let Some(stats) = loaded.stats {
        println!("citation_rows\t{}", stats.citation_rows);
        println!("skipped_citations\t{}", stats.skipped_citations);
    }
    println!("features\t{}", ds.num_features());
    println!("classes\t{}", ds.num_classes);
    println!("beta\t{:.4}", ds.graph.homophily_beta(&ds.labels)?);
    Ok(())
}

pub fn cmd_oracle_check(cfg: &SelfCheckConfig) -> Result<(), CliError> {
    let configurations = (cfg.classes as f64).powi(cfg.nodes as i32);
    if configurations > cfg.limit.0 as f64 {
        return Err(CliError::Config(format!(
            "refusing {} nodes with {} classes: {configurations:.3e} configurations exceed the oracle limit of {}",
            cfg.nodes, cfg.classes, cfg.limit.0
        )));
    }
    let outcomes = selfcheck::run_all(cfg)?;
    println!("{:<26} {:>7} {:>12} {:>10}  result", "check", "trials", "max error", "tolerance");
    for o in &outcomes {
        println!(
            "{:<26} {:>7} {:>12.3e} {:>10.0e}  {}",
            o.name,
            o.trials,
            o.max_error,
            o.tolerance,
            if o.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::SelfCheck(format!("failed checks: {}", failed.join(", "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub coefficient: CoefficientMode,
    pub redistribution: RedistributionScheme,
    pub aggregate: Aggregate,
}

pub const GRID: [(CoefficientMode, RedistributionScheme); 6] = [
    (CoefficientMode::None, RedistributionScheme::Average),
    (CoefficientMode::None, RedistributionScheme::Center),
    (CoefficientMode::Layer, RedistributionScheme::Average),
    (CoefficientMode::Layer, RedistributionScheme::Center),
    (CoefficientMode::Edge, RedistributionScheme::Average),
    (CoefficientMode::Edge, RedistributionScheme::Center),
];

fn mode_name(m: CoefficientMode) -> &'static str {
    match m {
        CoefficientMode::None => "none",
        CoefficientMode::Layer => "layer",
        CoefficientMode::Edge => "edge",
    }
}

fn scheme_name(s: RedistributionScheme) -> &'static str {
    match s {
        RedistributionScheme::Average => "average",
        RedistributionScheme::Center => "center",
    }
}

/// Runs the coefficient × redistribution grid over all seeds. The
/// coefficient and redistribution of `cfg.train` are ignored.
pub fn cmd_ablate(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let loaded = load(cfg)?;
    if let Some(out) = &cfg.out {
        write_effective_config(cfg, out)?;
    }
    let mut rows = Vec::with_capacity(GRID.len());
    for (coefficient, redistribution) in GRID {
        if !quiet {
            println!("== coefficient {} / redistribution {}", mode_name(coefficient), scheme_name(redistribution));
        }
        let train_cfg = TrainConfig {
            coefficient,
            redistribution,
            ..cfg.train.clone()
        };
        let out = cfg
            .out
            .as_ref()
            .map(|o| o.join(format!("{}-{}", mode_name(coefficient), scheme_name(redistribution))));
        let aggregate = sweep(cfg, &loaded, &train_cfg, out.as_deref(), quiet)?;
        rows.push(AblationRow {
            coefficient,
            redistribution,
            aggregate,
        });
    }
    println!("{:<12} {:<15} {:>10} {:>8} {:>6}", "coefficient", "redistribution", "mean test", "std", "runs");
    for r in &rows {
        println!(
            "{:<12} {:<15} {:>10.2} {:>8.2} {:>6}",
            mode_name(r.coefficient),
            scheme_name(r.redistribution),
            100.0 * r.aggregate.mean_test_accuracy,
            100.0 * r.aggregate.std_test_accuracy,
            r.aggregate.runs
        );
    }
    if let Some(out) = &cfg.out {
        write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&rows).unwrap())?;
    }
    Ok(())
}

pub fn cmd_synth(params: &SyntheticParams, ratio: Option<[f64; 3]>, out: &Path, quiet: bool) -> Result<(), CliError> {
    let ds = generate_synthetic(params)?;
    let split = ratio.map(|[a, b, c]| ratio_split(&ds, a, b, c, params.seed)).transpose()?;
    save_generic(&ds, split.as_ref(), out)?;
    if !quiet {
        println!("wrote {} nodes, {} edges to {}", ds.num_nodes(), ds.graph.num_edges(), out.display());
    }
    println!("beta\t{:.4}", ds.graph.homophily_beta(&ds.labels)?);
    Ok(())
}
