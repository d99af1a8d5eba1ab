//! Datasets, splits, file formats and the synthetic graph generator.
//!
//! Two on-disk formats are supported:
//!
//! * citation format: `<name>.content` rows `node_id<TAB>f_1..f_k<TAB>class`
//!   and `<name>.cites` rows `cited_id<TAB>citing_id`;
//! * generic directory format: `edges.tsv` (two integer columns),
//!   `features.tsv` (one row of reals per node), `labels.tsv` (one integer
//!   per row), optional `split.tsv` (`node_id<TAB>train|val|test`) and
//!   optional `node_names.tsv`.
//!
//! Lines starting with `#` and blank lines are ignored everywhere.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{DenseMatrix, RngStreams, StreamPurpose};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: Graph,
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub node_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        graph: Graph,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        node_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.rows() != n || labels.len() != n {
            return Err(Error::Structural(format!(
                "{n} nodes but {} feature rows and {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Structural(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if node_names.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::Structural("node name count differs from node count".into()));
        }
        Ok(Self {
            graph,
            features,
            labels,
            num_classes,
            node_names,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    /// Copy whose nonzero feature rows sum to one.
    pub fn row_normalize_features(&self) -> Dataset {
        let mut out = self.clone();
        for i in 0..out.features.rows() {
            let row = out.features.row_mut(i);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                for x in row {
                    *x /= s;
                }
            }
        }
        out
    }
}

/// Labeled / validation / test partition. Nodes in none of the three sets
/// are unlabeled-only.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if i >= num_nodes {
                return Err(Error::Structural(format!("split node {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Structural(format!("node {i} appears in two split sets")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Per-node flag for membership in the labeled set.
    pub fn labeled_mask(&self, num_nodes: usize) -> Vec<bool> {
        let mut mask = vec![false; num_nodes];
        for &i in &self.train {
            mask[i] = true;
        }
        mask
    }
}

/// Counts reported by the citation loader.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Non-comment rows of the `.cites` file.
    pub citation_rows: usize,
    /// Rows naming an id missing from the `.content` file.
    pub skipped_citations: usize,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_citation(content_file: &Path, cites_file: &Path) -> Result<Dataset> {
    load_citation_with_stats(content_file, cites_file).map(|(d, _)| d)
}

pub fn load_citation_with_stats(content_file: &Path, cites_file: &Path) -> Result<(Dataset, LoadStats)> {
    let content = read(content_file)?;
    let mut names = Vec::new();
    let mut index = HashMap::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (line, row) in data_lines(&content) {
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() < 2 {
            return Err(parse_err(content_file, line, "expected id, features and class"));
        }
        let k = fields.len() - 2;
        match width {
            None => width = Some(k),
            Some(w) if w != k => {
                return Err(Error::Structural(format!(
                    "{}:{line}: {k} features, earlier rows have {w}",
                    content_file.display()
                )))
            }
            _ => {}
        }
        let id = fields[0].to_string();
        if index.insert(id.clone(), names.len()).is_some() {
            return Err(parse_err(content_file, line, format!("duplicate node id {id}")));
        }
        names.push(id);
        for f in &fields[1..=k] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(content_file, line, format!("bad feature value {f:?}")))?;
            data.push(v);
        }
        let next = class_ids.len();
        let class = *class_ids.entry(fields[k + 1].trim().to_string()).or_insert(next);
        labels.push(class);
    }
    let n = names.len();
    let features = DenseMatrix::from_vec(n, width.unwrap_or(0), data)?;

    let cites = read(cites_file)?;
    let mut stats = LoadStats::default();
    let mut edges = Vec::new();
    for (line, row) in data_lines(&cites) {
        let fields: Vec<&str> = row.split('\t').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(cites_file, line, "expected two ids"));
        }
        stats.citation_rows += 1;
        match (index.get(fields[0]), index.get(fields[1])) {
            (Some(&a), Some(&b)) => edges.push((a, b)),
            _ => stats.skipped_citations += 1,
        }
    }
    if stats.skipped_citations > 0 {
        log::warn!(
            "{}: skipped {} citations naming unknown ids",
            cites_file.display(),
            stats.skipped_citations
        );
    }
    let graph = Graph::build(n, &edges)?;
    let ds = Dataset::new(graph, features, labels, class_ids.len(), Some(names))?;
    Ok((ds, stats))
}

/// Finds `<name>.content` / `<name>.cites` given either the directory that
/// holds them or the common path prefix.
pub fn locate_citation_files(locator: &Path) -> Option<(PathBuf, PathBuf)> {
    let pair = |prefix: &Path| {
        let content = prefix.with_extension("content");
        let cites = prefix.with_extension("cites");
        (content.is_file() && cites.is_file()).then_some((content, cites))
    };
    if locator.is_dir() {
        let entries = fs::read_dir(locator).ok()?;
        let mut contents: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "content"))
            .collect();
        contents.sort();
        contents.iter().find_map(|p| pair(p))
    } else {
        pair(locator)
    }
}

/// A dataset read from disk in either supported format.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Present for generic directories that ship a `split.tsv`.
    pub split: Option<Split>,
    /// Present for citation-format datasets.
    pub stats: Option<LoadStats>,
}

/// Loads a generic directory (recognized by `labels.tsv`) or a
/// citation-format dataset located by [`locate_citation_files`].
pub fn load_dataset(locator: &Path) -> Result<Loaded> {
    if locator.join("labels.tsv").is_file() {
        let (dataset, split) = load_generic(locator)?;
        return Ok(Loaded {
            dataset,
            split,
            stats: None,
        });
    }
    match locate_citation_files(locator) {
        Some((content, cites)) => {
            let (dataset, stats) = load_citation_with_stats(&content, &cites)?;
            Ok(Loaded {
                dataset,
                split: None,
                stats: Some(stats),
            })
        }
        None => Err(Error::Config(format!("no dataset found at {}", locator.display()))),
    }
}

fn parse_usize(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("expected a non-negative integer, got {s:?}")))
}

/// Loads a generic-format directory, returning the split when `split.tsv`
/// is present.
pub fn load_generic(dir: &Path) -> Result<(Dataset, Option<Split>)> {
    let labels_path = dir.join("labels.tsv");
    let labels_text = read(&labels_path)?;
    let mut labels = Vec::new();
    for (line, row) in data_lines(&labels_text) {
        labels.push(parse_usize(&labels_path, line, row)?);
    }
    let n = labels.len();

    let features_path = dir.join("features.tsv");
    let features_text = read(&features_path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, row) in data_lines(&features_text) {
        let start = data.len();
        for f in row.split('\t') {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(&features_path, line, format!("bad feature value {f:?}")))?,
            );
        }
        let k = data.len() - start;
        if *width.get_or_insert(k) != k {
            return Err(Error::Structural(format!(
                "{}:{line}: inconsistent feature width",
                features_path.display()
            )));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Structural(format!("{rows} feature rows for {n} labels")));
    }
    let features = DenseMatrix::from_vec(n, width.unwrap_or(0), data)?;

    let edges_path = dir.join("edges.tsv");
    let edges_text = read(&edges_path)?;
    let mut edges = Vec::new();
    for (line, row) in data_lines(&edges_text) {
        let f: Vec<&str> = row.split('\t').collect();
        if f.len() != 2 {
            return Err(parse_err(&edges_path, line, "expected two columns"));
        }
        edges.push((parse_usize(&edges_path, line, f[0])?, parse_usize(&edges_path, line, f[1])?));
    }
    let graph = Graph::build(n, &edges)?;

    let names_path = dir.join("node_names.tsv");
    let node_names = if names_path.is_file() {
        Some(data_lines(&read(&names_path)?).map(|(_, l)| l.to_string()).collect())
    } else {
        None
    };

    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = Dataset::new(graph, features, labels, num_classes, node_names)?;

    let split_path = dir.join("split.tsv");
    let split = if split_path.is_file() {
        let mut split = Split::default();
        for (line, row) in data_lines(&read(&split_path)?) {
            let f: Vec<&str> = row.split('\t').map(str::trim).collect();
            if f.len() != 2 {
                return Err(parse_err(&split_path, line, "expected node id and set name"));
            }
            let node = parse_usize(&split_path, line, f[0])?;
            match f[1] {
                "train" => split.train.push(node),
                "val" => split.validation.push(node),
                "test" => split.test.push(node),
                other => return Err(parse_err(&split_path, line, format!("unknown set {other:?}"))),
            }
        }
        split.validate(n)?;
        Some(split)
    } else {
        None
    };
    Ok((ds, split))
}

/// Writes `ds` (and optionally a split) in the generic directory format.
/// Output is byte-identical for identical inputs.
pub fn save_generic(ds: &Dataset, split: Option<&Split>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))
    };
    let mut s = String::new();
    for &(j, k) in ds.graph.edges() {
        writeln!(s, "{j}\t{k}").unwrap();
    }
    write("edges.tsv", s)?;

    let mut s = String::new();
    for i in 0..ds.num_nodes() {
        let row = ds.features.row(i);
        for (c, x) in row.iter().enumerate() {
            if c > 0 {
                s.push('\t');
            }
            write!(s, "{x}").unwrap();
        }
        s.push('\n');
    }
    write("features.tsv", s)?;

    let mut s = String::new();
    for y in &ds.labels {
        writeln!(s, "{y}").unwrap();
    }
    write("labels.tsv", s)?;

    if let Some(names) = &ds.node_names {
        write("node_names.tsv", names.iter().map(|n| format!("{n}\n")).collect())?;
    }
    if let Some(split) = split {
        let mut s = String::new();
        for (set, name) in [(&split.train, "train"), (&split.validation, "val"), (&split.test, "test")] {
            for i in set {
                writeln!(s, "{i}\t{name}").unwrap();
            }
        }
        write("split.tsv", s)?;
    }
    Ok(())
}

/// Random Planetoid-style split: `per_class` labeled nodes of every class,
/// then `num_val` and `num_test` nodes from the remainder.
pub fn planetoid_split(ds: &Dataset, per_class: usize, num_val: usize, num_test: usize, seed: u64) -> Result<Split> {
    let mut rng = RngStreams::new(seed).stream(StreamPurpose::Split, 0);
    let mut train = Vec::with_capacity(per_class * ds.num_classes);
    let mut taken = vec![false; ds.num_nodes()];
    for (class, mut members) in ds.class_members().into_iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::Config(format!(
                "class {class} has {} members, {per_class} required",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..per_class] {
            taken[i] = true;
            train.push(i);
        }
    }
    let mut pool: Vec<usize> = (0..ds.num_nodes()).filter(|&i| !taken[i]).collect();
    if pool.len() < num_val + num_test {
        return Err(Error::Config(format!(
            "{} nodes remain after the labeled set, {} requested for validation and test",
            pool.len(),
            num_val + num_test
        )));
    }
    pool.shuffle(&mut rng);
    let validation = pool[..num_val].to_vec();
    let test = pool[num_val..num_val + num_test].to_vec();
    train.sort_unstable();
    Ok(Split {
        train,
        validation,
        test,
    })
}

/// Uniform unstratified split by fractions. Sizes are floored; when the
/// fractions sum to one the leftover nodes go to the test set.
pub fn ratio_split(ds: &Dataset, train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Split> {
    let fracs = [train_frac, val_frac, test_frac];
    if fracs.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fracs.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    let n = ds.num_nodes();
    let n_train = (train_frac * n as f64).floor() as usize;
    let n_val = (val_frac * n as f64).floor() as usize;
    let mut n_test = (test_frac * n as f64).floor() as usize;
    if (total - 1.0).abs() <= 1e-9 {
        n_test = n - n_train - n_val;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStreams::new(seed).stream(StreamPurpose::Split, 1));
    Ok(Split {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..n_train + n_val + n_test].to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub edges_per_node: usize,
    pub homophily_target: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

const LABEL_ATTEMPTS: u64 = 16;

/// Labeled random graph whose edges join same-label nodes with probability
/// `homophily_target`, with noisy one-hot class features.
pub fn generate_synthetic(p: &SyntheticParams) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&p.homophily_target) {
        return Err(Error::Config("homophily target must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&p.feature_noise) {
        return Err(Error::Config("feature noise must lie in [0, 1]".into()));
    }
    if p.num_classes == 0 || p.num_nodes == 0 {
        return Err(Error::Config("synthetic graph needs nodes and classes".into()));
    }
    if p.num_classes == 1 && p.homophily_target < 1.0 && p.edges_per_node > 0 {
        return Err(Error::Config("cross-class partners requested with a single class".into()));
    }
    let streams = RngStreams::new(p.seed);
    let mut labels = Vec::new();
    let mut members = Vec::new();
    let mut ok = false;
    for attempt in 0..LABEL_ATTEMPTS {
        let mut rng = streams.stream(StreamPurpose::Synthetic, attempt);
        labels = (0..p.num_nodes).map(|_| rng.gen_range(0..p.num_classes)).collect::<Vec<_>>();
        members = vec![Vec::new(); p.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            members[y].push(i);
        }
        let same_ok = p.homophily_target == 0.0 || members.iter().all(|m| m.len() != 1);
        let cross_ok = p.homophily_target == 1.0 || members.iter().filter(|m| !m.is_empty()).count() > 1;
        if p.edges_per_node == 0 || (same_ok && cross_ok) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(Error::Config(format!(
            "could not draw labels supporting the partner requests in {LABEL_ATTEMPTS} attempts"
        )));
    }

    let mut rng = streams.stream(StreamPurpose::Synthetic, LABEL_ATTEMPTS);
    let mut edges = Vec::with_capacity(p.num_nodes * p.edges_per_node);
    for i in 0..p.num_nodes {
        let y = labels[i];
        for _ in 0..p.edges_per_node {
            let same = rng.gen::<f64>() < p.homophily_target;
            let partner = if same {
                let pool = &members[y];
                // pool has ≥ 2 members, so some index differs from i
                loop {
                    let j = pool[rng.gen_range(0..pool.len())];
                    if j != i {
                        break j;
                    }
                }
            } else {
                let other: Vec<usize> = (0..p.num_classes).filter(|&c| c != y && !members[c].is_empty()).collect();
                let c = other[rng.gen_range(0..other.len())];
                members[c][rng.gen_range(0..members[c].len())]
            };
            edges.push((i, partner));
        }
    }
    let graph = Graph::build(p.num_nodes, &edges)?;

    let mut features = DenseMatrix::zeros(p.num_nodes, p.feature_dim);
    for i in 0..p.num_nodes {
        for (d, x) in features.row_mut(i).iter_mut().enumerate() {
            let signal = d % p.num_classes == labels[i];
            let flip = rng.gen::<f64>() < p.feature_noise;
            *x = if signal != flip { 1.0 } else { 0.0 };
        }
    }
    Dataset::new(graph, features, labels, p.num_classes, None)
}

/// Set view used in tests and reports.
pub fn as_set(ids: &[usize]) -> BTreeSet<usize> {
    ids.iter().copied().collect()
}
