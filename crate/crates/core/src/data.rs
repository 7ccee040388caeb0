//! Node-classification datasets: the four-file on-disk format, summary
//! statistics and a stochastic-block-model generator.
//!
//! A dataset directory holds:
//!
//! | file          | content                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `edges.tsv`   | `src<TAB>dst[<TAB>weight]` per line, weight defaults to 1 |
//! | `features.csv`| `n` rows of `d0` comma-separated reals                    |
//! | `labels.txt`  | `n` non-negative integers, one per line                   |
//! | `splits.json` | `{"train": [...], "valid": [...], "test": [...]}`         |
//!
//! Edges may list each undirected edge once or in both directions.
//! `splits.json` may also carry `"num_classes"`, in which case every label
//! must be below it.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GsanError, Result};
use crate::graph::{build_graph, Graph};

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub train: Vec<bool>,
    pub valid: Vec<bool>,
    pub test: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    /// Validates shapes and mask disjointness.
    pub fn new(
        name: impl Into<String>,
        graph: Graph,
        features: Array2<f64>,
        labels: Vec<usize>,
        train: Vec<bool>,
        valid: Vec<bool>,
        test: Vec<bool>,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if features.nrows() != n {
            return Err(GsanError::ShapeMismatch(format!(
                "{} feature rows for {n} nodes",
                features.nrows()
            )));
        }
        if labels.len() != n {
            return Err(GsanError::ShapeMismatch(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        for (mask, split) in [(&train, "train"), (&valid, "valid"), (&test, "test")] {
            if mask.len() != n {
                return Err(GsanError::ShapeMismatch(format!(
                    "{split} mask has length {} for {n} nodes",
                    mask.len()
                )));
            }
        }
        for node in 0..n {
            let hits: Vec<&'static str> = [(&train, "train"), (&valid, "valid"), (&test, "test")]
                .iter()
                .filter(|(m, _)| m[node])
                .map(|(_, s)| *s)
                .collect();
            if hits.len() > 1 {
                return Err(GsanError::MaskOverlap {
                    node,
                    first: hits[0],
                    second: hits[1],
                });
            }
        }
        Ok(Self {
            name: name.into(),
            graph,
            features,
            labels,
            train,
            valid,
            test,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn mask(&self, split: Split) -> &[bool] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// SHA-256 over a canonical encoding of edges, features, labels and masks.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"gsan-dataset-v1");
        h.update((self.num_nodes() as u64).to_le_bytes());
        for (i, j, w) in self.graph.edges() {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
            h.update(w.to_bits().to_le_bytes());
        }
        h.update((self.features.ncols() as u64).to_le_bytes());
        for v in self.features.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for mask in [&self.train, &self.valid, &self.test] {
            h.update(mask.iter().map(|&m| m as u8).collect::<Vec<_>>());
        }
        hex::encode(h.finalize())
    }

    /// Node relabeling `i -> perm[i]` applied to every component.
    pub fn permute(&self, perm: &[usize]) -> Result<Dataset> {
        let n = self.num_nodes();
        let graph = self.graph.permute(perm)?;
        let mut features = Array2::zeros(self.features.raw_dim());
        let mut labels = vec![0; n];
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).assign(&self.features.row(old));
            labels[new] = self.labels[old];
            masks[0][new] = self.train[old];
            masks[1][new] = self.valid[old];
            masks[2][new] = self.test[old];
        }
        let [train, valid, test] = masks;
        Dataset::new(
            self.name.clone(),
            graph,
            features,
            labels,
            train,
            valid,
            test,
        )
    }
}

/// Divides each feature row by its L1 norm; all-zero rows stay zero.
pub fn row_normalize(features: &Array2<f64>) -> Array2<f64> {
    let mut out = features.clone();
    for mut row in out.rows_mut() {
        let norm: f64 = row.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitsFile {
    train: Vec<usize>,
    #[serde(alias = "val")]
    valid: Vec<usize>,
    test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
}

fn require(dir: &Path, file: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(GsanError::MissingFile(path));
    }
    Ok(path)
}

fn parse_err(file: &Path, line: usize, reason: impl Into<String>) -> GsanError {
    GsanError::ParseError {
        file: file.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_real(file: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("'{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(file, line, format!("'{field}' is not finite")));
    }
    Ok(v)
}

fn parse_index(file: &Path, line: usize, field: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("'{field}' is not a node index")))
}

/// Non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let edges_path = require(dir, EDGES_FILE)?;
    let features_path = require(dir, FEATURES_FILE)?;
    let labels_path = require(dir, LABELS_FILE)?;
    let splits_path = require(dir, SPLITS_FILE)?;

    let mut labels = Vec::new();
    for (line, text) in content_lines(&fs::read_to_string(&labels_path)?) {
        let label = parse_index(&labels_path, line, text)
            .map_err(|_| parse_err(&labels_path, line, format!("'{text}' is not a class label")))?;
        labels.push(label);
    }
    let n = labels.len();

    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (line, text) in content_lines(&fs::read_to_string(&features_path)?) {
        let before = values.len();
        for field in text.split(',') {
            values.push(parse_real(&features_path, line, field)?);
        }
        let w = values.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(
                    &features_path,
                    line,
                    format!("row has {w} columns, expected {expected}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    if rows != n {
        return Err(GsanError::ShapeMismatch(format!(
            "{FEATURES_FILE} has {rows} rows but {LABELS_FILE} has {n} labels"
        )));
    }
    let features = Array2::from_shape_vec((n, width.unwrap_or(0)), values)
        .map_err(|e| GsanError::ShapeMismatch(e.to_string()))?;

    let mut edges = Vec::new();
    for (line, text) in content_lines(&fs::read_to_string(&edges_path)?) {
        let fields: Vec<&str> = text.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(
                &edges_path,
                line,
                format!(
                    "expected 2 or 3 tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let i = parse_index(&edges_path, line, fields[0])?;
        let j = parse_index(&edges_path, line, fields[1])?;
        let w = match fields.get(2) {
            Some(f) => parse_real(&edges_path, line, f)?,
            None => 1.0,
        };
        edges.push((i, j, w));
    }
    let graph = build_graph(n, &edges)?;

    let splits: SplitsFile = serde_json::from_str(&fs::read_to_string(&splits_path)?)
        .map_err(|e| parse_err(&splits_path, e.line(), e.to_string()))?;
    if let Some(classes) = splits.num_classes {
        if let Some((node, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(GsanError::LabelOutOfRange {
                node,
                label,
                classes,
            });
        }
    }
    let to_mask = |idx: &[usize]| -> Result<Vec<bool>> {
        let mut mask = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(GsanError::IndexOutOfRange { index: i, bound: n });
            }
            mask[i] = true;
        }
        Ok(mask)
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(
        name,
        graph,
        features,
        labels,
        to_mask(&splits.train)?,
        to_mask(&splits.valid)?,
        to_mask(&splits.test)?,
    )
}

/// Writes `dataset` in the four-file format; `load_dataset` reads it back
/// bit-exactly.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    use std::fmt::Write;

    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for (i, j, w) in dataset.graph.edges() {
        if w == 1.0 {
            writeln!(edges, "{i}\t{j}").expect("string write");
        } else {
            writeln!(edges, "{i}\t{j}\t{w:?}").expect("string write");
        }
    }
    fs::write(dir.join(EDGES_FILE), edges)?;

    let mut features = String::new();
    for row in dataset.features.rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        features.push_str(&fields.join(","));
        features.push('\n');
    }
    fs::write(dir.join(FEATURES_FILE), features)?;

    let mut labels = String::new();
    for l in &dataset.labels {
        writeln!(labels, "{l}").expect("string write");
    }
    fs::write(dir.join(LABELS_FILE), labels)?;

    let indices = |m: &[bool]| -> Vec<usize> {
        m.iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    };
    let splits = SplitsFile {
        train: indices(&dataset.train),
        valid: indices(&dataset.valid),
        test: indices(&dataset.test),
        num_classes: None,
    };
    let mut json = serde_json::to_string_pretty(&splits).expect("serializable");
    json.push('\n');
    fs::write(dir.join(SPLITS_FILE), json)?;
    Ok(())
}

/// Fraction of undirected edges whose endpoints share a label.
pub fn edge_homophily(dataset: &Dataset) -> Result<f64> {
    let mut total = 0usize;
    let mut same = 0usize;
    for (i, j, _) in dataset.graph.edges() {
        total += 1;
        if dataset.labels[i] == dataset.labels[j] {
            same += 1;
        }
    }
    if total == 0 {
        return Err(GsanError::NoEdges);
    }
    Ok(same as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub classes: usize,
    pub nodes: usize,
    /// Undirected edges, each counted once.
    pub edges: usize,
    /// `None` when the graph has no edges.
    pub homophily: Option<f64>,
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    DatasetStats {
        classes: dataset.num_classes(),
        nodes: dataset.num_nodes(),
        edges: dataset.graph.num_edges(),
        homophily: edge_homophily(dataset).ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub nodes: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Norm of each class mean; features are mean plus unit Gaussian noise.
    pub signal_strength: f64,
    pub seed: u64,
}

/// Stochastic block model with class-shifted Gaussian features.
///
/// Node `i` belongs to class `i mod K`. Within each class, nodes are dealt in
/// index order into train/valid/test following a repeating 1:2:7 pattern.
pub fn generate_sbm(params: &SbmParams) -> Result<Dataset> {
    let SbmParams {
        nodes: n,
        classes: k,
        p_in,
        p_out,
        feature_dim,
        signal_strength,
        seed,
    } = *params;
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(GsanError::InvalidProbability(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in = {p_in}, p_out = {p_out}"
        )));
    }
    if k < 2 {
        return Err(GsanError::InvalidArgument(format!(
            "a block model needs at least 2 classes, got {k}"
        )));
    }
    if n < k || feature_dim == 0 {
        return Err(GsanError::InvalidArgument(format!(
            "need nodes >= classes and feature_dim > 0, got {n} nodes, {k} classes, {feature_dim} features"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j, 1.0));
            }
        }
    }
    let graph = build_graph(n, &edges)?;

    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let dir: Vec<f64> = (0..feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            dir.into_iter()
                .map(|v| signal_strength * v / norm)
                .collect()
        })
        .collect();
    let mut features = Array2::zeros((n, feature_dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = means[labels[i]][c] + rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut train = vec![false; n];
    let mut valid = vec![false; n];
    let mut test = vec![false; n];
    let mut seen = vec![0usize; k];
    for i in 0..n {
        let slot = seen[labels[i]] % 10;
        seen[labels[i]] += 1;
        match slot {
            0 => train[i] = true,
            1 | 2 => valid[i] = true,
            _ => test[i] = true,
        }
    }
    Dataset::new(
        format!("sbm-n{n}-k{k}-pin{p_in}-pout{p_out}-seed{seed}"),
        graph,
        features,
        labels,
        train,
        valid,
        test,
    )
}
