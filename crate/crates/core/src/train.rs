//! Optimization: Glorot init, Adam, the early-stopped training loop,
//! evaluation and grid search.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{row_normalize, Dataset};
use crate::error::{mismatch, GsanError, Result};
use crate::model::{forward, Dropout, GraphOperators, HeadDiagnostics, Model, ModelConfig};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer, schedule and model settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Scale each feature row to unit L1 norm before training. Off by
    /// default: with L2-form decay under Adam, the shrunken inputs leave the
    /// attention network's gradients below the decay term and the weights
    /// collapse toward zero.
    pub row_normalize: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            weight_decay: 5e-4,
            max_epochs: 2000,
            patience: 100,
            dropout: 0.5,
            seed: 0,
            row_normalize: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GsanError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| GsanError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Uniform Glorot initialization drawn from `rng`.
pub fn glorot_init_with(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Uniform on `[-sqrt(6 / (rows + cols)), +sqrt(6 / (rows + cols))]`.
pub fn glorot_init(rows: usize, cols: usize, seed: u64) -> Result<Array2<f64>> {
    if rows == 0 || cols == 0 {
        return Err(GsanError::InvalidArgument(format!(
            "glorot_init needs positive dimensions, got {rows}x{cols}"
        )));
    }
    Ok(glorot_init_with(
        rows,
        cols,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas: ADAM_BETAS,
            eps: ADAM_EPS,
            weight_decay,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with classic L2 weight decay.
pub fn adam_step(
    params: &mut [&mut Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GsanError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.dim() != g.dim() || p.dim() != m.dim() {
            return Err(GsanError::ShapeMismatch(format!(
                "parameter {:?}, gradient {:?}, moment {:?}",
                p.dim(),
                g.dim(),
                m.dim()
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = hyper.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                let g = g + hyper.weight_decay * *p;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            });
    }
    Ok(())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of masked rows whose argmax equals the label.
pub fn accuracy(logits: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(mismatch(
            "accuracy rows",
            logits.nrows(),
            format!("{} labels / {} mask entries", labels.len(), mask.len()),
        ));
    }
    let pred = argmax_rows(logits);
    let mut total = 0usize;
    let mut correct = 0usize;
    for i in 0..labels.len() {
        if mask[i] {
            total += 1;
            correct += (pred[i] == labels[i]) as usize;
        }
    }
    if total == 0 {
        return Err(GsanError::EmptyMask);
    }
    Ok(correct as f64 / total as f64)
}

fn masked_loss(logits: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.masked_cross_entropy(l, labels, mask)?;
    Ok(tape.value(loss)[[0, 0]])
}

/// Features as the model sees them under `config`.
pub fn prepared_features(dataset: &Dataset, config: &TrainConfig) -> Array2<f64> {
    if config.row_normalize {
        row_normalize(&dataset.features)
    } else {
        dataset.features.clone()
    }
}

/// Evaluation-mode logits of `model` on `dataset`.
pub fn predict(
    model: &Model,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(Array2<f64>, Vec<HeadDiagnostics>)> {
    let ops = GraphOperators::new(&dataset.graph, &config.model)?;
    model.predict(&prepared_features(dataset, config), &ops, &config.model)
}

/// Accuracy of `model` on the nodes selected by `mask`.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    mask: &[bool],
    config: &TrainConfig,
) -> Result<f64> {
    if !mask.iter().any(|&m| m) {
        return Err(GsanError::EmptyMask);
    }
    let (logits, _) = predict(model, dataset, config)?;
    accuracy(&logits, &dataset.labels, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss of the dropout forward pass that produced the update.
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub config: TrainConfig,
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_acc: f64,
    pub best_valid_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub epochs_run: usize,
    pub seed: u64,
    /// Attention weights at the best epoch; empty for the GCN baseline.
    pub diagnostics: Vec<HeadDiagnostics>,
}

/// Trains with Adam and early stopping on validation accuracy.
///
/// An epoch improves on the best so far when its validation accuracy is
/// higher, or equal with a lower validation loss. Training stops once
/// `patience` epochs have passed since the best one.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    for mask in [&dataset.train, &dataset.valid, &dataset.test] {
        if !mask.iter().any(|&m| m) {
            return Err(GsanError::EmptyMask);
        }
    }
    let classes = dataset.num_classes();
    let features = prepared_features(dataset, config);
    let ops = GraphOperators::new(&dataset.graph, &config.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(&config.model, features.ncols(), classes, &mut rng)?;
    let mut adam = AdamState::zeros_like(
        &model
            .named_params()
            .into_iter()
            .map(|(_, p)| p)
            .collect::<Vec<_>>(),
    );
    let hyper = AdamHyper::new(config.learning_rate, config.weight_decay);

    let mut curves = Vec::new();
    let mut best: Option<(usize, f64, f64, Model, Vec<HeadDiagnostics>)> = None;

    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(features.clone());
        let dropout = Dropout {
            rate: config.dropout,
            rng: &mut rng,
        };
        let out = forward(&mut tape, &vars, &ops, x, &config.model, Some(dropout))?;
        let loss = tape.masked_cross_entropy(out.logits, &dataset.labels, &dataset.train)?;
        let train_loss = tape.value(loss)[[0, 0]];
        if !train_loss.is_finite() {
            return Err(GsanError::NonFiniteLoss {
                epoch,
                loss: train_loss,
            });
        }
        tape.backward(loss)?;
        let grads: Vec<Array2<f64>> = vars
            .tensors()
            .into_iter()
            .map(|t| {
                tape.grad(t)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.value(t).raw_dim()))
            })
            .collect();
        drop(tape);
        adam_step(&mut model.params_mut(), &grads, &mut adam, hyper)?;

        let (logits, diags) = model.predict(&features, &ops, &config.model)?;
        let valid_loss = masked_loss(&logits, &dataset.labels, &dataset.valid)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_acc: accuracy(&logits, &dataset.labels, &dataset.train)?,
            valid_loss,
            valid_acc: accuracy(&logits, &dataset.labels, &dataset.valid)?,
        };
        let improved = match &best {
            None => true,
            Some((_, acc, vloss, _, _)) => {
                record.valid_acc > *acc || (record.valid_acc == *acc && record.valid_loss < *vloss)
            }
        };
        if improved {
            best = Some((
                epoch,
                record.valid_acc,
                record.valid_loss,
                model.clone(),
                diags,
            ));
        }
        curves.push(record);
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= config.patience {
            break;
        }
    }

    let (best_epoch, best_valid_acc, best_valid_loss, model, diagnostics) =
        best.expect("at least one epoch runs");
    let (logits, _) = model.predict(&features, &ops, &config.model)?;
    Ok(FitResult {
        config: config.clone(),
        best_epoch,
        best_valid_acc,
        best_valid_loss,
        train_acc: accuracy(&logits, &dataset.labels, &dataset.train)?,
        test_acc: accuracy(&logits, &dataset.labels, &dataset.test)?,
        test_loss: masked_loss(&logits, &dataset.labels, &dataset.test)?,
        epochs_run: curves.len(),
        seed: config.seed,
        curves,
        model,
        diagnostics,
    })
}

/// Test accuracy over independent seeds `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeatSummary {
    pub seeds: Vec<u64>,
    pub test_acc: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
}

pub fn fit_repeated(dataset: &Dataset, config: &TrainConfig, runs: usize) -> Result<RepeatSummary> {
    if runs == 0 {
        return Err(GsanError::InvalidArgument(
            "at least one run is required".into(),
        ));
    }
    let seeds: Vec<u64> = (0..runs as u64).map(|i| config.seed + i).collect();
    let test_acc = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            fit(dataset, &cfg).map(|r| r.test_acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = test_acc.iter().sum::<f64>() / runs as f64;
    let std = if runs > 1 {
        (test_acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(RepeatSummary {
        seeds,
        test_acc,
        mean,
        std,
    })
}

/// Candidate values per axis. Absent optional axes keep the base config's
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub heads: Vec<usize>,
    pub residual_alpha: Vec<f64>,
    pub head_width: Vec<usize>,
    pub learning_rate: Option<Vec<f64>>,
    pub dropout: Option<Vec<f64>>,
    pub weight_decay: Option<Vec<f64>>,
    pub q: Option<Vec<f64>>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            heads: vec![2, 4, 8],
            residual_alpha: vec![0.1, 0.5, 1.0],
            head_width: vec![8, 16, 32],
            learning_rate: None,
            dropout: None,
            weight_decay: None,
            q: None,
        }
    }
}

impl Grid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GsanError::InvalidConfig(e.to_string()))
    }

    /// Cartesian product in iteration order: `heads` varies slowest, `q`
    /// fastest.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        fn axis<T: Clone>(name: &str, values: Option<&Vec<T>>, fallback: T) -> Result<Vec<T>> {
            match values {
                Some(v) if v.is_empty() => Err(GsanError::EmptyGrid(name.into())),
                Some(v) => Ok(v.clone()),
                None => Ok(vec![fallback]),
            }
        }
        let heads = axis("heads", Some(&self.heads), base.model.heads)?;
        let alphas = axis(
            "residual_alpha",
            Some(&self.residual_alpha),
            base.model.residual_alpha,
        )?;
        let widths = axis("head_width", Some(&self.head_width), base.model.head_width)?;
        let lrs = axis(
            "learning_rate",
            self.learning_rate.as_ref(),
            base.learning_rate,
        )?;
        let drops = axis("dropout", self.dropout.as_ref(), base.dropout)?;
        let wds = axis(
            "weight_decay",
            self.weight_decay.as_ref(),
            base.weight_decay,
        )?;
        let qs = axis("q", self.q.as_ref(), base.model.q)?;

        let mut out = Vec::new();
        for &h in &heads {
            for &a in &alphas {
                for &w in &widths {
                    for &lr in &lrs {
                        for &d in &drops {
                            for &wd in &wds {
                                for &q in &qs {
                                    let mut cfg = base.clone();
                                    cfg.model.heads = h;
                                    cfg.model.residual_alpha = a;
                                    cfg.model.head_width = w;
                                    cfg.learning_rate = lr;
                                    cfg.dropout = d;
                                    cfg.weight_decay = wd;
                                    cfg.model.q = q;
                                    out.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub config: TrainConfig,
    /// `Err` holds the message of a run that aborted, e.g. on a non-finite loss.
    pub outcome: std::result::Result<FitResult, String>,
    pub wall_time_secs: f64,
}

impl GridRow {
    pub fn valid_acc(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.best_valid_acc)
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best_index: usize,
    pub rows: Vec<GridRow>,
}

impl GridOutcome {
    pub fn best(&self) -> &FitResult {
        self.rows[self.best_index]
            .outcome
            .as_ref()
            .expect("best row succeeded")
    }

    pub fn best_config(&self) -> &TrainConfig {
        &self.rows[self.best_index].config
    }
}

/// Exhaustive sweep; the best point has the highest validation accuracy,
/// earliest in iteration order among ties. Points run in parallel.
pub fn grid_search(dataset: &Dataset, base: &TrainConfig, grid: &Grid) -> Result<GridOutcome> {
    let points = grid.points(base)?;
    for p in &points {
        p.validate()?;
    }
    let rows: Vec<GridRow> = points
        .into_par_iter()
        .map(|config| {
            let start = Instant::now();
            let outcome = fit(dataset, &config).map_err(|e| e.to_string());
            GridRow {
                config,
                outcome,
                wall_time_secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    let mut best_index: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(acc) = row.valid_acc() {
            if best_index.is_none_or(|b| acc > rows[b].valid_acc().expect("best succeeded")) {
                best_index = Some(i);
            }
        }
    }
    match best_index {
        Some(best_index) => Ok(GridOutcome { best_index, rows }),
        None => Err(GsanError::InvalidArgument(format!(
            "every grid point failed; first error: {}",
            rows[0].outcome.as_ref().expect_err("failed")
        ))),
    }
}

/// Column order of [`write_grid_table`].
pub const GRID_TABLE_HEADER: &str = "index,heads,residual_alpha,head_width,learning_rate,dropout,weight_decay,q,valid_acc,test_acc,epochs,best_epoch,wall_time_s,status";

pub fn grid_table(outcome: &GridOutcome) -> String {
    let mut out = String::from(GRID_TABLE_HEADER);
    out.push('\n');
    for (i, row) in outcome.rows.iter().enumerate() {
        let c = &row.config;
        let _ = write!(
            out,
            "{i},{},{},{},{},{},{},{},",
            c.model.heads,
            c.model.residual_alpha,
            c.model.head_width,
            c.learning_rate,
            c.dropout,
            c.weight_decay,
            c.model.q
        );
        match &row.outcome {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.3},ok",
                    r.best_valid_acc, r.test_acc, r.epochs_run, r.best_epoch, row.wall_time_secs
                );
            }
            Err(e) => {
                let _ = writeln!(
                    out,
                    ",,,,{:.3},\"failed: {}\"",
                    row.wall_time_secs,
                    e.replace('"', "'")
                );
            }
        }
    }
    out
}

pub fn write_grid_table(outcome: &GridOutcome, path: &Path) -> Result<()> {
    std::fs::write(path, grid_table(outcome))?;
    Ok(())
}

/// Per-epoch curves as CSV.
pub fn curves_table(result: &FitResult) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,valid_loss,valid_acc\n");
    for r in &result.curves {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?}",
            r.epoch, r.train_loss, r.train_acc, r.valid_loss, r.valid_acc
        );
    }
    out
}
