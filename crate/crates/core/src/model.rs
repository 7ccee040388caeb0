//! The scattering attention network and a two-layer GCN baseline.
//!
//! One GSAN forward pass is: per head, transform the input once
//! (`Hbar = H Theta`), filter it through `C_gcn` powers of the normalized
//! adjacency and a set of scattering paths, score every channel against
//! `Hbar` with a shared attention vector, softmax the scores across channels
//! per node, and average the weighted channels through a ReLU. Heads are
//! concatenated, smoothed by the residual operator, and mapped to class
//! logits by two linear layers.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{mismatch, GsanError, Result};
use crate::graph::{
    lazy_random_walk, normalized_adjacency, residual_operator, Graph, SparseOperator,
};
use crate::scattering::{ScatteringPath, WaveletBank};
use crate::train::glorot_init_with;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Gsan,
    Gcn,
}

/// Shape and filter hyperparameters shared by both architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Number of attention heads.
    pub heads: usize,
    /// Output width of each head.
    pub head_width: usize,
    pub residual_alpha: f64,
    /// Moment applied to scattering channels, `|U_p Hbar|^q`.
    pub q: f64,
    pub gcn_channels: usize,
    pub paths: Vec<ScatteringPath>,
    pub leaky_slope: f64,
    /// Width between the residual and output layers; defaults to
    /// `heads * head_width`.
    pub hidden_width: Option<usize>,
    /// Biases on the residual and output layers.
    pub bias: bool,
    /// Hidden width of the GCN baseline.
    pub gcn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Gsan,
            heads: 4,
            head_width: 16,
            residual_alpha: 0.5,
            q: 4.0,
            gcn_channels: 3,
            paths: (1..=3).map(ScatteringPath::first_order).collect(),
            leaky_slope: 0.2,
            hidden_width: None,
            bias: false,
            gcn_hidden: 16,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.gcn_channels + self.paths.len()
    }

    pub fn multi_head_width(&self) -> usize {
        self.heads * self.head_width
    }

    pub fn mid_width(&self) -> usize {
        self.hidden_width.unwrap_or_else(|| self.multi_head_width())
    }

    pub fn max_wavelet_order(&self) -> usize {
        self.paths.iter().map(|p| p.max_order()).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GsanError::InvalidConfig(msg));
        match self.architecture {
            Architecture::Gsan => {
                if self.heads == 0 {
                    return Err(GsanError::EmptyHeadList);
                }
                if self.head_width == 0 {
                    return bad("head_width must be positive".into());
                }
                if self.gcn_channels == 0 {
                    return bad("gcn_channels must be at least 1".into());
                }
                if !(self.q > 0.0) {
                    return bad(format!("q must be positive, got {}", self.q));
                }
                if self.mid_width() == 0 {
                    return bad("hidden_width must be positive".into());
                }
            }
            Architecture::Gcn => {
                if self.gcn_hidden == 0 {
                    return bad("gcn_hidden must be positive".into());
                }
            }
        }
        if !(self.residual_alpha >= 0.0) {
            return Err(GsanError::NegativeAlpha(self.residual_alpha));
        }
        Ok(())
    }
}

/// Constant operators of one graph, shared by every head and epoch.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    pub adjacency: Arc<SparseOperator>,
    pub bank: WaveletBank,
    pub residual: Arc<SparseOperator>,
}

impl GraphOperators {
    pub fn new(g: &Graph, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            adjacency: Arc::new(normalized_adjacency(g)),
            bank: WaveletBank::new(Arc::new(lazy_random_walk(g)), config.max_wavelet_order())?,
            residual: Arc::new(residual_operator(g, config.residual_alpha)?),
        })
    }

    pub fn walk(&self) -> &Arc<SparseOperator> {
        self.bank.walk()
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `d_in x d_head` feature transform.
    pub theta: Array2<f64>,
    /// `2 d_head x 1` attention vector shared by all channels.
    pub attention: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsanParams {
    pub heads: Vec<HeadParams>,
    pub residual_weight: Array2<f64>,
    pub output_weight: Array2<f64>,
    pub residual_bias: Option<Array2<f64>>,
    pub output_bias: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub hidden_weight: Array2<f64>,
    pub output_weight: Array2<f64>,
    pub hidden_bias: Option<Array2<f64>>,
    pub output_bias: Option<Array2<f64>>,
}

/// Trainable parameters of either architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Gsan(GsanParams),
    Gcn(GcnParams),
}

/// Node-wise channel weights recorded by one head, detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDiagnostics {
    pub alpha_gcn: Vec<Array1<f64>>,
    pub alpha_sct: Vec<Array1<f64>>,
}

/// Tape handles for one head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub theta: Tensor,
    pub attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct GsanVars {
    pub heads: Vec<HeadVars>,
    pub residual_weight: Tensor,
    pub output_weight: Tensor,
    pub residual_bias: Option<Tensor>,
    pub output_bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GcnVars {
    pub hidden_weight: Tensor,
    pub output_weight: Tensor,
    pub hidden_bias: Option<Tensor>,
    pub output_bias: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub enum ModelVars {
    Gsan(GsanVars),
    Gcn(GcnVars),
}

impl ModelVars {
    /// Handles in the same order as [`Model::named_params`].
    pub fn tensors(&self) -> Vec<Tensor> {
        match self {
            ModelVars::Gsan(v) => {
                let mut out: Vec<Tensor> = v
                    .heads
                    .iter()
                    .flat_map(|h| [h.theta, h.attention])
                    .collect();
                out.push(v.residual_weight);
                out.extend(v.residual_bias);
                out.push(v.output_weight);
                out.extend(v.output_bias);
                out
            }
            ModelVars::Gcn(v) => {
                let mut out = vec![v.hidden_weight];
                out.extend(v.hidden_bias);
                out.push(v.output_weight);
                out.extend(v.output_bias);
                out
            }
        }
    }
}

/// Inverted dropout driven by the caller's generator.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let (r, c) = tape.shape(x);
        let scale = 1.0 / keep;
        let rng = &mut *self.rng;
        if !tape.requires_grad(x) {
            // Zeros stay zero whatever the mask, so only nonzeros draw.
            let dropped = tape.value(x).mapv(|v| {
                if v != 0.0 && rng.random::<f64>() < keep {
                    v * scale
                } else {
                    0.0
                }
            });
            return Ok(tape.constant(dropped));
        }
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

fn apply_dropout(dropout: &mut Option<Dropout<'_>>, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

impl Model {
    /// Glorot-initialized weights and zero biases.
    pub fn init(
        config: &ModelConfig,
        in_width: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let bias = |w: usize| config.bias.then(|| Array2::zeros((1, w)));
        Ok(match config.architecture {
            Architecture::Gsan => {
                let heads = (0..config.heads)
                    .map(|_| HeadParams {
                        theta: glorot_init_with(in_width, config.head_width, rng),
                        attention: glorot_init_with(2 * config.head_width, 1, rng),
                    })
                    .collect();
                let mid = config.mid_width();
                Model::Gsan(GsanParams {
                    heads,
                    residual_weight: glorot_init_with(config.multi_head_width(), mid, rng),
                    output_weight: glorot_init_with(mid, classes, rng),
                    residual_bias: bias(mid),
                    output_bias: bias(classes),
                })
            }
            Architecture::Gcn => Model::Gcn(GcnParams {
                hidden_weight: glorot_init_with(in_width, config.gcn_hidden, rng),
                output_weight: glorot_init_with(config.gcn_hidden, classes, rng),
                hidden_bias: bias(config.gcn_hidden),
                output_bias: bias(classes),
            }),
        })
    }

    /// All-zero parameters with the shapes `init` would produce.
    pub fn zeros(config: &ModelConfig, in_width: usize, classes: usize) -> Result<Self> {
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let mut model = Self::init(config, in_width, classes, &mut rng)?;
        for p in model.params_mut() {
            p.fill(0.0);
        }
        Ok(model)
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Gsan(_) => Architecture::Gsan,
            Model::Gcn(_) => Architecture::Gcn,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        match self {
            Model::Gsan(p) => {
                for (i, h) in p.heads.iter().enumerate() {
                    out.push((format!("head{i}.theta"), &h.theta));
                    out.push((format!("head{i}.attention"), &h.attention));
                }
                out.push(("residual.weight".into(), &p.residual_weight));
                if let Some(b) = &p.residual_bias {
                    out.push(("residual.bias".into(), b));
                }
                out.push(("output.weight".into(), &p.output_weight));
                if let Some(b) = &p.output_bias {
                    out.push(("output.bias".into(), b));
                }
            }
            Model::Gcn(p) => {
                out.push(("hidden.weight".into(), &p.hidden_weight));
                if let Some(b) = &p.hidden_bias {
                    out.push(("hidden.bias".into(), b));
                }
                out.push(("output.weight".into(), &p.output_weight));
                if let Some(b) = &p.output_bias {
                    out.push(("output.bias".into(), b));
                }
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_values(&self) -> Vec<Array2<f64>> {
        self.named_params()
            .into_iter()
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Mutable parameters in the same order as [`Model::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        match self {
            Model::Gsan(p) => {
                for h in &mut p.heads {
                    out.push(&mut h.theta);
                    out.push(&mut h.attention);
                }
                out.push(&mut p.residual_weight);
                out.extend(p.residual_bias.as_mut());
                out.push(&mut p.output_weight);
                out.extend(p.output_bias.as_mut());
            }
            Model::Gcn(p) => {
                out.push(&mut p.hidden_weight);
                out.extend(p.hidden_bias.as_mut());
                out.push(&mut p.output_weight);
                out.extend(p.output_bias.as_mut());
            }
        }
        out
    }

    /// Overwrites every parameter, in [`Model::named_params`] order.
    pub fn set_params(&mut self, values: &[Array2<f64>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(mismatch("parameter count", slots.len(), values.len()));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.dim() != v.dim() {
                return Err(mismatch(
                    "parameter shape",
                    format!("{:?}", slot.dim()),
                    format!("{:?}", v.dim()),
                ));
            }
            slot.assign(v);
        }
        Ok(())
    }

    /// Registers every parameter as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        match self {
            Model::Gsan(p) => ModelVars::Gsan(GsanVars {
                heads: p
                    .heads
                    .iter()
                    .map(|h| HeadVars {
                        theta: tape.parameter(h.theta.clone()),
                        attention: tape.parameter(h.attention.clone()),
                    })
                    .collect(),
                residual_weight: tape.parameter(p.residual_weight.clone()),
                residual_bias: p.residual_bias.as_ref().map(|b| tape.parameter(b.clone())),
                output_weight: tape.parameter(p.output_weight.clone()),
                output_bias: p.output_bias.as_ref().map(|b| tape.parameter(b.clone())),
            }),
            Model::Gcn(p) => ModelVars::Gcn(GcnVars {
                hidden_weight: tape.parameter(p.hidden_weight.clone()),
                hidden_bias: p.hidden_bias.as_ref().map(|b| tape.parameter(b.clone())),
                output_weight: tape.parameter(p.output_weight.clone()),
                output_bias: p.output_bias.as_ref().map(|b| tape.parameter(b.clone())),
            }),
        }
    }

    /// Evaluation-mode logits and attention diagnostics.
    pub fn predict(
        &self,
        features: &Array2<f64>,
        ops: &GraphOperators,
        config: &ModelConfig,
    ) -> Result<(Array2<f64>, Vec<HeadDiagnostics>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.constant(features.clone());
        let out = forward(&mut tape, &vars, ops, x, config, None)?;
        Ok((tape.value(out.logits).clone(), out.diagnostics))
    }
}

pub struct ForwardOutput {
    pub logits: Tensor,
    pub diagnostics: Vec<HeadDiagnostics>,
}

/// Dispatches to [`gsan_forward`] or [`gcn_forward`].
pub fn forward(
    tape: &mut Tape,
    vars: &ModelVars,
    ops: &GraphOperators,
    x: Tensor,
    config: &ModelConfig,
    dropout: Option<Dropout<'_>>,
) -> Result<ForwardOutput> {
    match vars {
        ModelVars::Gsan(v) => gsan_forward(tape, v, ops, x, config, dropout),
        ModelVars::Gcn(v) => Ok(ForwardOutput {
            logits: gcn_forward(tape, v, ops, x, dropout)?,
            diagnostics: Vec::new(),
        }),
    }
}

/// Lazily extended powers `P^e Hbar` of one base signal.
struct PowerCache {
    powers: BTreeMap<usize, Tensor>,
}

impl PowerCache {
    fn new(base: Tensor) -> Self {
        Self {
            powers: BTreeMap::from([(0, base)]),
        }
    }

    fn get(&mut self, tape: &mut Tape, op: &Arc<SparseOperator>, e: usize) -> Result<Tensor> {
        if let Some(&t) = self.powers.get(&e) {
            return Ok(t);
        }
        let (&from, &start) = self.powers.range(..e).next_back().expect("power 0 present");
        let mut cur = start;
        for k in from + 1..=e {
            cur = tape.spmm(op, cur)?;
            self.powers.insert(k, cur);
        }
        Ok(cur)
    }
}

fn tracked_wavelet(
    tape: &mut Tape,
    walk: &Arc<SparseOperator>,
    cache: &mut PowerCache,
    k: usize,
) -> Result<Tensor> {
    let (near, far) = if k == 0 {
        (cache.get(tape, walk, 0)?, cache.get(tape, walk, 1)?)
    } else {
        let half = 1usize << (k - 1);
        (
            cache.get(tape, walk, half)?,
            cache.get(tape, walk, 2 * half)?,
        )
    };
    tape.sub(near, far)
}

/// Autodiff-tracked counterpart of [`crate::scattering::channel_bank`].
pub fn tracked_channel_bank(
    tape: &mut Tape,
    ops: &GraphOperators,
    hbar: Tensor,
    gcn_channels: usize,
    paths: &[ScatteringPath],
    q: f64,
) -> Result<Vec<Tensor>> {
    let max = ops.bank.max_order();
    for path in paths {
        if path.max_order() > max {
            return Err(GsanError::OrderOutOfRange {
                order: path.max_order(),
                max,
            });
        }
    }
    let mut channels = Vec::with_capacity(gcn_channels + paths.len());
    let mut current = hbar;
    for _ in 0..gcn_channels {
        current = tape.spmm(&ops.adjacency, current)?;
        channels.push(current);
    }
    let walk = Arc::clone(ops.walk());
    let mut shared = PowerCache::new(hbar);
    for path in paths {
        let (&first, rest) = path.orders().split_first().expect("nonempty");
        let mut u = tracked_wavelet(tape, &walk, &mut shared, first)?;
        for &k in rest {
            let magnitude = tape.abs_pow(u, 1.0)?;
            let mut local = PowerCache::new(magnitude);
            u = tracked_wavelet(tape, &walk, &mut local, k)?;
        }
        channels.push(tape.abs_pow(u, q)?);
    }
    Ok(channels)
}

/// One scattering attention head.
pub fn attention_head(
    tape: &mut Tape,
    head: &HeadVars,
    ops: &GraphOperators,
    input: Tensor,
    config: &ModelConfig,
) -> Result<(Tensor, HeadDiagnostics)> {
    let (_, d_head) = tape.shape(head.theta);
    if tape.shape(head.attention) != (2 * d_head, 1) {
        return Err(mismatch(
            "attention vector",
            format!("{}x1", 2 * d_head),
            format!("{:?}", tape.shape(head.attention)),
        ));
    }
    let hbar = tape.matmul(input, head.theta)?;
    let channels = tracked_channel_bank(
        tape,
        ops,
        hbar,
        config.gcn_channels,
        &config.paths,
        config.q,
    )?;
    let mut scores = Vec::with_capacity(channels.len());
    for &ch in &channels {
        let joined = tape.concat_cols(hbar, ch)?;
        let raw = tape.matmul(joined, head.attention)?;
        scores.push(tape.leaky_relu(raw, config.leaky_slope));
    }
    let weights = tape.channel_softmax(&scores)?;

    let mut total: Option<Tensor> = None;
    for (&w, &ch) in weights.iter().zip(&channels) {
        let weighted = tape.row_scale(w, ch)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let activated = tape.relu(total.expect("at least one channel"));
    let out = tape.scale(activated, 1.0 / channels.len() as f64);

    let column = |t: Tensor| tape.value(t).column(0).to_owned();
    let (gcn, sct) = weights.split_at(config.gcn_channels);
    let diagnostics = HeadDiagnostics {
        alpha_gcn: gcn.iter().map(|&t| column(t)).collect(),
        alpha_sct: sct.iter().map(|&t| column(t)).collect(),
    };
    Ok((out, diagnostics))
}

/// Concatenates head outputs column-wise, in head order.
pub fn multi_head(tape: &mut Tape, heads: &[Tensor]) -> Result<Tensor> {
    let (&first, rest) = heads.split_first().ok_or(GsanError::EmptyHeadList)?;
    let shape = tape.shape(first);
    let mut out = first;
    for &h in rest {
        if tape.shape(h) != shape {
            return Err(mismatch(
                "multi_head head shape",
                format!("{shape:?}"),
                format!("{:?}", tape.shape(h)),
            ));
        }
        out = tape.concat_cols(out, h)?;
    }
    Ok(out)
}

/// `(A_res H) W`, no nonlinearity.
pub fn residual_conv(
    tape: &mut Tape,
    h: Tensor,
    residual: &Arc<SparseOperator>,
    weight: Tensor,
) -> Result<Tensor> {
    let smoothed = tape.spmm(residual, h)?;
    tape.matmul(smoothed, weight)
}

/// Full network: heads, concatenation, residual convolution, output layer.
pub fn gsan_forward(
    tape: &mut Tape,
    vars: &GsanVars,
    ops: &GraphOperators,
    x: Tensor,
    config: &ModelConfig,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardOutput> {
    if tape.shape(x).0 != ops.num_nodes() {
        return Err(mismatch("feature rows", ops.num_nodes(), tape.shape(x).0));
    }
    let x = apply_dropout(&mut dropout, tape, x)?;
    let mut outputs = Vec::with_capacity(vars.heads.len());
    let mut diagnostics = Vec::with_capacity(vars.heads.len());
    for head in &vars.heads {
        let (out, diag) = attention_head(tape, head, ops, x, config)?;
        outputs.push(out);
        diagnostics.push(diag);
    }
    let joined = multi_head(tape, &outputs)?;
    let joined = apply_dropout(&mut dropout, tape, joined)?;
    let mut hidden = residual_conv(tape, joined, &ops.residual, vars.residual_weight)?;
    if let Some(b) = vars.residual_bias {
        hidden = tape.add_row_bias(hidden, b)?;
    }
    let mut logits = tape.matmul(hidden, vars.output_weight)?;
    if let Some(b) = vars.output_bias {
        logits = tape.add_row_bias(logits, b)?;
    }
    Ok(ForwardOutput {
        logits,
        diagnostics,
    })
}

/// Two-layer GCN: `A ReLU(A X W1) W2`.
pub fn gcn_forward(
    tape: &mut Tape,
    vars: &GcnVars,
    ops: &GraphOperators,
    x: Tensor,
    mut dropout: Option<Dropout<'_>>,
) -> Result<Tensor> {
    if tape.shape(x).0 != ops.num_nodes() {
        return Err(mismatch("feature rows", ops.num_nodes(), tape.shape(x).0));
    }
    let x = apply_dropout(&mut dropout, tape, x)?;
    let projected = tape.matmul(x, vars.hidden_weight)?;
    let mut hidden = tape.spmm(&ops.adjacency, projected)?;
    if let Some(b) = vars.hidden_bias {
        hidden = tape.add_row_bias(hidden, b)?;
    }
    let hidden = tape.relu(hidden);
    let hidden = apply_dropout(&mut dropout, tape, hidden)?;
    let projected = tape.matmul(hidden, vars.output_weight)?;
    let mut logits = tape.spmm(&ops.adjacency, projected)?;
    if let Some(b) = vars.output_bias {
        logits = tape.add_row_bias(logits, b)?;
    }
    Ok(logits)
}

/// Band-pass over low-pass attention mass.
///
/// Returns the global ratio (summed over nodes and heads) and the per-node
/// ratio (summed over heads only).
pub fn attention_ratio(diags: &[HeadDiagnostics]) -> Result<(f64, Array1<f64>)> {
    let first = diags.first().ok_or(GsanError::EmptyHeadList)?;
    let n = first
        .alpha_gcn
        .first()
        .map(|a| a.len())
        .ok_or(GsanError::EmptyChannelList)?;
    let mut band = 0.0;
    let mut low = 0.0;
    let mut node_band = Array1::<f64>::zeros(n);
    let mut node_low = Array1::<f64>::zeros(n);
    for d in diags {
        for a in &d.alpha_sct {
            if a.len() != n {
                return Err(mismatch("attention vector length", n, a.len()));
            }
            band += a.sum();
            node_band += a;
        }
        for a in &d.alpha_gcn {
            if a.len() != n {
                return Err(mismatch("attention vector length", n, a.len()));
            }
            low += a.sum();
            node_low += a;
        }
    }
    Ok((band / low, node_band / node_low))
}
