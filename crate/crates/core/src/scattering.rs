//! Diffusion wavelets and the geometric scattering cascade.
//!
//! Wavelets `Psi_0 = I - P` and `Psi_k = P^(2^(k-1)) - P^(2^k)` are never
//! formed as matrices. Each application walks the lazy random walk `P` over
//! the signal, reusing `P^(2^(k-1)) X` to reach `P^(2^k) X`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{GsanError, Result};
use crate::graph::{lazy_random_walk, FeatureMatrix, Graph, SparseOperator};

/// Column sums of `P` must be within this distance of one.
const STOCHASTIC_TOL: f64 = 1e-10;

/// Lazy random walk plus the highest wavelet order it will be asked for.
#[derive(Debug, Clone)]
pub struct WaveletBank {
    walk: Arc<SparseOperator>,
    max_order: usize,
}

impl WaveletBank {
    pub fn new(walk: Arc<SparseOperator>, max_order: usize) -> Result<Self> {
        if let Some((j, s)) = walk
            .column_sums()
            .iter()
            .enumerate()
            .find(|(_, s)| (*s - 1.0).abs() > STOCHASTIC_TOL)
        {
            return Err(GsanError::InvalidArgument(format!(
                "walk operator column {j} sums to {s}, expected 1"
            )));
        }
        Ok(Self { walk, max_order })
    }

    pub fn from_graph(g: &Graph, max_order: usize) -> Self {
        Self {
            walk: Arc::new(lazy_random_walk(g)),
            max_order,
        }
    }

    pub fn walk(&self) -> &Arc<SparseOperator> {
        &self.walk
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    fn check_order(&self, k: usize) -> Result<()> {
        if k > self.max_order {
            return Err(GsanError::OrderOutOfRange {
                order: k,
                max: self.max_order,
            });
        }
        Ok(())
    }
}

/// Sequence of wavelet orders `(k_1, ..., k_m)`, applied first to last.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScatteringPath(Vec<usize>);

impl ScatteringPath {
    pub fn new(orders: Vec<usize>) -> Result<Self> {
        if orders.is_empty() {
            return Err(GsanError::InvalidArgument(
                "scattering path must name at least one wavelet".into(),
            ));
        }
        Ok(Self(orders))
    }

    pub fn first_order(k: usize) -> Self {
        Self(vec![k])
    }

    pub fn orders(&self) -> &[usize] {
        &self.0
    }

    pub fn max_order(&self) -> usize {
        *self.0.iter().max().expect("nonempty")
    }
}

impl TryFrom<Vec<usize>> for ScatteringPath {
    type Error = GsanError;

    fn try_from(orders: Vec<usize>) -> Result<Self> {
        Self::new(orders)
    }
}

impl From<ScatteringPath> for Vec<usize> {
    fn from(path: ScatteringPath) -> Self {
        path.0
    }
}

impl fmt::Display for ScatteringPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|k| k.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// `Psi_k X`.
pub fn wavelet_apply(bank: &WaveletBank, k: usize, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    bank.check_order(k)?;
    if k == 0 {
        let px = bank.walk.apply(x)?;
        return Ok(x - &px);
    }
    let half = 1usize << (k - 1);
    let near = bank.walk.apply_power(half, x)?;
    let far = bank.walk.apply_power(half, &near)?;
    Ok(near - far)
}

/// `U_p X = Psi_{k_m} | ... | Psi_{k_2} | Psi_{k_1} X | | ...`, with no
/// absolute value after the last wavelet.
pub fn scattering_apply(
    bank: &WaveletBank,
    path: &ScatteringPath,
    x: &FeatureMatrix,
) -> Result<FeatureMatrix> {
    for &k in path.orders() {
        bank.check_order(k)?;
    }
    let (&first, rest) = path.orders().split_first().expect("nonempty");
    let mut out = wavelet_apply(bank, first, x)?;
    for &k in rest {
        out.mapv_inplace(f64::abs);
        out = wavelet_apply(bank, k, &out)?;
    }
    Ok(out)
}

/// Low-pass and band-pass channels of one attention head, in the order
/// `[A H, ..., A^C H, |U_p1 H|^q, ..., |U_pS H|^q]`.
pub fn channel_bank(
    bank: &WaveletBank,
    adjacency: &SparseOperator,
    hbar: &FeatureMatrix,
    gcn_channels: usize,
    paths: &[ScatteringPath],
    q: f64,
) -> Result<Vec<FeatureMatrix>> {
    if gcn_channels == 0 {
        return Err(GsanError::InvalidArgument(
            "at least one GCN channel is required".into(),
        ));
    }
    if !(q > 0.0) {
        return Err(GsanError::InvalidArgument(format!(
            "scattering moment q must be positive, got {q}"
        )));
    }
    let mut channels = Vec::with_capacity(gcn_channels + paths.len());
    let mut current = adjacency.apply(hbar)?;
    for i in 1..=gcn_channels {
        if i > 1 {
            current = adjacency.apply(&current)?;
        }
        channels.push(current.clone());
    }
    for path in paths {
        let u = scattering_apply(bank, path, hbar)?;
        channels.push(u.mapv(|v| v.abs().powf(q)));
    }
    Ok(channels)
}
