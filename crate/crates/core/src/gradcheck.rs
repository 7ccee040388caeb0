//! Finite-difference verification of a whole model on a small fixed graph.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, GradCheckOptions, GradCheckReport, OpKind, Probe, Tape};
use crate::error::Result;
use crate::graph::{build_graph, Graph};
use crate::model::{forward, GraphOperators, Model, ModelConfig};

pub const INSTANCE_NODES: usize = 12;
pub const INSTANCE_FEATURES: usize = 5;
pub const INSTANCE_CLASSES: usize = 3;

/// Weighted 12-node ring with four chords, seeded features and labels `i mod 3`.
pub struct Instance {
    pub graph: Graph,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn builtin_instance(seed: u64) -> Instance {
    let n = INSTANCE_NODES;
    let mut edges: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    edges.extend([(0, 6, 0.5), (2, 9, 2.0), (4, 10, 1.5), (1, 5, 0.75)]);
    let graph = build_graph(n, &edges).expect("fixed edge list is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_fn((n, INSTANCE_FEATURES), |_| rng.random_range(-1.0..1.0));
    Instance {
        graph,
        features,
        labels: (0..n).map(|i| i % INSTANCE_CLASSES).collect(),
        mask: vec![true; n],
    }
}

/// Checks every parameter of a freshly initialized model against central
/// differences of the masked cross-entropy. `fault` scales one op's backward
/// rule, for exercising the detector.
pub fn check_model(
    config: &ModelConfig,
    seed: u64,
    fault: Option<(OpKind, f64)>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let inst = builtin_instance(seed);
    let ops = GraphOperators::new(&inst.graph, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(config, INSTANCE_FEATURES, INSTANCE_CLASSES, &mut rng)?;
    let names = model.param_names();
    let params = model.param_values();

    let mut tape = Tape::new();
    if let Some((kind, factor)) = fault {
        tape.corrupt_backward(kind, factor);
    }
    let vars = model.bind(&mut tape);
    let x = tape.constant(inst.features.clone());
    let out = forward(&mut tape, &vars, &ops, x, config, None)?;
    let loss = tape.masked_cross_entropy(out.logits, &inst.labels, &inst.mask)?;
    tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = vars
        .tensors()
        .into_iter()
        .map(|t| {
            tape.grad(t)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(t).raw_dim()))
        })
        .collect();

    let mut probe_model = model.clone();
    let f = |values: &[Array2<f64>]| -> Result<Probe> {
        probe_model.set_params(values)?;
        let mut tape = Tape::new();
        tape.track_kinks();
        let vars = probe_model.bind(&mut tape);
        let x = tape.constant(inst.features.clone());
        let out = forward(&mut tape, &vars, &ops, x, config, None)?;
        let loss = tape.masked_cross_entropy(out.logits, &inst.labels, &inst.mask)?;
        Ok(Probe {
            value: tape.value(loss)[[0, 0]],
            kinks: tape.kink_signature(),
        })
    };
    finite_diff_check(f, &names, &params, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_gcn_passes() {
        let config = ModelConfig {
            architecture: crate::model::Architecture::Gcn,
            ..ModelConfig::default()
        };
        let report = check_model(&config, 0, None, GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
