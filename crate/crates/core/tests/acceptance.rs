//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 need the converted Cora and Citeseer datasets under
//! `$GSAN_DATA_DIR/{cora,citeseer}`. Without them those two criteria print
//! FAIL with the reason and do not abort the run, unless
//! `GSAN_ACCEPTANCE_STRICT=1` is set. Every other failure exits nonzero.

mod common;

use common::*;
use gsan_core::autodiff::{GradCheckOptions, Tape};
use gsan_core::data::{dataset_stats, generate_sbm, load_dataset, Dataset, SbmParams};
use gsan_core::gradcheck::check_model;
use gsan_core::graph::{build_graph, lazy_random_walk, normalized_adjacency, residual_operator};
use gsan_core::model::{
    attention_head, attention_ratio, Architecture, GraphOperators, HeadVars, Model, ModelConfig,
};
use gsan_core::scattering::{wavelet_apply, WaveletBank};
use gsan_core::train::{fit, grid_search, Grid, TrainConfig};
use ndarray::Array2;
use rand::Rng;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

enum Status {
    Pass,
    Fail,
    /// Inputs are not present in this environment.
    Unavailable,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Self { status, detail }
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2024);
    let (mut tele, mut stoch) = (0.0f64, 0.0f64);
    let mut symmetric = true;
    for _ in 0..200 {
        let n = r.random_range(1..=50);
        let k = r.random_range(0..=4);
        let density = r.random_range(0.0..0.4);
        let (g, _) = random_graph(&mut r, n, density);
        let bank = WaveletBank::from_graph(&g, k);
        let x = random_matrix(&mut r, n, 3);
        let mut total = Array2::zeros(x.raw_dim());
        for j in 0..=k {
            total += &wavelet_apply(&bank, j, &x).unwrap();
        }
        let far = bank.walk().apply_power(1 << k, &x).unwrap();
        tele = tele.max(max_abs_diff(&total, &(&x - &far)));
        let alpha = r.random_range(0.0..3.0);
        for op in [lazy_random_walk(&g), residual_operator(&g, alpha).unwrap()] {
            for s in op.column_sums() {
                stoch = stoch.max((s - 1.0).abs());
            }
        }
        let a = normalized_adjacency(&g);
        symmetric &= (0..n).all(|i| (0..n).all(|j| a.get(i, j).to_bits() == a.get(j, i).to_bits()));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::check(
        tele <= 1e-10 && stoch <= 1e-12 && symmetric && secs < 10.0,
        format!(
            "200 graphs: telescoping err {tele:.1e}, column-sum err {stoch:.1e}, A symmetric {symmetric}, {secs:.2}s"
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut r = rng(77);
    let config = ModelConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = r.random_range(2..=20);
        let density = r.random_range(0.1..0.5);
        let edges = random_edges(&mut r, n, density);
        let g = build_graph(n, &edges).unwrap();
        let x = random_matrix(&mut r, n, 6);
        let model = Model::init(&config, 6, 3, &mut rng(trial)).unwrap();
        let ops = GraphOperators::new(&g, &config).unwrap();
        let (logits, _) = model.predict(&x, &ops, &config).unwrap();
        let Model::Gsan(params) = &model else {
            unreachable!()
        };
        let dense = dense_gsan(
            &DenseOps::new(n, &edges, config.residual_alpha),
            &x,
            params,
            &config,
        );
        worst = worst.max(max_abs_diff(&logits, &dense));
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::check(
        worst <= 1e-10 && secs < 30.0,
        format!("20 instances: max |sparse - dense| {worst:.1e}, {secs:.2}s"),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let report = check_model(
        &ModelConfig::default(),
        0,
        None,
        GradCheckOptions::default(),
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report.worst().unwrap();
    let checked: usize = report.params.iter().map(|p| p.checked).sum();
    let skipped: usize = report.params.iter().map(|p| p.skipped).sum();
    Verdict::check(
        report.passed() && secs < 60.0,
        format!(
            "{} tensors, {checked} entries ({skipped} at kinks), worst rel err {:.1e} in {}, {secs:.2}s",
            report.params.len(),
            worst.max_rel_err,
            worst.name
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut r = rng(404);
    let (g, _) = random_graph(&mut r, 25, 0.2);
    let config = ModelConfig::default();
    let ops = GraphOperators::new(&g, &config).unwrap();
    let x = random_matrix(&mut r, 25, 6) * 3.0;
    let model = Model::init(&config, 6, 3, &mut rng(5)).unwrap();
    let (_, diags) = model.predict(&x, &ops, &config).unwrap();
    let (mut positive, mut sum_err) = (true, 0.0f64);
    for d in &diags {
        for i in 0..25 {
            let w: Vec<f64> = d
                .alpha_gcn
                .iter()
                .chain(&d.alpha_sct)
                .map(|a| a[i])
                .collect();
            positive &= w.iter().all(|&v| v > 0.0);
            sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut zeroed = model.clone();
    if let Model::Gsan(p) = &mut zeroed {
        p.heads.iter_mut().for_each(|h| h.attention.fill(0.0));
    }
    let (_, diags) = zeroed.predict(&x, &ops, &config).unwrap();
    let (ratio, per_node) = attention_ratio(&diags).unwrap();
    let unit = ratio == 1.0 && per_node.iter().all(|&v| v == 1.0);

    let single = ModelConfig {
        gcn_channels: 1,
        paths: Vec::new(),
        ..ModelConfig::default()
    };
    let ops1 = GraphOperators::new(&g, &single).unwrap();
    let theta = random_matrix(&mut r, 6, 16);
    let mut tape = Tape::new();
    let head = HeadVars {
        theta: tape.parameter(theta.clone()),
        attention: tape.parameter(random_matrix(&mut r, 32, 1)),
    };
    let xt = tape.constant(x.clone());
    let (out, _) = attention_head(&mut tape, &head, &ops1, xt, &single).unwrap();
    let gcn_layer = normalized_adjacency(&g)
        .apply(&x.dot(&theta))
        .unwrap()
        .mapv(|v| v.max(0.0));
    let exact = tape.value(out) == gcn_layer;

    Verdict::check(
        positive && sum_err <= 1e-12 && unit && exact,
        format!(
            "weights positive {positive}, max |sum - 1| {sum_err:.1e}, a = 0 ratio {ratio}, single channel equals GCN layer {exact}"
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut r = rng(505);
    let (g, _) = random_graph(&mut r, 30, 0.15);
    let config = ModelConfig::default();
    let x = random_matrix(&mut r, 30, 6);
    let model = Model::init(&config, 6, 4, &mut rng(6)).unwrap();
    let ops = GraphOperators::new(&g, &config).unwrap();
    let (base, _) = model.predict(&x, &ops, &config).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let perm = random_permutation(&mut r, 30);
        let ops_p = GraphOperators::new(&g.permute(&perm).unwrap(), &config).unwrap();
        let (moved, _) = model
            .predict(&permute_rows(&x, &perm), &ops_p, &config)
            .unwrap();
        worst = worst.max(max_abs_diff(&moved, &permute_rows(&base, &perm)));
    }
    Verdict::check(
        worst <= 1e-10,
        format!("10 permutations of 30 nodes: max deviation {worst:.1e}"),
    )
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("GSAN_DATA_DIR").map(PathBuf::from)
}

fn load_benchmark(name: &str) -> Result<Dataset, String> {
    let root = data_dir().ok_or_else(|| "GSAN_DATA_DIR is not set".to_string())?;
    let dir = root.join(name);
    if !dir.is_dir() {
        return Err(format!("{} does not exist", dir.display()));
    }
    load_dataset(&dir).map_err(|e| format!("{}: {e}", dir.display()))
}

fn criterion_6() -> Verdict {
    // (name, classes, nodes, reference edges, homophily)
    let table = [
        ("cora", 7, 2708, 5276, 0.81),
        ("citeseer", 6, 3327, 4676, 0.74),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, classes, nodes, ref_edges, ref_h) in table {
        let ds = match load_benchmark(name) {
            Ok(ds) => ds,
            Err(reason) => {
                return Verdict {
                    status: Status::Unavailable,
                    detail: format!("dataset unavailable ({reason})"),
                }
            }
        };
        let s = dataset_stats(&ds);
        let h = s.homophily.unwrap_or(f64::NAN);
        let this = s.classes == classes && s.nodes == nodes && (h - ref_h).abs() <= 0.02;
        ok &= this;
        let diff = s.edges as i64 - ref_edges as i64;
        let doubled = if s.edges == 2 * ref_edges || 2 * s.edges == ref_edges {
            ", factor-2 convention mismatch"
        } else {
            ""
        };
        parts.push(format!(
            "{name}: {} classes, {} nodes, homophily {h:.4} (ref {ref_h}); {} undirected edges vs {ref_edges} in reference ({diff:+}{doubled})",
            s.classes, s.nodes, s.edges
        ));
    }
    Verdict::check(ok, parts.join("; "))
}

fn criterion_7() -> Verdict {
    let start = Instant::now();
    let ds = match load_benchmark("cora") {
        Ok(ds) => ds,
        Err(reason) => {
            return Verdict {
                status: Status::Unavailable,
                detail: format!("dataset unavailable ({reason})"),
            }
        }
    };
    let base = TrainConfig::default();
    let outcome = match grid_search(&ds, &base, &Grid::default()) {
        Ok(o) => o,
        Err(e) => return Verdict::check(false, format!("grid search failed: {e}")),
    };
    let best = outcome.best();
    let gcn_config = TrainConfig {
        model: ModelConfig {
            architecture: Architecture::Gcn,
            ..ModelConfig::default()
        },
        ..base
    };
    let gcn = match fit(&ds, &gcn_config) {
        Ok(r) => r,
        Err(e) => return Verdict::check(false, format!("GCN baseline failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let cfg = &best.config.model;
    Verdict::check(
        best.test_acc >= 0.80 && best.test_acc >= gcn.test_acc - 0.005 && secs < 1800.0,
        format!(
            "GSAN test {:.4} (heads {}, alpha {}, d_head {}, valid {:.4}) vs GCN {:.4}; {} grid points, {secs:.0}s",
            best.test_acc,
            cfg.heads,
            cfg.residual_alpha,
            cfg.head_width,
            best.best_valid_acc,
            gcn.test_acc,
            outcome.rows.len()
        ),
    )
}

fn homophily_pair(seed: u64) -> (f64, f64, f64, f64) {
    let make = |p_out| {
        generate_sbm(&SbmParams {
            nodes: 600,
            classes: 3,
            p_in: 0.03,
            p_out,
            feature_dim: 16,
            signal_strength: 1.0,
            seed,
        })
        .unwrap()
    };
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    for p_out in [0.003, 0.015] {
        let ds = make(p_out);
        let h = gsan_core::data::edge_homophily(&ds).unwrap();
        let result = fit(&ds, &config).unwrap();
        out.push((h, attention_ratio(&result.diagnostics).unwrap().0));
    }
    (out[0].0, out[0].1, out[1].0, out[1].1)
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (h_hi, r_hi, h_lo, r_lo) = homophily_pair(seed);
        if r_lo > r_hi {
            wins += 1;
        }
        parts.push(format!(
            "seed {seed}: h {h_hi:.2} -> ratio {r_hi:.3}, h {h_lo:.2} -> ratio {r_lo:.3}"
        ));
    }
    Verdict::check(
        wins >= 2,
        format!(
            "{wins}/3 seeds higher on the low-homophily graph; {}; {:.0}s",
            parts.join("; "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_9() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_gsan");
    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env("RAYON_NUM_THREADS", "1")
            .output()
            .unwrap()
    };
    let ds = work.path().join("sbm");
    let o = run(&[
        "dataset",
        "synth",
        "--out",
        ds.to_str().unwrap(),
        "--nodes",
        "300",
        "--classes",
        "3",
        "--p-in",
        "0.05",
        "--p-out",
        "0.01",
        "--seed",
        "9",
    ]);
    if !o.status.success() {
        return Verdict::check(false, "could not synthesize the dataset".into());
    }
    let config = work.path().join("config.toml");
    std::fs::write(&config, "max_epochs = 60\npatience = 20\nseed = 13\n").unwrap();
    let mut outputs = Vec::new();
    for tag in ["first", "second"] {
        let out = work.path().join(tag);
        let o = run(&[
            "train",
            "--dataset",
            ds.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        if !o.status.success() {
            let err = String::from_utf8_lossy(&o.stderr);
            return Verdict::check(false, format!("train run '{tag}' failed: {}", err.trim()));
        }
        outputs.push(out);
    }
    let files = ["metrics.csv", "curves.csv", "checkpoint.json"];
    let identical: Vec<bool> = files
        .iter()
        .map(|f| {
            std::fs::read(outputs[0].join(f)).unwrap() == std::fs::read(outputs[1].join(f)).unwrap()
        })
        .collect();
    Verdict::check(
        identical.iter().all(|&b| b),
        files
            .iter()
            .zip(&identical)
            .map(|(f, same)| format!("{f} {}", if *same { "identical" } else { "DIFFERS" }))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("operator identity suite", criterion_1),
        ("dense-oracle equivalence", criterion_2),
        ("gradient verification", criterion_3),
        ("attention contract", criterion_4),
        ("permutation equivariance", criterion_5),
        ("benchmark statistics", criterion_6),
        ("desk-scale accuracy", criterion_7),
        ("homophily-attention trend", criterion_8),
        ("determinism", criterion_9),
    ];
    let strict = std::env::var("GSAN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut fatal = 0;
    let mut unavailable = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        let label = match v.status {
            Status::Pass => "PASS",
            Status::Fail => {
                fatal += 1;
                "FAIL"
            }
            Status::Unavailable => {
                unavailable += 1;
                if strict {
                    fatal += 1;
                }
                "FAIL"
            }
        };
        println!("{label} criterion {}: {name}: {}", i + 1, v.detail);
    }
    if unavailable > 0 && !strict {
        println!("{unavailable} criteria could not run here; set GSAN_DATA_DIR to the converted benchmarks");
    }
    if fatal > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
