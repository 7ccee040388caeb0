//! The `gsan` command-line interface.
//!
//! Exit codes: 0 success, 1 input error, 2 numeric failure, 3 gradient check
//! failure. Every invocation writes `manifest.json` into its output
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::{GradCheckOptions, OpKind};
use crate::checkpoint::Checkpoint;
use crate::data::{
    dataset_stats, generate_sbm, load_dataset, save_dataset, Dataset, SbmParams, Split,
};
use crate::error::{GsanError, Result};
use crate::gradcheck::check_model;
use crate::model::{attention_ratio, Architecture};
use crate::train::{
    accuracy, curves_table, fit, fit_repeated, grid_search, grid_table, predict, Grid, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTOGRAM_BINS: usize = 40;
pub const HISTOGRAM_RANGE: (f64, f64) = (1e-2, 1e2);

#[derive(Debug, Parser)]
#[command(
    name = "gsan",
    version,
    about = "Geometric scattering attention networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and learning curves.
    Train(TrainArgs),
    /// Report per-split accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Band-pass versus low-pass attention ratios of a GSAN checkpoint.
    AttnRatio(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Dataset statistics and synthetic generation.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Exhaustive hyperparameter sweep.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, default_value = "gsan-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML training config; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additionally train this many seeds and report mean and deviation.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Proceed even if the dataset differs from the one trained on.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// TOML config whose `[model]` section is checked.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale one op's backward rule, as `op` or `op:factor`.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Print class, node and edge counts and edge homophily.
    Info {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Write a stochastic-block-model dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory to write the dataset into.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub p_in: f64,
    #[arg(long)]
    pub p_out: f64,
    #[arg(long, default_value_t = 16)]
    pub features: usize,
    #[arg(long, default_value_t = 1.0)]
    pub signal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML grid; the default sweeps heads, residual alpha and head width.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Base config for axes the grid does not vary.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

/// Audit record written by every command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub dataset_fingerprint: Option<String>,
    pub artifacts: Vec<String>,
    pub wall_time_secs: f64,
}

/// Mutable run context filled in as a command progresses.
struct Run {
    out: PathBuf,
    config: serde_json::Value,
    seed: Option<u64>,
    fingerprint: Option<String>,
    artifacts: Vec<String>,
    /// Overrides the success exit code, e.g. for a failed gradient check.
    code: i32,
}

impl Run {
    fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            config: serde_json::Value::Null,
            seed: None,
            fingerprint: None,
            artifacts: Vec::new(),
            code: EXIT_OK,
        }
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    fn dataset(&mut self, dir: &Path) -> Result<Dataset> {
        let ds = load_dataset(dir)?;
        self.fingerprint = Some(ds.fingerprint());
        Ok(ds)
    }
}

/// Keeps glibc from returning mid-sized buffers to the kernel after every
/// op, which otherwise dominates training time through page faults.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

pub fn exit_code(err: &GsanError) -> i32 {
    match err {
        GsanError::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_INPUT
            } else {
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let start = Instant::now();
    let (name, out) = match &cli.command {
        Command::Train(a) => ("train", a.out.out.clone()),
        Command::Eval(a) => ("eval", a.out.out.clone()),
        Command::AttnRatio(a) => ("attn-ratio", a.out.out.clone()),
        Command::Gradcheck(a) => ("gradcheck", a.out.out.clone()),
        Command::Dataset {
            command: DatasetCommand::Info { out, .. },
        } => ("dataset info", out.out.clone()),
        Command::Dataset {
            command: DatasetCommand::Synth(a),
        } => ("dataset synth", a.out.clone()),
        Command::Grid(a) => ("grid", a.out.out.clone()),
    };
    let mut run = Run::new(&out);
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, &mut run),
        Command::Eval(a) => cmd_eval(a, &mut run),
        Command::AttnRatio(a) => cmd_attn_ratio(a, &mut run),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut run),
        Command::Dataset {
            command: DatasetCommand::Info { dataset, .. },
        } => cmd_dataset_info(dataset, &mut run),
        Command::Dataset {
            command: DatasetCommand::Synth(a),
        } => cmd_dataset_synth(a, &mut run),
        Command::Grid(a) => cmd_grid(a, &mut run),
    };
    let (code, error) = match result {
        Ok(()) => (run.code, None),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), Some(e.to_string()))
        }
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        status: if code == EXIT_OK { "ok" } else { "failed" }.into(),
        exit_code: code,
        error,
        config: run.config.clone(),
        seed: run.seed,
        dataset_fingerprint: run.fingerprint.clone(),
        artifacts: run.artifacts.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    if let Err(e) = fs::create_dir_all(&out).and_then(|_| fs::write(out.join(MANIFEST_FILE), json))
    {
        eprintln!(
            "warning: could not write {}: {e}",
            out.join(MANIFEST_FILE).display()
        );
    }
    code
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(GsanError::MissingFile(p.to_path_buf()));
            }
            TrainConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn config_json(config: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(config).expect("config serializes")
}

/// `metric,value` table of the best epoch.
pub fn metrics_table(result: &crate::train::FitResult) -> String {
    let mut out = String::from("metric,value\n");
    let rows: [(&str, String); 8] = [
        ("seed", result.seed.to_string()),
        ("epochs_run", result.epochs_run.to_string()),
        ("best_epoch", result.best_epoch.to_string()),
        ("train_acc", format!("{:?}", result.train_acc)),
        ("valid_acc", format!("{:?}", result.best_valid_acc)),
        ("valid_loss", format!("{:?}", result.best_valid_loss)),
        ("test_acc", format!("{:?}", result.test_acc)),
        ("test_loss", format!("{:?}", result.test_loss)),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn cmd_train(args: &TrainArgs, run: &mut Run) -> Result<()> {
    let config = load_config(args.config.as_deref(), args.seed)?;
    run.config = config_json(&config);
    run.seed = Some(config.seed);
    let dataset = run.dataset(&args.dataset)?;
    let result = fit(&dataset, &config)?;

    run.write(
        "checkpoint.json",
        Checkpoint::from_fit(&result, &dataset).to_json(),
    )?;
    run.write("metrics.csv", metrics_table(&result))?;
    run.write("curves.csv", curves_table(&result))?;
    println!(
        "epochs: {} (best {}), valid accuracy: {:.4}",
        result.epochs_run, result.best_epoch, result.best_valid_acc
    );
    println!("test accuracy: {:.4}", result.test_acc);

    if let Some(runs) = args.repeats.filter(|&r| r > 1) {
        let summary = fit_repeated(&dataset, &config, runs)?;
        let mut table = String::from("seed,test_acc\n");
        for (s, a) in summary.seeds.iter().zip(&summary.test_acc) {
            let _ = writeln!(table, "{s},{a:?}");
        }
        run.write("repeats.csv", table)?;
        println!(
            "test accuracy over {runs} seeds: {:.4} +/- {:.4}",
            summary.mean, summary.std
        );
    }
    Ok(())
}

fn load_checked(args: &EvalArgs, run: &mut Run) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    run.config = config_json(&ckpt.config);
    run.seed = Some(ckpt.config.seed);
    let dataset = run.dataset(&args.dataset)?;
    let actual = dataset.fingerprint();
    if actual != ckpt.dataset_fingerprint {
        if !args.force {
            return Err(GsanError::FingerprintMismatch {
                expected: ckpt.dataset_fingerprint.clone(),
                actual,
            });
        }
        eprintln!(
            "warning: dataset fingerprint {actual} differs from checkpoint's {}; continuing because of --force",
            ckpt.dataset_fingerprint
        );
    }
    Ok((ckpt, dataset))
}

fn cmd_eval(args: &EvalArgs, run: &mut Run) -> Result<()> {
    let (ckpt, dataset) = load_checked(args, run)?;
    let model = ckpt.model()?;
    let (logits, _) = predict(&model, &dataset, &ckpt.config)?;
    let mut table = String::from("split,accuracy\n");
    for split in Split::ALL {
        match accuracy(&logits, &dataset.labels, dataset.mask(split)) {
            Ok(acc) => {
                println!("{} accuracy: {acc:.4}", split.name());
                let _ = writeln!(table, "{},{acc:?}", split.name());
            }
            Err(GsanError::EmptyMask) => {
                println!("{} accuracy: n/a (empty mask)", split.name());
                let _ = writeln!(table, "{},", split.name());
            }
            Err(e) => return Err(e),
        }
    }
    run.write("eval.csv", table)?;
    Ok(())
}

/// Counts of `values` in `bins` log-spaced bins over `[lo, hi]`, as
/// `(lower, upper, count)`. Values outside the range are clamped into the
/// end bins.
pub fn ratio_histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64, usize)> {
    let (llo, lhi) = (lo.log10(), hi.log10());
    let per_decade = bins as f64 / (lhi - llo);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let pos = ((v.log10() - llo) * per_decade).floor();
        let idx = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let edge = |k: usize| 10f64.powf(llo + k as f64 / per_decade);
            (edge(i), edge(i + 1), c)
        })
        .collect()
}

fn cmd_attn_ratio(args: &EvalArgs, run: &mut Run) -> Result<()> {
    let (ckpt, dataset) = load_checked(args, run)?;
    if ckpt.config.model.architecture != Architecture::Gsan {
        return Err(GsanError::InvalidArgument(
            "attention ratios need a GSAN checkpoint".into(),
        ));
    }
    let model = ckpt.model()?;
    let (_, diags) = predict(&model, &dataset, &ckpt.config)?;
    let (global, per_node) = attention_ratio(&diags)?;

    let mut nodes = String::from("node,ratio\n");
    for (i, r) in per_node.iter().enumerate() {
        let _ = writeln!(nodes, "{i},{r:?}");
    }
    run.write("attn_ratio_nodes.csv", nodes)?;

    let (lo, hi) = HISTOGRAM_RANGE;
    let mut hist = String::from("bin,lower,upper,count\n");
    for (i, (l, u, c)) in ratio_histogram(
        per_node.as_slice().expect("contiguous"),
        HISTOGRAM_BINS,
        lo,
        hi,
    )
    .into_iter()
    .enumerate()
    {
        let _ = writeln!(hist, "{i},{l:?},{u:?},{c}");
    }
    run.write("attn_ratio_hist.csv", hist)?;
    println!("global attention ratio: {global:.6}");
    Ok(())
}

fn parse_fault(spec: &str) -> Result<(OpKind, f64)> {
    let (name, factor) = match spec.split_once(':') {
        Some((n, f)) => (
            n,
            f.parse::<f64>()
                .map_err(|_| GsanError::InvalidArgument(format!("bad fault factor '{f}'")))?,
        ),
        None => (spec, 1.5),
    };
    let kind = OpKind::from_name(name)
        .ok_or_else(|| GsanError::InvalidArgument(format!("unknown op '{name}'")))?;
    Ok((kind, factor))
}

fn cmd_gradcheck(args: &GradcheckArgs, run: &mut Run) -> Result<()> {
    let config = load_config(args.config.as_deref(), None)?;
    run.config = config_json(&config);
    run.seed = Some(args.seed);
    let fault = args.inject_fault.as_deref().map(parse_fault).transpose()?;
    let report = check_model(&config.model, args.seed, fault, GradCheckOptions::default())?;

    let mut table = String::from("param,max_rel_err,checked,skipped,passed\n");
    for p in &report.params {
        println!(
            "{:<18} max_rel_err={:.3e} checked={} skipped={} {}",
            p.name,
            p.max_rel_err,
            p.checked,
            p.skipped,
            if p.passed { "PASS" } else { "FAIL" }
        );
        let _ = writeln!(
            table,
            "{},{:?},{},{},{}",
            p.name, p.max_rel_err, p.checked, p.skipped, p.passed
        );
    }
    run.write("gradcheck.csv", table)?;
    if let Some(w) = report.worst() {
        println!("worst relative error: {:.3e} ({})", w.max_rel_err, w.name);
    }
    if !report.passed() {
        let names: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        eprintln!(
            "gradient check failed (tolerance {:e}) for: {}",
            report.tol,
            names.join(", ")
        );
        run.code = EXIT_GRADCHECK;
    }
    Ok(())
}

fn cmd_dataset_info(dir: &Path, run: &mut Run) -> Result<()> {
    let dataset = run.dataset(dir)?;
    let stats = dataset_stats(&dataset);
    let homophily = match stats.homophily {
        Some(h) => format!("homophily {h:.4}"),
        None => "homophily n/a (no edges)".into(),
    };
    println!(
        "{} classes, {} nodes, {} edges (undirected, counted once), {} features, {homophily}",
        stats.classes,
        stats.nodes,
        stats.edges,
        dataset.num_features()
    );
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    println!(
        "splits: {} train, {} valid, {} test",
        count(&dataset.train),
        count(&dataset.valid),
        count(&dataset.test)
    );
    run.write(
        "stats.json",
        serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    )?;
    Ok(())
}

fn cmd_dataset_synth(args: &SynthArgs, run: &mut Run) -> Result<()> {
    let params = SbmParams {
        nodes: args.nodes,
        classes: args.classes,
        p_in: args.p_in,
        p_out: args.p_out,
        feature_dim: args.features,
        signal_strength: args.signal,
        seed: args.seed,
    };
    run.config = serde_json::to_value(&params).expect("params serialize");
    run.seed = Some(args.seed);
    let dataset = generate_sbm(&params)?;
    save_dataset(&dataset, &args.out)?;
    run.fingerprint = Some(dataset.fingerprint());
    run.artifacts.extend(
        [
            crate::data::EDGES_FILE,
            crate::data::FEATURES_FILE,
            crate::data::LABELS_FILE,
            crate::data::SPLITS_FILE,
        ]
        .map(String::from),
    );
    let stats = dataset_stats(&dataset);
    println!(
        "wrote {} nodes, {} edges, homophily {:.4} to {}",
        stats.nodes,
        stats.edges,
        stats.homophily.unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_grid(args: &GridArgs, run: &mut Run) -> Result<()> {
    let base = load_config(args.config.as_deref(), args.seed)?;
    let grid = match &args.grid {
        Some(p) if !p.is_file() => return Err(GsanError::MissingFile(p.clone())),
        Some(p) => Grid::from_toml(&fs::read_to_string(p)?)?,
        None => Grid::default(),
    };
    run.config = serde_json::json!({ "base": config_json(&base), "grid": grid });
    run.seed = Some(base.seed);
    let dataset = run.dataset(&args.dataset)?;
    let outcome = grid_search(&dataset, &base, &grid)?;
    run.write("grid.csv", grid_table(&outcome))?;
    let best = outcome.best();
    run.write(
        "checkpoint.json",
        Checkpoint::from_fit(best, &dataset).to_json(),
    )?;
    run.write("best_config.toml", outcome.best_config().to_toml())?;
    println!(
        "{} grid points; best #{}: heads={} residual_alpha={} head_width={}",
        outcome.rows.len(),
        outcome.best_index,
        best.config.model.heads,
        best.config.model.residual_alpha,
        best.config.model.head_width
    );
    println!(
        "best valid accuracy: {:.4}, test accuracy: {:.4}",
        best.best_valid_acc, best.test_acc
    );
    Ok(())
}
