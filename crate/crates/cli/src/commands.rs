use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use hhsplit::bench::{benchmark_pair, count_flops, count_params, emit_csv, BenchConfig, BenchRecord};
use hhsplit::compress::{compare_at_equal_budget, compress, eval_compression, BudgetComparison, EvalMetrics};
use hhsplit::ffn::{split_ffn, SplitFfn};
use hhsplit::io::{load_checkpoint, load_stats, save_checkpoint, save_stats, Checkpoint};
use hhsplit::profiler::{importance_with, profile_layer, select_heavy_hitters, NeuronStats, ScoreKind};
use hhsplit::synth::{gen_calibration, gen_synthetic_layers, gen_synthetic_model};
use hhsplit::{DenseMatrix, FfnLayer};

use super::{Cli, Command, Failure, PlanArgs, TailArgs};

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Debug, Args, Serialize)]
pub struct GenModelArgs {
    /// Model width.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// FFN hidden width.
    #[arg(long = "dff", default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// Planted heavy hitters per layer.
    #[arg(long, default_value_t = 8)]
    n_heavy: usize,
    /// Scale of planted U columns; V rows get its square root.
    #[arg(long, default_value_t = 10.0)]
    heavy_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenCalibArgs {
    /// Token width; must match the model's d.
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Tokens per batch.
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    #[arg(long, default_value_t = 64)]
    batches: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    /// Dense model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Calibration checkpoint, fed to every layer.
    #[arg(long)]
    calib: PathBuf,
    /// Output statistics file (JSON).
    #[arg(long)]
    stats: PathBuf,
    /// How many top-scoring neurons per layer to list in the result.
    #[arg(long, default_value_t = 16)]
    top: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Score {
    /// Removal residual: activation energy times ‖V row‖².
    Residual,
    /// Activation energy alone.
    OutputNorm,
}

impl From<Score> for ScoreKind {
    fn from(s: Score) -> Self {
        match s {
            Score::Residual => ScoreKind::Residual,
            Score::OutputNorm => ScoreKind::OutputNorm,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Dense model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Statistics from `profile`.
    #[arg(long)]
    stats: PathBuf,
    /// Fraction of neurons per layer kept as heavy hitters (default: top 25%).
    #[arg(long, default_value_t = 0.25)]
    keep_frac: f64,
    #[arg(long, value_enum, default_value_t = Score::Residual)]
    score: Score,
    /// Output split checkpoint.
    #[arg(long)]
    split: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    /// Split checkpoint with dense parts.
    #[arg(long)]
    split: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    plan: TailArgs,
    /// Output checkpoint.
    #[arg(long)]
    compressed: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Dense reference model.
    #[arg(long)]
    model: PathBuf,
    /// Split or compressed checkpoint derived from the model.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Also evaluate low-rank compression of all neurons at the same
    /// parameter budget.
    #[arg(long)]
    uniform_baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Model width of the synthetic layer.
    #[arg(long, default_value_t = 768)]
    d: usize,
    /// FFN hidden width of the synthetic layer.
    #[arg(long = "dff", default_value_t = 3072)]
    d_ff: usize,
    /// Time layer 0 of this dense checkpoint instead of a synthetic layer.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    batch: Vec<usize>,
    /// Sequence lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "128")]
    seq: Vec<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    plan: PlanArgs,
    /// Timed repetitions per variant (at least 11).
    #[arg(long, default_value_t = 11)]
    repeats: usize,
    /// Untimed warm-up runs per variant (at least 3).
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Calibration batches of 128 tokens used to pick heavy hitters.
    #[arg(long, default_value_t = 2)]
    calib_batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Args, Serialize)]
pub struct ParamsArgs {
    #[arg(long, default_value_t = 768)]
    d: usize,
    #[arg(long = "dff", default_value_t = 3072)]
    d_ff: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    /// Tokens for the FLOP count.
    #[arg(long, default_value_t = 128)]
    seq: usize,
    #[command(flatten)]
    #[serde(flatten)]
    plan: PlanArgs,
}

#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    config: &'a C,
    threads: usize,
    result: R,
}

fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_report<C: Serialize, R: Serialize>(out: Option<&Path>, command: &str, config: &C, result: R) -> Outcome<()> {
    let report = Report {
        command,
        config,
        threads: rayon::current_num_threads(),
        result,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Failure::data(e.to_string()))?;
    text.push('\n');
    emit(out, &text)
}

fn load(path: &Path) -> Outcome<Checkpoint> {
    load_checkpoint(path).map_err(|e| Failure::from_lib(&path.display().to_string(), e))
}

fn save(path: &Path, ckpt: &Checkpoint) -> Outcome<()> {
    save_checkpoint(path, ckpt).map_err(|e| Failure::from_lib(&path.display().to_string(), e))
}

fn load_dense(path: &Path) -> Outcome<Vec<FfnLayer>> {
    match load(path)? {
        Checkpoint::Dense(layers) => Ok(layers),
        other => Err(Failure::data(format!(
            "{}: expected a dense model checkpoint, found kind {:?}",
            path.display(),
            other.kind()
        ))),
    }
}

fn load_splits(path: &Path) -> Outcome<Vec<SplitFfn>> {
    match load(path)? {
        Checkpoint::Split(layers) => Ok(layers),
        other => Err(Failure::data(format!(
            "{}: expected a split checkpoint, found kind {:?}",
            path.display(),
            other.kind()
        ))),
    }
}

fn load_calib(path: &Path) -> Outcome<Vec<DenseMatrix>> {
    match load(path)? {
        Checkpoint::Calibration(batches) => Ok(batches),
        other => Err(Failure::data(format!(
            "{}: expected a calibration checkpoint, found kind {:?}",
            path.display(),
            other.kind()
        ))),
    }
}

fn check_calib(layers: &[FfnLayer], calib: &[DenseMatrix]) -> Outcome<()> {
    if let (Some(l), Some(x)) = (layers.first(), calib.iter().find(|x| x.cols() != layers[0].d())) {
        return Err(Failure::data(format!(
            "calibration batches are {} wide but the model has d={}",
            x.cols(),
            l.d()
        )));
    }
    Ok(())
}

fn check_pair(layers: &[FfnLayer], splits: &[SplitFfn]) -> Outcome<()> {
    if layers.len() != splits.len() {
        return Err(Failure::data(format!(
            "model has {} layers but the split checkpoint has {}",
            layers.len(),
            splits.len()
        )));
    }
    for (l, (a, b)) in layers.iter().zip(splits).enumerate() {
        if a.d() != b.d() || a.d_ff() != b.original_dff() {
            return Err(Failure::data(format!(
                "layer {l}: model is {}x{} but split was made from {}x{}",
                a.d(),
                a.d_ff(),
                b.d(),
                b.original_dff()
            )));
        }
    }
    Ok(())
}

fn hardware() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|v| v.trim().to_string())
    });
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} ({} {}, {cpus} logical CPUs)",
        model.unwrap_or_else(|| "unknown CPU".into()),
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

pub fn run(cli: Cli) -> Outcome<()> {
    let default_threads = match cli.command {
        Command::Bench(_) => 1,
        _ => 0,
    };
    let threads = match cli.threads {
        Some(0) => return Err(Failure::usage("--threads (HH_SPLIT_THREADS) must be at least 1")),
        Some(n) => n,
        None => default_threads,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot start {threads} threads: {e}")))?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::GenModel(a) => gen_model(a, out),
        Command::GenCalib(a) => gen_calib(a, out),
        Command::Profile(a) => profile(a, out),
        Command::Split(a) => split(a, out),
        Command::Compress(a) => compress_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Params(a) => params(a, out),
    }
}

#[derive(Serialize)]
struct PlantedLayer {
    layer: usize,
    planted: Vec<usize>,
}

fn gen_model(a: &GenModelArgs, out: Option<&Path>) -> Outcome<()> {
    if a.layers == 0 {
        return Err(Failure::usage("--layers must be at least 1"));
    }
    let synth = gen_synthetic_layers(a.d, a.d_ff, a.layers, a.n_heavy, a.heavy_scale, a.seed)
        .map_err(|e| Failure::usage(e.to_string()))?;
    let planted: Vec<PlantedLayer> = synth
        .iter()
        .enumerate()
        .map(|(layer, s)| PlantedLayer {
            layer,
            planted: s.planted.clone(),
        })
        .collect();
    save(
        &a.model,
        &Checkpoint::Dense(synth.into_iter().map(|s| s.layer).collect()),
    )?;
    emit_report(
        out,
        "gen-model",
        a,
        serde_json::json!({ "model": a.model, "layers": planted }),
    )
}

fn gen_calib(a: &GenCalibArgs, out: Option<&Path>) -> Outcome<()> {
    if a.d == 0 || a.tokens == 0 {
        return Err(Failure::usage("--d and --tokens must be positive"));
    }
    save(
        &a.calib,
        &Checkpoint::Calibration(gen_calibration(a.tokens, a.d, a.batches, a.seed)),
    )?;
    emit_report(
        out,
        "gen-calib",
        a,
        serde_json::json!({ "calib": a.calib, "batches": a.batches, "tokens_per_batch": a.tokens, "d": a.d }),
    )
}

#[derive(Serialize)]
struct ProfiledLayer {
    layer: usize,
    tokens_seen: u64,
    top: Vec<usize>,
    top_scores: Vec<f64>,
}

fn profile(a: &ProfileArgs, out: Option<&Path>) -> Outcome<()> {
    let layers = load_dense(&a.model)?;
    let calib = load_calib(&a.calib)?;
    check_calib(&layers, &calib)?;
    let stats = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| profile_layer(l, layer, &calib))
        .collect::<hhsplit::Result<Vec<NeuronStats>>>()?;
    save_stats(&a.stats, &stats).map_err(|e| Failure::from_lib(&a.stats.display().to_string(), e))?;
    let summary = stats
        .iter()
        .map(|s| {
            let rep = importance_with(s, ScoreKind::Residual)?;
            let top: Vec<usize> = rep.sorted_order.iter().take(a.top).copied().collect();
            Ok(ProfiledLayer {
                layer: s.layer_index,
                tokens_seen: s.tokens_seen,
                top_scores: top.iter().map(|&j| rep.scores[j]).collect(),
                top,
            })
        })
        .collect::<hhsplit::Result<Vec<_>>>()?;
    emit_report(
        out,
        "profile",
        a,
        serde_json::json!({ "stats": a.stats, "layers": summary }),
    )
}

#[derive(Serialize)]
struct SplitLayer {
    layer: usize,
    heavy_hitters: Vec<usize>,
    head_neurons: usize,
    tail_neurons: usize,
}

fn split(a: &SplitArgs, out: Option<&Path>) -> Outcome<()> {
    if !(0.0..=1.0).contains(&a.keep_frac) {
        return Err(Failure::usage(format!("--keep-frac {} outside [0, 1]", a.keep_frac)));
    }
    let layers = load_dense(&a.model)?;
    let stats = load_stats(&a.stats).map_err(|e| Failure::from_lib(&a.stats.display().to_string(), e))?;
    if stats.len() != layers.len() {
        return Err(Failure::data(format!(
            "{} has statistics for {} layers, the model has {}",
            a.stats.display(),
            stats.len(),
            layers.len()
        )));
    }
    let mut splits = Vec::with_capacity(layers.len());
    for (l, (layer, s)) in layers.iter().zip(&stats).enumerate() {
        if s.layer_index != l || s.d_ff != layer.d_ff() {
            return Err(Failure::data(format!(
                "statistics entry {l} describes layer {} with d_ff={}, model layer {l} has d_ff={}",
                s.layer_index,
                s.d_ff,
                layer.d_ff()
            )));
        }
        let rep = importance_with(s, a.score.into())?;
        splits.push(split_ffn(layer, &select_heavy_hitters(&rep, a.keep_frac))?);
    }
    let summary: Vec<SplitLayer> = splits
        .iter()
        .enumerate()
        .map(|(layer, s)| SplitLayer {
            layer,
            heavy_hitters: s.heavy_hitters().indices().to_vec(),
            head_neurons: s.head_neurons(),
            tail_neurons: s.tail_neurons(),
        })
        .collect();
    save(&a.split, &Checkpoint::Split(splits))?;
    emit_report(
        out,
        "split",
        a,
        serde_json::json!({ "split": a.split, "layers": summary }),
    )
}

#[derive(Serialize)]
struct CompressedLayer {
    layer: usize,
    head_neurons: usize,
    tail_neurons: usize,
    tail: &'static str,
    params_dense: f64,
    params_compressed: f64,
}

fn compress_cmd(a: &CompressArgs, out: Option<&Path>) -> Outcome<()> {
    let splits = load_splits(&a.split)?;
    let mut compressed = Vec::with_capacity(splits.len());
    let mut summary = Vec::with_capacity(splits.len());
    for (l, s) in splits.iter().enumerate() {
        let plan = a.plan.plan(s.head_neurons() as f64 / s.original_dff() as f64)?;
        let c = compress(s, &plan).map_err(|e| Failure::from_lib(&format!("layer {l}"), e))?;
        summary.push(CompressedLayer {
            layer: l,
            head_neurons: c.head_neurons(),
            tail_neurons: c.tail_neurons(),
            tail: c.tail().kind(),
            params_dense: (2 * c.d() * c.original_dff()) as f64,
            params_compressed: c.param_count(),
        });
        compressed.push(c);
    }
    let dense: f64 = summary.iter().map(|s| s.params_dense).sum();
    let kept: f64 = summary.iter().map(|s| s.params_compressed).sum();
    save(&a.compressed, &Checkpoint::Split(compressed))?;
    emit_report(
        out,
        "compress",
        a,
        serde_json::json!({
            "compressed": a.compressed,
            "layers": summary,
            "params_dense": dense,
            "params_compressed": kept,
            "ffn_reduction_frac": if dense > 0.0 { 1.0 - kept / dense } else { 0.0 },
        }),
    )
}

#[derive(Serialize)]
struct EvalLayer {
    layer: usize,
    #[serde(flatten)]
    metrics: EvalMetrics,
    params: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    uniform_baseline: Option<BudgetComparison>,
}

fn eval(a: &EvalArgs, out: Option<&Path>) -> Outcome<()> {
    let layers = load_dense(&a.model)?;
    let splits = load_splits(&a.split)?;
    let calib = load_calib(&a.calib)?;
    check_pair(&layers, &splits)?;
    check_calib(&layers, &calib)?;
    let mut summary = Vec::with_capacity(layers.len());
    for (l, (layer, s)) in layers.iter().zip(&splits).enumerate() {
        let uniform_baseline = if a.uniform_baseline {
            Some(compare_at_equal_budget(layer, s, &calib).map_err(|e| Failure::from_lib(&format!("layer {l}"), e))?)
        } else {
            None
        };
        summary.push(EvalLayer {
            layer: l,
            metrics: eval_compression(layer, s, &calib)?,
            params: s.param_count(),
            uniform_baseline,
        });
    }
    let n = summary.len().max(1) as f64;
    let mean_mse = summary.iter().map(|s| s.metrics.mse).sum::<f64>() / n;
    let mean_rel_err = summary.iter().map(|s| s.metrics.rel_err).sum::<f64>() / n;
    emit_report(
        out,
        "eval",
        a,
        serde_json::json!({ "layers": summary, "mean_mse": mean_mse, "mean_rel_err": mean_rel_err }),
    )
}

fn bench(a: &BenchArgs, out: Option<&Path>) -> Outcome<()> {
    let plan = a.plan.plan()?;
    if a.repeats < hhsplit::bench::MIN_REPEATS || a.warmup < hhsplit::bench::MIN_WARMUP {
        return Err(Failure::usage(format!(
            "need --repeats >= {} and --warmup >= {}",
            hhsplit::bench::MIN_REPEATS,
            hhsplit::bench::MIN_WARMUP
        )));
    }
    if a.batch.contains(&0) || a.seq.contains(&0) {
        return Err(Failure::usage("--batch and --seq values must be positive"));
    }
    let layer = match &a.model {
        Some(path) => load_dense(path)?
            .into_iter()
            .next()
            .ok_or_else(|| Failure::data(format!("{} has no layers", path.display())))?,
        None => {
            gen_synthetic_model(a.d, a.d_ff, 0, 2.0, a.seed)
                .map_err(|e| Failure::usage(e.to_string()))?
                .layer
        }
    };
    let calib = gen_calibration(128, layer.d(), a.calib_batches.max(1), a.seed.wrapping_add(1));
    let stats = profile_layer(0, &layer, &calib)?;
    let rep = importance_with(&stats, ScoreKind::Residual)?;
    let split = split_ffn(&layer, &select_heavy_hitters(&rep, plan.keep_frac))?;
    let compressed = compress(&split, &plan)?;

    let hw = hardware();
    let mut records = Vec::new();
    for &batch in &a.batch {
        for &seq in &a.seq {
            let cfg = BenchConfig {
                batch,
                seq,
                d: layer.d(),
                d_ff: layer.d_ff(),
                plan,
                repeats: a.repeats,
                warmup: a.warmup,
                threads: rayon::current_num_threads(),
                seed: a.seed.wrapping_add(2),
            };
            eprintln!("timing batch={batch} seq={seq} d={} d_ff={}", cfg.d, cfg.d_ff);
            let latency = benchmark_pair(&layer, &compressed, &cfg, &hw)?;
            records.push(BenchRecord::new(latency));
        }
    }
    match a.format {
        Format::Csv => {
            let mut buf = Vec::new();
            emit_csv(&records, &mut buf)?;
            emit(out, &String::from_utf8_lossy(&buf))
        }
        Format::Json => emit_report(
            out,
            "bench",
            a,
            serde_json::json!({ "hardware": hw, "records": records }),
        ),
    }
}

fn params(a: &ParamsArgs, out: Option<&Path>) -> Outcome<()> {
    if a.d == 0 || a.d_ff == 0 || a.layers == 0 || a.seq == 0 {
        return Err(Failure::usage("--d, --dff, --layers and --seq must be positive"));
    }
    let plan = a.plan.plan()?;
    let report = count_params(a.d, a.d_ff, a.layers, &plan);
    let flops = count_flops(a.d, a.d_ff, a.seq, &plan);
    emit_report(
        out,
        "params",
        a,
        serde_json::json!({
            "reduction_frac": report.reduction_frac_total,
            "params": report,
            "flops": flops,
        }),
    )
}
