//! Parameter and FLOP accounting, latency measurement, and report files.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::{tail_rank, CompressionMode, CompressionPlan};
use crate::error::{Error, Result};
use crate::ffn::{FfnLayer, SplitFfn};
use crate::linalg::DenseMatrix;
use crate::quant::quantized_param_equivalent;
use crate::rng::SplitMix64;

/// Share of transformer latency attributed to the FFN when extrapolating an
/// FFN-only speedup to a whole model.
pub const FFN_LATENCY_SHARE: f64 = 2.0 / 3.0;
pub const MIN_REPEATS: usize = 11;
pub const MIN_WARMUP: usize = 3;
/// A median below this many timer ticks is rejected as unmeasurable.
pub const MIN_TICKS: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub dense_ffn: f64,
    pub compressed_ffn: f64,
    /// `4d²`, the attention projections of one layer.
    pub mha_equiv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub d: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub plan: CompressionPlan,
    pub heavy_neurons: usize,
    pub tail_neurons: usize,
    /// Tail rank in low-rank mode, `None` in quant mode.
    pub tail_rank: Option<usize>,
    pub per_layer: LayerParams,
    pub dense_ffn_total: f64,
    pub compressed_ffn_total: f64,
    pub mha_equiv_total: f64,
    pub saved: f64,
    /// `saved / (mha_equiv + dense_ffn)`, summed over layers.
    pub reduction_frac_total: f64,
}

/// Low-rank split parameters: `2dk + 2r(d + m)`, or `2dk` for an empty tail.
pub fn lowrank_split_params(d: usize, k: usize, m: usize, r: usize) -> f64 {
    let tail = if m == 0 { 0 } else { 2 * r * (d + m) };
    (2 * d * k + tail) as f64
}

/// Quantized split parameters in `f32` equivalents, groups running along
/// the reduction dimension of each product.
pub fn quant_split_params(d: usize, k: usize, m: usize, plan: &CompressionPlan) -> f64 {
    let g = plan.group_size;
    let pair = |n: usize, bits: u8| {
        // U part stored n×d, V part stored d×n.
        quantized_param_equivalent(n, d, bits, g) + quantized_param_equivalent(d, n, bits, g)
    };
    pair(k, plan.hh_bits) + pair(m, plan.tail_bits)
}

pub fn count_params(d: usize, d_ff: usize, layers: usize, plan: &CompressionPlan) -> ParamReport {
    let k = plan.heavy_count(d_ff);
    let m = d_ff - k;
    let (compressed, rank) = match plan.mode {
        CompressionMode::Lowrank => {
            let r = tail_rank(plan.rank_frac, d, m);
            (lowrank_split_params(d, k, m, r), Some(r))
        }
        CompressionMode::Quant => (quant_split_params(d, k, m, plan), None),
    };
    let per_layer = LayerParams {
        dense_ffn: (2 * d * d_ff) as f64,
        compressed_ffn: compressed,
        mha_equiv: (4 * d * d) as f64,
    };
    let n = layers as f64;
    let dense_total = per_layer.dense_ffn * n;
    let compressed_total = per_layer.compressed_ffn * n;
    let mha_total = per_layer.mha_equiv * n;
    let saved = dense_total - compressed_total;
    let denom = mha_total + dense_total;
    ParamReport {
        d,
        d_ff,
        layers,
        plan: *plan,
        heavy_neurons: k,
        tail_neurons: m,
        tail_rank: rank,
        per_layer,
        dense_ffn_total: dense_total,
        compressed_ffn_total: compressed_total,
        mha_equiv_total: mha_total,
        saved,
        reduction_frac_total: if denom > 0.0 {
            (saved / denom).clamp(0.0, 1.0)
        } else {
            0.0
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub dense: u64,
    pub split: u64,
    pub ratio: f64,
}

/// Multiply-add FLOPs (2 per MAC) of one forward over `s` tokens, excluding
/// the activation. Quantization does not change the product count.
pub fn count_flops(d: usize, d_ff: usize, s: usize, plan: &CompressionPlan) -> FlopReport {
    let (d, d_ff, s) = (d as u64, d_ff as u64, s as u64);
    let dense = 4 * s * d * d_ff;
    let split = match plan.mode {
        CompressionMode::Quant => dense,
        CompressionMode::Lowrank => {
            let k = plan.heavy_count(d_ff as usize) as u64;
            let m = d_ff - k;
            let r = tail_rank(plan.rank_frac, d as usize, m as usize) as u64;
            let tail = if m == 0 { 0 } else { 4 * s * r * (d + m) };
            4 * s * d * k + tail
        }
    };
    FlopReport {
        dense,
        split,
        ratio: if split == 0 {
            f64::INFINITY
        } else {
            dense as f64 / split as f64
        },
    }
}

/// Anything with a forward pass that can be timed.
pub trait Forward {
    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix>;
}

impl Forward for FfnLayer {
    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        FfnLayer::forward(self, x)
    }
}

impl Forward for SplitFfn {
    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        SplitFfn::forward(self, x)
    }
}

/// Summary statistics of repeated timings, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub iqr_ms: f64,
    pub samples_ms: Vec<f64>,
}

// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Timing {
    pub fn from_samples(samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Measurement("no timing samples".into()));
        }
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
        Ok(Self {
            median_ms: median,
            q1_ms: q1,
            q3_ms: q3,
            iqr_ms: q3 - q1,
            samples_ms,
        })
    }
}

/// Smallest observable step of the monotonic clock, in nanoseconds.
pub fn timer_tick_ns() -> f64 {
    let mut best = u128::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos());
    }
    best.max(1) as f64
}

/// Runs `model` on `x` `warmup` times untimed, then `repeats` timed times.
pub fn benchmark_forward(model: &dyn Forward, x: &DenseMatrix, warmup: usize, repeats: usize) -> Result<Timing> {
    if repeats < MIN_REPEATS || warmup < MIN_WARMUP {
        return Err(Error::Range(format!(
            "need at least {MIN_REPEATS} repeats after {MIN_WARMUP} warm-up runs, got {repeats} after {warmup}"
        )));
    }
    for _ in 0..warmup {
        std::hint::black_box(model.forward(x)?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let y = model.forward(x)?;
        let elapsed = t.elapsed();
        std::hint::black_box(y);
        samples.push(elapsed.as_secs_f64() * 1e3);
    }
    let timing = Timing::from_samples(samples)?;
    let tick_ms = timer_tick_ns() * 1e-6;
    if timing.median_ms < MIN_TICKS * tick_ms {
        return Err(Error::Measurement(format!(
            "median {:.6} ms is below {MIN_TICKS} timer ticks of {:.6} ms",
            timing.median_ms, tick_ms
        )));
    }
    Ok(timing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub batch: usize,
    pub seq: usize,
    pub d: usize,
    pub d_ff: usize,
    pub plan: CompressionPlan,
    pub repeats: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn tokens(&self) -> usize {
        self.batch * self.seq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: BenchConfig,
    pub hardware: String,
    pub baseline: Timing,
    pub split: Timing,
    /// `baseline.median_ms / split.median_ms`.
    pub speedup: f64,
    /// Whole-model estimate assuming the FFN is [`FFN_LATENCY_SHARE`] of
    /// latency and everything else is unchanged.
    pub est_end_to_end_speedup: f64,
}

pub fn end_to_end_estimate(ffn_speedup: f64) -> f64 {
    1.0 / ((1.0 - FFN_LATENCY_SHARE) + FFN_LATENCY_SHARE / ffn_speedup)
}

/// Times the dense layer and its split on one shared seeded input of
/// `batch·seq` tokens. Runs are sequential; nothing else is timed meanwhile.
pub fn benchmark_pair(dense: &FfnLayer, split: &SplitFfn, cfg: &BenchConfig, hardware: &str) -> Result<LatencyReport> {
    if dense.d() != cfg.d || split.d() != cfg.d {
        return Err(Error::Shape(format!(
            "benchmark config has d={}, models have {} and {}",
            cfg.d,
            dense.d(),
            split.d()
        )));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let x = DenseMatrix::from_fn(cfg.tokens(), cfg.d, |_, _| rng.next_gaussian() as f32);
    let baseline = benchmark_forward(dense, &x, cfg.warmup, cfg.repeats)?;
    let split_t = benchmark_forward(split, &x, cfg.warmup, cfg.repeats)?;
    let speedup = baseline.median_ms / split_t.median_ms;
    Ok(LatencyReport {
        config: cfg.clone(),
        hardware: hardware.to_string(),
        baseline,
        split: split_t,
        speedup,
        est_end_to_end_speedup: end_to_end_estimate(speedup),
    })
}

/// One row of a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub latency: LatencyReport,
    pub params_dense: f64,
    pub params_split: f64,
    pub reduction_frac: f64,
}

impl BenchRecord {
    pub fn new(latency: LatencyReport) -> Self {
        let c = &latency.config;
        let p = count_params(c.d, c.d_ff, 1, &c.plan);
        Self {
            params_dense: p.per_layer.dense_ffn,
            params_split: p.per_layer.compressed_ffn,
            reduction_frac: p.reduction_frac_total,
            latency,
        }
    }
}

pub const CSV_COLUMNS: [&str; 22] = [
    "batch",
    "seq",
    "d",
    "d_ff",
    "mode",
    "keep_frac",
    "rank_frac",
    "hh_bits",
    "tail_bits",
    "group_size",
    "repeats",
    "warmup",
    "threads",
    "baseline_ms",
    "split_ms",
    "speedup",
    "params_dense",
    "params_split",
    "reduction_frac",
    "baseline_iqr_ms",
    "split_iqr_ms",
    "est_end_to_end_speedup",
];

/// One CSV row per record, columns in [`CSV_COLUMNS`] order.
pub fn emit_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Range("report needs at least one record".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        let l = &r.latency;
        let c = &l.config;
        w.write_record([
            c.batch.to_string(),
            c.seq.to_string(),
            c.d.to_string(),
            c.d_ff.to_string(),
            c.plan.mode.to_string(),
            c.plan.keep_frac.to_string(),
            c.plan.rank_frac.to_string(),
            c.plan.hh_bits.to_string(),
            c.plan.tail_bits.to_string(),
            c.plan.group_size.to_string(),
            c.repeats.to_string(),
            c.warmup.to_string(),
            c.threads.to_string(),
            l.baseline.median_ms.to_string(),
            l.split.median_ms.to_string(),
            l.speedup.to_string(),
            r.params_dense.to_string(),
            r.params_split.to_string(),
            r.reduction_frac.to_string(),
            l.baseline.iqr_ms.to_string(),
            l.split.iqr_ms.to_string(),
            l.est_end_to_end_speedup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_json(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Range("report needs at least one record".into()));
    }
    Ok(serde_json::to_string_pretty(records)?)
}

pub fn parse_json(text: &str) -> Result<Vec<BenchRecord>> {
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bert() -> CompressionPlan {
        CompressionPlan::default()
    }

    #[test]
    fn bert_base_parameter_reduction() {
        let p = count_params(768, 3072, 12, &bert());
        assert_eq!(p.tail_rank, Some(76));
        assert_eq!(p.per_layer.compressed_ffn, 1_646_592.0);
        assert_eq!(p.per_layer.dense_ffn, 4_718_592.0);
        assert_eq!(p.saved, 12.0 * 3_072_000.0);
        assert!((p.reduction_frac_total - 3_072_000.0 / 7_077_888.0).abs() < 1e-12);
    }

    #[test]
    fn keep_everything_saves_nothing() {
        for rank_frac in [0.0, 0.1, 1.0] {
            let p = count_params(64, 256, 3, &CompressionPlan::lowrank(1.0, rank_frac));
            assert_eq!(p.reduction_frac_total, 0.0);
        }
    }

    #[test]
    fn degenerate_rank_floor() {
        let p = count_params(768, 3072, 1, &CompressionPlan::lowrank(0.0, 0.0));
        assert_eq!(p.per_layer.compressed_ffn, (2 * (768 + 3072)) as f64);
    }

    #[test]
    fn quant_params_use_fp32_equivalents() {
        let plan = CompressionPlan::quant(0.25, 8, 3, 128);
        let p = count_params(256, 1024, 1, &plan);
        let (k, m) = (256.0, 768.0);
        let codes = 2.0 * 256.0 * (k * 8.0 + m * 3.0) / 32.0;
        let groups = 2.0 * (k * 2.0 + 256.0 * 2.0 + m * 2.0 + 256.0 * 6.0);
        assert_eq!(p.per_layer.compressed_ffn, codes + groups);
    }

    #[test]
    fn flop_ratios() {
        assert_eq!(count_flops(64, 256, 16, &CompressionPlan::lowrank(1.0, 0.1)).ratio, 1.0);
        let f = count_flops(768, 3072, 128, &bert());
        assert_eq!(f.dense, 4 * 128 * 768 * 3072);
        assert_eq!(f.split, 4 * 128 * (768 * 768 + 76 * 3072));
        assert!((f.ratio - 2_359_296.0 / 823_296.0).abs() < 1e-12);
        let mut prev = 0.0;
        for rank_frac in [0.9, 0.5, 0.3, 0.1, 0.05] {
            let r = count_flops(768, 3072, 128, &CompressionPlan::lowrank(0.25, rank_frac)).ratio;
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((t.median_ms, t.q1_ms, t.q3_ms, t.iqr_ms), (3.0, 2.0, 4.0, 2.0));
    }

    #[test]
    fn end_to_end_estimate_bounds() {
        assert_eq!(end_to_end_estimate(1.0), 1.0);
        assert!((end_to_end_estimate(2.0) - 1.5).abs() < 1e-12);
        assert!(end_to_end_estimate(1e9) < 3.0);
    }

    #[test]
    fn rejects_short_benchmarks() {
        let l = crate::synth::gen_synthetic_model(4, 8, 0, 2.0, 1).unwrap().layer;
        let x = DenseMatrix::zeros(2, 4);
        assert!(matches!(benchmark_forward(&l, &x, 3, 10), Err(Error::Range(_))));
        assert!(matches!(benchmark_forward(&l, &x, 2, 11), Err(Error::Range(_))));
    }
}
