//! Asymmetric compression of split layers.
//!
//! Low-rank mode factorizes only the tail weights and leaves the heavy
//! hitters untouched. Quant mode quantizes everything, heavy hitters at a
//! higher bit-width than the tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{split_ffn, FfnLayer, HeavyHitterSet, SplitFfn, TailForm, WeightForm};
use crate::linalg::{frobenius_dist_sq, frobenius_norm_sq, truncated_svd, DenseMatrix};
use crate::profiler::fraction_count;
use crate::quant::{check_params, quantize_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionMode {
    #[default]
    Lowrank,
    Quant,
}

impl std::fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompressionMode::Lowrank => "lowrank",
            CompressionMode::Quant => "quant",
        })
    }
}

/// Everything needed to reproduce a compressed layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub mode: CompressionMode,
    /// Fraction of neurons kept as heavy hitters.
    pub keep_frac: f64,
    /// Tail rank as a fraction of `min(d, tail neurons)`.
    pub rank_frac: f64,
    pub hh_bits: u8,
    pub tail_bits: u8,
    pub group_size: usize,
}

impl Default for CompressionPlan {
    fn default() -> Self {
        Self {
            mode: CompressionMode::Lowrank,
            keep_frac: 0.25,
            rank_frac: 0.10,
            hh_bits: 8,
            tail_bits: 3,
            group_size: 128,
        }
    }
}

impl CompressionPlan {
    pub fn lowrank(keep_frac: f64, rank_frac: f64) -> Self {
        Self {
            keep_frac,
            rank_frac,
            ..Self::default()
        }
    }

    pub fn quant(keep_frac: f64, hh_bits: u8, tail_bits: u8, group_size: usize) -> Self {
        Self {
            mode: CompressionMode::Quant,
            keep_frac,
            hh_bits,
            tail_bits,
            group_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("keep_frac", self.keep_frac), ("rank_frac", self.rank_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Range(format!("{name}={v} outside [0, 1]")));
            }
        }
        check_params(self.hh_bits, self.group_size)?;
        check_params(self.tail_bits, self.group_size)
    }

    /// Number of heavy-hitter neurons kept out of `d_ff`.
    pub fn heavy_count(&self, d_ff: usize) -> usize {
        fraction_count(self.keep_frac, d_ff)
    }

    /// `max(1, floor(rank_frac · min(d, tail_neurons)))`.
    pub fn tail_rank(&self, d: usize, tail_neurons: usize) -> usize {
        tail_rank(self.rank_frac, d, tail_neurons)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

pub fn tail_rank(rank_frac: f64, d: usize, tail_neurons: usize) -> usize {
    fraction_count(rank_frac, d.min(tail_neurons)).max(1)
}

fn dense_tail(s: &SplitFfn) -> Result<(&DenseMatrix, &DenseMatrix)> {
    match s.tail() {
        TailForm::Dense { up, .. } if up.cols() == 0 => Err(Error::NothingToCompress),
        TailForm::Dense { up, down } => Ok((up, down)),
        other => Err(Error::Range(format!(
            "tail is already {}; compression needs a dense tail",
            other.kind()
        ))),
    }
}

/// Replaces the dense tail by rank-`r` factors of `U₂` and `V₂`, with
/// `r = max(1, floor(rank_frac · min(d, m)))`. `U₁` and `V₁` are untouched.
pub fn compress_lowrank(s: &SplitFfn, rank_frac: f64) -> Result<SplitFfn> {
    if !(0.0..=1.0).contains(&rank_frac) {
        return Err(Error::Range(format!("rank_frac={rank_frac} outside [0, 1]")));
    }
    let (up, _) = dense_tail(s)?;
    let r = tail_rank(rank_frac, s.d(), up.cols());
    compress_lowrank_with_ranks(s, r, r)
}

/// Factorizes `U₂` at `up_rank` and `V₂` at `down_rank` with two
/// independent truncated SVDs.
pub fn compress_lowrank_with_ranks(s: &SplitFfn, up_rank: usize, down_rank: usize) -> Result<SplitFfn> {
    let (up, down) = dense_tail(s)?;
    let tail = TailForm::LowRank {
        up: truncated_svd(up, up_rank)?,
        down: truncated_svd(down, down_rank)?,
    };
    s.with_parts(s.head_up().clone(), s.head_down().clone(), tail)
}

/// Quantizes heavy-hitter weights at `plan.hh_bits` and the tail at
/// `plan.tail_bits`, grouping along the reduction dimension of each product.
pub fn compress_quant(s: &SplitFfn, plan: &CompressionPlan) -> Result<SplitFfn> {
    if plan.mode != CompressionMode::Quant {
        return Err(Error::Range("compress_quant needs a plan in quant mode".into()));
    }
    plan.validate()?;
    let (up, down) = match s.tail() {
        TailForm::Dense { up, down } => (up, down),
        other => {
            return Err(Error::Range(format!(
                "tail is already {}; quantization needs a dense tail",
                other.kind()
            )))
        }
    };
    let head = |w: &WeightForm| match w {
        WeightForm::Dense(m) => Ok(WeightForm::Quantized(quantize_matrix(
            &m.transpose(),
            plan.hh_bits,
            plan.group_size,
        )?)),
        WeightForm::Quantized(_) => Err(Error::Range("heavy hitters are already quantized".into())),
    };
    let tail = TailForm::Quantized {
        up: quantize_matrix(&up.transpose(), plan.tail_bits, plan.group_size)?,
        down: quantize_matrix(&down.transpose(), plan.tail_bits, plan.group_size)?,
    };
    s.with_parts(head(s.head_up())?, head(s.head_down())?, tail)
}

/// Applies `plan` to a dense split.
pub fn compress(s: &SplitFfn, plan: &CompressionPlan) -> Result<SplitFfn> {
    plan.validate()?;
    match plan.mode {
        CompressionMode::Lowrank => compress_lowrank(s, plan.rank_frac),
        CompressionMode::Quant => compress_quant(s, plan),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared error per output element.
    pub mse: f64,
    /// `‖ref − out‖_F / ‖ref‖_F` over all batches.
    pub rel_err: f64,
}

/// Compares `compressed` against `original` on the calibration batches.
pub fn eval_compression(original: &FfnLayer, compressed: &SplitFfn, calib: &[DenseMatrix]) -> Result<EvalMetrics> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if compressed.d() != original.d() || compressed.original_dff() != original.d_ff() {
        return Err(Error::Shape(format!(
            "compressed layer (d={}, d_ff={}) does not match original (d={}, d_ff={})",
            compressed.d(),
            compressed.original_dff(),
            original.d(),
            original.d_ff()
        )));
    }
    let (mut diff, mut energy, mut count) = (0.0, 0.0, 0usize);
    for x in calib {
        let want = original.forward(x)?;
        let got = compressed.forward(x)?;
        diff += frobenius_dist_sq(&want, &got)?;
        energy += frobenius_norm_sq(&want);
        count += want.len();
    }
    let mse = if count == 0 { 0.0 } else { diff / count as f64 };
    let rel_err = if energy > 0.0 {
        (diff / energy).sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(EvalMetrics { mse, rel_err })
}

/// Largest relative budget gap tolerated by [`compare_at_equal_budget`].
pub const BUDGET_TOLERANCE: f64 = 0.01;

/// Ranks `(r_u, r_v)` for factorizing the whole of `U` and `V` whose
/// parameter count `(r_u + r_v)·(d + d_ff)` is closest to `budget`.
///
/// The two ranks differ by at most one, so odd totals stay reachable.
pub fn uniform_lowrank_ranks(d: usize, d_ff: usize, budget: f64) -> (usize, usize) {
    let per_rank = (d + d_ff) as f64;
    let max_total = 2 * d.min(d_ff);
    let total = ((budget / per_rank).round() as usize).clamp(2, max_total.max(2));
    (total.div_ceil(2), total / 2)
}

/// Low-rank factorization applied to every neuron, with no heavy hitters.
pub fn uniform_lowrank(layer: &FfnLayer, up_rank: usize, down_rank: usize) -> Result<SplitFfn> {
    let all = split_ffn(layer, &HeavyHitterSet::empty(0))?;
    compress_lowrank_with_ranks(&all, up_rank, down_rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub protected_params: f64,
    pub uniform_params: f64,
    pub uniform_ranks: (usize, usize),
    pub protected: EvalMetrics,
    pub uniform: EvalMetrics,
}

/// Builds a uniform low-rank baseline with the same parameter budget as
/// `protected` and evaluates both on `calib`.
///
/// Fails with a range error if no uniform rank pair lands within
/// [`BUDGET_TOLERANCE`] of the protected budget.
pub fn compare_at_equal_budget(
    layer: &FfnLayer,
    protected: &SplitFfn,
    calib: &[DenseMatrix],
) -> Result<BudgetComparison> {
    let protected_params = protected.param_count();
    let (ru, rv) = uniform_lowrank_ranks(layer.d(), layer.d_ff(), protected_params);
    let uniform = uniform_lowrank(layer, ru, rv)?;
    let uniform_params = uniform.param_count();
    let gap = (uniform_params - protected_params).abs() / protected_params;
    if gap > BUDGET_TOLERANCE {
        return Err(Error::Range(format!(
            "no uniform rank pair matches {protected_params} parameters within {:.0}% (best {uniform_params} at ranks {ru}/{rv})",
            BUDGET_TOLERANCE * 100.0
        )));
    }
    Ok(BudgetComparison {
        protected_params,
        uniform_params,
        uniform_ranks: (ru, rv),
        protected: eval_compression(layer, protected, calib)?,
        uniform: eval_compression(layer, &uniform, calib)?,
    })
}
