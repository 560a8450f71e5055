//! Feed-forward layers `σ(XU)V` and their heavy-hitter split.
//!
//! Neuron `j` contributes the rank-one term `σ(XU[:, j])·V[j, :]`, so the
//! layer splits exactly into a heavy-hitter sub-FFN (`U1 = U[:, h]`,
//! `V1 = V[h, :]`) and a tail sub-FFN over the remaining neurons. The tail can
//! then be held densely, as low-rank factors, or quantized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_indices, complement, gelu, matmul, DenseMatrix, LowRankFactors};
use crate::quant::QuantizedMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Gelu => gelu(x),
        }
    }
}

/// A bias-free feed-forward block with up-projection `U` (`d×d_ff`) and
/// down-projection `V` (`d_ff×d`).
#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer {
    up: DenseMatrix,
    down: DenseMatrix,
    activation: Activation,
}

impl FfnLayer {
    pub fn new(up: DenseMatrix, down: DenseMatrix) -> Result<Self> {
        if up.cols() != down.rows() || up.rows() != down.cols() {
            return Err(Error::Shape(format!(
                "FFN weights U {}x{} and V {}x{} are inconsistent",
                up.rows(),
                up.cols(),
                down.rows(),
                down.cols()
            )));
        }
        Ok(Self {
            up,
            down,
            activation: Activation::Gelu,
        })
    }

    pub fn up(&self) -> &DenseMatrix {
        &self.up
    }

    pub fn down(&self) -> &DenseMatrix {
        &self.down
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Hidden size `d`.
    pub fn d(&self) -> usize {
        self.up.rows()
    }

    /// Neuron count `d_ff`.
    pub fn d_ff(&self) -> usize {
        self.up.cols()
    }

    pub fn param_count(&self) -> usize {
        self.up.len() + self.down.len()
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.d() {
            return Err(Error::Shape(format!(
                "input has {} features, layer expects {}",
                x.cols(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Neuron activations `σ(xU)`, shape `s×d_ff`.
    pub fn hidden(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        Ok(self.activation.apply(&matmul(x, &self.up)?))
    }

    /// `σ(xU)V`.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(&self.hidden(x)?, &self.down)
    }

    /// The same output assembled term by term as `Σⱼ σ(xU[:, j])·V[j, :]`.
    pub fn forward_rank_one_sum(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let (s, d) = (x.rows(), self.d());
        let mut acc = vec![0.0f64; s * d];
        for j in 0..self.d_ff() {
            let col = self.up.select_columns(&[j])?;
            let h = self.activation.apply(&matmul(x, &col)?);
            let v = self.down.row(j);
            for i in 0..s {
                let hi = h.get(i, 0) as f64;
                for (a, &vk) in acc[i * d..(i + 1) * d].iter_mut().zip(v) {
                    *a += hi * vk as f64;
                }
            }
        }
        DenseMatrix::new(s, d, acc.into_iter().map(|v| v as f32).collect())
    }

    /// Drops the neurons in `idx` (columns of `U`, rows of `V`).
    pub fn remove_neurons(&self, idx: &[usize]) -> Result<FfnLayer> {
        check_indices(idx, self.d_ff())?;
        let keep = complement(idx, self.d_ff());
        FfnLayer::new(self.up.select_columns(&keep)?, self.down.select_rows(&keep)?)
    }
}

/// Sorted, duplicate-free heavy-hitter neuron indices of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeavyHitterSet {
    layer_index: usize,
    indices: Vec<usize>,
}

impl HeavyHitterSet {
    /// Accepts indices in any order; they are stored ascending.
    pub fn new(layer_index: usize, mut indices: Vec<usize>, d_ff: usize) -> Result<Self> {
        check_indices(&indices, d_ff)?;
        indices.sort_unstable();
        Ok(Self { layer_index, indices })
    }

    pub fn empty(layer_index: usize) -> Self {
        Self {
            layer_index,
            indices: Vec::new(),
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A weight used as the right operand of `x · W`.
///
/// Quantized weights are stored output-major (`Wᵀ`), so quantization groups
/// run along the reduction dimension of the product.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightForm {
    Dense(DenseMatrix),
    Quantized(QuantizedMatrix),
}

impl WeightForm {
    /// `(in, out)` shape of `W`.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            WeightForm::Dense(m) => m.shape(),
            WeightForm::Quantized(q) => (q.cols(), q.rows()),
        }
    }

    /// `x · W`, using the fused dequantizing kernel for quantized weights.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            WeightForm::Dense(m) => matmul(x, m),
            WeightForm::Quantized(q) => q.matmul_transposed(x),
        }
    }

    /// `x · W` through a fully dequantized copy of `W`.
    pub fn apply_reference(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        match self {
            WeightForm::Dense(m) => matmul(x, m),
            WeightForm::Quantized(q) => matmul(x, &q.dequantize().transpose()),
        }
    }

    /// `W` in `(in, out)` orientation.
    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            WeightForm::Dense(m) => m.clone(),
            WeightForm::Quantized(q) => q.dequantize().transpose(),
        }
    }

    pub fn param_equivalent(&self) -> f64 {
        match self {
            WeightForm::Dense(m) => m.len() as f64,
            WeightForm::Quantized(q) => q.param_equivalent(),
        }
    }
}

/// Storage of the non-heavy-hitter sub-FFN.
#[derive(Debug, Clone, PartialEq)]
pub enum TailForm {
    Dense {
        up: DenseMatrix,
        down: DenseMatrix,
    },
    LowRank {
        up: LowRankFactors,
        down: LowRankFactors,
    },
    /// Both weights output-major, see [`WeightForm`].
    Quantized {
        up: QuantizedMatrix,
        down: QuantizedMatrix,
    },
}

impl TailForm {
    pub fn kind(&self) -> &'static str {
        match self {
            TailForm::Dense { .. } => "dense",
            TailForm::LowRank { .. } => "lowrank",
            TailForm::Quantized { .. } => "quantized",
        }
    }

    /// `(d, neurons)` implied by the up-projection, and `(neurons, d)` by the
    /// down-projection.
    fn shapes(&self) -> ((usize, usize), (usize, usize)) {
        match self {
            TailForm::Dense { up, down } => (up.shape(), down.shape()),
            TailForm::LowRank { up, down } => (up.shape(), down.shape()),
            TailForm::Quantized { up, down } => ((up.cols(), up.rows()), (down.cols(), down.rows())),
        }
    }

    pub fn neurons(&self) -> usize {
        self.shapes().0 .1
    }

    pub fn param_equivalent(&self) -> f64 {
        match self {
            TailForm::Dense { up, down } => (up.len() + down.len()) as f64,
            TailForm::LowRank { up, down } => (up.param_count() + down.param_count()) as f64,
            TailForm::Quantized { up, down } => up.param_equivalent() + down.param_equivalent(),
        }
    }

    fn forward(&self, act: Activation, x: &DenseMatrix, reference: bool) -> Result<DenseMatrix> {
        match self {
            TailForm::Dense { up, down } => matmul(&act.apply(&matmul(x, up)?), down),
            TailForm::LowRank { up, down } => down.apply(&act.apply(&up.apply(x)?)),
            TailForm::Quantized { up, down } if reference => {
                let h = act.apply(&matmul(x, &up.dequantize().transpose())?);
                matmul(&h, &down.dequantize().transpose())
            }
            TailForm::Quantized { up, down } => down.matmul_transposed(&act.apply(&up.matmul_transposed(x)?)),
        }
    }
}

/// A layer split into `FFN₁` over the heavy hitters and `FFN₂` over the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFfn {
    head_up: WeightForm,
    head_down: WeightForm,
    tail: TailForm,
    hh: HeavyHitterSet,
    original_dff: usize,
    activation: Activation,
}

impl SplitFfn {
    pub fn from_parts(
        head_up: WeightForm,
        head_down: WeightForm,
        tail: TailForm,
        hh: HeavyHitterSet,
        original_dff: usize,
    ) -> Result<Self> {
        let (d, k) = head_up.shape();
        let ((td, m), (tm, td2)) = tail.shapes();
        if head_down.shape() != (k, d) || td != d || tm != m || td2 != d {
            return Err(Error::Shape(format!(
                "split parts disagree: U1 {:?}, V1 {:?}, tail {:?}/{:?}",
                head_up.shape(),
                head_down.shape(),
                (td, m),
                (tm, td2)
            )));
        }
        if hh.len() != k || k + m != original_dff {
            return Err(Error::Shape(format!(
                "{} heavy hitters and {m} tail neurons do not make up d_ff={original_dff} with {k} head neurons",
                hh.len()
            )));
        }
        check_indices(hh.indices(), original_dff)?;
        Ok(Self {
            head_up,
            head_down,
            tail,
            hh,
            original_dff,
            activation: Activation::Gelu,
        })
    }

    pub fn head_up(&self) -> &WeightForm {
        &self.head_up
    }

    pub fn head_down(&self) -> &WeightForm {
        &self.head_down
    }

    pub fn tail(&self) -> &TailForm {
        &self.tail
    }

    pub fn heavy_hitters(&self) -> &HeavyHitterSet {
        &self.hh
    }

    pub fn original_dff(&self) -> usize {
        self.original_dff
    }

    pub fn d(&self) -> usize {
        self.head_up.shape().0
    }

    pub fn head_neurons(&self) -> usize {
        self.hh.len()
    }

    pub fn tail_neurons(&self) -> usize {
        self.tail.neurons()
    }

    /// Ascending original indices of the tail neurons.
    pub fn tail_indices(&self) -> Vec<usize> {
        complement(self.hh.indices(), self.original_dff)
    }

    /// Weight storage in `f32` equivalents (quantized weights count
    /// `bits/32` per code plus one scale and one zero per group).
    pub fn param_count(&self) -> f64 {
        self.head_up.param_equivalent() + self.head_down.param_equivalent() + self.tail.param_equivalent()
    }

    /// Replaces the parts, keeping the heavy-hitter bookkeeping.
    pub(crate) fn with_parts(&self, head_up: WeightForm, head_down: WeightForm, tail: TailForm) -> Result<Self> {
        Self::from_parts(head_up, head_down, tail, self.hh.clone(), self.original_dff)
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.d() {
            return Err(Error::Shape(format!(
                "input has {} features, split layer expects {}",
                x.cols(),
                self.d()
            )));
        }
        Ok(())
    }

    fn forward_impl(&self, x: &DenseMatrix, reference: bool) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let apply = |w: &WeightForm, x: &DenseMatrix| {
            if reference {
                w.apply_reference(x)
            } else {
                w.apply(x)
            }
        };
        let head = apply(&self.head_down, &self.activation.apply(&apply(&self.head_up, x)?))?;
        if self.tail.neurons() == 0 {
            return Ok(head);
        }
        let tail = self.tail.forward(self.activation, x, reference)?;
        head.add(&tail)
    }

    /// `FFN₁(x) + FFN₂(x)`. Low-rank tails are applied factor by factor and
    /// quantized weights through the fused dequantizing product.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward_impl(x, false)
    }

    /// Same as [`SplitFfn::forward`] but dequantizes every quantized weight
    /// before a plain product.
    pub fn forward_reference(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward_impl(x, true)
    }
}

/// Splits `layer` by `hh`; the tail keeps the remaining neurons densely in
/// ascending index order. No weight value changes.
pub fn split_ffn(layer: &FfnLayer, hh: &HeavyHitterSet) -> Result<SplitFfn> {
    check_indices(hh.indices(), layer.d_ff())?;
    let tail_idx = complement(hh.indices(), layer.d_ff());
    SplitFfn::from_parts(
        WeightForm::Dense(layer.up().select_columns(hh.indices())?),
        WeightForm::Dense(layer.down().select_rows(hh.indices())?),
        TailForm::Dense {
            up: layer.up().select_columns(&tail_idx)?,
            down: layer.down().select_rows(&tail_idx)?,
        },
        hh.clone(),
        layer.d_ff(),
    )
}
