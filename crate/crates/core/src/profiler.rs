//! Calibration statistics and neuron importance.
//!
//! Removing neuron `j` from a layer changes its output on `X` by exactly
//! `‖σ(XU[:, j])‖²_F · ‖V[j, :]‖²_F`. [`NeuronStats`] accumulates the first
//! factor over calibration batches and the second once from `V`; the
//! importance score is their product with the activation term averaged per
//! token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{FfnLayer, HeavyHitterSet};
use crate::linalg::{frobenius_dist_sq, DenseMatrix};

pub const STATS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub version: u32,
    pub layer_index: usize,
    pub d_ff: usize,
    pub tokens_seen: u64,
    /// `Σ σ(xU)ᵢⱼ²` over every calibration token, per neuron.
    pub act_norm_sq: Vec<f64>,
    /// `‖V[j, :]‖²`, per neuron.
    pub v_row_norm_sq: Vec<f64>,
}

impl NeuronStats {
    /// Empty statistics for `layer`.
    pub fn new(layer_index: usize, layer: &FfnLayer) -> Self {
        let v = layer.down();
        let v_row_norm_sq = (0..v.rows())
            .map(|j| v.row(j).iter().map(|&x| (x as f64) * (x as f64)).sum())
            .collect();
        Self {
            version: STATS_VERSION,
            layer_index,
            d_ff: layer.d_ff(),
            tokens_seen: 0,
            act_norm_sq: vec![0.0; layer.d_ff()],
            v_row_norm_sq,
        }
    }

    /// Adds one calibration batch. Rows are folded in order, so two batches
    /// give the same bits as their concatenation.
    pub fn accumulate(&mut self, layer: &FfnLayer, x: &DenseMatrix) -> Result<()> {
        if layer.d_ff() != self.d_ff {
            return Err(Error::Shape(format!(
                "statistics track {} neurons, layer has {}",
                self.d_ff,
                layer.d_ff()
            )));
        }
        let h = layer.hidden(x)?;
        for i in 0..h.rows() {
            for (acc, &v) in self.act_norm_sq.iter_mut().zip(h.row(i)) {
                *acc += (v as f64) * (v as f64);
            }
        }
        self.tokens_seen += x.rows() as u64;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: NeuronStats = serde_json::from_str(text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != STATS_VERSION {
            return Err(Error::format(
                0,
                format!("unsupported statistics version {}", self.version),
            ));
        }
        if self.act_norm_sq.len() != self.d_ff || self.v_row_norm_sq.len() != self.d_ff {
            return Err(Error::format(0, "statistics vectors do not match d_ff"));
        }
        let ok = |v: &f64| v.is_finite() && *v >= 0.0;
        if !self.act_norm_sq.iter().all(ok) || !self.v_row_norm_sq.iter().all(ok) {
            return Err(Error::format(0, "statistics must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Runs every calibration batch through `layer`.
pub fn profile_layer(layer_index: usize, layer: &FfnLayer, calib: &[DenseMatrix]) -> Result<NeuronStats> {
    let mut stats = NeuronStats::new(layer_index, layer);
    for x in calib {
        stats.accumulate(layer, x)?;
    }
    Ok(stats)
}

/// Which quantity ranks neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Mean per-token removal residual: `act_norm_sq/tokens · ‖V[j, :]‖²`.
    #[default]
    Residual,
    /// Mean per-token activation energy alone, ignoring `V`.
    OutputNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layer_index: usize,
    pub scores: Vec<f64>,
    /// Neurons by descending score; ties go to the lower index first.
    pub sorted_order: Vec<usize>,
}

impl ImportanceReport {
    pub fn from_scores(layer_index: usize, scores: Vec<f64>) -> Self {
        let mut sorted_order: Vec<usize> = (0..scores.len()).collect();
        sorted_order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            layer_index,
            scores,
            sorted_order,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.scores.len()
    }
}

pub fn importance(stats: &NeuronStats) -> Result<ImportanceReport> {
    importance_with(stats, ScoreKind::Residual)
}

pub fn importance_with(stats: &NeuronStats, kind: ScoreKind) -> Result<ImportanceReport> {
    if stats.tokens_seen == 0 {
        return Err(Error::EmptyCalibration);
    }
    let tokens = stats.tokens_seen as f64;
    let scores = stats
        .act_norm_sq
        .iter()
        .zip(&stats.v_row_norm_sq)
        .map(|(&a, &v)| match kind {
            ScoreKind::Residual => a / tokens * v,
            ScoreKind::OutputNorm => a / tokens,
        })
        .collect();
    Ok(ImportanceReport::from_scores(stats.layer_index, scores))
}

/// `floor(frac · n)`, clamped to `0..=n`.
pub fn fraction_count(frac: f64, n: usize) -> usize {
    if frac.is_nan() || frac <= 0.0 {
        return 0;
    }
    ((frac * n as f64).floor() as usize).min(n)
}

/// The top `floor(keep_frac·d_ff)` neurons of `rep`, ascending.
pub fn select_heavy_hitters(rep: &ImportanceReport, keep_frac: f64) -> HeavyHitterSet {
    let k = fraction_count(keep_frac, rep.d_ff());
    HeavyHitterSet::new(rep.layer_index, rep.sorted_order[..k].to_vec(), rep.d_ff())
        .expect("sorted_order is a permutation")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTarget {
    /// Highest-scoring neurons ("heavy hitters").
    Top,
    /// Lowest-scoring neurons ("light hitters").
    Bottom,
}

/// Mean per-token `‖FFN(x) − FFN₋idx(x)‖²_F` over the calibration batches.
pub fn ablation_residual(layer: &FfnLayer, idx: &[usize], calib: &[DenseMatrix]) -> Result<f64> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let ablated = layer.remove_neurons(idx)?;
    let mut total = 0.0;
    let mut tokens = 0usize;
    for x in calib {
        total += frobenius_dist_sq(&layer.forward(x)?, &ablated.forward(x)?)?;
        tokens += x.rows();
    }
    if tokens == 0 {
        return Err(Error::EmptyCalibration);
    }
    Ok(total / tokens as f64)
}

/// Removes the `floor(frac·d_ff)` highest- or lowest-scoring neurons and
/// measures the output residual on `calib`.
pub fn ablate_and_measure(
    layer: &FfnLayer,
    rep: &ImportanceReport,
    frac: f64,
    which: AblationTarget,
    calib: &[DenseMatrix],
) -> Result<f64> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Range(format!("ablation fraction {frac} outside (0, 1)")));
    }
    if rep.d_ff() != layer.d_ff() {
        return Err(Error::Shape(format!(
            "report covers {} neurons, layer has {}",
            rep.d_ff(),
            layer.d_ff()
        )));
    }
    let n = fraction_count(frac, layer.d_ff());
    if n == 0 {
        return Err(Error::DegenerateAblation {
            frac,
            d_ff: layer.d_ff(),
        });
    }
    let order = &rep.sorted_order;
    let idx = match which {
        AblationTarget::Top => order[..n].to_vec(),
        AblationTarget::Bottom => order[order.len() - n..].to_vec(),
    };
    ablation_residual(layer, &idx, calib)
}

/// Scores in descending order.
pub fn norm_distribution(rep: &ImportanceReport) -> Vec<f64> {
    rep.sorted_order.iter().map(|&j| rep.scores[j]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn toy(v: [[f32; 2]; 2]) -> FfnLayer {
        FfnLayer::new(DenseMatrix::identity(2), DenseMatrix::from_rows(&v).unwrap()).unwrap()
    }

    fn random_layer(d: usize, d_ff: usize, seed: u64) -> FfnLayer {
        let mut rng = SplitMix64::new(seed);
        let mut g = |r, c| DenseMatrix::from_fn(r, c, |_, _| rng.next_gaussian() as f32);
        let up = g(d, d_ff);
        FfnLayer::new(up, g(d_ff, d)).unwrap()
    }

    fn batches(n: usize, s: usize, d: usize, seed: u64) -> Vec<DenseMatrix> {
        let mut rng = SplitMix64::new(seed);
        (0..n)
            .map(|_| DenseMatrix::from_fn(s, d, |_, _| rng.next_gaussian() as f32))
            .collect()
    }

    #[test]
    fn zero_batch_only_counts_tokens() {
        let l = toy([[2.0, 0.0], [0.0, 1.0]]);
        let mut st = NeuronStats::new(0, &l);
        st.accumulate(&l, &DenseMatrix::zeros(5, 2)).unwrap();
        assert_eq!(st.act_norm_sq, vec![0.0, 0.0]);
        assert_eq!(st.tokens_seen, 5);
    }

    #[test]
    fn hand_checked_scores() {
        let l = toy([[2.0, 0.0], [0.0, 1.0]]);
        let mut st = NeuronStats::new(0, &l);
        st.accumulate(&l, &DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        // gelu(1)^2 = 0.8413447^2
        assert!((st.act_norm_sq[0] - 0.707_861).abs() < 1e-5);
        assert_eq!(st.act_norm_sq[1], 0.0);
        let rep = importance(&st).unwrap();
        assert!((rep.scores[0] - 2.831_444).abs() < 1e-5);
        assert_eq!(rep.scores[1], 0.0);
        assert_eq!(rep.sorted_order, vec![0, 1]);
    }

    #[test]
    fn split_batches_equal_concatenation() {
        let l = random_layer(6, 12, 1);
        let b = batches(2, 7, 6, 2);
        let mut two = NeuronStats::new(0, &l);
        two.accumulate(&l, &b[0]).unwrap();
        two.accumulate(&l, &b[1]).unwrap();
        let mut one = NeuronStats::new(0, &l);
        one.accumulate(&l, &DenseMatrix::vstack(&[&b[0], &b[1]]).unwrap())
            .unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn zero_v_rows_give_zero_scores_and_index_order() {
        let l = toy([[0.0, 0.0], [0.0, 0.0]]);
        let st = profile_layer(0, &l, &batches(1, 3, 2, 4)).unwrap();
        let rep = importance(&st).unwrap();
        assert_eq!(rep.scores, vec![0.0, 0.0]);
        assert_eq!(rep.sorted_order, vec![0, 1]);
    }

    #[test]
    fn empty_calibration_is_an_error() {
        let l = toy([[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            importance(&NeuronStats::new(0, &l)),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn selection_examples() {
        let rep = ImportanceReport::from_scores(0, vec![5.0, 1.0, 9.0, 0.0, 2.0, 2.0, 0.0, 7.0]);
        assert_eq!(rep.sorted_order, vec![2, 7, 0, 4, 5, 1, 3, 6]);
        assert_eq!(select_heavy_hitters(&rep, 0.25).indices(), &[2, 7]);
        assert_eq!(select_heavy_hitters(&rep, 1.0).indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert!(select_heavy_hitters(&rep, 0.0).is_empty());
    }

    #[test]
    fn unused_neurons_ablate_to_zero() {
        // Neuron 1 only sees the second input feature, which is always zero.
        let l = toy([[1.0, 0.5], [3.0, 1.0]]);
        let calib = vec![DenseMatrix::from_rows(&[[1.0, 0.0], [-2.0, 0.0]]).unwrap()];
        let rep = importance(&profile_layer(0, &l, &calib).unwrap()).unwrap();
        let r = ablate_and_measure(&l, &rep, 0.5, AblationTarget::Bottom, &calib).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn single_neuron_ablation_equals_score() {
        let l = random_layer(5, 10, 5);
        let calib = batches(3, 4, 5, 6);
        let rep = importance(&profile_layer(0, &l, &calib).unwrap()).unwrap();
        for j in 0..10 {
            let r = ablation_residual(&l, &[j], &calib).unwrap();
            assert!((r - rep.scores[j]).abs() <= 1e-5 * rep.scores[j].max(1e-12), "j={j}");
        }
        let top = ablate_and_measure(&l, &rep, 0.1, AblationTarget::Top, &calib).unwrap();
        assert!((top - rep.scores[rep.sorted_order[0]]).abs() <= 1e-5 * top);
    }

    #[test]
    fn ablation_rejects_degenerate_fractions() {
        let l = random_layer(3, 8, 1);
        let calib = batches(1, 2, 3, 1);
        let rep = importance(&profile_layer(0, &l, &calib).unwrap()).unwrap();
        assert!(matches!(
            ablate_and_measure(&l, &rep, 0.1, AblationTarget::Top, &calib),
            Err(Error::DegenerateAblation { .. })
        ));
        assert!(matches!(
            ablate_and_measure(&l, &rep, 1.0, AblationTarget::Top, &calib),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            ablate_and_measure(&l, &rep, 0.5, AblationTarget::Top, &[]),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn distribution_is_descending() {
        let rep = ImportanceReport::from_scores(0, vec![1.0, 1.0, 1.0]);
        assert_eq!(norm_distribution(&rep), vec![1.0, 1.0, 1.0]);
        let rep = ImportanceReport::from_scores(0, vec![0.5, 3.0, 2.0]);
        assert_eq!(norm_distribution(&rep), vec![3.0, 2.0, 0.5]);
    }

    #[test]
    fn stats_json_round_trip() {
        let l = random_layer(4, 6, 3);
        let st = profile_layer(2, &l, &batches(2, 3, 4, 9)).unwrap();
        let back = NeuronStats::from_json(&st.to_json().unwrap()).unwrap();
        assert_eq!(back, st);
        let mut bad = st.clone();
        bad.version = 2;
        assert!(NeuronStats::from_json(&bad.to_json().unwrap()).is_err());
    }
}
