//! Seeded synthetic layers and calibration data.

use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::linalg::DenseMatrix;
use crate::rng::SplitMix64;

/// A generated layer together with the neurons planted as heavy hitters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayer {
    pub layer: FfnLayer,
    /// Ascending.
    pub planted: Vec<usize>,
}

/// Draws `U` (`d×d_ff`) then `V` (`d_ff×d`) row-major from `N(0, 1/d)`, picks
/// `n_heavy` distinct neurons by partial Fisher–Yates shuffle, scales their
/// `U` columns by `heavy_scale` and their `V` rows by `√heavy_scale`.
pub fn gen_synthetic_model(
    d: usize,
    d_ff: usize,
    n_heavy: usize,
    heavy_scale: f64,
    seed: u64,
) -> Result<SyntheticLayer> {
    let mut rng = SplitMix64::new(seed);
    gen_with(&mut rng, d, d_ff, n_heavy, heavy_scale)
}

/// `layers` independent layers; layer `l` uses the generator forked from
/// `seed` with index `l`.
pub fn gen_synthetic_layers(
    d: usize,
    d_ff: usize,
    layers: usize,
    n_heavy: usize,
    heavy_scale: f64,
    seed: u64,
) -> Result<Vec<SyntheticLayer>> {
    let root = SplitMix64::new(seed);
    (0..layers)
        .map(|l| gen_with(&mut root.fork(l as u64), d, d_ff, n_heavy, heavy_scale))
        .collect()
}

fn gen_with(rng: &mut SplitMix64, d: usize, d_ff: usize, n_heavy: usize, heavy_scale: f64) -> Result<SyntheticLayer> {
    if d == 0 || d_ff == 0 {
        return Err(Error::Range(format!(
            "dimensions must be positive, got d={d}, d_ff={d_ff}"
        )));
    }
    if n_heavy > d_ff {
        return Err(Error::Range(format!(
            "{n_heavy} heavy hitters requested from {d_ff} neurons"
        )));
    }
    if heavy_scale.is_nan() || heavy_scale <= 1.0 || heavy_scale.is_infinite() {
        return Err(Error::Range(format!(
            "heavy_scale must be finite and > 1, got {heavy_scale}"
        )));
    }
    let std = 1.0 / (d as f64).sqrt();
    let mut up = DenseMatrix::from_fn(d, d_ff, |_, _| (rng.next_gaussian() * std) as f32);
    let mut down = DenseMatrix::from_fn(d_ff, d, |_, _| (rng.next_gaussian() * std) as f32);

    let mut perm: Vec<usize> = (0..d_ff).collect();
    for i in 0..n_heavy {
        let j = i + rng.next_below((d_ff - i) as u64) as usize;
        perm.swap(i, j);
    }
    let mut planted = perm[..n_heavy].to_vec();
    planted.sort_unstable();

    let col_scale = heavy_scale as f32;
    let row_scale = heavy_scale.sqrt() as f32;
    for &j in &planted {
        for i in 0..d {
            let v = up.get(i, j);
            up.set(i, j, v * col_scale);
        }
        for v in down.row_mut(j) {
            *v *= row_scale;
        }
    }
    Ok(SyntheticLayer {
        layer: FfnLayer::new(up, down)?,
        planted,
    })
}

/// `batches` Gaussian `N(0, 1)` batches of `s_tokens × d`, drawn in order.
pub fn gen_calibration(s_tokens: usize, d: usize, batches: usize, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = SplitMix64::new(seed);
    (0..batches)
        .map(|_| DenseMatrix::from_fn(s_tokens, d, |_, _| rng.next_gaussian() as f32))
        .collect()
}
