use rayon::prelude::*;

use super::DenseMatrix;
use crate::error::{Error, Result};

// Micro-tile of the product kernel: MR rows of `a` against an NR-column
// panel of `b`. Row chunks of MC rows are the unit of parallel work and
// panel groups of NC columns bound the slice of packed `b` kept hot in cache.
const MR: usize = 4;
const NR: usize = 8;
const MC: usize = 64;
const NC: usize = 256;

/// Matrix product `a · b`.
///
/// Every output entry is the ascending-`k` sum of `f64` products. A product
/// of two `f32` values is exact in `f64`, so the result is the same whatever
/// the blocking, the instruction set or the thread count.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return DenseMatrix::new(m, n, out);
    }
    let panels = pack_panels(b.data(), k, n);
    let ad = a.data();
    out.par_chunks_mut(MC * n)
        .zip(ad.par_chunks(MC * k))
        .for_each(|(out_rows, a_rows)| multiply_rows(a_rows, k, &panels, n, out_rows));
    DenseMatrix::new(m, n, out)
}

// Lays `b` out as consecutive k×NR column panels, zero-padding the last.
fn pack_panels(b: &[f32], k: usize, n: usize) -> Vec<f32> {
    let count = n.div_ceil(NR);
    let mut packed = vec![0.0f32; count * k * NR];
    for (p, panel) in packed.chunks_exact_mut(k * NR).enumerate() {
        let j0 = p * NR;
        let w = NR.min(n - j0);
        for (kk, dst) in panel.chunks_exact_mut(NR).enumerate() {
            dst[..w].copy_from_slice(&b[kk * n + j0..kk * n + j0 + w]);
        }
    }
    packed
}

fn multiply_rows(a: &[f32], k: usize, panels: &[f32], n: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { multiply_rows_avx2(a, k, panels, n, out) };
            return;
        }
    }
    multiply_rows_generic(a, k, panels, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn multiply_rows_avx2(a: &[f32], k: usize, panels: &[f32], n: usize, out: &mut [f32]) {
    multiply_rows_generic(a, k, panels, n, out)
}

#[inline(always)]
fn multiply_rows_generic(a: &[f32], k: usize, panels: &[f32], n: usize, out: &mut [f32]) {
    let rows = a.len() / k;
    let panel_len = k * NR;
    let panel_count = n.div_ceil(NR);
    let zero_row = vec![0.0f32; k];
    for p0 in (0..panel_count).step_by(NC / NR) {
        let p1 = (p0 + NC / NR).min(panel_count);
        for i0 in (0..rows).step_by(MR) {
            let mr = MR.min(rows - i0);
            let row = |r: usize| {
                if r < mr {
                    &a[(i0 + r) * k..(i0 + r + 1) * k]
                } else {
                    &zero_row[..]
                }
            };
            let a_rows = [row(0), row(1), row(2), row(3)];
            for p in p0..p1 {
                let acc = micro_kernel(a_rows, &panels[p * panel_len..(p + 1) * panel_len]);
                let j0 = p * NR;
                let w = NR.min(n - j0);
                for (r, acc_row) in acc.iter().enumerate().take(mr) {
                    let dst = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + w];
                    for (o, &v) in dst.iter_mut().zip(acc_row) {
                        *o = v as f32;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(a: [&[f32]; MR], panel: &[f32]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    let rows = a[0].iter().zip(a[1]).zip(a[2]).zip(a[3]);
    for (b, (((&a0, &a1), &a2), &a3)) in panel.chunks_exact(NR).zip(rows) {
        let mut bv = [0.0f64; NR];
        for (d, &s) in bv.iter_mut().zip(b) {
            *d = s as f64;
        }
        for (acc_row, av) in acc.iter_mut().zip([a0, a1, a2, a3]) {
            let av = av as f64;
            for (c, &bc) in acc_row.iter_mut().zip(&bv) {
                *c += av * bc;
            }
        }
    }
    acc
}

/// Standard normal CDF `Φ(x) = (1 + erf(x/√2)) / 2`.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Exact GeLU, `x·Φ(x)`, evaluated in `f64`.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (x * std_normal_cdf(x)) as f32
}

/// Element-wise exact GeLU.
pub fn gelu(x: &DenseMatrix) -> DenseMatrix {
    x.map(gelu_scalar)
}

/// The tanh approximation of GeLU. Not used by any forward pass in this crate.
pub fn gelu_tanh(x: &DenseMatrix) -> DenseMatrix {
    const C: f64 = 0.044_715;
    let k = (2.0 / std::f64::consts::PI).sqrt();
    x.map(|v| {
        let v = v as f64;
        (0.5 * v * (1.0 + libm::tanh(k * (v + C * v * v * v)))) as f32
    })
}

/// Sum of squared entries.
pub fn frobenius_norm_sq(x: &DenseMatrix) -> f64 {
    x.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// `‖a − b‖²_F`, with the difference taken in `f64`.
pub fn frobenius_dist_sq(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "distance between {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}
