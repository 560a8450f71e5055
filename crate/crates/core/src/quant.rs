//! Round-to-nearest group quantization with bit-packed codes.
//!
//! Groups of `group_size` consecutive entries run along each row; the last
//! group of a row may be shorter. Each group stores a real-valued scale and
//! zero-point (`zero = min`, `scale = (max − min)/(2^bits − 1)`) and every
//! entry is stored as `code = round((w − zero)/scale)`.
//!
//! Codes are packed least-significant-bit first, row by row, and each row is
//! padded with zero bits to a byte boundary.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    packed: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
}

pub(crate) fn check_params(bits: u8, group_size: usize) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Range(format!(
            "bit-width {bits} outside {MIN_BITS}..={MAX_BITS}"
        )));
    }
    if group_size == 0 {
        return Err(Error::Range("group size must be at least 1".into()));
    }
    Ok(())
}

#[inline]
fn dequant_value(code: u8, scale: f32, zero: f32) -> f32 {
    (code as f64 * scale as f64 + zero as f64) as f32
}

impl QuantizedMatrix {
    /// Reassembles a matrix from its stored parts, checking every length and
    /// that row padding bits are zero.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        group_size: usize,
        packed: Vec<u8>,
        scales: Vec<f32>,
        zeros: Vec<f32>,
    ) -> Result<Self> {
        check_params(bits, group_size)?;
        let q = Self {
            rows,
            cols,
            bits,
            group_size,
            packed,
            scales,
            zeros,
        };
        let want_packed = q.bytes_per_row() * rows;
        if q.packed.len() != want_packed {
            return Err(Error::format(
                q.packed.len().min(want_packed) as u64,
                format!("packed codes hold {} bytes, expected {want_packed}", q.packed.len()),
            ));
        }
        let groups = q.groups_per_row() * rows;
        if q.scales.len() != groups || q.zeros.len() != groups {
            return Err(Error::format(
                want_packed as u64,
                format!(
                    "expected {groups} scales and zeros, got {} and {}",
                    q.scales.len(),
                    q.zeros.len()
                ),
            ));
        }
        let used = cols * bits as usize;
        if !used.is_multiple_of(8) {
            let mask = !((1u16 << (used % 8)) - 1) as u8;
            for r in 0..rows {
                let at = (r + 1) * q.bytes_per_row() - 1;
                if q.packed[at] & mask != 0 {
                    return Err(Error::format(
                        at as u64,
                        format!("row {r} has nonzero padding bits (code overflow)"),
                    ));
                }
            }
        }
        Ok(q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn bytes_per_row(&self) -> usize {
        (self.cols * self.bits as usize).div_ceil(8)
    }

    /// Storage cost in `f32` equivalents: `rows·cols·bits/32` for the codes
    /// plus one scale and one zero per group.
    pub fn param_equivalent(&self) -> f64 {
        quantized_param_equivalent(self.rows, self.cols, self.bits, self.group_size)
    }

    /// The code stored at `(r, c)`.
    pub fn code(&self, r: usize, c: usize) -> u8 {
        let row = &self.packed[r * self.bytes_per_row()..(r + 1) * self.bytes_per_row()];
        read_code(row, c, self.bits)
    }

    /// Scale and zero-point of the group holding `(r, c)`.
    pub fn group_params(&self, r: usize, c: usize) -> (f32, f32) {
        let g = r * self.groups_per_row() + c / self.group_size;
        (self.scales[g], self.zeros[g])
    }

    fn dequantize_row_into(&self, r: usize, out: &mut [f32]) {
        let bpr = self.bytes_per_row();
        let row = &self.packed[r * bpr..(r + 1) * bpr];
        let gpr = self.groups_per_row();
        for (c, o) in out.iter_mut().enumerate().take(self.cols) {
            let g = r * gpr + c / self.group_size;
            *o = dequant_value(read_code(row, c, self.bits), self.scales[g], self.zeros[g]);
        }
    }

    /// `code·scale + zero` for every entry.
    pub fn dequantize(&self) -> DenseMatrix {
        let mut data = vec![0.0f32; self.rows * self.cols];
        if self.cols > 0 {
            for (r, out) in data.chunks_exact_mut(self.cols).enumerate() {
                self.dequantize_row_into(r, out);
            }
        }
        DenseMatrix::new(self.rows, self.cols, data).expect("length matches shape")
    }

    /// Fused `x · dequantize(self)ᵀ`, dequantizing one block of rows at a time.
    ///
    /// Accumulation order matches [`crate::linalg::matmul`], so the result is
    /// identical to the dequantize-then-multiply reference.
    pub fn matmul_transposed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        const BLOCK: usize = 32;
        if x.cols() != self.cols {
            return Err(Error::Shape(format!(
                "fused product: input has {} columns, quantized weight has {}",
                x.cols(),
                self.cols
            )));
        }
        let (s, n, k) = (x.rows(), self.rows, self.cols);
        let mut out = vec![0.0f32; s * n];
        let mut block = vec![0.0f32; BLOCK * k];
        let mut o0 = 0;
        while o0 < n {
            let ob = BLOCK.min(n - o0);
            for b in 0..ob {
                self.dequantize_row_into(o0 + b, &mut block[b * k..(b + 1) * k]);
            }
            for i in 0..s {
                let xr = x.row(i);
                for b in 0..ob {
                    let w = &block[b * k..(b + 1) * k];
                    let mut acc = 0.0f64;
                    for (&xv, &wv) in xr.iter().zip(w) {
                        acc += xv as f64 * wv as f64;
                    }
                    out[i * n + o0 + b] = acc as f32;
                }
            }
            o0 += ob;
        }
        DenseMatrix::new(s, n, out)
    }
}

#[inline]
fn read_code(row: &[u8], c: usize, bits: u8) -> u8 {
    let bit = c * bits as usize;
    let (byte, shift) = (bit / 8, bit % 8);
    let mut window = row[byte] as u16;
    if shift + bits as usize > 8 {
        window |= (row[byte + 1] as u16) << 8;
    }
    ((window >> shift) & ((1u16 << bits) - 1)) as u8
}

#[inline]
fn write_code(row: &mut [u8], c: usize, bits: u8, code: u8) {
    let bit = c * bits as usize;
    let (byte, shift) = (bit / 8, bit % 8);
    let v = (code as u16) << shift;
    row[byte] |= v as u8;
    if shift + bits as usize > 8 {
        row[byte + 1] |= (v >> 8) as u8;
    }
}

/// `f32`-equivalent storage of a `rows×cols` matrix quantized at `bits` with
/// groups of `group_size` along each row.
pub fn quantized_param_equivalent(rows: usize, cols: usize, bits: u8, group_size: usize) -> f64 {
    let codes = (rows * cols) as f64 * bits as f64 / 32.0;
    let groups = rows * cols.div_ceil(group_size.max(1));
    codes + 2.0 * groups as f64
}

/// Quantizes `w` with min/max round-to-nearest per group.
pub fn quantize_matrix(w: &DenseMatrix, bits: u8, group_size: usize) -> Result<QuantizedMatrix> {
    check_params(bits, group_size)?;
    let (rows, cols) = w.shape();
    let levels = ((1u32 << bits) - 1) as f64;
    let bpr = (cols * bits as usize).div_ceil(8);
    let gpr = cols.div_ceil(group_size);
    let mut packed = vec![0u8; rows * bpr];
    let mut scales = Vec::with_capacity(rows * gpr);
    let mut zeros = Vec::with_capacity(rows * gpr);
    for r in 0..rows {
        let src = w.row(r);
        let dst = &mut packed[r * bpr..(r + 1) * bpr];
        for (g, group) in src.chunks(group_size).enumerate() {
            let lo = group.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = group.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let scale = if hi > lo {
                ((hi as f64 - lo as f64) / levels) as f32
            } else {
                1.0
            };
            // A range too narrow for f32 collapses the scale to zero.
            let scale = if scale > 0.0 { scale } else { 1.0 };
            scales.push(scale);
            zeros.push(lo);
            for (i, &v) in group.iter().enumerate() {
                let code = ((v as f64 - lo as f64) / scale as f64).round().clamp(0.0, levels);
                write_code(dst, g * group_size + i, bits, code as u8);
            }
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        bits,
        group_size,
        packed,
        scales,
        zeros,
    })
}
