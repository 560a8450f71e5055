use super::{matmul, symmetric_eigen, DenseMatrix};
use crate::error::{Error, Result};

/// Rank-`r` factorization `left · right` of an `m×n` matrix.
///
/// Factors produced by [`truncated_svd`] have `left = U_r·diag(σ)` and
/// `right = V_rᵀ` with orthonormal rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    left: DenseMatrix,
    right: DenseMatrix,
}

impl LowRankFactors {
    pub fn new(left: DenseMatrix, right: DenseMatrix) -> Result<Self> {
        let rank = left.cols();
        if right.rows() != rank {
            return Err(Error::Shape(format!(
                "low-rank factors: left is {}x{}, right is {}x{}",
                left.rows(),
                left.cols(),
                right.rows(),
                right.cols()
            )));
        }
        if rank == 0 || rank > left.rows().min(right.cols()) {
            return Err(Error::Range(format!(
                "rank {rank} outside 1..={}",
                left.rows().min(right.cols())
            )));
        }
        Ok(Self { left, right })
    }

    pub fn left(&self) -> &DenseMatrix {
        &self.left
    }

    pub fn right(&self) -> &DenseMatrix {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    /// Shape `(m, n)` of the approximated matrix.
    pub fn shape(&self) -> (usize, usize) {
        (self.left.rows(), self.right.cols())
    }

    pub fn param_count(&self) -> usize {
        self.left.len() + self.right.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        matmul(&self.left, &self.right).expect("factor shapes checked at construction")
    }

    /// `x · left · right`, never materializing the full matrix.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(&matmul(x, &self.left)?, &self.right)
    }

    /// Singular values implied by the factors (column norms of `left`).
    pub fn singular_values(&self) -> Vec<f64> {
        (0..self.rank())
            .map(|j| {
                (0..self.left.rows())
                    .map(|i| (self.left.get(i, j) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

/// Best rank-`r` approximation of `a` in Frobenius norm.
///
/// Eigen-decomposes the smaller Gram matrix (`AᵀA` or `AAᵀ`) in `f64` and
/// projects `a` onto the leading `r` singular directions.
pub fn truncated_svd(a: &DenseMatrix, r: usize) -> Result<LowRankFactors> {
    let (m, n) = a.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::Range(format!(
            "rank {r} outside 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let wide = m < n;
    // Work on the tall orientation: `t` is p×q with q <= p.
    let t = if wide { a.transpose() } else { a.clone() };
    let (p, q) = t.shape();
    let td: Vec<f64> = t.data().iter().map(|&v| v as f64).collect();

    let mut gram = vec![0.0f64; q * q];
    for row in td.chunks_exact(q) {
        for i in 0..q {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            let g = &mut gram[i * q..i * q + i + 1];
            for (gj, &rj) in g.iter_mut().zip(&row[..=i]) {
                *gj += ri * rj;
            }
        }
    }
    for i in 0..q {
        for j in 0..i {
            gram[j * q + i] = gram[i * q + j];
        }
    }
    let (_, vecs) = symmetric_eigen(&gram, q)?;

    // Leading right singular vectors of `t` (q×r) and the projection t·V_r (p×r).
    let mut basis = vec![0.0f64; q * r];
    for i in 0..q {
        basis[i * r..(i + 1) * r].copy_from_slice(&vecs[i * q..i * q + r]);
    }
    let mut proj = vec![0.0f64; p * r];
    for (row, out) in td.chunks_exact(q).zip(proj.chunks_exact_mut(r)) {
        for (k, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(&basis[k * r..(k + 1) * r]) {
                *o += x * b;
            }
        }
    }

    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    if !wide {
        // a = t: left = t·V_r, right = V_rᵀ.
        let left = DenseMatrix::new(p, r, to_f32(&proj))?;
        let right = DenseMatrix::new(q, r, to_f32(&basis))?.transpose();
        return LowRankFactors::new(left, right);
    }

    // a = tᵀ = V·Σ·Uᵀ: left = V_r·Σ, right = (t·V_r/σ)ᵀ.
    let sigma: Vec<f64> = (0..r)
        .map(|j| (0..p).map(|i| proj[i * r + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut left = vec![0.0f64; q * r];
    let mut right = vec![0.0f64; r * p];
    for j in 0..r {
        if sigma[j] == 0.0 {
            continue;
        }
        for i in 0..q {
            left[i * r + j] = basis[i * r + j] * sigma[j];
        }
        for i in 0..p {
            right[j * p + i] = proj[i * r + j] / sigma[j];
        }
    }
    LowRankFactors::new(
        DenseMatrix::new(q, r, to_f32(&left))?,
        DenseMatrix::new(r, p, to_f32(&right))?,
    )
}
