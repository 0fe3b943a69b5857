//! Dense tensors of rank 1..=6 over three-dimensional index space.
//!
//! Components are stored row major (last index fastest), so a rank-`r`
//! tensor holds `3^r` entries. The rank is a runtime property: all algebra
//! routines check shapes and report [`TensorError`] on mismatch rather than
//! encoding ranks in the type system, which keeps signatures of the
//! homogenization formulas close to their index notation.
//!
//! The three structural operations follow the usual conventions:
//!
//! ```text
//! dyad(A, B)[i.., j..]      = A[i..] B[j..]
//! contract(A, B, k)[i., j.] = Σ_m.. A[i.., m..] B[m.., j..]   (m.. has k indices)
//! transpose_shift(A, s)     : last s indices move to the front
//! ```

use crate::scalar::Scalar;
use num_traits::Zero;
use thiserror::Error;

/// Highest representable rank; dyads and contractions whose result would
/// exceed it are rejected.
pub const MAX_RANK: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("tensor rank {0} outside supported range 1..={MAX_RANK}")]
    RankOutOfRange(usize),
    #[error("data length {got} does not match 3^{rank} = {want}")]
    DataLength { rank: usize, got: usize, want: usize },
    #[error("contraction over {k} indices impossible for ranks {ra} and {rb}")]
    ContractionMismatch { ra: usize, rb: usize, k: usize },
    #[error("operation would produce rank {0}, outside 1..={MAX_RANK}; use `inner` for scalars")]
    ResultRank(usize),
    #[error("index position {pos} out of range for rank {rank}")]
    IndexPosition { pos: usize, rank: usize },
    #[error("operand ranks differ: {0} vs {1}")]
    RankMismatch(usize, usize),
}

/// Number of components of a rank-`r` tensor.
#[inline]
pub fn components(rank: usize) -> usize {
    3usize.pow(rank as u32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorN<T> {
    rank: usize,
    data: Vec<T>,
}

impl<T: Scalar> TensorN<T> {
    pub fn zeros(rank: usize) -> Result<Self, TensorError> {
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::RankOutOfRange(rank));
        }
        Ok(TensorN { rank, data: vec![T::zero(); components(rank)] })
    }

    pub fn from_data(rank: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::RankOutOfRange(rank));
        }
        let want = components(rank);
        if data.len() != want {
            return Err(TensorError::DataLength { rank, got: data.len(), want });
        }
        Ok(TensorN { rank, data })
    }

    /// Second-order identity.
    pub fn identity2() -> Self {
        let mut t = Self::zeros(2).expect("rank 2 valid");
        for i in 0..3 {
            t.data[4 * i] = T::one();
        }
        t
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Flat offset of a multi-index (row major, last index fastest).
    #[inline]
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.rank);
        let mut off = 0;
        for &i in idx {
            debug_assert!(i < 3);
            off = 3 * off + i;
        }
        off
    }

    #[inline]
    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn scale(&self, s: T) -> Self {
        TensorN { rank: self.rank, data: self.data.iter().map(|&x| x * s).collect() }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rank != rhs.rank {
            return Err(TensorError::RankMismatch(self.rank, rhs.rank));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Ok(TensorN { rank: self.rank, data })
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self, TensorError> {
        if self.rank != rhs.rank {
            return Err(TensorError::RankMismatch(self.rank, rhs.rank));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Ok(TensorN { rank: self.rank, data })
    }

    /// Frobenius norm of the value parts.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.val() * x.val()).sum::<f64>().sqrt()
    }

    /// Outer product; the result carries the operands' indices in order.
    pub fn dyad(&self, rhs: &Self) -> Result<Self, TensorError> {
        let rank = self.rank + rhs.rank;
        if rank > MAX_RANK {
            return Err(TensorError::ResultRank(rank));
        }
        let mut data = Vec::with_capacity(components(rank));
        for &a in &self.data {
            for &b in &rhs.data {
                data.push(a * b);
            }
        }
        Ok(TensorN { rank, data })
    }

    /// Contract the last `k` indices of `self` with the first `k` of `rhs`.
    pub fn contract(&self, rhs: &Self, k: usize) -> Result<Self, TensorError> {
        if k == 0 || k > self.rank || k > rhs.rank {
            return Err(TensorError::ContractionMismatch { ra: self.rank, rb: rhs.rank, k });
        }
        let rank = self.rank + rhs.rank - 2 * k;
        if rank == 0 {
            return Err(TensorError::ResultRank(0));
        }
        if rank > MAX_RANK {
            return Err(TensorError::ResultRank(rank));
        }
        let ni = components(self.rank - k);
        let nj = components(rhs.rank - k);
        let nm = components(k);
        let mut data = vec![T::zero(); ni * nj];
        for i in 0..ni {
            for m in 0..nm {
                let a = self.data[i * nm + m];
                let row = &rhs.data[m * nj..(m + 1) * nj];
                let out = &mut data[i * nj..(i + 1) * nj];
                for j in 0..nj {
                    out[j] = out[j] + a * row[j];
                }
            }
        }
        Ok(TensorN { rank, data })
    }

    /// Full contraction of two equal-rank tensors (Frobenius inner product).
    pub fn inner(&self, rhs: &Self) -> Result<T, TensorError> {
        if self.rank != rhs.rank {
            return Err(TensorError::RankMismatch(self.rank, rhs.rank));
        }
        let mut s = T::zero();
        for (&a, &b) in self.data.iter().zip(&rhs.data) {
            s = s + a * b;
        }
        Ok(s)
    }

    /// Cyclic transpose: the last `s` indices become the leading ones.
    pub fn transpose_shift(&self, s: usize) -> Result<Self, TensorError> {
        if s > self.rank {
            return Err(TensorError::IndexPosition { pos: s, rank: self.rank });
        }
        let np = components(s);
        let nq = components(self.rank - s);
        let mut data = vec![T::zero(); self.data.len()];
        for q in 0..nq {
            for p in 0..np {
                data[p * nq + q] = self.data[q * np + p];
            }
        }
        Ok(TensorN { rank: self.rank, data })
    }

    /// Swap the index positions `pa` and `pb` (zero based).
    pub fn exchange_indices(&self, pa: usize, pb: usize) -> Result<Self, TensorError> {
        if pa >= self.rank {
            return Err(TensorError::IndexPosition { pos: pa, rank: self.rank });
        }
        if pb >= self.rank {
            return Err(TensorError::IndexPosition { pos: pb, rank: self.rank });
        }
        let mut out = self.clone();
        if pa == pb {
            return Ok(out);
        }
        let r = self.rank;
        let mut idx = [0usize; MAX_RANK];
        for (flat, &v) in self.data.iter().enumerate() {
            let mut rem = flat;
            for m in (0..r).rev() {
                idx[m] = rem % 3;
                rem /= 3;
            }
            idx.swap(pa, pb);
            let mut off = 0;
            for &i in idx.iter().take(r) {
                off = 3 * off + i;
            }
            out.data[off] = v;
        }
        Ok(out)
    }

    /// Matrix transpose, rank-2 convenience for `transpose_shift(1)`.
    pub fn t2(&self) -> Result<Self, TensorError> {
        if self.rank != 2 {
            return Err(TensorError::RankMismatch(self.rank, 2));
        }
        self.transpose_shift(1)
    }

    /// Determinant of a rank-2 tensor.
    pub fn det2(&self) -> Result<T, TensorError> {
        if self.rank != 2 {
            return Err(TensorError::RankMismatch(self.rank, 2));
        }
        let d = &self.data;
        Ok(d[0] * (d[4] * d[8] - d[5] * d[7]) - d[1] * (d[3] * d[8] - d[5] * d[6])
            + d[2] * (d[3] * d[7] - d[4] * d[6]))
    }

    /// Inverse of a rank-2 tensor via the adjugate.
    pub fn inv2(&self) -> Result<Self, TensorError> {
        let det = self.det2()?;
        let d = &self.data;
        let r = det.recip();
        let cof = [
            d[4] * d[8] - d[5] * d[7],
            d[2] * d[7] - d[1] * d[8],
            d[1] * d[5] - d[2] * d[4],
            d[5] * d[6] - d[3] * d[8],
            d[0] * d[8] - d[2] * d[6],
            d[2] * d[3] - d[0] * d[5],
            d[3] * d[7] - d[4] * d[6],
            d[1] * d[6] - d[0] * d[7],
            d[0] * d[4] - d[1] * d[3],
        ];
        Ok(TensorN { rank: 2, data: cof.iter().map(|&c| c * r).collect() })
    }
}

impl TensorN<f64> {
    pub fn from_arr2(a: &[[f64; 3]; 3]) -> Self {
        let mut data = Vec::with_capacity(9);
        for row in a {
            data.extend_from_slice(row);
        }
        TensorN { rank: 2, data }
    }

    pub fn to_arr2(&self) -> [[f64; 3]; 3] {
        debug_assert_eq!(self.rank, 2);
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = self.data[3 * i + j];
            }
        }
        out
    }

    pub fn from_arr3(a: &[[[f64; 3]; 3]; 3]) -> Self {
        let mut data = Vec::with_capacity(27);
        for block in a {
            for row in block {
                data.extend_from_slice(row);
            }
        }
        TensorN { rank: 3, data }
    }

    pub fn to_arr3(&self) -> [[[f64; 3]; 3]; 3] {
        debug_assert_eq!(self.rank, 3);
        let mut out = [[[0.0; 3]; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j][k] = self.data[9 * i + 3 * j + k];
                }
            }
        }
        out
    }

    pub fn from_vec3(a: &[f64; 3]) -> Self {
        TensorN { rank: 1, data: a.to_vec() }
    }

    /// Maximum absolute component.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

impl<T: Scalar> Zero for TensorN<T> {
    fn zero() -> Self {
        TensorN { rank: 1, data: vec![T::zero(); 3] }
    }
    fn is_zero(&self) -> bool {
        self.data.iter().all(|x| x.val() == 0.0)
    }
}

impl<T: Scalar> std::ops::Add for TensorN<T> {
    type Output = TensorN<T>;
    fn add(self, rhs: Self) -> Self {
        TensorN::add(&self, &rhs).expect("rank mismatch in +")
    }
}
