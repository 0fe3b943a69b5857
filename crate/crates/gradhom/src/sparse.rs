//! Symmetric sparse matrices and a direct LDLᵀ factorization.
//!
//! Matrices store the upper triangle in compressed sparse column form.
//! The factorization is the up-looking sparse LDLᵀ driven by the
//! elimination tree (Davis, Direct Methods for Sparse Linear Systems,
//! ch. 4), preceded by an optional reverse Cuthill-McKee reordering to
//! keep fill-in down on the banded lattice graphs that B-spline
//! discretizations produce. All tie-breaking is by index, so orderings and
//! factors are deterministic.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("matrix is numerically singular: zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("dimension mismatch: matrix order {n}, vector length {len}")]
    DimensionMismatch { n: usize, len: usize },
    #[error("entry ({r}, {c}) outside matrix pattern")]
    OutsidePattern { r: usize, c: usize },
}

/// Upper-triangular pattern + values in CSC form.
#[derive(Clone, Debug)]
pub struct SymCsc {
    n: usize,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

impl SymCsc {
    /// Build from unsorted upper-triangle coordinate entries; duplicates
    /// are summed. Entries with `r > c` are mirrored into the upper part.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            cols[c].push((r, v));
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowind = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for col in cols.iter_mut() {
            col.sort_by_key(|e| e.0);
            let mut last = usize::MAX;
            for &(r, v) in col.iter() {
                if r == last {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowind.push(r);
                    values.push(v);
                    last = r;
                }
            }
            colptr.push(rowind.len());
        }
        SymCsc { n, colptr, rowind, values }
    }

    /// Pattern-only constructor; values start at zero. Used when the same
    /// sparsity is refilled across Newton iterations.
    pub fn pattern_from_pairs(n: usize, pairs: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (r, c) in pairs {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            cols[c].push(r);
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowind = Vec::new();
        colptr.push(0);
        for col in cols.iter_mut() {
            col.sort_unstable();
            col.dedup();
            rowind.extend_from_slice(col);
            colptr.push(rowind.len());
        }
        let values = vec![0.0; rowind.len()];
        SymCsc { n, colptr, rowind, values }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.n
    }

    pub fn nnz_upper(&self) -> usize {
        self.rowind.len()
    }

    pub fn zero_values(&mut self) {
        for v in self.values.iter_mut() {
            *v = 0.0;
        }
    }

    /// Accumulate into entry `(r, c)`; symmetric, so only the upper-triangle
    /// slot is touched.
    pub fn add(&mut self, r: usize, c: usize, v: f64) -> Result<(), SparseError> {
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        let lo = self.colptr[c];
        let hi = self.colptr[c + 1];
        match self.rowind[lo..hi].binary_search(&r) {
            Ok(k) => {
                self.values[lo + k] += v;
                Ok(())
            }
            Err(_) => Err(SparseError::OutsidePattern { r, c }),
        }
    }

    /// y = A x with the symmetric completion of the stored triangle.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        if x.len() != self.n {
            return Err(SparseError::DimensionMismatch { n: self.n, len: x.len() });
        }
        let mut y = vec![0.0; self.n];
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                let r = self.rowind[p];
                let v = self.values[p];
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        Ok(y)
    }

    /// Adjacency lists of the matrix graph (both triangles, no diagonal).
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                let r = self.rowind[p];
                if r != c {
                    adj[r].push(c);
                    adj[c].push(r);
                }
            }
        }
        for l in adj.iter_mut() {
            l.sort_unstable();
            l.dedup();
        }
        adj
    }
}

/// Reverse Cuthill-McKee ordering of the matrix graph.
///
/// Returns `perm` with `perm[new] = old`. Components are seeded from their
/// minimum-degree vertex (ties by index); neighbours are visited in
/// (degree, index) order.
pub fn rcm_ordering(a: &SymCsc) -> Vec<usize> {
    let n = a.order();
    let adj = a.adjacency();
    let degree: Vec<usize> = adj.iter().map(|l| l.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    loop {
        let mut seed = None;
        for v in 0..n {
            if !visited[v] {
                let better = match seed {
                    None => true,
                    Some(s) => degree[v] < degree[s],
                };
                if better {
                    seed = Some(v);
                }
            }
        }
        let Some(seed) = seed else { break };
        let mut queue = std::collections::VecDeque::new();
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// LDLᵀ factor of a permuted symmetric matrix.
#[derive(Clone, Debug)]
pub struct LdlFactor {
    n: usize,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    /// perm[new] = old.
    perm: Vec<usize>,
    iperm: Vec<usize>,
}

impl LdlFactor {
    /// Factor `a`, optionally applying reverse Cuthill-McKee first.
    pub fn factor(a: &SymCsc, reorder: bool) -> Result<Self, SparseError> {
        let n = a.order();
        let perm = if reorder { rcm_ordering(a) } else { (0..n).collect() };
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Permuted upper-triangular CSC.
        let mut triplets = Vec::with_capacity(a.nnz_upper());
        for c in 0..n {
            for p in a.colptr[c]..a.colptr[c + 1] {
                let r = a.rowind[p];
                triplets.push((iperm[r], iperm[c], a.values[p]));
            }
        }
        let pa = SymCsc::from_triplets(n, &triplets);

        // Symbolic: elimination tree and column counts.
        let mut parent = vec![usize::MAX; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for j in 0..n {
            flag[j] = j;
            for p in pa.colptr[j]..pa.colptr[j + 1] {
                let mut i = pa.rowind[p];
                while i != j && flag[i] != j {
                    if parent[i] == usize::MAX {
                        parent[i] = j;
                    }
                    lnz[i] += 1;
                    flag[i] = j;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + lnz[j];
        }
        let nnz_l = lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0f64; nnz_l];
        let mut d = vec![0.0f64; n];

        // Numeric phase.
        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut lfill = vec![0usize; n];
        for f in flag.iter_mut() {
            *f = usize::MAX;
        }
        for j in 0..n {
            let mut top = n;
            flag[j] = j;
            for p in pa.colptr[j]..pa.colptr[j + 1] {
                let i0 = pa.rowind[p];
                y[i0] += pa.values[p];
                let mut i = i0;
                let mut len = 0usize;
                while flag[i] != j {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = j;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[j] = y[j];
            y[j] = 0.0;
            for t in top..n {
                let i = pattern[t];
                let yi = y[i];
                y[i] = 0.0;
                for p in lp[i]..lp[i] + lfill[i] {
                    y[li[p]] -= lx[p] * yi;
                }
                let lji = yi / d[i];
                d[j] -= lji * yi;
                let slot = lp[i] + lfill[i];
                li[slot] = j;
                lx[slot] = lji;
                lfill[i] += 1;
            }
            if d[j] == 0.0 {
                return Err(SparseError::ZeroPivot(perm[j]));
            }
        }

        Ok(LdlFactor { n, lp, li, lx, d, perm, iperm })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, SparseError> {
        if b.len() != self.n {
            return Err(SparseError::DimensionMismatch { n: self.n, len: b.len() });
        }
        let mut x = vec![0.0; self.n];
        for new in 0..self.n {
            x[new] = b[self.perm[new]];
        }
        self.solve_permuted_in_place(&mut x);
        let mut out = vec![0.0; self.n];
        for old in 0..self.n {
            out[old] = x[self.iperm[old]];
        }
        Ok(out)
    }

    /// Solve with many right-hand sides, column by column.
    pub fn solve_many(&self, cols: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, SparseError> {
        cols.iter().map(|b| self.solve(b)).collect()
    }

    fn solve_permuted_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let xj = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                x[self.li[p]] -= self.lx[p] * xj;
            }
        }
        for j in 0..n {
            x[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.lp[j]..self.lp[j + 1] {
                s -= self.lx[p] * x[self.li[p]];
            }
            x[j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_of(a: &SymCsc) -> Vec<Vec<f64>> {
        let n = a.order();
        let mut m = vec![vec![0.0; n]; n];
        for c in 0..n {
            for p in a.colptr[c]..a.colptr[c + 1] {
                let r = a.rowind[p];
                m[r][c] = a.values[p];
                m[c][r] = a.values[p];
            }
        }
        m
    }

    #[test]
    fn small_spd_solve() {
        let a = SymCsc::from_triplets(
            3,
            &[(0, 0, 4.0), (0, 1, 1.0), (1, 1, 3.0), (1, 2, 0.5), (2, 2, 2.0)],
        );
        let f = LdlFactor::factor(&a, true).unwrap();
        let b = vec![1.0, -2.0, 0.25];
        let x = f.solve(&b).unwrap();
        let ax = a.mul_vec(&x).unwrap();
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let a = SymCsc::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 0.5), (0, 1, 0.5), (1, 1, 1.0)]);
        let m = dense_of(&a);
        assert_eq!(m[0][0], 3.0);
        assert_eq!(m[0][1], 1.0);
    }

    #[test]
    fn zero_pivot_detected() {
        let a = SymCsc::from_triplets(2, &[(0, 0, 1.0), (1, 1, 0.0)]);
        match LdlFactor::factor(&a, false) {
            Err(SparseError::ZeroPivot(j)) => assert_eq!(j, 1),
            other => panic!("expected zero pivot, got {other:?}"),
        }
    }

    #[test]
    fn pattern_add_and_refill() {
        let pairs = [(0usize, 0usize), (1, 0), (1, 1), (2, 2), (2, 1)];
        let mut a = SymCsc::pattern_from_pairs(3, pairs.iter().copied());
        a.add(0, 0, 2.0).unwrap();
        a.add(0, 1, 0.5).unwrap();
        a.add(1, 0, 0.5).unwrap();
        a.add(1, 1, 3.0).unwrap();
        a.add(1, 2, -0.5).unwrap();
        a.add(2, 2, 1.5).unwrap();
        assert_eq!(a.add(0, 2, 1.0).unwrap_err(), SparseError::OutsidePattern { r: 0, c: 2 });
        let m = dense_of(&a);
        assert_eq!(m[0][1], 1.0);
        a.zero_values();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = SymCsc::from_triplets(
            5,
            &[(0, 0, 2.0), (4, 0, 1.0), (1, 1, 2.0), (3, 1, 1.0), (2, 2, 2.0), (3, 3, 2.0), (4, 4, 2.0)],
        );
        let perm = rcm_ordering(&a);
        let mut seen = vec![false; 5];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }
}
