use std::collections::BTreeMap;

/// Compressed sparse row matrix with sorted, duplicate-free columns per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from `(row, col, value)` triplets, summing duplicates. Explicit
    /// zeros are kept so that sparsity patterns stay stable across
    /// evaluations.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); nrows];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            *rows[r].entry(c).or_insert(0.0) += v;
        }
        let mut m = CsrMatrix::zeros(nrows, ncols);
        for (r, row) in rows.into_iter().enumerate() {
            for (c, v) in row {
                m.col_idx.push(c);
                m.values.push(v);
            }
            m.row_ptr[r + 1] = m.col_idx.len();
        }
        m
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut trip = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    trip.push((r, c, v));
                }
            }
        }
        CsrMatrix::from_triplets(rows.len(), ncols, &trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `y += A^T x`.
    pub fn tr_mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                for (c, v) in self.row(r) {
                    y[c] += v * xr;
                }
            }
        }
    }

    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.tr_mul_add(x, &mut y);
        y
    }

    /// Largest absolute asymmetry `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        self.triplets()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.triplets() {
            d[r][c] += v;
        }
        d
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> CsrMatrix {
        let mut m = CsrMatrix::zeros(rows.len(), self.ncols);
        for (i, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                m.col_idx.push(c);
                m.values.push(v);
            }
            m.row_ptr[i + 1] = m.col_idx.len();
        }
        m
    }

    /// Stacks `self` above `other`.
    pub fn vstack(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.ncols);
        let mut m = self.clone();
        m.nrows += other.nrows;
        let base = self.nnz();
        m.col_idx.extend_from_slice(&other.col_idx);
        m.values.extend_from_slice(&other.values);
        m.row_ptr
            .extend(other.row_ptr[1..].iter().map(|&p| p + base));
        m
    }

    /// Same matrix with `extra` zero columns appended.
    pub fn widen(&self, ncols: usize) -> CsrMatrix {
        assert!(ncols >= self.ncols);
        let mut m = self.clone();
        m.ncols = ncols;
        m
    }
}

/// Max-norm; NaN entries propagate.
pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m: f64, v| if m.is_nan() || v.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_multiply() {
        let m = CsrMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, 3.0), (1, 1, -1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 4.0);
        assert_eq!(m.mul_vec(&[1.0, 2.0, 3.0]), vec![14.0, -2.0]);
        assert_eq!(m.tr_mul_vec(&[1.0, 1.0]), vec![2.0, -1.0, 4.0]);
    }

    #[test]
    fn stacking_and_selection() {
        let a = CsrMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        let b = CsrMatrix::from_dense(&[vec![3.0, 4.0]]);
        let s = a.vstack(&b);
        assert_eq!(s.to_dense(), vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(s.select_rows(&[2, 0]).to_dense(), vec![vec![3.0, 4.0], vec![1.0, 0.0]]);
        assert_eq!(a.asymmetry(), 0.0);
        assert_eq!(b.widen(3).ncols(), 3);
    }
}
