//! Sparse `L D L^T` factorization for quasi-definite KKT matrices.
//!
//! Up-looking factorization over the elimination tree, no pivoting. The
//! fill-reducing ordering is a plain minimum-degree elimination. Pivots whose
//! sign disagrees with the expected inertia are replaced by a small
//! regularization of the expected sign.

use std::collections::BTreeSet;

use thiserror::Error;

const NONE: usize = usize::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum LdlError {
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("expected {expected} values, got {got}")]
    ValueCount { expected: usize, got: usize },
}

/// Minimum-degree elimination order; `perm[new] = old`.
pub fn minimum_degree(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for &(i, j) in edges {
        if i != j {
            adj[i].insert(j);
            adj[j].insert(i);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|i| (adj[i].len(), i)).collect();
    let mut perm = Vec::with_capacity(n);
    while let Some((_, node)) = queue.pop_first() {
        perm.push(node);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[node]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
            adj[u].remove(&node);
        }
        for (x, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[x + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &u in &nbrs {
            queue.insert((adj[u].len(), u));
        }
    }
    perm
}

#[derive(Debug, Clone)]
pub struct LdlSolver {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    // Upper triangle of the permuted matrix, compressed by column.
    ap: Vec<usize>,
    ai: Vec<usize>,
    ax: Vec<f64>,
    slot: Vec<usize>,
    diag_slot: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    signs: Vec<f64>,
}

impl LdlSolver {
    /// Symbolic analysis for the symmetric pattern `entries` (each unordered
    /// pair listed once, duplicates allowed and summed). `signs[i]` is the
    /// expected pivot sign of original index `i` (+1 primal, -1 dual).
    pub fn new(n: usize, entries: &[(usize, usize)], signs: Vec<f64>) -> Self {
        assert_eq!(signs.len(), n);
        let perm = minimum_degree(n, entries);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Column-wise pattern of the permuted upper triangle including the
        // full diagonal.
        let mut cols: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (k, col) in cols.iter_mut().enumerate() {
            col.insert(k);
        }
        let canon = |i: usize, j: usize| {
            let (a, b) = (iperm[i], iperm[j]);
            if a <= b {
                (a, b)
            } else {
                (b, a)
            }
        };
        for &(i, j) in entries {
            let (r, c) = canon(i, j);
            cols[c].insert(r);
        }
        let mut ap = vec![0; n + 1];
        let mut ai = Vec::new();
        for (c, col) in cols.iter().enumerate() {
            ai.extend(col.iter().copied());
            ap[c + 1] = ai.len();
        }
        let find = |r: usize, c: usize| -> usize {
            let span = &ai[ap[c]..ap[c + 1]];
            ap[c] + span.binary_search(&r).expect("pattern entry present")
        };
        let slot: Vec<usize> = entries
            .iter()
            .map(|&(i, j)| {
                let (r, c) = canon(i, j);
                find(r, c)
            })
            .collect();
        let diag_slot: Vec<usize> = (0..n).map(|k| find(k, k)).collect();

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &ai[ap[j]..ap[j + 1]] {
                let mut i = row;
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let total = lp[n];
        let signs = perm.iter().map(|&old| signs[old]).collect();
        LdlSolver {
            n,
            perm,
            iperm,
            ax: vec![0.0; ai.len()],
            ap,
            ai,
            slot,
            diag_slot,
            etree,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            signs,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.li.len()
    }

    /// Numeric factorization. `values[k]` belongs to `entries[k]` given at
    /// construction; `diag_shift[i]` is added to the diagonal of original
    /// index `i`. Pivots with `sign * d < pivot_floor` are replaced by
    /// `sign * pivot_bump`; the number of replacements is returned.
    pub fn factor(
        &mut self,
        values: &[f64],
        diag_shift: &[f64],
        pivot_floor: f64,
        pivot_bump: f64,
    ) -> Result<usize, LdlError> {
        if values.len() != self.slot.len() {
            return Err(LdlError::ValueCount {
                expected: self.slot.len(),
                got: values.len(),
            });
        }
        self.ax.iter_mut().for_each(|x| *x = 0.0);
        for (k, &v) in values.iter().enumerate() {
            self.ax[self.slot[k]] += v;
        }
        for (old, &shift) in diag_shift.iter().enumerate() {
            self.ax[self.diag_slot[self.iperm[old]]] += shift;
        }

        let n = self.n;
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();
        let mut bumped = 0;

        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let b = self.ai[p];
                if b == k {
                    self.d[k] = self.ax[p];
                    continue;
                }
                y_vals[b] = self.ax[p];
                if !y_used[b] {
                    y_used[b] = true;
                    elim[0] = b;
                    let mut nnz_e = 1;
                    let mut next = self.etree[b];
                    while next != NONE && next < k {
                        if y_used[next] {
                            break;
                        }
                        y_used[next] = true;
                        elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        y_idx[nnz_y] = elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let tmp = next_space[c];
                let yc = y_vals[c];
                for j in self.lp[c]..tmp {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                let l = yc * self.dinv[c];
                self.lx[tmp] = l;
                self.d[k] -= yc * l;
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            let s = self.signs[k];
            if !(s * self.d[k] >= pivot_floor) {
                if pivot_bump <= 0.0 {
                    return Err(LdlError::ZeroPivot(self.perm[k]));
                }
                self.d[k] = s * pivot_bump;
                bumped += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(bumped)
    }

    /// Solves in place using the last factorization.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                xi -= self.lx[j] * x[self.li[j]];
            }
            x[i] = xi;
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = x[new];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn check(dense: &DMatrix<f64>, signs: Vec<f64>) {
        let n = dense.nrows();
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if dense[(i, j)] != 0.0 {
                    entries.push((i, j));
                    values.push(dense[(i, j)]);
                }
            }
        }
        let mut solver = LdlSolver::new(n, &entries, signs);
        let bumped = solver.factor(&values, &vec![0.0; n], 1e-14, 0.0).unwrap();
        assert_eq!(bumped, 0);
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + 1.0).collect();
        let mut x = rhs.clone();
        solver.solve(&mut x);
        let r = dense * DVector::from_vec(x) - DVector::from_vec(rhs);
        assert!(r.amax() < 1e-10, "residual {}", r.amax());
    }

    #[test]
    fn solves_spd_tridiagonal_with_coupling() {
        let n = 30;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 4.0;
            if i + 1 < n {
                m[(i, i + 1)] = -1.0;
                m[(i + 1, i)] = -1.0;
            }
        }
        m[(0, n - 1)] = 0.5;
        m[(n - 1, 0)] = 0.5;
        check(&m, vec![1.0; n]);
    }

    #[test]
    fn solves_quasi_definite_kkt() {
        // [H A^T; A -delta I] with H SPD.
        let (nx, ne) = (6, 3);
        let n = nx + ne;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..nx {
            m[(i, i)] = 2.0 + i as f64;
        }
        for r in 0..ne {
            for c in [r, r + 2, r + 3] {
                m[(nx + r, c)] = 1.0 + c as f64 * 0.1;
                m[(c, nx + r)] = 1.0 + c as f64 * 0.1;
            }
            m[(nx + r, nx + r)] = -1e-3;
        }
        let signs = (0..n).map(|i| if i < nx { 1.0 } else { -1.0 }).collect();
        check(&m, signs);
    }

    #[test]
    fn wrong_sign_pivot_is_bumped_or_reported() {
        let entries = vec![(0, 0), (1, 1)];
        let mut s = LdlSolver::new(2, &entries, vec![1.0, 1.0]);
        assert_eq!(s.factor(&[1.0, -1.0], &[0.0, 0.0], 1e-12, 0.0), Err(LdlError::ZeroPivot(1)));
        assert_eq!(s.factor(&[1.0, -1.0], &[0.0, 0.0], 1e-12, 1e-6), Ok(1));
    }

    #[test]
    fn ordering_is_a_permutation() {
        let edges: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).chain([(0, 9)]).collect();
        let mut p = minimum_degree(10, &edges);
        p.sort();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }
}
