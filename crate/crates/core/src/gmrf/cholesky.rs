//! Up-looking sparse Cholesky factorization with a cached symbolic phase.
//!
//! The symbolic analysis (fill-reducing permutation, elimination tree and the
//! row structure of `L`) depends only on the sparsity pattern and is shared
//! through an `Arc` by every numeric factorization of matrices with that
//! pattern.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use sprs::CsMat;

use super::ordering::{adjacency, invert, minimum_degree};
use crate::error::{Error, Result};

/// Fill-reducing ordering choices.
#[derive(Debug, Clone)]
pub enum OrderingMethod {
    Natural,
    MinimumDegree,
    /// `perm[new] = old`.
    Given(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    // Upper-triangular pattern of P Q Pᵀ, CSC, sorted rows.
    cp: Vec<usize>,
    ci: Vec<usize>,
    parent: Vec<usize>,
    // Pattern of L, CSC, diagonal first then increasing rows.
    lp: Vec<usize>,
    li: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl SymbolicCholesky {
    /// Analyses the pattern of a symmetric matrix stored in full (both
    /// triangles). Diagonal entries are always part of the pattern.
    pub fn analyze(pattern: &CsMat<f64>, ordering: OrderingMethod) -> Result<Self> {
        let n = pattern.rows();
        if pattern.cols() != n {
            return Err(Error::DimensionMismatch {
                context: "symbolic analysis (square matrix)",
                expected: n,
                got: pattern.cols(),
            });
        }
        let perm = match ordering {
            OrderingMethod::Natural => (0..n).collect(),
            OrderingMethod::MinimumDegree => minimum_degree(&adjacency(pattern)),
            OrderingMethod::Given(p) => {
                if p.len() != n {
                    return Err(Error::DimensionMismatch {
                        context: "ordering length",
                        expected: n,
                        got: p.len(),
                    });
                }
                p
            }
        };
        let iperm = invert(&perm);
        if iperm.contains(&usize::MAX) {
            return Err(Error::InvalidInput("ordering is not a permutation".into()));
        }
        let mut cols: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
        for (_, (i, j)) in pattern.iter() {
            let (pi, pj) = (iperm[i], iperm[j]);
            if pi < pj {
                cols[pj].push(pi);
            } else if pj < pi {
                cols[pi].push(pj);
            }
        }
        let mut cp = Vec::with_capacity(n + 1);
        let mut ci = Vec::new();
        cp.push(0);
        for mut col in cols {
            col.sort_unstable();
            col.dedup();
            ci.extend(col);
            cp.push(ci.len());
        }
        let parent = etree(n, &cp, &ci);

        // Row structure of L via elimination reaches; fills column counts and
        // the row indices of L in increasing order.
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(n, &cp, &ci, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..n] {
                rows_of[i].push(k);
            }
        }
        let mut lp = Vec::with_capacity(n + 1);
        let mut li = Vec::new();
        lp.push(0);
        for (j, rows) in rows_of.into_iter().enumerate() {
            li.push(j);
            li.extend(rows);
            lp.push(li.len());
        }
        Ok(Self {
            n,
            perm,
            iperm,
            cp,
            ci,
            parent,
            lp,
            li,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn factor_nnz(&self) -> usize {
        self.li.len()
    }

    /// Numeric factorization. `q` must be stored in full symmetric form and
    /// its pattern must be contained in the analysed one.
    pub fn factor(self: &Arc<Self>, q: &CsMat<f64>) -> Result<FactoredPrecision> {
        let n = self.n;
        if q.rows() != n || q.cols() != n {
            return Err(Error::DimensionMismatch {
                context: "numeric factorization",
                expected: n,
                got: q.rows(),
            });
        }
        let mut cx = vec![0.0; self.ci.len()];
        for (&v, (i, j)) in q.iter() {
            let (pi, pj) = (self.iperm[i], self.iperm[j]);
            if pi > pj {
                continue;
            }
            let rows = &self.ci[self.cp[pj]..self.cp[pj + 1]];
            match rows.binary_search(&pi) {
                Ok(pos) => cx[self.cp[pj] + pos] = v,
                Err(_) => return Err(Error::PatternMismatch { row: i, col: j }),
            }
        }

        let mut lx = vec![0.0; self.li.len()];
        let mut next: Vec<usize> = self.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0; n];
        let mut mark = vec![NONE; n];
        for k in 0..n {
            let top = ereach(n, &self.cp, &self.ci, k, &self.parent, &mut stack, &mut mark);
            for p in self.cp[k]..self.cp[k + 1] {
                x[self.ci[p]] = cx[p];
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..n] {
                let lki = x[i] / lx[self.lp[i]];
                x[i] = 0.0;
                for p in self.lp[i] + 1..next[i] {
                    x[self.li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                lx[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[k],
                    value: d,
                });
            }
            lx[next[k]] = d.sqrt();
            next[k] += 1;
        }
        let log_det = 2.0 * (0..n).map(|j| lx[self.lp[j]].ln()).sum::<f64>();
        Ok(FactoredPrecision {
            symbolic: Arc::clone(self),
            lx,
            log_det,
        })
    }
}

fn etree(n: usize, cp: &[usize], ci: &[usize]) -> Vec<usize> {
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &row in &ci[cp[k]..cp[k + 1]] {
            let mut i = row;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal) in topological
/// order, returned in `stack[top..n]`.
fn ereach(
    n: usize,
    cp: &[usize],
    ci: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    mark: &mut [usize],
) -> usize {
    let mut top = n;
    mark[k] = k;
    for &row in &ci[cp[k]..cp[k + 1]] {
        let mut i = row;
        if i >= k {
            continue;
        }
        let mut len = 0;
        while mark[i] != k {
            stack[len] = i;
            len += 1;
            mark[i] = k;
            i = parent[i];
        }
        while len > 0 {
            top -= 1;
            len -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Cholesky factor `P Q Pᵀ = L Lᵀ` of a sparse precision matrix.
#[derive(Debug, Clone)]
pub struct FactoredPrecision {
    symbolic: Arc<SymbolicCholesky>,
    lx: Vec<f64>,
    log_det: f64,
}

impl FactoredPrecision {
    /// Convenience: minimum-degree analysis plus numeric factorization.
    pub fn new(q: &CsMat<f64>) -> Result<Self> {
        let sym = Arc::new(SymbolicCholesky::analyze(q, OrderingMethod::MinimumDegree)?);
        sym.factor(q)
    }

    pub fn size(&self) -> usize {
        self.symbolic.n
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    /// `log det Q`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Factor entries as `(row, col, value)` in the permuted numbering.
    pub fn factor_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let s = &self.symbolic;
        (0..s.n).flat_map(move |j| (s.lp[j]..s.lp[j + 1]).map(move |p| (s.li[p], j, self.lx[p])))
    }

    fn permute(&self, b: &[f64]) -> Vec<f64> {
        self.symbolic.perm.iter().map(|&old| b[old]).collect()
    }

    fn unpermute(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        for (new, &old) in self.symbolic.perm.iter().enumerate() {
            out[old] = y[new];
        }
        out
    }

    fn forward(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            y[j] /= self.lx[s.lp[j]];
            let yj = y[j];
            for p in s.lp[j] + 1..s.lp[j + 1] {
                y[s.li[p]] -= self.lx[p] * yj;
            }
        }
    }

    fn backward(&self, y: &mut [f64]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let mut acc = y[j];
            for p in s.lp[j] + 1..s.lp[j + 1] {
                acc -= self.lx[p] * y[s.li[p]];
            }
            y[j] = acc / self.lx[s.lp[j]];
        }
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.size(), "right-hand side length");
        let mut y = self.permute(b);
        self.forward(&mut y);
        self.backward(&mut y);
        self.unpermute(&y)
    }

    /// `vᵀ Q v` computed from the factor.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let s = &self.symbolic;
        let y = self.permute(v);
        (0..s.n)
            .map(|j| {
                let t: f64 = (s.lp[j]..s.lp[j + 1]).map(|p| self.lx[p] * y[s.li[p]]).sum();
                t * t
            })
            .sum()
    }

    /// `log N(x; mean, Q⁻¹)`.
    pub fn log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        let n = self.size() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.log_det - 0.5 * self.quadratic_form(&d)
    }

    /// Draw from `N(mean, Q⁻¹)`: solves `Lᵀ v = z` for standard normal `z`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.size()).map(|_| rng.sample(StandardNormal)).collect();
        self.backward(&mut z);
        let v = self.unpermute(&z);
        v.iter().zip(mean).map(|(a, b)| a + b).collect()
    }

    /// Diagonal of `Q⁻¹` at `indices`, one column solve per index.
    pub fn selected_variances(&self, indices: &[usize]) -> Vec<f64> {
        let n = self.size();
        indices
            .iter()
            .map(|&i| {
                let mut e = vec![0.0; n];
                e[i] = 1.0;
                self.solve(&e)[i]
            })
            .collect()
    }

    /// Entries of `Q⁻¹` on the pattern of `L` (Takahashi recursions).
    pub fn partial_inverse(&self) -> PartialInverse {
        let s = &self.symbolic;
        let mut sx = vec![0.0; s.li.len()];
        let mut acc = Vec::new();
        for j in (0..s.n).rev() {
            let (start, end) = (s.lp[j], s.lp[j + 1]);
            let ljj = self.lx[start];
            let rows = &s.li[start + 1..end];
            let l = &self.lx[start + 1..end];
            acc.clear();
            acc.resize(rows.len(), 0.0);
            // acc = Σ_{R,R} l, where R is the off-diagonal pattern of column
            // j. Every later row of R lies on the pattern of each column in R.
            for a in 0..rows.len() {
                let k = rows[a];
                let (ks, ke) = (s.lp[k], s.lp[k + 1]);
                acc[a] += l[a] * sx[ks];
                let mut p = ks + 1;
                for b in a + 1..rows.len() {
                    while s.li[p] < rows[b] {
                        p += 1;
                    }
                    debug_assert!(p < ke && s.li[p] == rows[b]);
                    acc[a] += l[b] * sx[p];
                    acc[b] += l[a] * sx[p];
                }
            }
            let mut diag = 1.0 / ljj;
            for a in 0..rows.len() {
                let v = -acc[a] / ljj;
                sx[start + 1 + a] = v;
                diag -= l[a] * v;
            }
            sx[start] = diag / ljj;
        }
        PartialInverse {
            symbolic: Arc::clone(&self.symbolic),
            sx,
        }
    }

    /// Block-diagonal factor assembled from independent blocks, in order.
    pub fn block_diagonal(blocks: &[&FactoredPrecision]) -> FactoredPrecision {
        let n: usize = blocks.iter().map(|b| b.size()).sum();
        let mut perm = Vec::with_capacity(n);
        let mut cp = vec![0];
        let mut ci = Vec::new();
        let mut parent = Vec::with_capacity(n);
        let mut lp = vec![0];
        let mut li = Vec::new();
        let mut lx = Vec::new();
        let mut log_det = 0.0;
        let mut offset = 0;
        for b in blocks {
            let s = &b.symbolic;
            perm.extend(s.perm.iter().map(|&p| p + offset));
            for j in 0..s.n {
                ci.extend(s.ci[s.cp[j]..s.cp[j + 1]].iter().map(|&i| i + offset));
                cp.push(ci.len());
                li.extend(s.li[s.lp[j]..s.lp[j + 1]].iter().map(|&i| i + offset));
                lp.push(li.len());
                parent.push(if s.parent[j] == NONE {
                    NONE
                } else {
                    s.parent[j] + offset
                });
            }
            lx.extend_from_slice(&b.lx);
            log_det += b.log_det;
            offset += s.n;
        }
        let iperm = invert(&perm);
        FactoredPrecision {
            symbolic: Arc::new(SymbolicCholesky {
                n,
                perm,
                iperm,
                cp,
                ci,
                parent,
                lp,
                li,
            }),
            lx,
            log_det,
        }
    }

    /// Factor of a diagonal precision.
    pub fn diagonal(d: &[f64]) -> Result<FactoredPrecision> {
        let n = d.len();
        if let Some((i, &v)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite { pivot: i, value: v });
        }
        let idx: Vec<usize> = (0..n).collect();
        let ptr: Vec<usize> = (0..=n).collect();
        Ok(FactoredPrecision {
            symbolic: Arc::new(SymbolicCholesky {
                n,
                perm: idx.clone(),
                iperm: idx.clone(),
                cp: ptr.clone(),
                ci: idx.clone(),
                parent: vec![NONE; n],
                lp: ptr,
                li: idx,
            }),
            lx: d.iter().map(|v| v.sqrt()).collect(),
            log_det: d.iter().map(|v| v.ln()).sum(),
        })
    }
}

/// Covariance entries on the pattern of the Cholesky factor.
#[derive(Debug, Clone)]
pub struct PartialInverse {
    symbolic: Arc<SymbolicCholesky>,
    sx: Vec<f64>,
}

impl PartialInverse {
    /// `Σ_ij` in the original numbering, if `(i, j)` lies on the factor
    /// pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let s = &self.symbolic;
        let (pi, pj) = (s.iperm[i], s.iperm[j]);
        let (hi, lo) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        let range = s.lp[lo]..s.lp[lo + 1];
        s.li[range.clone()]
            .binary_search(&hi)
            .ok()
            .map(|p| self.sx[range.start + p])
    }

    pub fn variance(&self, i: usize) -> f64 {
        let s = &self.symbolic;
        self.sx[s.lp[s.iperm[i]]]
    }

    /// `aᵀ Σ a` for a sparse vector whose support pairs lie on the pattern.
    pub fn quadratic(&self, a: &[(usize, f64)]) -> Option<f64> {
        let mut acc = 0.0;
        for (x, &(i, ai)) in a.iter().enumerate() {
            acc += ai * ai * self.variance(i);
            for &(j, aj) in &a[x + 1..] {
                acc += 2.0 * ai * aj * self.get(i, j)?;
            }
        }
        Some(acc)
    }
}
