//! Sparse symmetric storage, banded Cholesky, Jacobi-preconditioned CG, and
//! eigensolvers sized for tensor-product grids.
//!
//! Grids here are lexicographic tensor products, so assembled operators have
//! bandwidth 1 (d=1), nx (d=2) or nx² (d=3). Narrow bands get a dense-band
//! Cholesky in O(n·bw²); wide bands fall back to conjugate gradients. The
//! eigensolver is shift-invert block subspace iteration with Rayleigh-Ritz
//! extraction: one factorization per matrix, and exact eigenvalue
//! multiplicities (radially symmetric fields in d=2 produce them) are
//! resolved natively by the block.

use crate::error::{CoreError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Symmetric sparse matrix in CSR with both triangles stored.
#[derive(Debug, Clone)]
pub struct SymCsr {
    pub n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SymCsr {
    /// Build from (i, j, v) triplets; duplicate positions are summed.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, _) in &t {
            if i >= n || j >= n {
                return Err(CoreError::Solver(format!(
                    "triplet ({i},{j}) outside {n}x{n}"
                )));
            }
        }
        t.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut cur_row = 0usize;
        for (i, j, v) in t {
            while cur_row < i {
                cur_row += 1;
                row_ptr[cur_row] = col_idx.len();
            }
            if col_idx.len() > row_ptr[cur_row] && *col_idx.last().unwrap() == j {
                *vals.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                vals.push(v);
            }
        }
        while cur_row < n {
            cur_row += 1;
            row_ptr[cur_row] = col_idx.len();
        }
        Ok(SymCsr {
            n,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        dot(x, &y)
    }

    pub fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn bandwidth(&self) -> usize {
        let mut bw = 0usize;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                bw = bw.max(self.col_idx[k].abs_diff(i));
            }
        }
        bw
    }

    /// I + tau * self, sharing the sparsity pattern (diagonal must be present,
    /// which assembled operators guarantee).
    pub fn shifted_identity(&self, tau: f64) -> SymCsr {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= tau;
        }
        for i in 0..out.n {
            let mut found = false;
            for k in out.row_ptr[i]..out.row_ptr[i + 1] {
                if out.col_idx[k] == i {
                    out.vals[k] += 1.0;
                    found = true;
                }
            }
            assert!(found, "row {i} has no diagonal entry");
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let vji = self.get(j, i);
                if (self.vals[k] - vji).abs() > tol * self.vals[k].abs().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.col_idx[k] == j {
                return self.vals[k];
            }
        }
        0.0
    }

    /// (row, col, value) triplets in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col_idx[k], self.vals[k]))
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cholesky factor of a positive definite banded matrix, lower band stored
/// row-major with fixed width bw+1: entry (i, j) at band[i*(bw+1) + j-i+bw].
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &SymCsr) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        let at = |band: &Vec<f64>, i: usize, j: usize| band[i * w + j + bw - i];
        for (i, j, v) in a.triplets() {
            if j <= i {
                band[i * w + j + bw - i] = v;
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut sum = at(&band, i, j);
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    sum -= at(&band, i, k) * at(&band, j, k);
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(CoreError::Solver(format!(
                            "matrix not positive definite at pivot {i} (value {sum:.3e})"
                        )));
                    }
                    band[i * w + bw] = sum.sqrt();
                } else {
                    band[i * w + j + bw - i] = sum / at(&band, j, j);
                }
            }
        }
        Ok(BandedCholesky { n, bw, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let at = |i: usize, j: usize| self.band[i * w + j + bw - i];
        let mut y = b.to_vec();
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut sum = y[i];
            for j in j0..i {
                sum -= at(i, j) * y[j];
            }
            y[i] = sum / at(i, i);
        }
        for i in (0..n).rev() {
            let jmax = (i + bw).min(n - 1);
            let mut sum = y[i];
            for j in (i + 1)..=jmax {
                sum -= at(j, i) * y[j];
            }
            y[i] = sum / at(i, i);
        }
        y
    }
}

/// Jacobi-preconditioned conjugate gradients; relative residual tolerance.
pub fn pcg_solve(a: &SymCsr, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.n;
    let dinv: Vec<f64> = a
        .diag()
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= rel_tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(CoreError::Solver(format!(
        "CG stalled: residual {:.3e} of {:.3e} after {max_iter} iterations",
        norm2(&r),
        rel_tol * bnorm
    )))
}

/// Bandwidth threshold above which factorization memory (n * bw doubles)
/// stops paying off against conjugate gradients.
const DIRECT_BAND_LIMIT: usize = 512;

/// Symmetric positive definite solve: banded Cholesky when the band is
/// narrow, Jacobi-CG otherwise.
pub enum Solver {
    Direct(BandedCholesky),
    Iterative(SymCsr),
}

impl Solver {
    pub fn new(a: &SymCsr) -> Result<Self> {
        if a.bandwidth() <= DIRECT_BAND_LIMIT {
            Ok(Solver::Direct(BandedCholesky::factor(a)?))
        } else {
            Ok(Solver::Iterative(a.clone()))
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Direct(f) => Ok(f.solve(b)),
            Solver::Iterative(a) => pcg_solve(a, b, 1e-12, 10 * a.n),
        }
    }
}

/// Eigendecomposition of a dense symmetric k x k matrix by cyclic Jacobi
/// rotations. Returns eigenvalues ascending and eigenvectors column-major.
pub fn jacobi_eigen(a_in: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a_in.len(), k * k);
    let mut a = a_in.to_vec();
    let mut v = vec![0.0; k * k];
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    let norm: f64 = a_in.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += a[p * k + q] * a[p * k + q];
            }
        }
        if off.sqrt() <= 1e-14 * norm.max(1e-300) {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = a[p * k + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = a[i * k + p];
                    let aiq = a[i * k + q];
                    a[i * k + p] = c * aip - s * aiq;
                    a[i * k + q] = s * aip + c * aiq;
                }
                for j in 0..k {
                    let apj = a[p * k + j];
                    let aqj = a[q * k + j];
                    a[p * k + j] = c * apj - s * aqj;
                    a[q * k + j] = s * apj + c * aqj;
                }
                for i in 0..k {
                    let vip = v[i * k + p];
                    let viq = v[i * k + q];
                    v[i * k + p] = c * vip - s * viq;
                    v[i * k + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&i, &j| a[i * k + i].partial_cmp(&a[j * k + j]).unwrap());
    let evals: Vec<f64> = idx.iter().map(|&i| a[i * k + i]).collect();
    let mut evecs = vec![0.0; k * k];
    for (col, &i) in idx.iter().enumerate() {
        for row in 0..k {
            evecs[col * k + row] = v[row * k + i];
        }
    }
    (evals, evecs)
}

/// Options for the lowest-eigenpair solver.
#[derive(Debug, Clone, Copy)]
pub struct EigenOptions {
    pub count: usize,
    /// Extra subspace columns beyond count; widens the spectral gap that
    /// drives convergence.
    pub buffer: usize,
    /// Absolute residual tolerance ||A z - mu z||_2 on unit vectors.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl EigenOptions {
    pub fn for_count(count: usize) -> Self {
        EigenOptions {
            count,
            buffer: 8,
            tol: 1e-8,
            max_iters: 300,
            seed: 0x5eed_cafe,
        }
    }
}

/// Lowest `count` eigenpairs of a symmetric positive definite matrix by
/// shift-invert block subspace iteration: factor once, iterate A^{-1} on a
/// random block, Rayleigh-Ritz, repeat until the leading residuals drop
/// below tolerance. Eigenvalues ascending; vectors unit in the 2-norm.
pub fn lowest_eigenpairs(a: &SymCsr, opts: &EigenOptions) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = a.n;
    if opts.count == 0 || opts.count > n {
        return Err(CoreError::invalid("count", "1 <= count <= n"));
    }
    let q = (opts.count + opts.buffer).min(n);
    let solver = Solver::new(a)?;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut x: Vec<Vec<f64>> = (0..q)
        .map(|_| (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
        .collect();
    orthonormalize(&mut x);
    let mut last_residual = f64::INFINITY;
    for _iter in 0..opts.max_iters {
        let mut y: Vec<Vec<f64>> = Vec::with_capacity(q);
        for col in &x {
            y.push(solver.solve(col)?);
        }
        orthonormalize(&mut y);
        // Rayleigh-Ritz on span(Y)
        let mut my: Vec<Vec<f64>> = Vec::with_capacity(q);
        for col in &y {
            let mut t = vec![0.0; n];
            a.matvec(col, &mut t);
            my.push(t);
        }
        let mut b = vec![0.0; q * q];
        for i in 0..q {
            for j in i..q {
                let v = dot(&y[i], &my[j]);
                b[i * q + j] = v;
                b[j * q + i] = v;
            }
        }
        let (theta, u) = jacobi_eigen(&b, q);
        // rotate Y and M*Y by U
        let rot = |cols: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..q)
                .map(|j| {
                    let mut out = vec![0.0; n];
                    for (i, col) in cols.iter().enumerate() {
                        let w = u[j * q + i];
                        if w != 0.0 {
                            for (o, &c) in out.iter_mut().zip(col) {
                                *o += w * c;
                            }
                        }
                    }
                    out
                })
                .collect()
        };
        let z = rot(&y);
        let mz = rot(&my);
        let mut worst = 0.0f64;
        for i in 0..opts.count {
            let mut r = 0.0;
            for row in 0..n {
                let d = mz[i][row] - theta[i] * z[i][row];
                r += d * d;
            }
            worst = worst.max(r.sqrt());
        }
        if worst <= opts.tol {
            return Ok(theta
                .into_iter()
                .zip(z)
                .take(opts.count)
                .collect());
        }
        last_residual = worst;
        x = z;
    }
    Err(CoreError::EigenConvergence(format!(
        "subspace iteration: residual {last_residual:.3e} after {} iterations (tol {:.1e})",
        opts.max_iters, opts.tol
    )))
}

/// In-place modified Gram-Schmidt, two projection passes: iterated solver
/// images grow nearly colinear, and a single pass loses orthogonality there.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    let q = cols.len();
    for i in 0..q {
        for _pass in 0..2 {
            for j in 0..i {
                let c = dot(&cols[j], &cols[i]);
                let (a, b) = cols.split_at_mut(i);
                for (bi, aj) in b[0].iter_mut().zip(&a[j]) {
                    *bi -= c * aj;
                }
            }
        }
        let nrm = norm2(&cols[i]);
        assert!(nrm > 1e-300, "degenerate block column {i}");
        for v in &mut cols[i] {
            *v /= nrm;
        }
    }
}
