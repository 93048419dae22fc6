//! In-repo compressed-sparse-row storage and Krylov solvers.
//!
//! Every PDE module assembles into [`TripletBuilder`] and solves through
//! [`solve`]. The contract is the relative-residual guarantee only; the
//! iteration (BiCGStab for nonsymmetric operators, CG when the assembler
//! certifies symmetry) and the preconditioner are internal choices.

use crate::scalar::{cast, kmean, Scalar};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("triplet index ({row}, {col}) out of range for dimension {dim}")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("matrix dimension mismatch: matrix is {matrix}, vector is {vector}")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error("iteration did not converge: residual {residual:e} after {iterations} iterations (tol {tol:e})")]
    NotConverged {
        residual: f64,
        iterations: usize,
        tol: f64,
    },
    #[error("right-hand side is not orthogonal to the constant nullspace (relative defect {defect:e})")]
    IncompatibleRightHandSide { defect: f64 },
}

/// Square sparse matrix in canonical CSR form: column indices strictly
/// increasing within each row, duplicates merged, no explicit zeros.
#[derive(Clone, Debug)]
pub struct SparseMatrix<T: Scalar> {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

/// Assembly buffer; duplicate (row, col) entries are summed on finalize.
#[derive(Clone, Debug)]
pub struct TripletBuilder<T: Scalar> {
    n: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Scalar> TripletBuilder<T> {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, cap: usize) -> Self {
        Self {
            n,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: T) {
        self.entries.push((row, col, value));
    }

    pub fn build(self) -> Result<SparseMatrix<T>, SparseError> {
        assemble(self.n, self.entries)
    }
}

/// Build canonical CSR from triplets. Duplicates are summed; entries that
/// cancel to exactly zero are dropped.
pub fn assemble<T: Scalar>(
    n: usize,
    mut entries: Vec<(usize, usize, T)>,
) -> Result<SparseMatrix<T>, SparseError> {
    for &(r, c, _) in &entries {
        if r >= n || c >= n {
            return Err(SparseError::IndexOutOfRange {
                row: r,
                col: c,
                dim: n,
            });
        }
    }
    entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut row_ptr = vec![0usize; n + 1];
    let mut col_idx = Vec::with_capacity(entries.len());
    let mut values: Vec<T> = Vec::with_capacity(entries.len());

    let mut i = 0;
    while i < entries.len() {
        let (r, c, mut v) = entries[i];
        i += 1;
        while i < entries.len() && entries[i].0 == r && entries[i].1 == c {
            v += entries[i].2;
            i += 1;
        }
        if v != T::zero() {
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
    }
    for r in 0..n {
        row_ptr[r + 1] += row_ptr[r];
    }
    Ok(SparseMatrix {
        n,
        row_ptr,
        col_idx,
        values,
    })
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[T], y: &mut [T]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let mut acc = T::zero();
            for k in lo..hi {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<T> {
        let mut d = vec![T::zero(); self.n];
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                if *c == r {
                    d[r] = *v;
                }
            }
        }
        d
    }

    /// Writes the matrix in MatrixMarket coordinate text format.
    pub fn write_matrix_market<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.16e}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Outcome of a linear solve. `converged` holds exactly when the final
/// relative residual met the requested tolerance.
#[derive(Clone, Debug)]
pub struct LinearSolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preconditioner {
    None,
    Jacobi,
    Ilu0,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    /// 0 means the default 10 * N.
    pub max_iter: usize,
    /// Project the constant vector out of the right-hand side and iterates
    /// (pure-Neumann/periodic operators defined up to an additive constant).
    pub nullspace: bool,
    /// Assembler certifies the operator is symmetric; enables CG.
    pub symmetric: bool,
    pub preconditioner: Preconditioner,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 0,
            nullspace: false,
            symmetric: false,
            preconditioner: Preconditioner::Ilu0,
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

fn project_mean_zero<T: Scalar>(v: &mut [T]) {
    let m = kmean(v);
    for x in v.iter_mut() {
        *x -= m;
    }
}

/// Zero-fill ILU factorization stored in-place over the CSR pattern.
struct Ilu0<T: Scalar> {
    mat: SparseMatrix<T>,
    diag_pos: Vec<usize>,
}

impl<T: Scalar> Ilu0<T> {
    fn factor(a: &SparseMatrix<T>) -> Self {
        let n = a.n;
        let mut mat = a.clone();
        let mut diag_pos = vec![usize::MAX; n];
        for r in 0..n {
            for k in mat.row_ptr[r]..mat.row_ptr[r + 1] {
                if mat.col_idx[k] == r {
                    diag_pos[r] = k;
                }
            }
        }
        // Column position scratch for the current row.
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (lo, hi) = (mat.row_ptr[i], mat.row_ptr[i + 1]);
            for k in lo..hi {
                pos[mat.col_idx[k]] = k;
            }
            for k in lo..hi {
                let col = mat.col_idx[k];
                if col >= i {
                    break;
                }
                let dk = diag_pos[col];
                if dk == usize::MAX {
                    continue;
                }
                let pivot = mat.values[dk];
                let pivot = if pivot.abs() < T::min_positive_value() {
                    T::one()
                } else {
                    pivot
                };
                let factor = mat.values[k] / pivot;
                mat.values[k] = factor;
                for kk in dk + 1..mat.row_ptr[col + 1] {
                    let j = mat.col_idx[kk];
                    let p = pos[j];
                    if p != usize::MAX {
                        let upd = factor * mat.values[kk];
                        mat.values[p] = mat.values[p] - upd;
                    }
                }
            }
            for k in lo..hi {
                pos[mat.col_idx[k]] = usize::MAX;
            }
        }
        Self { mat, diag_pos }
    }

    /// z = (LU)^{-1} r
    fn apply(&self, r: &[T], z: &mut [T]) {
        let n = self.mat.n;
        // Forward: L z = r with unit diagonal.
        for i in 0..n {
            let mut acc = r[i];
            for k in self.mat.row_ptr[i]..self.mat.row_ptr[i + 1] {
                let c = self.mat.col_idx[k];
                if c >= i {
                    break;
                }
                acc -= self.mat.values[k] * z[c];
            }
            z[i] = acc;
        }
        // Backward: U z = z.
        for i in (0..n).rev() {
            let dp = self.diag_pos[i];
            if dp == usize::MAX {
                continue;
            }
            let mut acc = z[i];
            for k in dp + 1..self.mat.row_ptr[i + 1] {
                acc -= self.mat.values[k] * z[self.mat.col_idx[k]];
            }
            let pivot = self.mat.values[dp];
            let pivot = if pivot.abs() < T::min_positive_value() {
                T::one()
            } else {
                pivot
            };
            z[i] = acc / pivot;
        }
    }
}

enum Precond<T: Scalar> {
    Identity,
    Jacobi(Vec<T>),
    Ilu(Box<Ilu0<T>>),
}

impl<T: Scalar> Precond<T> {
    fn build(a: &SparseMatrix<T>, kind: Preconditioner) -> Self {
        match kind {
            Preconditioner::None => Precond::Identity,
            Preconditioner::Jacobi => {
                let d = a
                    .diagonal()
                    .into_iter()
                    .map(|v| {
                        if v.abs() < T::min_positive_value() {
                            T::one()
                        } else {
                            v
                        }
                    })
                    .collect();
                Precond::Jacobi(d)
            }
            Preconditioner::Ilu0 => Precond::Ilu(Box::new(Ilu0::factor(a))),
        }
    }

    fn apply(&self, r: &[T], z: &mut [T]) {
        match self {
            Precond::Identity => z.copy_from_slice(r),
            Precond::Jacobi(d) => {
                for i in 0..r.len() {
                    z[i] = r[i] / d[i];
                }
            }
            Precond::Ilu(f) => f.apply(r, z),
        }
    }
}

/// Solve A x = b to the requested relative residual.
///
/// With `nullspace` set, `b` must be discretely compatible (orthogonal to
/// constants); the returned solution has zero mean.
pub fn solve<T: Scalar>(
    a: &SparseMatrix<T>,
    b: &[T],
    opts: SolveOptions,
) -> Result<(Vec<T>, LinearSolveReport), SparseError> {
    if b.len() != a.n {
        return Err(SparseError::DimensionMismatch {
            matrix: a.n,
            vector: b.len(),
        });
    }
    let n = a.n;
    let max_iter = if opts.max_iter == 0 {
        10 * n.max(4)
    } else {
        opts.max_iter
    };

    let mut rhs = b.to_vec();
    if opts.nullspace {
        let bnorm = norm2(&rhs).to_f64().unwrap_or(0.0);
        let sum: T = crate::scalar::ksum(rhs.iter().copied());
        let defect = sum.to_f64().unwrap_or(0.0).abs() / ((n as f64).sqrt() * bnorm + f64::MIN_POSITIVE);
        if bnorm > 0.0 && defect > 1e-8 {
            return Err(SparseError::IncompatibleRightHandSide { defect });
        }
        project_mean_zero(&mut rhs);
    }

    let bnorm = norm2(&rhs);
    if bnorm == T::zero() {
        return Ok((
            vec![T::zero(); n],
            LinearSolveReport {
                iterations: 0,
                final_residual: 0.0,
                converged: true,
            },
        ));
    }

    // A singular operator (constant nullspace) keeps Jacobi; ILU(0) pivots
    // can collapse on the last elimination row.
    let kind = if opts.nullspace && opts.preconditioner == Preconditioner::Ilu0 {
        Preconditioner::Jacobi
    } else {
        opts.preconditioner
    };
    let pc = Precond::build(a, kind);

    let (mut x, mut iters) = if opts.symmetric {
        pcg(a, &rhs, &pc, opts, max_iter, bnorm)
    } else {
        bicgstab(a, &rhs, &pc, opts, max_iter, bnorm)
    };

    if opts.nullspace {
        project_mean_zero(&mut x);
    }

    // The contract is on the true residual, not the recursion residual.
    let mut r = a.matvec(&x);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    if opts.nullspace {
        project_mean_zero(&mut r);
    }
    let mut rel = (norm2(&r) / bnorm).to_f64().unwrap_or(f64::INFINITY);

    // Cheap iterative refinement if the recursion drifted from the true
    // residual; reuses the same Krylov machinery on the defect equation.
    if rel > opts.tol && rel.is_finite() {
        let (dx, extra) = if opts.symmetric {
            pcg(a, &r, &pc, opts, max_iter, norm2(&r))
        } else {
            bicgstab(a, &r, &pc, opts, max_iter, norm2(&r))
        };
        for i in 0..n {
            x[i] += dx[i];
        }
        if opts.nullspace {
            project_mean_zero(&mut x);
        }
        iters += extra;
        let mut r2 = a.matvec(&x);
        for i in 0..n {
            r2[i] = rhs[i] - r2[i];
        }
        if opts.nullspace {
            project_mean_zero(&mut r2);
        }
        rel = (norm2(&r2) / bnorm).to_f64().unwrap_or(f64::INFINITY);
    }

    let report = LinearSolveReport {
        iterations: iters,
        final_residual: rel,
        converged: rel <= opts.tol,
    };
    if !report.converged {
        return Err(SparseError::NotConverged {
            residual: rel,
            iterations: iters,
            tol: opts.tol,
        });
    }
    Ok((x, report))
}

fn pcg<T: Scalar>(
    a: &SparseMatrix<T>,
    b: &[T],
    pc: &Precond<T>,
    opts: SolveOptions,
    max_iter: usize,
    bnorm: T,
) -> (Vec<T>, usize) {
    let n = a.n;
    let tol = cast::<T>(opts.tol) * bnorm;
    let mut x = vec![T::zero(); n];
    let mut r = b.to_vec();
    let mut z = vec![T::zero(); n];
    pc.apply(&r, &mut z);
    if opts.nullspace {
        project_mean_zero(&mut z);
    }
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![T::zero(); n];
    for it in 0..max_iter {
        if norm2(&r) <= tol {
            return (x, it);
        }
        a.mul_vec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq == T::zero() {
            return (x, it);
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        pc.apply(&r, &mut z);
        if opts.nullspace {
            project_mean_zero(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

fn bicgstab<T: Scalar>(
    a: &SparseMatrix<T>,
    b: &[T],
    pc: &Precond<T>,
    opts: SolveOptions,
    max_iter: usize,
    bnorm: T,
) -> (Vec<T>, usize) {
    let n = a.n;
    let tol = cast::<T>(opts.tol) * bnorm;
    let tiny = cast::<T>(1e-300);

    let mut x = vec![T::zero(); n];
    let mut r = b.to_vec();
    let mut r_hat = r.clone();
    let mut p = vec![T::zero(); n];
    let mut v = vec![T::zero(); n];
    let mut s = vec![T::zero(); n];
    let mut t = vec![T::zero(); n];
    let mut p_hat = vec![T::zero(); n];
    let mut s_hat = vec![T::zero(); n];

    let mut rho = T::one();
    let mut alpha = T::one();
    let mut omega = T::one();
    let mut it = 0;

    while it < max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < tiny || omega.abs() < tiny {
            // Breakdown: restart from the current iterate.
            r = a.matvec(&x);
            for i in 0..n {
                r[i] = b[i] - r[i];
            }
            r_hat.copy_from_slice(&r);
            p.iter_mut().for_each(|e| *e = T::zero());
            v.iter_mut().for_each(|e| *e = T::zero());
            rho = T::one();
            alpha = T::one();
            omega = T::one();
            it += 1;
            if norm2(&r) <= tol {
                return (x, it);
            }
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pc.apply(&p, &mut p_hat);
        if opts.nullspace {
            project_mean_zero(&mut p_hat);
        }
        a.mul_vec(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < tiny {
            it += 1;
            omega = T::zero(); // force restart next round
            continue;
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return (x, it + 1);
        }
        pc.apply(&s, &mut s_hat);
        if opts.nullspace {
            project_mean_zero(&mut s_hat);
        }
        a.mul_vec(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt.abs() < tiny {
            T::zero()
        } else {
            dot(&t, &s) / tt
        };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        it += 1;
        if norm2(&r) <= tol {
            return (x, it);
        }
    }
    (x, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> SparseMatrix<f64> {
        let trip: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        assemble(n, trip).unwrap()
    }

    #[test]
    fn assemble_identity() {
        let a = assemble(2, vec![(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert_eq!(a.dim(), 2);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.matvec(&[3.0, -1.0]), vec![3.0, -1.0]);
    }

    #[test]
    fn assemble_sums_duplicates() {
        let a = assemble(1, vec![(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(a.nnz(), 1);
        assert_eq!(a.row(0).1, &[3.0]);
    }

    #[test]
    fn assemble_rejects_out_of_range() {
        let err = assemble(2, vec![(0, 5, 1.0)]).unwrap_err();
        assert!(matches!(err, SparseError::IndexOutOfRange { col: 5, .. }));
    }

    #[test]
    fn solve_identity_is_exact() {
        let a = identity(2);
        let (x, rep) = solve(&a, &[3.0, -1.0], SolveOptions::default()).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-14);
        assert!((x[1] + 1.0).abs() < 1e-14);
        assert!(rep.converged);
        assert!(rep.iterations <= 1);
    }

    /// 1D periodic Laplacian on 4 points; the zero-mean solution of
    /// b = (1,-1,1,-1) is (1/4, -1/4, 1/4, -1/4) (dense solve by hand:
    /// the alternating vector is an eigenvector with eigenvalue 4).
    fn periodic_laplacian_4() -> SparseMatrix<f64> {
        let mut t = TripletBuilder::new(4);
        for i in 0..4usize {
            t.add(i, i, 2.0);
            t.add(i, (i + 1) % 4, -1.0);
            t.add(i, (i + 3) % 4, -1.0);
        }
        t.build().unwrap()
    }

    #[test]
    fn solve_periodic_laplacian_nullspace() {
        let a = periodic_laplacian_4();
        let b = [1.0, -1.0, 1.0, -1.0];
        let opts = SolveOptions {
            nullspace: true,
            symmetric: true,
            tol: 1e-13,
            ..Default::default()
        };
        let (x, rep) = solve(&a, &b, opts).unwrap();
        assert!(rep.converged);
        let expected = [0.25, -0.25, 0.25, -0.25];
        for i in 0..4 {
            assert!((x[i] - expected[i]).abs() < 1e-12);
        }
        let mean: f64 = x.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-13);
        let ax = a.matvec(&x);
        for i in 0..4 {
            assert!((ax[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_rejects_incompatible_rhs() {
        let a = periodic_laplacian_4();
        let b = [1.0, 1.0, 1.0, 1.0];
        let opts = SolveOptions {
            nullspace: true,
            symmetric: true,
            ..Default::default()
        };
        let err = solve(&a, &b, opts).unwrap_err();
        assert!(matches!(err, SparseError::IncompatibleRightHandSide { .. }));
    }

    #[test]
    fn matrix_market_roundtrip_format() {
        let a = assemble(2, vec![(0, 0, 1.5), (1, 0, -2.0), (1, 1, 4.0)]).unwrap();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("%%MatrixMarket matrix coordinate real general"));
        assert!(s.contains("2 2 3"));
        assert!(s.contains("2 1 -2.0000000000000000e0"));
    }
}
