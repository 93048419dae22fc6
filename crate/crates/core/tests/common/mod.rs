//! Test-side oracles, independent of the library's solver path.
#![allow(dead_code)]

/// Dense LU solve with partial pivoting. Deliberately naive: it exists to
/// check the sparse iterative path against an unrelated algorithm.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if m[perm[r]][k].abs() > m[perm[piv]][k].abs() {
                piv = r;
            }
        }
        perm.swap(k, piv);
        let d = m[perm[k]][k];
        assert!(d.abs() > 1e-300, "singular dense system");
        for r in k + 1..n {
            let f = m[perm[r]][k] / d;
            if f != 0.0 {
                for c in k..n {
                    m[perm[r]][c] -= f * m[perm[k]][c];
                }
                x[perm[r]] -= f * x[perm[k]];
            }
        }
    }
    let mut out = vec![0.0; n];
    for k in (0..n).rev() {
        let mut acc = x[perm[k]];
        for c in k + 1..n {
            acc -= m[perm[k]][c] * out[c];
        }
        out[k] = acc / m[perm[k]][k];
    }
    out
}

/// Dense solve of a singular system with a constant nullspace, pinned to a
/// zero-mean solution: solves the (n-1)-dimensional reduced system with the
/// last unknown eliminated through the zero-sum constraint.
pub fn dense_solve_zero_mean(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    // Substitute x_{n-1} = -(x_0 + ... + x_{n-2}).
    let mut reduced = vec![vec![0.0; n - 1]; n - 1];
    let mut rhs = vec![0.0; n - 1];
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            reduced[r][c] = a[r][c] - a[r][n - 1];
        }
        rhs[r] = b[r];
    }
    let head = dense_solve(&reduced, &rhs);
    let mut out = Vec::with_capacity(n);
    let mut sum = 0.0;
    for v in &head {
        sum += v;
        out.push(*v);
    }
    out.push(-sum);
    // Shift to exact zero mean (guard rounding).
    let mean: f64 = out.iter().sum::<f64>() / n as f64;
    for v in out.iter_mut() {
        *v -= mean;
    }
    out
}
