//! Effective transport tensors assembled from cell solutions: the averaged
//! diffusion block, the corrector average, and the drift-corrector
//! correlation, plus the symmetric/skew decomposition and the coercivity
//! check of the state-dependent dispersion tensor.

use crate::cell::{CellSolution, Coefficients, Polynomial};
use crate::geometry::{CellGeometry, FaceTag};
use crate::scalar::{cast, cast_usize, KahanSum, Scalar};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("cell solution was computed on an n = {solution} grid, geometry has n = {geometry}")]
    GeometryMismatch { solution: usize, geometry: usize },
    #[error("dispersion tensor loses uniform positivity: min Rayleigh quotient {min_rayleigh:e} < bound {bound:e} at u0 = {at_u0}")]
    CoercivityViolated {
        min_rayleigh: f64,
        bound: f64,
        at_u0: f64,
    },
}

/// The dispersion tensor in affine-in-P' form: evaluating at a state u0
/// costs a handful of flops, which the macroscopic solver does per cell per
/// sub-iteration.
#[derive(Clone, Debug)]
pub struct EffectiveTensors<T: Scalar> {
    /// Effective drift at the drift-average value used for the solve.
    pub b_star: [T; 2],
    /// Averaged diffusion block `(1/|Z|) int D (I + grad W)`.
    pub m0: [[T; 2]; 2],
    /// Corrector average `(1/|Z|) int W^t`.
    pub m1: [T; 2],
    /// Drift-corrector correlation `(1/|Z|) int B W^t`.
    pub m2: [[T; 2]; 2],
    /// Drift-average scalar the correctors were solved at.
    pub a_value: T,
    /// Drift nonlinearity, for evaluating P'(u0).
    pub p: Polynomial<T>,
}

/// Cell-centered gradient of corrector `comp`, using the same face
/// differences as the finite-volume assembly (half-cell one-sided values at
/// strong-value faces, the prescribed-flux relation at flux faces).
fn corrector_gradient<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    w: &[T],
    i: usize,
    j: usize,
    comp: usize,
) -> [T; 2] {
    let n = geom.n();
    let h = geom.h();
    let half = cast::<T>(0.5);
    let two = cast::<T>(2.0);
    let row = geom.fluid_unknown(i, j).expect("gradient on fluid cell");
    let wc = w[row];
    let dc = coeffs.d.at(geom.cell_id(i, j));

    let mut grad = [T::zero(); 2];
    for axis in 0..2 {
        // Faces in -axis and +axis direction.
        let (fm, fp, nb_m, nb_p) = if axis == 0 {
            (
                geom.x_face_tag(i, j),
                geom.x_face_tag((i + 1) % n, j),
                ((i + n - 1) % n, j),
                ((i + 1) % n, j),
            )
        } else {
            (
                geom.y_face_tag(i, j),
                geom.y_face_tag(i, (j + 1) % n),
                (i, (j + n - 1) % n),
                (i, (j + 1) % n),
            )
        };
        let minus = match fm {
            FaceTag::Interior | FaceTag::Periodic => {
                let nb = geom.fluid_unknown(nb_m.0, nb_m.1).unwrap();
                (wc - w[nb]) / h
            }
            FaceTag::GammaD => two * wc / h,
            FaceTag::GammaN => -dc[axis][comp] / dc[axis][axis],
            FaceTag::Solid => unreachable!(),
        };
        let plus = match fp {
            FaceTag::Interior | FaceTag::Periodic => {
                let nb = geom.fluid_unknown(nb_p.0, nb_p.1).unwrap();
                (w[nb] - wc) / h
            }
            FaceTag::GammaD => -two * wc / h,
            FaceTag::GammaN => -dc[axis][comp] / dc[axis][axis],
            FaceTag::Solid => unreachable!(),
        };
        grad[axis] = (minus + plus) * half;
    }
    grad
}

/// Assemble the three integral blocks of the dispersion tensor from a cell
/// solution, with the scheme's own cell-centered quadrature.
pub fn assemble_effective_tensors<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    sol: &CellSolution<T>,
) -> Result<EffectiveTensors<T>, TensorError> {
    if sol.n != geom.n() || sol.w[0].len() != geom.fluid_count() {
        return Err(TensorError::GeometryMismatch {
            solution: sol.n,
            geometry: geom.n(),
        });
    }
    let h2 = geom.h() * geom.h();
    let area = geom.fluid_area();

    let mut m0 = [[KahanSum::new(); 2]; 2];
    let mut m1 = [KahanSum::new(); 2];
    let mut m2 = [[KahanSum::new(); 2]; 2];

    for (row, &(i, j)) in geom.fluid_cells().iter().enumerate() {
        let d = coeffs.d.at(geom.cell_id(i, j));
        let grads = [
            corrector_gradient(geom, coeffs, &sol.w[0], i, j, 0),
            corrector_gradient(geom, coeffs, &sol.w[1], i, j, 1),
        ];
        for ii in 0..2 {
            for k in 0..2 {
                // [D (I + grad W)]_{ii,k} = sum_a D[ii][a] (delta_{a,k} + d_a w_k)
                let mut v = T::zero();
                for a in 0..2 {
                    let g = if a == k { T::one() } else { T::zero() } + grads[k][a];
                    v += d[ii][a] * g;
                }
                m0[ii][k].add(v * h2);
            }
        }
        let wv = [sol.w[0][row], sol.w[1][row]];
        for k in 0..2 {
            m1[k].add(wv[k] * h2);
        }
        if let Some(b) = &coeffs.b {
            let bb = b.cell_average(i, j);
            for ii in 0..2 {
                for k in 0..2 {
                    m2[ii][k].add(bb[ii] * wv[k] * h2);
                }
            }
        }
    }

    let fin =
        |s: &KahanSum<T>| s.value() / area;
    Ok(EffectiveTensors {
        b_star: sol.b_star_used,
        m0: [
            [fin(&m0[0][0]), fin(&m0[0][1])],
            [fin(&m0[1][0]), fin(&m0[1][1])],
        ],
        m1: [fin(&m1[0]), fin(&m1[1])],
        m2: [
            [fin(&m2[0][0]), fin(&m2[0][1])],
            [fin(&m2[1][0]), fin(&m2[1][1])],
        ],
        a_value: sol.a_value,
        p: coeffs.p.clone(),
    })
}

impl<T: Scalar> EffectiveTensors<T> {
    /// Dispersion tensor for the given derivative value `P'(u0)`.
    pub fn evaluate_at_p_prime(&self, p_prime: T) -> [[T; 2]; 2] {
        let mut d = [[T::zero(); 2]; 2];
        for i in 0..2 {
            for k in 0..2 {
                d[i][k] = self.m0[i][k] + self.b_star[i] * self.m1[k] - p_prime * self.m2[i][k];
            }
        }
        d
    }

    /// Dispersion tensor at state u0.
    pub fn evaluate(&self, u0: T) -> [[T; 2]; 2] {
        self.evaluate_at_p_prime(self.p.eval_derivative(u0))
    }

    /// True when the tensor actually varies with the state.
    pub fn state_dependent(&self) -> bool {
        let m2_zero = self
            .m2
            .iter()
            .flatten()
            .all(|v| *v == T::zero());
        !(m2_zero || self.p.is_linear())
    }

    /// Constant tensors for tests and manufactured problems.
    pub fn constant(d: [[T; 2]; 2], p: Polynomial<T>) -> Self {
        Self {
            b_star: [T::zero(); 2],
            m0: d,
            m1: [T::zero(); 2],
            m2: [[T::zero(); 2]; 2],
            a_value: T::zero(),
            p,
        }
    }
}

/// Split a 2x2 tensor into its symmetric and skew parts. Both outputs carry
/// their structure exactly: the symmetric part stores one off-diagonal
/// value, the skew part one generator.
pub fn decompose<T: Scalar>(d: &[[T; 2]; 2]) -> ([[T; 2]; 2], [[T; 2]; 2]) {
    let half = cast::<T>(0.5);
    let s = (d[0][1] + d[1][0]) * half;
    let k = (d[0][1] - d[1][0]) * half;
    let a = [[d[0][0], s], [s, d[1][1]]];
    let j = [[T::zero(), k], [-k, T::zero()]];
    (a, j)
}

/// Smallest eigenvalue of the symmetric part, in closed form.
pub fn min_symmetric_eigenvalue<T: Scalar>(d: &[[T; 2]; 2]) -> T {
    let half = cast::<T>(0.5);
    let s = (d[0][1] + d[1][0]) * half;
    let mean = (d[0][0] + d[1][1]) * half;
    let gap = (d[0][0] - d[1][1]) * half;
    mean - (gap * gap + s * s).sqrt()
}

/// Quadratic form `xi^T D xi`.
pub fn rayleigh_quotient<T: Scalar>(d: &[[T; 2]; 2], xi: [T; 2]) -> T {
    xi[0] * (d[0][0] * xi[0] + d[0][1] * xi[1]) + xi[1] * (d[1][0] * xi[0] + d[1][1] * xi[1])
}

/// Energy form `(1/|Z|) int D (e_j + grad w_j) . (e_i + grad w_i)`: the
/// symmetric part of the dispersion tensor written against gradients only,
/// hence invariant under constant shifts of the correctors.
pub fn dirichlet_energy_form<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    sol: &CellSolution<T>,
) -> [[T; 2]; 2] {
    let h2 = geom.h() * geom.h();
    let mut acc = [[KahanSum::new(); 2]; 2];
    for &(i, j) in geom.fluid_cells() {
        let d = coeffs.d.at(geom.cell_id(i, j));
        let g = [
            corrector_gradient(geom, coeffs, &sol.w[0], i, j, 0),
            corrector_gradient(geom, coeffs, &sol.w[1], i, j, 1),
        ];
        let v = [
            [T::one() + g[0][0], g[0][1]],
            [g[1][0], T::one() + g[1][1]],
        ];
        // v[k] = e_k + grad w_k as a 2-vector (components v[k][a]).
        for ii in 0..2 {
            for jj in 0..2 {
                let mut q = T::zero();
                for a in 0..2 {
                    for bq in 0..2 {
                        q += d[a][bq] * v[jj][bq] * v[ii][a];
                    }
                }
                acc[ii][jj].add(q * h2);
            }
        }
    }
    let area = geom.fluid_area();
    [
        [acc[0][0].value() / area, acc[0][1].value() / area],
        [acc[1][0].value() / area, acc[1][1].value() / area],
    ]
}

/// Outcome of the coercivity sweep.
#[derive(Clone, Debug)]
pub struct CoercivityReport<T: Scalar> {
    /// Smallest sampled Rayleigh quotient over (u0, direction) pairs.
    pub min_rayleigh: T,
    /// Closed-form minimum eigenvalue of the symmetric part, minimized
    /// over the u0 samples (cross-check of the direction sweep).
    pub min_eigenvalue: T,
    pub at_u0: T,
    pub at_angle: T,
    /// The analytic lower bound `theta |Z|`.
    pub alpha: T,
    /// Accepted threshold `theta |Z| (1 - slack)`.
    pub threshold: T,
}

/// Sweep the Rayleigh quotient of the dispersion tensor over state samples
/// and equispaced directions; fails when the minimum drops below
/// `theta |Z| (1 - slack)`.
pub fn check_coercivity<T: Scalar>(
    tensors: &EffectiveTensors<T>,
    theta: T,
    fluid_area: T,
    u0_samples: &[T],
    n_directions: usize,
    slack: T,
) -> Result<CoercivityReport<T>, TensorError> {
    let alpha = theta * fluid_area;
    let threshold = alpha * (T::one() - slack);
    let mut min_q = T::infinity();
    let mut min_eig = T::infinity();
    let mut at_u0 = T::zero();
    let mut at_angle = T::zero();
    let two_pi = cast::<T>(std::f64::consts::TAU);
    for &u0 in u0_samples {
        let d = tensors.evaluate(u0);
        min_eig = min_eig.min(min_symmetric_eigenvalue(&d));
        for k in 0..n_directions {
            let ang = two_pi * cast_usize::<T>(k) / cast_usize(n_directions);
            let (s, c) = ang.sin_cos();
            let q = rayleigh_quotient(&d, [c, s]);
            if q < min_q {
                min_q = q;
                at_u0 = u0;
                at_angle = ang;
            }
        }
    }
    let report = CoercivityReport {
        min_rayleigh: min_q,
        min_eigenvalue: min_eig,
        at_u0,
        at_angle,
        alpha,
        threshold,
    };
    if min_q < threshold {
        return Err(TensorError::CoercivityViolated {
            min_rayleigh: min_q.to_f64().unwrap_or(f64::NAN),
            bound: threshold.to_f64().unwrap_or(f64::NAN),
            at_u0: at_u0.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(report)
}

/// Default state samples for coercivity sweeps.
pub fn default_u0_samples<T: Scalar>() -> Vec<T> {
    vec![
        T::zero(),
        cast(0.25),
        cast(0.5),
        cast(0.75),
        T::one(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{
        generate_admissible_drift, solve_cell_problems, DiffusionField,
    };
    use crate::geometry::{build_cell_geometry, DirichletSides, Rect};

    fn manufactured(m0: [[f64; 2]; 2], m2: [[f64; 2]; 2]) -> EffectiveTensors<f64> {
        EffectiveTensors {
            b_star: [0.0; 2],
            m0,
            m1: [0.0; 2],
            m2,
            a_value: 1.0,
            p: Polynomial::tasep(),
        }
    }

    #[test]
    fn zero_corrector_reproduces_diffusion() {
        let g = build_cell_geometry::<f64>(8, None, DirichletSides::NONE).unwrap();
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.1).unwrap();
        let coeffs = Coefficients {
            d: DiffusionField::identity(),
            b: Some(b),
            p: Polynomial::tasep(),
            theta: 1.0,
        };
        let sol = solve_cell_problems(&g, &coeffs, 1.0).unwrap();
        let t = assemble_effective_tensors(&g, &coeffs, &sol).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((t.m0[i][j] - expect).abs() < 1e-11, "m0[{i}][{j}]");
                assert!(t.m2[i][j].abs() < 1e-11);
            }
            assert!(t.m1[i].abs() < 1e-12);
        }
        for u0 in [0.0, 0.3, 1.0] {
            let d = t.evaluate(u0);
            assert!((d[0][0] - 1.0).abs() < 1e-11);
            assert!((d[1][1] - 1.0).abs() < 1e-11);
            assert!(d[0][1].abs() < 1e-11);
        }
    }

    #[test]
    fn evaluate_kills_correlation_at_half_for_default_flux() {
        let t = manufactured([[2.0, 0.1], [0.2, 1.5]], [[0.5, 0.3], [0.1, 0.4]]);
        // P'(1/2) = 0 for r(1-r).
        let d = t.evaluate(0.5);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(d[i][j], t.m0[i][j]);
            }
        }
    }

    #[test]
    fn evaluate_state_independent_without_correlation() {
        let t = manufactured([[2.0, 0.1], [0.2, 1.5]], [[0.0; 2]; 2]);
        assert_eq!(t.evaluate(0.1), t.evaluate(0.9));
        assert!(!t.state_dependent());
    }

    #[test]
    fn linear_flux_is_state_independent() {
        let mut t = manufactured([[2.0, 0.0], [0.0, 2.0]], [[0.5, 0.3], [0.1, 0.4]]);
        t.p = Polynomial::linear();
        let a = t.evaluate(0.0);
        let b = t.evaluate(1.0);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a[i][j], b[i][j]);
            }
        }
        assert!(!t.state_dependent());
    }

    #[test]
    fn decompose_example() {
        let d = [[2.0, 1.0], [0.0, 2.0]];
        let (a, j) = decompose(&d);
        assert_eq!(a, [[2.0, 0.5], [0.5, 2.0]]);
        assert_eq!(j, [[0.0, 0.5], [-0.5, 0.0]]);
        // Reconstruction and structural symmetry.
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(a[r][c] + j[r][c], d[r][c]);
                assert_eq!(a[r][c], a[c][r]);
                assert_eq!(j[r][c], -j[c][r]);
            }
        }
    }

    #[test]
    fn decompose_symmetric_input_has_zero_skew() {
        let d = [[3.0, 0.25], [0.25, 1.0]];
        let (_, j) = decompose(&d);
        assert_eq!(j, [[0.0, 0.0], [-0.0, 0.0]]);
    }

    #[test]
    fn skew_part_never_contributes_to_rayleigh() {
        let d = [[2.0, 1.3], [-0.7, 1.1]];
        let (a, j) = decompose(&d);
        for k in 0..32 {
            let ang = k as f64 * 0.19634954084936207;
            let xi = [ang.cos(), ang.sin()];
            let qj = rayleigh_quotient(&j, xi);
            assert!(qj.abs() < 1e-15);
            let qd = rayleigh_quotient(&d, xi);
            let qa = rayleigh_quotient(&a, xi);
            assert!((qd - qa).abs() < 1e-13);
        }
    }

    #[test]
    fn coercivity_identity_tensor() {
        let t = manufactured([[1.0, 0.0], [0.0, 1.0]], [[0.0; 2]; 2]);
        let rep =
            check_coercivity(&t, 1.0, 8.0 / 9.0, &default_u0_samples(), 64, 0.05).unwrap();
        assert!((rep.min_rayleigh - 1.0).abs() < 1e-12);
        assert!((rep.min_eigenvalue - 1.0).abs() < 1e-12);
        assert!(rep.min_rayleigh >= rep.alpha);
    }

    #[test]
    fn coercivity_violation_detected() {
        let t = manufactured([[0.1, 0.0], [0.0, 0.1]], [[0.0; 2]; 2]);
        let err = check_coercivity(&t, 1.0, 8.0 / 9.0, &default_u0_samples(), 64, 0.05)
            .unwrap_err();
        assert!(matches!(err, TensorError::CoercivityViolated { .. }));
    }

    #[test]
    fn closed_form_eigenvalue_matches_direction_sweep() {
        let t = manufactured([[2.0, 0.4], [0.4, 1.2]], [[0.0; 2]; 2]);
        let rep = check_coercivity(&t, 0.5, 1.0, &[0.0], 512, 0.5).unwrap();
        assert!((rep.min_rayleigh - rep.min_eigenvalue).abs() < 1e-3);
    }

    #[test]
    fn energy_form_invariant_under_constant_shift() {
        let g = build_cell_geometry::<f64>(
            24,
            Some(Rect {
                x0: 1.0 / 3.0,
                x1: 2.0 / 3.0,
                y0: 1.0 / 3.0,
                y1: 2.0 / 3.0,
            }),
            DirichletSides::NONE,
        )
        .unwrap();
        let coeffs = Coefficients {
            d: DiffusionField::identity(),
            b: None,
            p: Polynomial::tasep(),
            theta: 1.0,
        };
        let sol = solve_cell_problems(&g, &coeffs, 1.0).unwrap();
        let a0 = dirichlet_energy_form(&g, &coeffs, &sol);

        let mut shifted = sol.clone();
        for v in shifted.w[0].iter_mut() {
            *v += 3.7;
        }
        for v in shifted.w[1].iter_mut() {
            *v -= 1.2;
        }
        let a1 = dirichlet_energy_form(&g, &coeffs, &shifted);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (a0[i][j] - a1[i][j]).abs() < 1e-12,
                    "energy form moved under constant shift"
                );
            }
        }
        // The averaged blocks do move; only the gradient-based form is
        // shift-invariant.
        let t0 = assemble_effective_tensors(&g, &coeffs, &sol).unwrap();
        let t1 = assemble_effective_tensors(&g, &coeffs, &shifted).unwrap();
        assert!((t0.m1[0] - t1.m1[0]).abs() > 1.0);
    }
}
