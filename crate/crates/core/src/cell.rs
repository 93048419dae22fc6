//! Cell problems on the perforated periodic cell: coefficient fields, the
//! divergence-free drift generator, the effective drift vector, and the
//! corrector solves.
//!
//! Discretization: cell-centered finite volumes. Diffusive fluxes use
//! two-point differences with harmonic averaging of the diffusion tensor's
//! normal component at faces; the drift term uses first-order upwinding of
//! face values. The drift field lives on faces as normal components derived
//! from a nodal stream potential, so its discrete divergence vanishes by
//! construction.

use crate::geometry::{CellGeometry, FaceTag};
use crate::scalar::{cast, cast_usize, ksum, KahanSum, Scalar};
use crate::sparse::{self, Preconditioner, SolveOptions, SparseError, SparseMatrix, TripletBuilder};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("cutoff region around the obstacle reaches the outer boundary of the unit cell")]
    CutoffOverlapsOuterBoundary,
    #[error("cell-problem right-hand side is incompatible with the periodic operator (relative defect {defect:e}); the effective drift does not match the drift average used here")]
    IncompatibleRightHandSide { defect: f64 },
    #[error("cell-problem linear solve did not converge: residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("per-cell diffusion field has {got} entries, geometry has {expected} cells")]
    CoefficientShapeMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Polynomial drift nonlinearity `P(r) = a0 + a1 r + ... + am r^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial<T: Scalar> {
    coeffs: Vec<T>,
}

impl<T: Scalar> Polynomial<T> {
    pub fn new(coeffs: Vec<T>) -> Self {
        assert!(!coeffs.is_empty(), "polynomial needs at least one coefficient");
        Self { coeffs }
    }

    /// The exclusion-process flux `P(r) = r(1 - r)`.
    pub fn tasep() -> Self {
        Self::new(vec![T::zero(), T::one(), -T::one()])
    }

    /// Linear transport `P(r) = r`.
    pub fn linear() -> Self {
        Self::new(vec![T::zero(), T::one()])
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_linear(&self) -> bool {
        self.coeffs.iter().skip(2).all(|c| *c == T::zero())
    }

    pub fn eval(&self, r: T) -> T {
        let mut acc = T::zero();
        for &c in self.coeffs.iter().rev() {
            acc = acc * r + c;
        }
        acc
    }

    /// P'(r) by Horner on the derivative coefficients.
    pub fn eval_derivative(&self, r: T) -> T {
        let mut acc = T::zero();
        for k in (1..self.coeffs.len()).rev() {
            acc = acc * r + self.coeffs[k] * cast_usize(k);
        }
        acc
    }

    /// Maximum of |P'| over [lo, hi] (wave-speed bound for the explicit
    /// drift step).
    pub fn max_abs_derivative(&self, lo: T, hi: T) -> T {
        let mut m = self.eval_derivative(lo).abs().max(self.eval_derivative(hi).abs());
        for c in self.critical_points_of_derivative(lo, hi) {
            m = m.max(self.eval_derivative(c).abs());
        }
        m
    }

    /// Roots of P' in [lo, hi]: the interior extrema of P, needed by the
    /// exact Godunov flux. Closed form through quadratic P'; sign-scanning
    /// plus bisection beyond that.
    pub fn critical_points(&self, lo: T, hi: T) -> Vec<T> {
        let d: Vec<T> = (1..self.coeffs.len())
            .map(|k| self.coeffs[k] * cast_usize(k))
            .collect();
        roots_in_interval(&d, lo, hi)
    }

    fn critical_points_of_derivative(&self, lo: T, hi: T) -> Vec<T> {
        if self.coeffs.len() < 3 {
            return Vec::new();
        }
        let dd: Vec<T> = (2..self.coeffs.len())
            .map(|k| self.coeffs[k] * cast_usize(k) * cast_usize(k - 1))
            .collect();
        roots_in_interval(&dd, lo, hi)
    }
}

fn poly_eval<T: Scalar>(coeffs: &[T], r: T) -> T {
    let mut acc = T::zero();
    for &c in coeffs.iter().rev() {
        acc = acc * r + c;
    }
    acc
}

fn roots_in_interval<T: Scalar>(coeffs: &[T], lo: T, hi: T) -> Vec<T> {
    let deg = coeffs.iter().rposition(|c| *c != T::zero());
    let deg = match deg {
        None | Some(0) => return Vec::new(),
        Some(d) => d,
    };
    if deg == 1 {
        let r = -coeffs[0] / coeffs[1];
        if r >= lo && r <= hi {
            return vec![r];
        }
        return Vec::new();
    }
    if deg == 2 {
        let (a, b, c) = (coeffs[2], coeffs[1], coeffs[0]);
        let disc = b * b - cast::<T>(4.0) * a * c;
        if disc < T::zero() {
            return Vec::new();
        }
        let sq = disc.sqrt();
        let two_a = a + a;
        let mut out = Vec::new();
        for r in [(-b + sq) / two_a, (-b - sq) / two_a] {
            if r >= lo && r <= hi {
                out.push(r);
            }
        }
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out.dedup();
        return out;
    }
    // General case: scan for sign changes and bisect.
    let steps = 512usize;
    let dx = (hi - lo) / cast_usize(steps);
    let mut out = Vec::new();
    let mut x_prev = lo;
    let mut f_prev = poly_eval(coeffs, lo);
    for k in 1..=steps {
        let x = lo + dx * cast_usize(k);
        let f = poly_eval(coeffs, x);
        if f_prev == T::zero() {
            out.push(x_prev);
        } else if f_prev * f < T::zero() {
            let (mut a, mut b) = (x_prev, x);
            let (mut fa, _) = (f_prev, f);
            for _ in 0..80 {
                let m = (a + b) / cast::<T>(2.0);
                let fm = poly_eval(coeffs, m);
                if fa * fm <= T::zero() {
                    b = m;
                } else {
                    a = m;
                    fa = fm;
                }
            }
            out.push((a + b) / cast::<T>(2.0));
        }
        x_prev = x;
        f_prev = f;
    }
    if f_prev == T::zero() {
        out.push(hi);
    }
    out
}

/// Diffusion tensor field on the cell grid; row-major 2x2 blocks.
#[derive(Clone, Debug)]
pub enum DiffusionField<T: Scalar> {
    Constant([[T; 2]; 2]),
    PerCell(Vec<[[T; 2]; 2]>),
}

impl<T: Scalar> DiffusionField<T> {
    pub fn isotropic(value: T) -> Self {
        DiffusionField::Constant([[value, T::zero()], [T::zero(), value]])
    }

    pub fn identity() -> Self {
        Self::isotropic(T::one())
    }

    #[inline]
    pub fn at(&self, cell_id: usize) -> [[T; 2]; 2] {
        match self {
            DiffusionField::Constant(d) => *d,
            DiffusionField::PerCell(v) => v[cell_id],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, DiffusionField::Constant(_))
    }
}

/// Face-normal drift components on the periodic cell grid.
///
/// `x_faces[j*n + i]` is the +x component on the face at `x = i*h`,
/// `y_faces[j*n + i]` the +y component on the face at `y = j*h`.
#[derive(Clone, Debug)]
pub struct DriftField<T: Scalar> {
    pub n: usize,
    pub x_faces: Vec<T>,
    pub y_faces: Vec<T>,
}

impl<T: Scalar> DriftField<T> {
    #[inline]
    pub fn x(&self, i: usize, j: usize) -> T {
        self.x_faces[j * self.n + i]
    }

    #[inline]
    pub fn y(&self, i: usize, j: usize) -> T {
        self.y_faces[j * self.n + i]
    }

    /// Cell-averaged drift vector from the bounding faces.
    pub fn cell_average(&self, i: usize, j: usize) -> [T; 2] {
        let n = self.n;
        let half = cast::<T>(0.5);
        [
            (self.x(i, j) + self.x((i + 1) % n, j)) * half,
            (self.y(i, j) + self.y(i, (j + 1) % n)) * half,
        ]
    }

    /// Largest face-normal magnitude (wave-speed bound).
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for v in self.x_faces.iter().chain(self.y_faces.iter()) {
            m = m.max(v.abs());
        }
        m
    }
}

/// Coefficient bundle for the cell problems.
#[derive(Clone, Debug)]
pub struct Coefficients<T: Scalar> {
    pub d: DiffusionField<T>,
    /// `None` means zero drift.
    pub b: Option<DriftField<T>>,
    pub p: Polynomial<T>,
    pub theta: T,
}

impl<T: Scalar> Coefficients<T> {
    pub fn check_shape(&self, geom: &CellGeometry<T>) -> Result<(), CellError> {
        if let DiffusionField::PerCell(v) = &self.d {
            let expected = geom.n() * geom.n();
            if v.len() != expected {
                return Err(CellError::CoefficientShapeMismatch {
                    got: v.len(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Corrector fields on the fluid cells for one drift-average value.
#[derive(Clone, Debug)]
pub struct CellSolution<T: Scalar> {
    pub n: usize,
    pub w: [Vec<T>; 2],
    pub a_value: T,
    pub b_star_used: [T; 2],
    pub mean_pinned: bool,
}

fn smoothstep5<T: Scalar>(t: T) -> T {
    if t <= T::zero() {
        T::zero()
    } else if t >= T::one() {
        T::one()
    } else {
        let t3 = t * t * t;
        t3 * (cast::<T>(10.0) - cast::<T>(15.0) * t + cast::<T>(6.0) * t * t)
    }
}

/// Quantization grid of the drift construction: potentials and face values
/// live on multiples of 2^-20, which keeps every face value and every
/// per-cell flux sum exactly representable, so the discrete divergence
/// cancels bitwise.
const DRIFT_QUANTUM_BITS: i32 = 20;

/// Generate a drift field that is discretely divergence-free on every cell
/// (bitwise) and exactly tangential on the obstacle boundary.
///
/// The field is the perpendicular gradient of a nodal stream potential:
/// the linear potential of the requested mean flow, blended to a constant
/// on the obstacle by a quintic cutoff of width `cutoff_radius`. The
/// potential is stored as integers in units of 2^-20 / n and the mean flow
/// is quantized to the same grid, so face differences telescope in exact
/// integer arithmetic and obstacle-boundary faces come out exactly zero.
pub fn generate_admissible_drift<T: Scalar>(
    geom: &CellGeometry<T>,
    mean_flow: [T; 2],
    cutoff_radius: T,
) -> Result<DriftField<T>, CellError> {
    let n = geom.n();
    let rect = geom.obstacle_rect();

    if let Some(r) = rect {
        let rad = cutoff_radius.to_f64().unwrap_or(0.0);
        if r.x0 - rad <= 0.0 || r.x1 + rad >= 1.0 || r.y0 - rad <= 0.0 || r.y1 + rad >= 1.0 {
            return Err(CellError::CutoffOverlapsOuterBoundary);
        }
    }

    let quantum = (2f64).powi(-DRIFT_QUANTUM_BITS);
    let scale = (2f64).powi(DRIFT_QUANTUM_BITS);
    let m_int = [
        (mean_flow[0].to_f64().unwrap_or(0.0) * scale).round() as i64,
        (mean_flow[1].to_f64().unwrap_or(0.0) * scale).round() as i64,
    ];
    let m_quant = [m_int[0] as f64 * quantum, m_int[1] as f64 * quantum];

    // Integer stream potential K = phi * n * 2^20 on the n x n torus nodes,
    // where phi = (chi - 1)(psi_lin - psi0) is the compactly supported
    // blend. On the obstacle closure (chi = 0) the potential is the exact
    // integer linear form, which makes the obstacle-face differences cancel
    // the quantized mean flow bitwise.
    let mut pot = vec![0i64; n * n];
    if let Some(r) = rect {
        let obs = geom.obstacle().expect("rect implies obstacle cells");
        let hf = 1.0 / n as f64;
        let cx = 0.5 * (r.x0 + r.x1);
        let cy = 0.5 * (r.y0 + r.y1);
        let psi0 = m_quant[0] * cy - m_quant[1] * cx;
        let corner = (obs.i0, obs.j0);
        let corner_pos = [corner.0 as f64 * hf, corner.1 as f64 * hf];
        let k0 = ((psi0 - (m_quant[0] * corner_pos[1] - m_quant[1] * corner_pos[0]))
            * n as f64
            * scale)
            .round() as i64;
        let cutoff = cutoff_radius.to_f64().unwrap_or(0.0);
        for j in 0..n {
            for i in 0..n {
                let x = i as f64 * hf;
                let y = j as f64 * hf;
                let dx = (r.x0 - x).max(x - r.x1).max(0.0);
                let dy = (r.y0 - y).max(y - r.y1).max(0.0);
                if dx == 0.0 && dy == 0.0 {
                    // Node on the obstacle closure: exact integer linear form.
                    let di = i as i64 - corner.0 as i64;
                    let dj = j as i64 - corner.1 as i64;
                    pot[j * n + i] = k0 - dj * m_int[0] + di * m_int[1];
                } else {
                    let dist = (dx * dx + dy * dy).sqrt();
                    let chi = if cutoff <= 0.0 {
                        1.0
                    } else {
                        smoothstep5(dist / cutoff)
                    };
                    let psi_lin = m_quant[0] * y - m_quant[1] * x;
                    let phi = (chi - 1.0) * (psi_lin - psi0);
                    pot[j * n + i] = (phi * n as f64 * scale).round() as i64;
                }
            }
        }
    }

    let mut x_faces = vec![T::zero(); n * n];
    let mut y_faces = vec![T::zero(); n * n];
    for j in 0..n {
        for i in 0..n {
            // B = perp-gradient of the potential; all values are exact
            // multiples of the quantum, so the sums below do not round.
            let dky = pot[((j + 1) % n) * n + i] - pot[j * n + i];
            let dkx = pot[j * n + (i + 1) % n] - pot[j * n + i];
            x_faces[j * n + i] = cast(m_quant[0] + dky as f64 * quantum);
            y_faces[j * n + i] = cast(m_quant[1] - dkx as f64 * quantum);
        }
    }
    // Obstacle faces connect closure nodes, whose integer differences cancel
    // the quantized mean flow exactly; assert and pin the exact zero.
    for j in 0..n {
        for i in 0..n {
            if !matches!(geom.x_face_tag(i, j), FaceTag::Interior | FaceTag::Periodic) {
                debug_assert_eq!(
                    x_faces[j * n + i].to_f64().unwrap_or(f64::NAN),
                    0.0,
                    "obstacle x-face ({i},{j}) not exactly tangential"
                );
                x_faces[j * n + i] = T::zero();
            }
            if !matches!(geom.y_face_tag(i, j), FaceTag::Interior | FaceTag::Periodic) {
                debug_assert_eq!(
                    y_faces[j * n + i].to_f64().unwrap_or(f64::NAN),
                    0.0,
                    "obstacle y-face ({i},{j}) not exactly tangential"
                );
                y_faces[j * n + i] = T::zero();
            }
        }
    }
    Ok(DriftField { n, x_faces, y_faces })
}

/// Largest per-cell divergence magnitude of a face field over fluid cells.
pub fn divergence_residual_max<T: Scalar>(geom: &CellGeometry<T>, b: &DriftField<T>) -> T {
    let n = geom.n();
    let nf = cast_usize::<T>(n);
    let mut worst = T::zero();
    for &(i, j) in geom.fluid_cells() {
        let div = (b.x((i + 1) % n, j) - b.x(i, j) + b.y(i, (j + 1) % n) - b.y(i, j)) * nf;
        worst = worst.max(div.abs());
    }
    worst
}

/// Largest |B·n| over obstacle-boundary flux faces.
pub fn max_normal_drift_on_gamma_n<T: Scalar>(geom: &CellGeometry<T>, b: &DriftField<T>) -> T {
    let n = geom.n();
    let mut worst = T::zero();
    for j in 0..n {
        for i in 0..n {
            if geom.x_face_tag(i, j) == FaceTag::GammaN {
                worst = worst.max(b.x(i, j).abs());
            }
            if geom.y_face_tag(i, j) == FaceTag::GammaN {
                worst = worst.max(b.y(i, j).abs());
            }
        }
    }
    worst
}

/// Smallest sampled Rayleigh quotient of the diffusion tensor over fluid
/// cells and `n_dirs` equispaced directions (ellipticity check).
pub fn ellipticity_minimum<T: Scalar>(
    geom: &CellGeometry<T>,
    d: &DiffusionField<T>,
    n_dirs: usize,
) -> T {
    let mut min_q = T::infinity();
    let two_pi = cast::<T>(std::f64::consts::TAU);
    for k in 0..n_dirs {
        let ang = two_pi * cast_usize::<T>(k) / cast_usize(n_dirs);
        let (s, c) = ang.sin_cos();
        let xi = [c, s];
        match d {
            DiffusionField::Constant(m) => {
                min_q = min_q.min(quadratic_form(m, xi));
            }
            DiffusionField::PerCell(v) => {
                for &(i, j) in geom.fluid_cells() {
                    min_q = min_q.min(quadratic_form(&v[geom.cell_id(i, j)], xi));
                }
            }
        }
    }
    min_q
}

#[inline]
fn quadratic_form<T: Scalar>(m: &[[T; 2]; 2], xi: [T; 2]) -> T {
    xi[0] * (m[0][0] * xi[0] + m[0][1] * xi[1]) + xi[1] * (m[1][0] * xi[0] + m[1][1] * xi[1])
}

struct CellFace {
    axis: usize,
    /// Outward direction of this face for the owning cell: +1 east/north.
    sign: i8,
    fi: usize,
    fj: usize,
    tag: FaceTag,
    nb: (usize, usize),
}

fn cell_faces<T: Scalar>(g: &CellGeometry<T>, i: usize, j: usize) -> [CellFace; 4] {
    let n = g.n();
    let ie = (i + 1) % n;
    let jn = (j + 1) % n;
    [
        CellFace {
            axis: 0,
            sign: -1,
            fi: i,
            fj: j,
            tag: g.x_face_tag(i, j),
            nb: ((i + n - 1) % n, j),
        },
        CellFace {
            axis: 0,
            sign: 1,
            fi: ie,
            fj: j,
            tag: g.x_face_tag(ie, j),
            nb: (ie, j),
        },
        CellFace {
            axis: 1,
            sign: -1,
            fi: i,
            fj: j,
            tag: g.y_face_tag(i, j),
            nb: (i, (j + n - 1) % n),
        },
        CellFace {
            axis: 1,
            sign: 1,
            fi: i,
            fj: jn,
            tag: g.y_face_tag(i, jn),
            nb: (i, jn),
        },
    ]
}

#[inline]
fn face_drift<T: Scalar>(b: &Option<DriftField<T>>, face: &CellFace) -> T {
    match b {
        None => T::zero(),
        Some(f) => {
            if face.axis == 0 {
                f.x(face.fi, face.fj)
            } else {
                f.y(face.fi, face.fj)
            }
        }
    }
}

/// Divergence of `D e_i` integrated over one cell, assembled as face jumps
/// of the face-averaged column so the discrete divergence theorem holds
/// exactly.
fn cell_divergence_of_d_column<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    i: usize,
    j: usize,
    col: usize,
) -> T {
    let h = geom.h();
    let half = cast::<T>(0.5);
    let dc = coeffs.d.at(geom.cell_id(i, j));
    let mut acc = T::zero();
    for face in cell_faces(geom, i, j) {
        let v = match face.tag {
            FaceTag::Interior | FaceTag::Periodic => {
                let dn = coeffs.d.at(geom.cell_id(face.nb.0, face.nb.1));
                (dc[face.axis][col] + dn[face.axis][col]) * half
            }
            FaceTag::GammaD | FaceTag::GammaN => dc[face.axis][col],
            FaceTag::Solid => unreachable!("fluid cell bordered by solid-solid face"),
        };
        let s = if face.sign > 0 { v } else { -v };
        acc += s * h;
    }
    acc
}

/// Effective drift vector by the discrete form of the solvability condition:
/// volume divergence of the diffusion columns (face jumps), the averaged
/// drift times the drift-average scalar, and the obstacle-boundary flux of
/// the diffusion columns, normalized by the fluid area. The outer-boundary
/// part of the closed-boundary term cancels pairwise under the periodic
/// sampling of D and is omitted.
pub fn compute_effective_drift<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
) -> Result<[T; 2], CellError> {
    coeffs.check_shape(geom)?;
    let h = geom.h();
    let h2 = h * h;
    let mut out = [T::zero(); 2];
    for comp in 0..2 {
        let mut vol = KahanSum::new();
        let mut drift = KahanSum::new();
        for &(i, j) in geom.fluid_cells() {
            vol.add(-cell_divergence_of_d_column(geom, coeffs, i, j, comp));
            if let Some(b) = &coeffs.b {
                drift.add(b.cell_average(i, j)[comp] * h2);
            }
        }
        let bdry = gamma_flux_of_d_column(geom, coeffs, comp, true);
        out[comp] = (vol.value() + a_value * drift.value() + bdry) / geom.fluid_area();
    }
    Ok(out)
}

/// Integral over the obstacle boundary of `sigma * (D e_col) · n` with `n`
/// outward of the fluid; `negate` gives the `(-D e_col) · n` orientation.
fn gamma_flux_of_d_column<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    col: usize,
    negate: bool,
) -> T {
    let n = geom.n();
    let h = geom.h();
    let mut acc = KahanSum::new();
    for j in 0..n {
        for i in 0..n {
            // x-faces: fluid side determines D and the outward direction.
            match geom.x_face_tag(i, j) {
                FaceTag::GammaD | FaceTag::GammaN => {
                    let west = ((i + n - 1) % n, j);
                    let east = (i, j);
                    let (fluid, sign) = if geom.is_fluid(west.0, west.1) {
                        (west, T::one())
                    } else {
                        (east, -T::one())
                    };
                    let d = coeffs.d.at(geom.cell_id(fluid.0, fluid.1));
                    acc.add(sign * d[0][col] * h);
                }
                _ => {}
            }
            match geom.y_face_tag(i, j) {
                FaceTag::GammaD | FaceTag::GammaN => {
                    let south = (i, (j + n - 1) % n);
                    let north = (i, j);
                    let (fluid, sign) = if geom.is_fluid(south.0, south.1) {
                        (south, T::one())
                    } else {
                        (north, -T::one())
                    };
                    let d = coeffs.d.at(geom.cell_id(fluid.0, fluid.1));
                    acc.add(sign * d[1][col] * h);
                }
                _ => {}
            }
        }
    }
    if negate {
        -acc.value()
    } else {
        acc.value()
    }
}

/// Residual of the discrete solvability identity, maximized over the two
/// components. With the effective drift from [`compute_effective_drift`]
/// this is zero up to rounding.
pub fn compatibility_residual<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
    b_star: [T; 2],
) -> T {
    let h = geom.h();
    let h2 = h * h;
    let mut worst = T::zero();
    for comp in 0..2 {
        let mut acc = KahanSum::new();
        for &(i, j) in geom.fluid_cells() {
            acc.add(cell_divergence_of_d_column(geom, coeffs, i, j, comp));
            acc.add(b_star[comp] * h2);
            if let Some(b) = &coeffs.b {
                acc.add(-a_value * b.cell_average(i, j)[comp] * h2);
            }
        }
        let bdry = gamma_flux_of_d_column(geom, coeffs, comp, true);
        worst = worst.max((acc.value() - bdry).abs());
    }
    worst
}

/// Assemble the finite-volume operator of the cell problem (shared by both
/// corrector components).
pub fn assemble_cell_operator<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
) -> Result<SparseMatrix<T>, CellError> {
    coeffs.check_shape(geom)?;
    let h = geom.h();
    let nun = geom.fluid_count();
    let mut trip = TripletBuilder::with_capacity(nun, 5 * nun);
    let two = cast::<T>(2.0);
    for (row, &(i, j)) in geom.fluid_cells().iter().enumerate() {
        let dc = coeffs.d.at(geom.cell_id(i, j));
        for face in cell_faces(geom, i, j) {
            match face.tag {
                FaceTag::Interior | FaceTag::Periodic => {
                    let nb_row = geom
                        .fluid_unknown(face.nb.0, face.nb.1)
                        .expect("interior face neighbor must be fluid");
                    let dn = coeffs.d.at(geom.cell_id(face.nb.0, face.nb.1));
                    let (a, bq) = (dc[face.axis][face.axis], dn[face.axis][face.axis]);
                    let tau = two * a * bq / (a + bq);
                    trip.add(row, row, tau);
                    trip.add(row, nb_row, -tau);
                    let b_out = {
                        let v = face_drift(&coeffs.b, &face);
                        if face.sign > 0 {
                            v
                        } else {
                            -v
                        }
                    };
                    if b_out != T::zero() {
                        let scale = a_value * h;
                        trip.add(row, row, scale * b_out.max(T::zero()));
                        trip.add(row, nb_row, scale * b_out.min(T::zero()));
                    }
                }
                FaceTag::GammaD => {
                    // Strong zero value at the face: half-cell flux.
                    trip.add(row, row, two * dc[face.axis][face.axis]);
                    let b_out = {
                        let v = face_drift(&coeffs.b, &face);
                        if face.sign > 0 {
                            v
                        } else {
                            -v
                        }
                    };
                    if b_out != T::zero() {
                        trip.add(row, row, a_value * h * b_out.max(T::zero()));
                    }
                }
                FaceTag::GammaN => {}
                FaceTag::Solid => unreachable!(),
            }
        }
    }
    Ok(trip.build()?)
}

/// Right-hand side for corrector component `comp`, given the effective
/// drift. The flux condition on the obstacle enters with the sign required
/// by the expansion of the flux boundary terms: the prescribed total flux
/// is `(D e_i) · n`, which makes the zero-drift corrector coincide with the
/// classical perforated-cell corrector.
pub fn cell_rhs<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
    b_star: [T; 2],
    comp: usize,
) -> Vec<T> {
    let h = geom.h();
    let h2 = h * h;
    let mut rhs = vec![T::zero(); geom.fluid_count()];
    for (row, &(i, j)) in geom.fluid_cells().iter().enumerate() {
        let dc = coeffs.d.at(geom.cell_id(i, j));
        let mut acc = cell_divergence_of_d_column(geom, coeffs, i, j, comp);
        acc += b_star[comp] * h2;
        if let Some(b) = &coeffs.b {
            acc -= a_value * b.cell_average(i, j)[comp] * h2;
        }
        for face in cell_faces(geom, i, j) {
            if face.tag == FaceTag::GammaN {
                let sign = if face.sign > 0 { T::one() } else { -T::one() };
                // Prescribed outward flux (D e_comp) · n over the face.
                acc -= sign * dc[face.axis][comp] * h;
            }
        }
        rhs[row] = acc;
    }
    rhs
}

/// Solver controls for the corrector problems.
#[derive(Clone, Copy, Debug)]
pub struct CellSolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CellSolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 0,
        }
    }
}

/// Solve both corrector problems at the given drift-average scalar, with
/// the effective drift computed consistently.
pub fn solve_cell_problems<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
) -> Result<CellSolution<T>, CellError> {
    let b_star = compute_effective_drift(geom, coeffs, a_value)?;
    solve_cell_problems_with_drift(geom, coeffs, a_value, b_star, CellSolveOptions::default())
}

/// Solve the corrector problems with an externally supplied effective
/// drift (exposed so a mismatched drift can be detected by the
/// compatibility guard).
pub fn solve_cell_problems_with_drift<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    a_value: T,
    b_star: [T; 2],
    opts: CellSolveOptions,
) -> Result<CellSolution<T>, CellError> {
    let a = assemble_cell_operator(geom, coeffs, a_value)?;
    let nullspace = !geom.has_dirichlet();
    let symmetric = coeffs.b.is_none() || a_value == T::zero();
    let solve_opts = SolveOptions {
        tol: opts.tol,
        max_iter: opts.max_iter,
        nullspace,
        symmetric,
        preconditioner: Preconditioner::Ilu0,
    };
    let mut w: [Vec<T>; 2] = [Vec::new(), Vec::new()];
    for comp in 0..2 {
        let rhs = cell_rhs(geom, coeffs, a_value, b_star, comp);
        let sol = sparse::solve(&a, &rhs, solve_opts).map_err(|e| match e {
            SparseError::IncompatibleRightHandSide { defect } => {
                CellError::IncompatibleRightHandSide { defect }
            }
            SparseError::NotConverged {
                residual,
                iterations,
                ..
            } => CellError::NotConverged {
                residual,
                iterations,
            },
            other => CellError::Sparse(other),
        })?;
        w[comp] = sol.0;
    }
    Ok(CellSolution {
        n: geom.n(),
        w,
        a_value,
        b_star_used: b_star,
        mean_pinned: nullspace,
    })
}

impl<T: Scalar> CellSolution<T> {
    /// Integral of each corrector over the fluid region.
    pub fn means(&self, geom: &CellGeometry<T>) -> [T; 2] {
        let h2 = geom.h() * geom.h();
        [
            ksum(self.w[0].iter().map(|&v| v * h2)),
            ksum(self.w[1].iter().map(|&v| v * h2)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cell_geometry, DirichletSides, Rect};

    const THIRD: f64 = 1.0 / 3.0;

    fn default_geom(n: usize) -> CellGeometry<f64> {
        build_cell_geometry(
            n,
            Some(Rect {
                x0: THIRD,
                x1: 2.0 * THIRD,
                y0: THIRD,
                y1: 2.0 * THIRD,
            }),
            DirichletSides::NONE,
        )
        .unwrap()
    }

    fn identity_coeffs(b: Option<DriftField<f64>>) -> Coefficients<f64> {
        Coefficients {
            d: DiffusionField::identity(),
            b,
            p: Polynomial::tasep(),
            theta: 1.0,
        }
    }

    #[test]
    fn polynomial_eval_and_derivative() {
        let p = Polynomial::<f64>::tasep();
        assert_eq!(p.eval(0.5), 0.25);
        assert_eq!(p.eval_derivative(0.0), 1.0);
        assert_eq!(p.eval_derivative(0.5), 0.0);
        assert_eq!(p.eval_derivative(1.0), -1.0);
        let crit = p.critical_points(0.0, 1.0);
        assert_eq!(crit.len(), 1);
        assert!((crit[0] - 0.5).abs() < 1e-14);
        assert!(Polynomial::<f64>::linear().is_linear());
        assert!(!p.is_linear());
    }

    #[test]
    fn cubic_critical_points_by_scan() {
        // P(r) = r^3 - r has extrema at +-1/sqrt(3).
        let p = Polynomial::new(vec![0.0, -1.0, 0.0, 1.0]);
        let c = p.critical_points(-1.0, 1.0);
        assert_eq!(c.len(), 2);
        let r = 1.0 / 3.0f64.sqrt();
        assert!((c[0] + r).abs() < 1e-10);
        assert!((c[1] - r).abs() < 1e-10);
    }

    #[test]
    fn drift_constant_without_obstacle() {
        let g = build_cell_geometry::<f64>(8, None, DirichletSides::NONE).unwrap();
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.2).unwrap();
        assert!(b.x_faces.iter().all(|&v| v == 1.0));
        assert!(b.y_faces.iter().all(|&v| v == 0.0));
        assert_eq!(divergence_residual_max(&g, &b), 0.0);
    }

    #[test]
    fn drift_divergence_free_and_tangential() {
        let g = default_geom(96);
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.25).unwrap();
        assert!(divergence_residual_max(&g, &b) < 1e-13);
        assert_eq!(max_normal_drift_on_gamma_n(&g, &b), 0.0);
    }

    #[test]
    fn drift_cutoff_overlap_rejected() {
        let g = default_geom(48);
        let err = generate_admissible_drift(&g, [1.0, 0.0], 0.5).unwrap_err();
        assert!(matches!(err, CellError::CutoffOverlapsOuterBoundary));
    }

    #[test]
    fn effective_drift_constant_field() {
        let g = build_cell_geometry::<f64>(8, None, DirichletSides::NONE).unwrap();
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.1).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let bs = compute_effective_drift(&g, &coeffs, 1.0).unwrap();
        assert!((bs[0] - 1.0).abs() < 1e-13);
        assert!(bs[1].abs() < 1e-13);
    }

    #[test]
    fn effective_drift_vanishes_at_zero_average() {
        let g = default_geom(24);
        let b = generate_admissible_drift(&g, [1.0, 0.4], 0.2).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let bs = compute_effective_drift(&g, &coeffs, 0.0).unwrap();
        assert!(bs[0].abs() < 1e-13);
        assert!(bs[1].abs() < 1e-13);
    }

    #[test]
    fn compatibility_residual_is_tiny_and_linear_in_perturbation() {
        let g = default_geom(48);
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.25).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let bs = compute_effective_drift(&g, &coeffs, 1.0).unwrap();
        assert!(compatibility_residual(&g, &coeffs, 1.0, bs) < 1e-12);

        let delta = 1e-3;
        let perturbed = [bs[0] + delta, bs[1]];
        let res = compatibility_residual(&g, &coeffs, 1.0, perturbed);
        let expected = delta * g.fluid_area();
        assert!((res - expected).abs() < 1e-12);
    }

    #[test]
    fn compatibility_residual_zero_for_uniform_transport() {
        let g = build_cell_geometry::<f64>(6, None, DirichletSides::NONE).unwrap();
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.1).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let res = compatibility_residual(&g, &coeffs, 1.0, [1.0, 0.0]);
        assert!(res < 1e-13);
    }

    #[test]
    fn correctors_vanish_without_obstacle() {
        let g = build_cell_geometry::<f64>(12, None, DirichletSides::NONE).unwrap();
        let b = generate_admissible_drift(&g, [1.0, 0.5], 0.1).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let sol = solve_cell_problems(&g, &coeffs, 0.7).unwrap();
        for comp in 0..2 {
            for &v in &sol.w[comp] {
                assert!(v.abs() < 1e-12, "corrector should vanish, got {v}");
            }
        }
        assert!(sol.mean_pinned);
    }

    #[test]
    fn corrector_mean_is_pinned() {
        let g = default_geom(24);
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.2).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let sol = solve_cell_problems(&g, &coeffs, 1.0).unwrap();
        let means = sol.means(&g);
        assert!(means[0].abs() < 1e-12);
        assert!(means[1].abs() < 1e-12);
    }

    #[test]
    fn wrong_effective_drift_is_rejected() {
        let g = default_geom(24);
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.2).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let bad = [0.3, -0.2];
        let err = solve_cell_problems_with_drift(
            &g,
            &coeffs,
            1.0,
            bad,
            CellSolveOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CellError::IncompatibleRightHandSide { .. }));
    }

    #[test]
    fn zero_average_decouples_from_drift() {
        let g = default_geom(24);
        let b1 = generate_admissible_drift(&g, [1.0, 0.0], 0.2).unwrap();
        let b2 = generate_admissible_drift(&g, [-0.3, 0.8], 0.15).unwrap();
        let s1 = solve_cell_problems(&g, &identity_coeffs(Some(b1)), 0.0).unwrap();
        let s2 = solve_cell_problems(&g, &identity_coeffs(Some(b2)), 0.0).unwrap();
        for comp in 0..2 {
            for (a, b) in s1.w[comp].iter().zip(&s2.w[comp]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rhs_scaling_scales_solution() {
        let g = default_geom(24);
        let b = generate_admissible_drift(&g, [1.0, 0.0], 0.2).unwrap();
        let coeffs = identity_coeffs(Some(b));
        let a_value = 1.0;
        let b_star = compute_effective_drift(&g, &coeffs, a_value).unwrap();
        let a = assemble_cell_operator(&g, &coeffs, a_value).unwrap();
        let rhs = cell_rhs(&g, &coeffs, a_value, b_star, 0);
        let doubled: Vec<f64> = rhs.iter().map(|v| 2.0 * v).collect();
        let opts = SolveOptions {
            tol: 1e-12,
            nullspace: true,
            symmetric: false,
            ..Default::default()
        };
        let (x1, _) = sparse::solve(&a, &rhs, opts).unwrap();
        let (x2, _) = sparse::solve(&a, &doubled, opts).unwrap();
        for (a1, a2) in x1.iter().zip(&x2) {
            assert!((2.0 * a1 - a2).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rhs_gives_zero_field() {
        let g = default_geom(12);
        let coeffs = identity_coeffs(None);
        let a = assemble_cell_operator(&g, &coeffs, 0.0).unwrap();
        let rhs = vec![0.0; g.fluid_count()];
        let opts = SolveOptions {
            nullspace: true,
            symmetric: true,
            ..Default::default()
        };
        let (x, rep) = sparse::solve(&a, &rhs, opts).unwrap();
        assert!(rep.converged);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ellipticity_sample_matches_identity() {
        let g = default_geom(12);
        let min_q = ellipticity_minimum(&g, &DiffusionField::<f64>::identity(), 64);
        assert!((min_q - 1.0).abs() < 1e-12);
    }
}
