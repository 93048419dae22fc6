//! Fully resolved fine-scale simulation on a periodic torus of scaled unit
//! cells, the moving-frame reconstruction from the upscaled solution, and
//! the scale-refinement study that compares the two.
//!
//! Time integration is IMEX: implicit diffusion (the stiff part) and an
//! explicit Godunov flux for the 1/eps-scaled nonlinear drift, under a CFL
//! bound on the drift wave speed.

use crate::cell::{CellError, CellSolution, Coefficients, Polynomial};
use crate::geometry::{CellGeometry, FaceTag};
use crate::scalar::{cast, cast_usize, ksum, KahanSum, Scalar};
use crate::sparse::{self, Preconditioner, SolveOptions, SparseError, SparseMatrix, TripletBuilder};
use crate::upscaled::{MacroBoundary, Trajectory};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MicroError {
    #[error("fixed time step {dt:e} violates the drift CFL bound {bound:e}")]
    CFLViolation { dt: f64, bound: f64 },
    #[error("linear solve failed inside the fine-scale step: {0}")]
    LinearSolveFailed(#[from] SparseError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("moving-frame reconstruction needs a periodic reference trajectory; the supplied one has walls")]
    FrameOutOfRange,
    #[error("torus size {size} is not an integer multiple of eps = {eps}")]
    TorusNotCommensurate { size: f64, eps: f64 },
    #[error("scale-refinement errors are not monotonically decreasing: {0:?}")]
    NonMonotoneConvergence(ErrorTable),
    #[error("unknown budget exceeded: {unknowns} unknowns > {budget}")]
    BudgetExceeded { unknowns: usize, budget: usize },
}

/// Configuration of one fine-scale run.
#[derive(Clone, Debug)]
pub struct MicroConfig<T: Scalar> {
    pub epsilon: T,
    /// Scaled cells per torus side; the domain is `[0, K eps]^2`.
    pub torus_cells: usize,
    /// Grid cells per scaled cell per side.
    pub sub_resolution: usize,
    /// Dirichlet scaling exponent (> 2) for the obstacle Dirichlet data.
    pub gamma: T,
    /// Constant Dirichlet datum on the obstacle Dirichlet part.
    pub g_d: T,
    pub cfl: T,
    pub dt_override: Option<T>,
    pub lin_tol: f64,
}

impl<T: Scalar> MicroConfig<T> {
    pub fn new(epsilon: T, torus_cells: usize, sub_resolution: usize) -> Self {
        Self {
            epsilon,
            torus_cells,
            sub_resolution,
            gamma: cast(3.0),
            g_d: T::zero(),
            cfl: cast(0.4),
            dt_override: None,
            lin_tol: 1e-13,
        }
    }
}

/// Torus of `K x K` copies of the perforated tile at sub-cell resolution.
#[derive(Clone, Debug)]
pub struct MicroGeometry<T: Scalar> {
    pub tile: CellGeometry<T>,
    pub k: usize,
    pub n_side: usize,
    pub epsilon: T,
    /// Physical mesh width `eps / sub_resolution`.
    pub h: T,
    fluid_index: Vec<Option<usize>>,
    fluid_cells: Vec<(usize, usize)>,
}

impl<T: Scalar> MicroGeometry<T> {
    pub fn build(tile: CellGeometry<T>, k: usize, epsilon: T) -> Self {
        let s = tile.n();
        let n_side = k * s;
        let mut fluid_index = vec![None; n_side * n_side];
        let mut fluid_cells = Vec::new();
        for j in 0..n_side {
            for i in 0..n_side {
                if tile.is_fluid(i % s, j % s) {
                    fluid_index[j * n_side + i] = Some(fluid_cells.len());
                    fluid_cells.push((i, j));
                }
            }
        }
        let h = epsilon / cast_usize(s);
        Self {
            tile,
            k,
            n_side,
            epsilon,
            h,
            fluid_index,
            fluid_cells,
        }
    }

    #[inline]
    pub fn fluid_unknown(&self, i: usize, j: usize) -> Option<usize> {
        self.fluid_index[j * self.n_side + i]
    }

    pub fn fluid_cells(&self) -> &[(usize, usize)] {
        &self.fluid_cells
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid_cells.len()
    }

    pub fn torus_size(&self) -> T {
        self.epsilon * cast_usize(self.k)
    }

    /// Physical cell center.
    pub fn center(&self, i: usize, j: usize) -> [T; 2] {
        let half = cast::<T>(0.5);
        [
            (cast_usize::<T>(i) + half) * self.h,
            (cast_usize::<T>(j) + half) * self.h,
        ]
    }

    /// Face tag seen from the tile (periodic seams of the tile are plain
    /// fluid-fluid faces on the torus).
    #[inline]
    fn x_face_tag(&self, i: usize, j: usize) -> FaceTag {
        let s = self.tile.n();
        match self.tile.x_face_tag(i % s, j % s) {
            FaceTag::Periodic => FaceTag::Interior,
            t => t,
        }
    }

    #[inline]
    fn y_face_tag(&self, i: usize, j: usize) -> FaceTag {
        let s = self.tile.n();
        match self.tile.y_face_tag(i % s, j % s) {
            FaceTag::Periodic => FaceTag::Interior,
            t => t,
        }
    }

    pub fn sample<F: Fn([T; 2]) -> T>(&self, f: F) -> Vec<T> {
        self.fluid_cells
            .iter()
            .map(|&(i, j)| f(self.center(i, j)))
            .collect()
    }
}

/// Recorded fine-scale evolution plus conservation/bound audits gathered
/// during the run.
#[derive(Clone, Debug)]
pub struct MicroTrajectory<T: Scalar> {
    pub times: Vec<T>,
    pub fields: Vec<Vec<T>>,
    /// Largest per-step change of the total mass (zero-source runs only
    /// move mass through the obstacle data).
    pub max_step_mass_drift: T,
    pub global_min: T,
    pub global_max: T,
    pub steps_taken: usize,
}

/// Exact Godunov flux of `q(u) = c P(u)` between left and right states:
/// minimum of q over `[uL, uR]` when `uL <= uR`, maximum over `[uR, uL]`
/// otherwise, with the interior extrema taken from the precomputed critical
/// points of P.
#[inline]
fn godunov_flux<T: Scalar>(c: T, p: &Polynomial<T>, crit: &[T], u_left: T, u_right: T) -> T {
    let (lo, hi) = if u_left <= u_right {
        (u_left, u_right)
    } else {
        (u_right, u_left)
    };
    let mut best = c * p.eval(u_left);
    let cand = c * p.eval(u_right);
    let take_min = u_left <= u_right;
    if take_min {
        best = best.min(cand);
    } else {
        best = best.max(cand);
    }
    for &r in crit {
        if r > lo && r < hi {
            let v = c * p.eval(r);
            if take_min {
                best = best.min(v);
            } else {
                best = best.max(v);
            }
        }
    }
    best
}

/// Solve the fine-scale problem recording the requested times.
///
/// Sources follow the scaled-data convention: the bulk source is sampled at
/// the tile coordinate, the obstacle flux datum enters as `eps * g_N`, and
/// the obstacle Dirichlet datum as `eps^gamma * g_D`.
pub fn solve_micro<T: Scalar>(
    geom: &MicroGeometry<T>,
    coeffs: &Coefficients<T>,
    f_bulk: T,
    g_n: T,
    init: Vec<T>,
    record_times: &[T],
    config: &MicroConfig<T>,
) -> Result<MicroTrajectory<T>, MicroError> {
    let nun = geom.fluid_count();
    if nun > 4_000_000 {
        return Err(MicroError::BudgetExceeded {
            unknowns: nun,
            budget: 4_000_000,
        });
    }
    let s = geom.tile.n();
    let n_side = geom.n_side;
    let h = geom.h;
    let h2 = h * h;
    let eps = geom.epsilon;

    // Wave speed of the scaled drift, and the resulting step bound.
    let speed = match &coeffs.b {
        None => T::zero(),
        Some(b) => b.max_abs() * coeffs.p.max_abs_derivative(T::zero(), T::one()) / eps,
    };
    let dt_bound = if speed > T::zero() {
        config.cfl * h / speed
    } else {
        T::infinity()
    };
    let dt = match config.dt_override {
        Some(v) => {
            if v > dt_bound {
                return Err(MicroError::CFLViolation {
                    dt: v.to_f64().unwrap_or(f64::NAN),
                    bound: dt_bound.to_f64().unwrap_or(f64::NAN),
                });
            }
            v
        }
        None => {
            if dt_bound.is_finite() {
                dt_bound
            } else {
                config.cfl * h
            }
        }
    };

    // Implicit diffusion operator, assembled once (coefficients are
    // time-independent): (h^2/dt) I + A_diff with the obstacle conditions.
    let two = cast::<T>(2.0);
    let mut trip = TripletBuilder::with_capacity(nun, 5 * nun);
    let mut rhs_fixed = vec![T::zero(); nun];
    let g_d_value = eps.powf(config.gamma) * config.g_d;
    for (row, &(i, j)) in geom.fluid_cells().iter().enumerate() {
        trip.add(row, row, h2 / dt);
        let dc = coeffs.d.at(geom.tile.cell_id(i % s, j % s));
        rhs_fixed[row] += h2 * f_bulk;
        let faces = [
            (0usize, -1isize, geom.x_face_tag(i, j), ((i + n_side - 1) % n_side, j)),
            (0, 1, geom.x_face_tag((i + 1) % n_side, j), ((i + 1) % n_side, j)),
            (1, -1, geom.y_face_tag(i, j), (i, (j + n_side - 1) % n_side)),
            (1, 1, geom.y_face_tag(i, (j + 1) % n_side), (i, (j + 1) % n_side)),
        ];
        for (axis, _dir, tag, nb) in faces {
            match tag {
                FaceTag::Interior | FaceTag::Periodic => {
                    let nb_row = geom.fluid_unknown(nb.0, nb.1).expect("fluid neighbor");
                    let dn = coeffs.d.at(geom.tile.cell_id(nb.0 % s, nb.1 % s));
                    let (a, b) = (dc[axis][axis], dn[axis][axis]);
                    let tau = two * a * b / (a + b);
                    trip.add(row, row, tau);
                    trip.add(row, nb_row, -tau);
                }
                FaceTag::GammaN => {
                    // Prescribed total flux eps * g_N; the drift part is
                    // exactly zero on the obstacle boundary.
                    rhs_fixed[row] -= eps * g_n * h;
                }
                FaceTag::GammaD => {
                    trip.add(row, row, two * dc[axis][axis]);
                    rhs_fixed[row] += two * dc[axis][axis] * g_d_value;
                }
                FaceTag::Solid => unreachable!(),
            }
        }
    }
    let a = trip.build().map_err(MicroError::LinearSolveFailed)?;
    let solve_opts = SolveOptions {
        tol: config.lin_tol,
        symmetric: true,
        preconditioner: Preconditioner::Ilu0,
        ..Default::default()
    };

    // Face list for the explicit drift step (fluid-fluid faces only; the
    // generator zeroes the drift on obstacle faces exactly).
    let mut drift_faces: Vec<(usize, usize, T)> = Vec::new();
    if let Some(b) = &coeffs.b {
        for j in 0..n_side {
            for i in 0..n_side {
                if matches!(geom.x_face_tag(i, j), FaceTag::Interior | FaceTag::Periodic) {
                    let west = geom.fluid_unknown((i + n_side - 1) % n_side, j);
                    let east = geom.fluid_unknown(i, j);
                    if let (Some(w), Some(e)) = (west, east) {
                        let bf = b.x(i % s, j % s);
                        if bf != T::zero() {
                            drift_faces.push((w, e, bf / eps));
                        }
                    }
                }
                if matches!(geom.y_face_tag(i, j), FaceTag::Interior | FaceTag::Periodic) {
                    let south = geom.fluid_unknown(i, (j + n_side - 1) % n_side);
                    let north = geom.fluid_unknown(i, j);
                    if let (Some(sr), Some(nr)) = (south, north) {
                        let bf = b.y(i % s, j % s);
                        if bf != T::zero() {
                            drift_faces.push((sr, nr, bf / eps));
                        }
                    }
                }
            }
        }
    }
    let crit = coeffs.p.critical_points(cast(-1.0), cast(2.0));

    let mut u = init;
    let mut t = T::zero();
    let mut times = Vec::new();
    let mut fields = Vec::new();
    let mut max_drift = T::zero();
    let mut gmin = u.iter().copied().fold(T::infinity(), T::min);
    let mut gmax = u.iter().copied().fold(T::neg_infinity(), T::max);
    let mut mass_prev = ksum(u.iter().map(|&v| v * h2));
    let mut steps = 0usize;

    let mut targets: Vec<T> = record_times.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tiny = dt * cast::<T>(1e-10);

    for &target in &targets {
        if target <= t + tiny {
            times.push(t);
            fields.push(u.clone());
            continue;
        }
        while t < target - tiny {
            let step_dt = dt.min(target - t);
            // Explicit Godunov drift.
            let mut star = u.clone();
            let scale = step_dt / h;
            for &(left, right, c) in &drift_faces {
                let flux = godunov_flux(c, &coeffs.p, &crit, u[left], u[right]);
                star[left] -= scale * flux;
                star[right] += scale * flux;
            }
            // Implicit diffusion with the fixed sources. The prefactored
            // operator bakes in the nominal dt; clamped segment-end steps
            // re-assemble.
            let u_new = if step_dt == dt {
                let mut rhs = vec![T::zero(); nun];
                for k in 0..nun {
                    rhs[k] = h2 / step_dt * star[k] + rhs_fixed[k];
                }
                let (x, _) = sparse::solve(&a, &rhs, solve_opts)?;
                x
            } else {
                let a2 = reassemble_with_dt(geom, coeffs, config, step_dt)?;
                let mut rhs2 = vec![T::zero(); nun];
                for k in 0..nun {
                    rhs2[k] = h2 / step_dt * star[k] + rhs_fixed[k];
                }
                let (x, _) = sparse::solve(&a2, &rhs2, solve_opts)?;
                x
            };
            u = u_new;
            t = t + step_dt;
            steps += 1;

            let mass = ksum(u.iter().map(|&v| v * h2));
            max_drift = max_drift.max((mass - mass_prev).abs());
            mass_prev = mass;
            for &v in &u {
                gmin = gmin.min(v);
                gmax = gmax.max(v);
            }
        }
        t = target;
        times.push(t);
        fields.push(u.clone());
    }

    Ok(MicroTrajectory {
        times,
        fields,
        max_step_mass_drift: max_drift,
        global_min: gmin,
        global_max: gmax,
        steps_taken: steps,
    })
}

fn reassemble_with_dt<T: Scalar>(
    geom: &MicroGeometry<T>,
    coeffs: &Coefficients<T>,
    config: &MicroConfig<T>,
    dt: T,
) -> Result<SparseMatrix<T>, MicroError> {
    let s = geom.tile.n();
    let n_side = geom.n_side;
    let h2 = geom.h * geom.h;
    let two = cast::<T>(2.0);
    let nun = geom.fluid_count();
    let _ = config;
    let mut trip = TripletBuilder::with_capacity(nun, 5 * nun);
    for (row, &(i, j)) in geom.fluid_cells().iter().enumerate() {
        trip.add(row, row, h2 / dt);
        let dc = coeffs.d.at(geom.tile.cell_id(i % s, j % s));
        let faces = [
            (0usize, geom.x_face_tag(i, j), ((i + n_side - 1) % n_side, j)),
            (0, geom.x_face_tag((i + 1) % n_side, j), ((i + 1) % n_side, j)),
            (1, geom.y_face_tag(i, j), (i, (j + n_side - 1) % n_side)),
            (1, geom.y_face_tag(i, (j + 1) % n_side), (i, (j + 1) % n_side)),
        ];
        for (axis, tag, nb) in faces {
            match tag {
                FaceTag::Interior | FaceTag::Periodic => {
                    let nb_row = geom.fluid_unknown(nb.0, nb.1).expect("fluid neighbor");
                    let dn = coeffs.d.at(geom.tile.cell_id(nb.0 % s, nb.1 % s));
                    let (a, b) = (dc[axis][axis], dn[axis][axis]);
                    let tau = two * a * b / (a + b);
                    trip.add(row, row, tau);
                    trip.add(row, nb_row, -tau);
                }
                FaceTag::GammaD => {
                    trip.add(row, row, two * dc[axis][axis]);
                }
                _ => {}
            }
        }
    }
    Ok(trip.build()?)
}

/// Periodic bilinear interpolation of a cell-centered square field.
pub fn bilinear_periodic<T: Scalar>(field: &[T], m: usize, h: T, x: [T; 2]) -> T {
    let half = cast::<T>(0.5);
    let mut w = [[T::zero(); 2]; 2];
    let mut idx = [[0usize; 2]; 2];
    for axis in 0..2 {
        let u = x[axis] / h - half;
        let f = u.floor();
        let frac = u - f;
        let base = f.to_f64().unwrap_or(0.0) as i64;
        let m_i = m as i64;
        let i0 = (base.rem_euclid(m_i)) as usize;
        let i1 = ((base + 1).rem_euclid(m_i)) as usize;
        idx[axis] = [i0, i1];
        w[axis] = [T::one() - frac, frac];
    }
    let mut acc = T::zero();
    for (ai, &ia) in idx[0].iter().enumerate() {
        for (bj, &jb) in idx[1].iter().enumerate() {
            acc += w[0][ai] * w[1][bj] * field[jb * m + ia];
        }
    }
    acc
}

/// Central-difference gradient of a periodic cell-centered field.
fn periodic_gradient<T: Scalar>(field: &[T], m: usize, h: T) -> (Vec<T>, Vec<T>) {
    let two_h = h + h;
    let mut gx = vec![T::zero(); m * m];
    let mut gy = vec![T::zero(); m * m];
    for j in 0..m {
        for i in 0..m {
            let ip = (i + 1) % m;
            let im = (i + m - 1) % m;
            let jp = (j + 1) % m;
            let jm = (j + m - 1) % m;
            gx[j * m + i] = (field[j * m + ip] - field[j * m + im]) / two_h;
            gy[j * m + i] = (field[jp * m + i] - field[jm * m + i]) / two_h;
        }
    }
    (gx, gy)
}

/// Predict the fine-scale field from the upscaled trajectory through the
/// moving-frame two-scale form: order 0 is the shifted coarse field, order
/// 1 adds the corrector times the coarse gradient.
pub fn reconstruct_two_scale<T: Scalar>(
    macro_traj: &Trajectory<T>,
    cell_solution: &CellSolution<T>,
    cell_geom: &CellGeometry<T>,
    b_star: [T; 2],
    geom: &MicroGeometry<T>,
    t: T,
    order: usize,
) -> Result<Vec<T>, MicroError> {
    if macro_traj.lattice.boundary != MacroBoundary::Periodic {
        return Err(MicroError::FrameOutOfRange);
    }
    let m = macro_traj.lattice.m;
    let hm = macro_traj.lattice.h;
    let size = hm * cast_usize(m);
    let field = macro_traj.state_at(t);
    let grads = if order >= 1 {
        Some(periodic_gradient(field, m, hm))
    } else {
        None
    };

    let eps = geom.epsilon;
    let shift = [b_star[0] * t / eps, b_star[1] * t / eps];
    let n_cell = cell_geom.n();
    let n_cell_f = cast_usize::<T>(n_cell);

    let mut out = Vec::with_capacity(geom.fluid_count());
    for &(i, j) in geom.fluid_cells() {
        let x = geom.center(i, j);
        let mut xs = [x[0] - shift[0], x[1] - shift[1]];
        for v in xs.iter_mut() {
            *v = *v - (*v / size).floor() * size;
        }
        let mut val = bilinear_periodic(field, m, hm, xs);
        if let Some((gx, gy)) = &grads {
            // Tile coordinate of this fine cell, mapped to the corrector grid.
            let y = [
                (x[0] / eps).fract(),
                (x[1] / eps).fract(),
            ];
            let ci = ((y[0] * n_cell_f).to_f64().unwrap_or(0.0).floor() as usize).min(n_cell - 1);
            let cj = ((y[1] * n_cell_f).to_f64().unwrap_or(0.0).floor() as usize).min(n_cell - 1);
            if let Some(k) = cell_geom.fluid_unknown(ci, cj) {
                let g1 = bilinear_periodic(gx, m, hm, xs);
                let g2 = bilinear_periodic(gy, m, hm, xs);
                val += eps * (cell_solution.w[0][k] * g1 + cell_solution.w[1][k] * g2);
            }
        }
        out.push(val);
    }
    Ok(out)
}

/// Relative L2 distance on the fluid cells.
pub fn relative_l2_error<T: Scalar>(reference: &[T], predicted: &[T]) -> T {
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for (r, p) in reference.iter().zip(predicted) {
        let d = *r - *p;
        num.add(d * d);
        den.add(*r * *r);
    }
    (num.value() / den.value().max(T::min_positive_value())).sqrt()
}

/// One row of the scale-refinement table.
#[derive(Clone, Debug)]
pub struct StudyRow {
    pub epsilon: f64,
    pub error_order0: f64,
    pub error_order1: f64,
    pub rate_order0: Option<f64>,
    pub rate_order1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ErrorTable {
    pub rows: Vec<StudyRow>,
}

impl ErrorTable {
    pub fn is_strictly_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].error_order0 < w[0].error_order0)
    }
}

/// Inputs of the scale-refinement study that exist independently of eps.
pub struct StudySetup<'a, T: Scalar> {
    /// Corrector-resolution geometry and coefficients.
    pub cell_geom: &'a CellGeometry<T>,
    pub coeffs: &'a Coefficients<T>,
    /// Tile for the fine-scale runs (sub-resolution geometry + drift).
    pub tile_geom: &'a CellGeometry<T>,
    pub tile_coeffs: &'a Coefficients<T>,
    /// Upscaled reference on the torus.
    pub macro_traj: &'a Trajectory<T>,
    pub cell_solution: &'a CellSolution<T>,
    pub b_star: [T; 2],
    pub t_end: T,
    pub sub_resolution: usize,
    pub cfl: T,
    pub lin_tol: f64,
    /// Bulk source sampled at the tile coordinate.
    pub f_bulk: T,
    /// Obstacle flux datum (enters as eps * g_N).
    pub g_n: T,
}

/// Run fine-scale solves over a descending eps ladder and compare each to
/// the moving-frame reconstruction at the final time. Fails when the
/// order-0 error fails to decrease strictly.
pub fn convergence_study<T: Scalar>(
    setup: &StudySetup<'_, T>,
    eps_list: &[T],
    g: impl Fn([T; 2]) -> T,
) -> Result<ErrorTable, MicroError> {
    let size = setup.macro_traj.lattice.h * cast_usize(setup.macro_traj.lattice.m);
    let mut rows: Vec<StudyRow> = Vec::new();
    for &eps in eps_list {
        let k_f = (size / eps).to_f64().unwrap_or(f64::NAN);
        let k = k_f.round() as usize;
        if (k_f - k as f64).abs() > 1e-9 || k == 0 {
            return Err(MicroError::TorusNotCommensurate {
                size: size.to_f64().unwrap_or(f64::NAN),
                eps: eps.to_f64().unwrap_or(f64::NAN),
            });
        }
        let geom = MicroGeometry::build(setup.tile_geom.clone(), k, eps);
        let mut config = MicroConfig::new(eps, k, setup.sub_resolution);
        config.cfl = setup.cfl;
        config.lin_tol = setup.lin_tol;
        let init = geom.sample(&g);
        let traj = solve_micro(
            &geom,
            setup.tile_coeffs,
            setup.f_bulk,
            setup.g_n,
            init,
            &[setup.t_end],
            &config,
        )?;
        let reference = traj.fields.last().expect("recorded final state");
        let rec0 = reconstruct_two_scale(
            setup.macro_traj,
            setup.cell_solution,
            setup.cell_geom,
            setup.b_star,
            &geom,
            setup.t_end,
            0,
        )?;
        let rec1 = reconstruct_two_scale(
            setup.macro_traj,
            setup.cell_solution,
            setup.cell_geom,
            setup.b_star,
            &geom,
            setup.t_end,
            1,
        )?;
        let e0 = relative_l2_error(reference, &rec0).to_f64().unwrap_or(f64::NAN);
        let e1 = relative_l2_error(reference, &rec1).to_f64().unwrap_or(f64::NAN);
        let (r0, r1) = match rows.last() {
            None => (None, None),
            Some(prev) => {
                let ratio = prev.epsilon / eps.to_f64().unwrap_or(f64::NAN);
                let denom = ratio.ln();
                (
                    Some((prev.error_order0 / e0).ln() / denom),
                    Some((prev.error_order1 / e1).ln() / denom),
                )
            }
        };
        rows.push(StudyRow {
            epsilon: eps.to_f64().unwrap_or(f64::NAN),
            error_order0: e0,
            error_order1: e1,
            rate_order0: r0,
            rate_order1: r1,
        });
    }
    let table = ErrorTable { rows };
    if table.rows.len() > 1 && !table.is_strictly_decreasing() {
        return Err(MicroError::NonMonotoneConvergence(table));
    }
    Ok(table)
}
