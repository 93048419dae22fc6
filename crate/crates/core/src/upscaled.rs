//! The upscaled quasi-linear parabolic problem on truncated domains:
//! backward-Euler stepping with Picard lagging of the state-dependent
//! dispersion tensor, the outer fixed point coupling the parabolic sweep to
//! the cell problems through the drift-average scalar, order/positivity
//! checks, the Kirchhoff-transformed variant, and the growing-domain sweep.

use crate::cell::{solve_cell_problems, CellError, Coefficients, Polynomial};
use crate::geometry::{CellGeometry, MacroGrid};
use crate::scalar::{cast, cast_usize, ksum, KahanSum, Scalar};
use crate::sparse::{self, Preconditioner, SolveOptions, SparseError, TripletBuilder};
use crate::tensors::{
    assemble_effective_tensors, min_symmetric_eigenvalue, EffectiveTensors, TensorError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MacroError {
    #[error("source sign condition violated at t = {t}: int f - int g_N = {value:e} < 0")]
    SignConditionViolated { t: f64, value: f64 },
    #[error("no recorded states to average over")]
    EmptyHistory,
    #[error("Picard sub-iteration stalled at step {step}: last update {diff:e}")]
    PicardNotConverged { step: usize, diff: f64 },
    #[error("linear solve failed inside the parabolic step: {0}")]
    LinearSolveFailed(#[from] SparseError),
    #[error("outer fixed point did not converge after {sweeps} sweeps (last residual {last_residual:e}); iterates {iterates:?}")]
    OuterIterationNotConverged {
        sweeps: usize,
        last_residual: f64,
        iterates: Vec<f64>,
    },
    #[error(transparent)]
    Coercivity(#[from] TensorError),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("trajectory dips below zero: min u = {min:e} at t = {t}")]
    PositivityViolated { min: f64, t: f64 },
    #[error("comparison principle violated at t = {t}: max(u1 - u2) = {max_excess:e}")]
    ComparisonViolated { t: f64, max_excess: f64 },
    #[error("initial data are not pointwise ordered; comparison precondition fails")]
    UnorderedInitialData,
    #[error("trajectories live on different grids or time ladders")]
    TrajectoryMismatch,
    #[error("dispersion tensor is not isotropic: max off-diagonal {max_offdiag:e}, max diagonal gap {max_diag_gap:e}")]
    NotIsotropic {
        max_offdiag: f64,
        max_diag_gap: f64,
    },
    #[error("Kirchhoff transform inversion failed at value {value:e}")]
    InversionFailed { value: f64 },
    #[error("monotone domain growth violated for L = {l_small} vs L = {l_big}: max(u_small - u_big) = {max_violation:e}")]
    MonotonicityViolated {
        l_small: f64,
        l_big: f64,
        max_violation: f64,
    },
    #[error("domain sweep grids do not nest: {0}")]
    GridsDoNotNest(String),
}

/// Outer boundary handling of the macroscopic lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroBoundary {
    /// Homogeneous Dirichlet wall (truncated-domain problem).
    DirichletZero,
    /// Periodic wrap (torus reference problem for the two-scale check).
    Periodic,
}

/// Uniform square lattice of cell-centered unknowns.
#[derive(Clone, Debug)]
pub struct MacroLattice<T: Scalar> {
    pub m: usize,
    pub h: T,
    pub origin: [T; 2],
    pub boundary: MacroBoundary,
}

impl<T: Scalar> MacroLattice<T> {
    pub fn from_macro_grid(g: &MacroGrid<T>) -> Self {
        Self {
            m: g.m,
            h: g.h,
            origin: [-g.l, -g.l],
            boundary: MacroBoundary::DirichletZero,
        }
    }

    pub fn torus(size: T, m: usize) -> Self {
        Self {
            m,
            h: size / cast_usize(m),
            origin: [T::zero(), T::zero()],
            boundary: MacroBoundary::Periodic,
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.m + i
    }

    pub fn cell_count(&self) -> usize {
        self.m * self.m
    }

    pub fn center(&self, i: usize, j: usize) -> [T; 2] {
        let half = cast::<T>(0.5);
        [
            self.origin[0] + (cast_usize::<T>(i) + half) * self.h,
            self.origin[1] + (cast_usize::<T>(j) + half) * self.h,
        ]
    }

    /// Index of the neighbor one step along `axis`; `None` beyond a
    /// Dirichlet wall.
    #[inline]
    pub fn step(&self, i: usize, j: usize, axis: usize, dir: isize) -> Option<usize> {
        let m = self.m as isize;
        let (mut a, mut b) = (i as isize, j as isize);
        if axis == 0 {
            a += dir;
        } else {
            b += dir;
        }
        match self.boundary {
            MacroBoundary::Periodic => {
                a = (a + m) % m;
                b = (b + m) % m;
                Some(self.idx(a as usize, b as usize))
            }
            MacroBoundary::DirichletZero => {
                if a < 0 || b < 0 || a >= m || b >= m {
                    None
                } else {
                    Some(self.idx(a as usize, b as usize))
                }
            }
        }
    }

    pub fn sample<F: Fn([T; 2]) -> T>(&self, f: F) -> Vec<T> {
        let mut out = vec![T::zero(); self.cell_count()];
        for j in 0..self.m {
            for i in 0..self.m {
                out[self.idx(i, j)] = f(self.center(i, j));
            }
        }
        out
    }
}

/// Built-in initial-datum families; all are nonnegative, bounded by one and
/// compactly supported (the bump is clipped at a finite radius).
#[derive(Clone, Debug)]
pub enum InitialDatum<T: Scalar> {
    GaussianBump {
        center: [T; 2],
        sigma: T,
        amplitude: T,
        support_radius: T,
    },
    Disk {
        center: [T; 2],
        radius: T,
        value: T,
    },
}

impl<T: Scalar> InitialDatum<T> {
    pub fn eval(&self, x: [T; 2]) -> T {
        match self {
            InitialDatum::GaussianBump {
                center,
                sigma,
                amplitude,
                support_radius,
            } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let r2 = dx * dx + dy * dy;
                if r2 > *support_radius * *support_radius {
                    T::zero()
                } else {
                    let half = cast::<T>(0.5);
                    (*amplitude * (-half * r2 / (*sigma * *sigma)).exp()).min(T::one())
                }
            }
            InitialDatum::Disk {
                center,
                radius,
                value,
            } => {
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                if dx * dx + dy * dy <= *radius * *radius {
                    (*value).min(T::one())
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn recentered(&self, center: [T; 2]) -> Self {
        let mut c = self.clone();
        match &mut c {
            InitialDatum::GaussianBump { center: cc, .. } => *cc = center,
            InitialDatum::Disk { center: cc, .. } => *cc = center,
        }
        c
    }

    pub fn sample_on(&self, lattice: &MacroLattice<T>) -> Vec<T> {
        lattice.sample(|x| self.eval(x))
    }
}

/// Scalar field on the unit cell's fluid region.
#[derive(Clone, Debug)]
pub enum CellField<T: Scalar> {
    Constant(T),
    PerCell(Vec<T>),
}

impl<T: Scalar> CellField<T> {
    fn integral(&self, geom: &CellGeometry<T>) -> T {
        match self {
            CellField::Constant(c) => *c * geom.fluid_area(),
            CellField::PerCell(v) => {
                let h2 = geom.h() * geom.h();
                ksum(v.iter().map(|&x| x * h2))
            }
        }
    }

    fn l2_norm(&self, geom: &CellGeometry<T>) -> T {
        match self {
            CellField::Constant(c) => (*c * *c * geom.fluid_area()).sqrt(),
            CellField::PerCell(v) => {
                let h2 = geom.h() * geom.h();
                ksum(v.iter().map(|&x| x * x * h2)).sqrt()
            }
        }
    }
}

/// Scalar data on the flux part of the obstacle boundary.
#[derive(Clone, Debug)]
pub enum BoundaryField<T: Scalar> {
    Constant(T),
    PerFace(Vec<T>),
}

impl<T: Scalar> BoundaryField<T> {
    fn integral(&self, geom: &CellGeometry<T>) -> T {
        match self {
            BoundaryField::Constant(c) => *c * geom.gamma_n_length(),
            BoundaryField::PerFace(v) => ksum(v.iter().map(|&x| x * geom.h())),
        }
    }

    fn l2_norm(&self, geom: &CellGeometry<T>) -> T {
        match self {
            BoundaryField::Constant(c) => (*c * *c * geom.gamma_n_length()).sqrt(),
            BoundaryField::PerFace(v) => ksum(v.iter().map(|&x| x * x * geom.h())).sqrt(),
        }
    }
}

/// One time sample of the cell-level sources.
#[derive(Clone, Debug)]
pub struct SourceSample<T: Scalar> {
    pub t: T,
    pub f: CellField<T>,
    pub g_n: BoundaryField<T>,
}

/// Bulk and boundary sources plus the initial datum.
#[derive(Clone, Debug)]
pub struct SourceData<T: Scalar> {
    pub samples: Vec<SourceSample<T>>,
    pub g: InitialDatum<T>,
}

impl<T: Scalar> SourceData<T> {
    pub fn constant(f: T, g_n: T, g: InitialDatum<T>) -> Self {
        Self {
            samples: vec![SourceSample {
                t: T::zero(),
                f: CellField::Constant(f),
                g_n: BoundaryField::Constant(g_n),
            }],
            g,
        }
    }

    /// `sup_t` of the L2 norms entering the boundedness estimate.
    pub fn norms(&self, geom: &CellGeometry<T>) -> (T, T) {
        let mut fmax = T::zero();
        let mut gmax = T::zero();
        for s in &self.samples {
            fmax = fmax.max(s.f.l2_norm(geom));
            gmax = gmax.max(s.g_n.l2_norm(geom));
        }
        (fmax, gmax)
    }
}

/// Upscaled source `f~(t)` as a piecewise-constant time series.
#[derive(Clone, Debug)]
pub struct FTilde<T: Scalar> {
    pub samples: Vec<(T, T)>,
}

impl<T: Scalar> FTilde<T> {
    pub fn constant(v: T) -> Self {
        Self {
            samples: vec![(T::zero(), v)],
        }
    }

    pub fn eval(&self, t: T) -> T {
        let mut v = self.samples[0].1;
        for &(tk, vk) in &self.samples {
            if tk <= t {
                v = vk;
            } else {
                break;
            }
        }
        v
    }
}

/// Averaged upscaled source with the sign-condition guard: at every sample,
/// the bulk production must dominate the boundary outflow.
pub fn compute_source<T: Scalar>(
    source: &SourceData<T>,
    geom: &CellGeometry<T>,
) -> Result<FTilde<T>, MacroError> {
    let mut samples = Vec::with_capacity(source.samples.len());
    for s in &source.samples {
        let net = s.f.integral(geom) - s.g_n.integral(geom);
        if net < -cast::<T>(1e-13) {
            return Err(MacroError::SignConditionViolated {
                t: s.t.to_f64().unwrap_or(f64::NAN),
                value: net.to_f64().unwrap_or(f64::NAN),
            });
        }
        samples.push((s.t, net / geom.fluid_area()));
    }
    Ok(FTilde { samples })
}

/// Recorded evolution: every accepted step including the initial state.
#[derive(Clone, Debug)]
pub struct Trajectory<T: Scalar> {
    pub lattice: MacroLattice<T>,
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("trajectory has states")
    }

    pub fn final_time(&self) -> T {
        *self.times.last().expect("trajectory has times")
    }

    pub fn mass_series(&self) -> Vec<T> {
        let h2 = self.lattice.h * self.lattice.h;
        self.states
            .iter()
            .map(|s| ksum(s.iter().map(|&v| v * h2)))
            .collect()
    }

    pub fn min_series(&self) -> Vec<T> {
        self.states
            .iter()
            .map(|s| s.iter().copied().fold(T::infinity(), T::min))
            .collect()
    }

    pub fn max_series(&self) -> Vec<T> {
        self.states
            .iter()
            .map(|s| s.iter().copied().fold(T::neg_infinity(), T::max))
            .collect()
    }

    /// State at (or nearest below) time t.
    pub fn state_at(&self, t: T) -> &[T] {
        let mut best = 0;
        for (k, &tk) in self.times.iter().enumerate() {
            if (tk - t).abs() <= (self.times[best] - t).abs() {
                best = k;
            }
        }
        &self.states[best]
    }
}

/// Time-step policy: the implicit integrator is unconditionally stable, so
/// auto mode takes the accuracy-motivated h/4 when the tensor family is
/// essentially symmetric and the stiffer h^2/4 when the skew part is
/// substantial.
#[derive(Clone, Copy, Debug)]
pub enum DtPolicy<T: Scalar> {
    Auto,
    Fixed(T),
}

impl<T: Scalar> DtPolicy<T> {
    pub fn resolve(&self, lattice: &MacroLattice<T>, tensors: &EffectiveTensors<T>) -> T {
        match self {
            DtPolicy::Fixed(v) => *v,
            DtPolicy::Auto => {
                let quarter = cast::<T>(0.25);
                let (od, lam) = tensor_family_extremes(tensors);
                if od <= cast::<T>(0.1) * lam {
                    lattice.h * quarter
                } else {
                    lattice.h * lattice.h * quarter
                }
            }
        }
    }
}

/// (max |off-diagonal|, min symmetric eigenvalue) over states in [0, 1].
fn tensor_family_extremes<T: Scalar>(tensors: &EffectiveTensors<T>) -> (T, T) {
    let mut od = T::zero();
    let mut lam = T::infinity();
    for k in 0..=8 {
        let u = cast_usize::<T>(k) / cast::<T>(8.0);
        let d = tensors.evaluate(u);
        od = od.max(d[0][1].abs()).max(d[1][0].abs());
        lam = lam.min(min_symmetric_eigenvalue(&d));
    }
    (od, lam)
}

/// Coercivity guard applied inside every Picard sub-iteration.
#[derive(Clone, Copy, Debug)]
pub struct CoercivityGuard<T: Scalar> {
    pub theta: T,
    pub fluid_area: T,
    pub slack: T,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions<T: Scalar> {
    pub picard_tol: f64,
    pub picard_max: usize,
    pub lin_tol: f64,
    pub guard: Option<CoercivityGuard<T>>,
}

impl<T: Scalar> Default for StepOptions<T> {
    fn default() -> Self {
        Self {
            picard_tol: 1e-8,
            picard_max: 50,
            lin_tol: 1e-12,
            guard: None,
        }
    }
}

/// Whether the evaluated tensor family carries off-diagonal entries worth
/// assembling (threshold relative to the diagonal scale).
fn needs_cross_terms<T: Scalar>(tensors: &EffectiveTensors<T>, u: &[T]) -> bool {
    let mut pmin = T::infinity();
    let mut pmax = T::neg_infinity();
    for &v in u {
        let p = tensors.p.eval_derivative(v);
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    let mut od = T::zero();
    let mut scale = T::zero();
    for p in [pmin, pmax] {
        let d = tensors.evaluate_at_p_prime(p);
        od = od.max(d[0][1].abs()).max(d[1][0].abs());
        scale = scale.max(d[0][0].abs()).max(d[1][1].abs());
    }
    od > cast::<T>(1e-11) * scale.max(T::one())
}

fn guard_check<T: Scalar>(
    tensors: &EffectiveTensors<T>,
    u: &[T],
    guard: &CoercivityGuard<T>,
) -> Result<(), MacroError> {
    let mut pmin = T::infinity();
    let mut pmax = T::neg_infinity();
    for &v in u {
        let p = tensors.p.eval_derivative(v);
        pmin = pmin.min(p);
        pmax = pmax.max(p);
    }
    let bound = guard.theta * guard.fluid_area * (T::one() - guard.slack);
    // The symmetric part is affine in P', so its smallest eigenvalue is
    // concave in P' and the minimum over the state range sits at an endpoint.
    for p in [pmin, pmax] {
        let lam = min_symmetric_eigenvalue(&tensors.evaluate_at_p_prime(p));
        if lam < bound {
            return Err(MacroError::Coercivity(TensorError::CoercivityViolated {
                min_rayleigh: lam.to_f64().unwrap_or(f64::NAN),
                bound: bound.to_f64().unwrap_or(f64::NAN),
                at_u0: f64::NAN,
            }));
        }
    }
    Ok(())
}

/// One backward-Euler step with the dispersion tensor lagged inside a
/// Picard sub-iteration. The full (possibly nonsymmetric) tensor enters the
/// face flux: two-point differences for the normal component, centered
/// tangential differences for the off-diagonal component. Tangential
/// gradients on a Dirichlet wall face vanish identically (the wall trace is
/// zero), so wall faces carry the normal flux only.
pub fn step_parabolic<T: Scalar>(
    lattice: &MacroLattice<T>,
    u_n: &[T],
    tensors: &EffectiveTensors<T>,
    f_value: T,
    dt: T,
    opts: &StepOptions<T>,
) -> Result<(Vec<T>, usize), MacroError> {
    let mut u_lag = u_n.to_vec();
    let state_dependent = tensors.state_dependent();
    let mut iters = 0usize;
    loop {
        if let Some(g) = &opts.guard {
            guard_check(tensors, &u_lag, g)?;
        }
        let u_new = single_implicit_solve(lattice, u_n, tensors, &u_lag, f_value, dt, opts)?;
        iters += 1;
        if !state_dependent {
            return Ok((u_new, iters));
        }
        let mut diff = T::zero();
        for (a, b) in u_new.iter().zip(&u_lag) {
            diff = diff.max((*a - *b).abs());
        }
        if diff.to_f64().unwrap_or(f64::INFINITY) < opts.picard_tol {
            return Ok((u_new, iters));
        }
        if iters >= opts.picard_max {
            return Err(MacroError::PicardNotConverged {
                step: iters,
                diff: diff.to_f64().unwrap_or(f64::NAN),
            });
        }
        u_lag = u_new;
    }
}

fn single_implicit_solve<T: Scalar>(
    lattice: &MacroLattice<T>,
    u_n: &[T],
    tensors: &EffectiveTensors<T>,
    u_lag: &[T],
    f_value: T,
    dt: T,
    opts: &StepOptions<T>,
) -> Result<Vec<T>, MacroError> {
    let m = lattice.m;
    let h = lattice.h;
    let h2 = h * h;
    let ncells = lattice.cell_count();
    let cross = needs_cross_terms(tensors, u_lag);

    // Per-cell tensors at the lagged state.
    let mut dten = Vec::with_capacity(ncells);
    for &v in u_lag {
        dten.push(tensors.evaluate(v));
    }

    let half = cast::<T>(0.5);
    let two = cast::<T>(2.0);
    let quarter = cast::<T>(0.25);
    let mut trip = TripletBuilder::with_capacity(ncells, if cross { 12 } else { 5 } * ncells);
    let mut rhs = vec![T::zero(); ncells];

    for j in 0..m {
        for i in 0..m {
            let c = lattice.idx(i, j);
            let dc = dten[c];
            trip.add(c, c, h2 / dt);
            rhs[c] = h2 / dt * u_n[c] + h2 * f_value;

            for (axis, dir) in [(0usize, -1isize), (0, 1), (1, -1), (1, 1)] {
                match lattice.step(i, j, axis, dir) {
                    Some(nb) => {
                        let dn = dten[nb];
                        let d_norm = (dc[axis][axis] + dn[axis][axis]) * half;
                        trip.add(c, c, d_norm);
                        trip.add(c, nb, -d_norm);
                        if cross {
                            let t_axis = 1 - axis;
                            let d_cross = (dc[axis][t_axis] + dn[axis][t_axis]) * half;
                            if d_cross != T::zero() {
                                // flux_out(c) = -sign * d_cross * (tangential
                                // derivative at the face) * h
                                let sign = if dir > 0 { T::one() } else { -T::one() };
                                let coef = -sign * d_cross * quarter;
                                for (base_i, base_j) in [(i, j), face_nb_cell(lattice, i, j, axis, dir)]
                                {
                                    for tdir in [1isize, -1] {
                                        let tsign = if tdir > 0 { T::one() } else { -T::one() };
                                        match lattice.step(base_i, base_j, t_axis, tdir) {
                                            Some(tn) => {
                                                trip.add(c, tn, coef * tsign);
                                            }
                                            None => {
                                                // Dirichlet ghost: antisymmetric
                                                // reflection u_ghost = -u_base.
                                                let base = lattice.idx(base_i, base_j);
                                                trip.add(c, base, -coef * tsign);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    None => {
                        // Dirichlet wall: zero face value, half-cell flux.
                        trip.add(c, c, two * dc[axis][axis]);
                    }
                }
            }
        }
    }

    let a = trip.build().map_err(MacroError::LinearSolveFailed)?;
    let solve_opts = SolveOptions {
        tol: opts.lin_tol,
        max_iter: 0,
        nullspace: false,
        symmetric: !cross,
        preconditioner: Preconditioner::Ilu0,
    };
    let (u, _) = sparse::solve(&a, &rhs, solve_opts)?;
    Ok(u)
}

#[inline]
fn face_nb_cell<T: Scalar>(
    lattice: &MacroLattice<T>,
    i: usize,
    j: usize,
    axis: usize,
    dir: isize,
) -> (usize, usize) {
    let m = lattice.m as isize;
    let (mut a, mut b) = (i as isize, j as isize);
    if axis == 0 {
        a += dir;
    } else {
        b += dir;
    }
    a = (a + m) % m;
    b = (b + m) % m;
    (a as usize, b as usize)
}

/// Advance from t0 to t_end recording every step.
pub fn sweep_interval<T: Scalar>(
    lattice: &MacroLattice<T>,
    g: Vec<T>,
    tensors: &EffectiveTensors<T>,
    f_tilde: &FTilde<T>,
    t0: T,
    t_end: T,
    dt: T,
    opts: &StepOptions<T>,
) -> Result<Trajectory<T>, MacroError> {
    let mut times = vec![t0];
    let mut states = vec![g];
    let mut t = t0;
    let eps = dt * cast::<T>(1e-10);
    while t < t_end - eps {
        let step_dt = dt.min(t_end - t);
        let f_value = f_tilde.eval(t + step_dt);
        let (u, _) = step_parabolic(lattice, states.last().unwrap(), tensors, f_value, step_dt, opts)?;
        t = t + step_dt;
        times.push(t);
        states.push(u);
    }
    Ok(Trajectory {
        lattice: lattice.clone(),
        times,
        states,
    })
}

/// Space-time averaging convention for the drift-average scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AverageConvention {
    /// Average P'(u) over the whole truncated domain.
    Domain,
    /// Average P'(u) over the support of u only.
    Support,
}

/// Space-time average of P'(u) over the recorded trajectory: trapezoidal in
/// time, midpoint in space.
pub fn compute_average_a<T: Scalar>(
    traj: &Trajectory<T>,
    p: &Polynomial<T>,
    convention: AverageConvention,
) -> Result<T, MacroError> {
    if traj.states.is_empty() {
        return Err(MacroError::EmptyHistory);
    }
    let k = traj.states.len();
    let mut weights = vec![T::one(); k];
    if k > 1 {
        let half = cast::<T>(0.5);
        for (idx, w) in weights.iter_mut().enumerate() {
            let lo = if idx == 0 { traj.times[0] } else { traj.times[idx - 1] };
            let hi = if idx == k - 1 {
                traj.times[k - 1]
            } else {
                traj.times[idx + 1]
            };
            *w = (hi - lo) * half;
        }
    }
    let support_eps = cast::<T>(1e-12);
    let mut num = KahanSum::new();
    let mut den = KahanSum::new();
    for (state, &w) in traj.states.iter().zip(&weights) {
        match convention {
            AverageConvention::Domain => {
                let mut acc = KahanSum::new();
                for &v in state {
                    acc.add(p.eval_derivative(v));
                }
                num.add(w * acc.value());
                den.add(w * cast_usize(state.len()));
            }
            AverageConvention::Support => {
                let mut acc = KahanSum::new();
                let mut count = 0usize;
                for &v in state {
                    if v.abs() > support_eps {
                        acc.add(p.eval_derivative(v));
                        count += 1;
                    }
                }
                num.add(w * acc.value());
                den.add(w * cast_usize(count));
            }
        }
    }
    let d = den.value();
    if d == T::zero() {
        // Empty support everywhere: the state is identically zero.
        return Ok(p.eval_derivative(T::zero()));
    }
    Ok(num.value() / d)
}

/// Convergence record of the outer fixed point on the drift-average scalar.
#[derive(Clone, Debug)]
pub struct FixedPointReport<T: Scalar> {
    pub iterates: Vec<T>,
    pub residuals: Vec<T>,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CoupledOptions<T: Scalar> {
    pub damping: T,
    pub tol: f64,
    pub max_outer: usize,
    pub convention: AverageConvention,
    pub dt: DtPolicy<T>,
    pub step: StepOptions<T>,
}

impl<T: Scalar> Default for CoupledOptions<T> {
    fn default() -> Self {
        Self {
            damping: cast(0.5),
            tol: 1e-8,
            max_outer: 40,
            convention: AverageConvention::Domain,
            dt: DtPolicy::Auto,
            step: StepOptions::default(),
        }
    }
}

/// Solve the coupled system: iterate the drift-average scalar, re-solving
/// the cell problems and re-sweeping the parabolic problem until the
/// average stabilizes. Damped to guard against oscillation; non-convergence
/// is an error carrying the iterate history.
#[allow(clippy::too_many_arguments)]
pub fn solve_coupled<T: Scalar>(
    geom: &CellGeometry<T>,
    coeffs: &Coefficients<T>,
    lattice: &MacroLattice<T>,
    g: &[T],
    f_tilde: &FTilde<T>,
    t_end: T,
    opts: &CoupledOptions<T>,
) -> Result<(Trajectory<T>, EffectiveTensors<T>, FixedPointReport<T>), MacroError> {
    // Initial guess: spatial average of P'(g).
    let g_traj = Trajectory {
        lattice: lattice.clone(),
        times: vec![T::zero()],
        states: vec![g.to_vec()],
    };
    let mut a_k = compute_average_a(&g_traj, &coeffs.p, opts.convention)?;

    let mut iterates = vec![a_k];
    let mut residuals = Vec::new();

    for sweep in 1..=opts.max_outer {
        let sol = solve_cell_problems(geom, coeffs, a_k)?;
        let tensors = assemble_effective_tensors(geom, coeffs, &sol).map_err(MacroError::Coercivity)?;
        let dt = opts.dt.resolve(lattice, &tensors);
        let traj = sweep_interval(
            lattice,
            g.to_vec(),
            &tensors,
            f_tilde,
            T::zero(),
            t_end,
            dt,
            &opts.step,
        )?;
        let a_new = compute_average_a(&traj, &coeffs.p, opts.convention)?;
        let a_next = (T::one() - opts.damping) * a_k + opts.damping * a_new;
        let residual = (a_next - a_k).abs();
        iterates.push(a_next);
        residuals.push(residual);
        a_k = a_next;
        if residual.to_f64().unwrap_or(f64::INFINITY) < opts.tol {
            return Ok((
                traj,
                tensors,
                FixedPointReport {
                    iterates,
                    residuals,
                    converged: true,
                    sweeps: sweep,
                },
            ));
        }
    }
    Err(MacroError::OuterIterationNotConverged {
        sweeps: opts.max_outer,
        last_residual: residuals
            .last()
            .and_then(|r| r.to_f64())
            .unwrap_or(f64::NAN),
        iterates: iterates
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect(),
    })
}

/// Positivity audit over a trajectory.
#[derive(Clone, Debug)]
pub struct PositivityReport<T: Scalar> {
    pub min_value: T,
    pub at_time: T,
    pub at_cell: usize,
}

pub fn check_positivity<T: Scalar>(
    traj: &Trajectory<T>,
    tol: T,
) -> Result<PositivityReport<T>, MacroError> {
    let mut min_value = T::infinity();
    let mut at_time = T::zero();
    let mut at_cell = 0usize;
    for (state, &t) in traj.states.iter().zip(&traj.times) {
        for (c, &v) in state.iter().enumerate() {
            if v < min_value {
                min_value = v;
                at_time = t;
                at_cell = c;
            }
        }
    }
    if min_value < -tol {
        return Err(MacroError::PositivityViolated {
            min: min_value.to_f64().unwrap_or(f64::NAN),
            t: at_time.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(PositivityReport {
        min_value,
        at_time,
        at_cell,
    })
}

/// Pointwise comparison of two trajectories with ordered initial data.
pub fn check_comparison<T: Scalar>(
    lower: &Trajectory<T>,
    upper: &Trajectory<T>,
    tol: T,
) -> Result<(), MacroError> {
    if lower.lattice.m != upper.lattice.m || lower.times.len() != upper.times.len() {
        return Err(MacroError::TrajectoryMismatch);
    }
    for (a, b) in lower.states[0].iter().zip(&upper.states[0]) {
        if *a > *b {
            return Err(MacroError::UnorderedInitialData);
        }
    }
    for ((sa, sb), &t) in lower.states.iter().zip(&upper.states).zip(&lower.times) {
        let mut excess = T::zero();
        for (a, b) in sa.iter().zip(sb) {
            excess = excess.max(*a - *b);
        }
        if excess > tol {
            return Err(MacroError::ComparisonViolated {
                t: t.to_f64().unwrap_or(f64::NAN),
                max_excess: excess.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}

/// Boundedness audit: `max_t ||u||_inf <= ||g||_inf + T (||f|| + ||g_N||)`.
#[derive(Clone, Debug)]
pub struct BoundednessReport<T: Scalar> {
    pub max_abs: T,
    pub bound: T,
    pub ok: bool,
}

pub fn check_boundedness<T: Scalar>(
    traj: &Trajectory<T>,
    g_sup: T,
    f_norm: T,
    gn_norm: T,
    tol: T,
) -> BoundednessReport<T> {
    let t_end = traj.final_time();
    let bound = g_sup + t_end * (f_norm + gn_norm) + tol;
    let mut max_abs = T::zero();
    for state in &traj.states {
        for &v in state {
            max_abs = max_abs.max(v.abs());
        }
    }
    BoundednessReport {
        max_abs,
        bound,
        ok: max_abs <= bound,
    }
}

// ---------------------------------------------------------------------------
// Kirchhoff-transformed solver (isotropic dispersion only)
// ---------------------------------------------------------------------------

/// Tabulated antiderivative of the scalar dispersion with a monotone
/// inverse by bracketed Newton.
pub struct KirchhoffTransform<T: Scalar> {
    lo: T,
    hi: T,
    du: T,
    theta_values: Vec<T>,
    d_scalar: Box<dyn Fn(T) -> T>,
}

impl<T: Scalar> KirchhoffTransform<T> {
    pub fn build(
        d_scalar: impl Fn(T) -> T + 'static,
        lo: T,
        hi: T,
        intervals: usize,
    ) -> Result<Self, MacroError> {
        let du = (hi - lo) / cast_usize(intervals);
        let mut theta_values = Vec::with_capacity(intervals + 1);
        let six = cast::<T>(6.0);
        let half = cast::<T>(0.5);
        let mut acc = T::zero();
        theta_values.push(T::zero());
        for k in 0..intervals {
            let a = lo + du * cast_usize(k);
            let b = a + du;
            let fa = d_scalar(a);
            let fb = d_scalar(b);
            if fa <= T::zero() || fb <= T::zero() {
                return Err(MacroError::InversionFailed {
                    value: a.to_f64().unwrap_or(f64::NAN),
                });
            }
            let fm = d_scalar((a + b) * half);
            acc = acc + du / six * (fa + cast::<T>(4.0) * fm + fb);
            theta_values.push(acc);
        }
        // Shift so theta(0) = 0.
        let mut t0 = T::zero();
        let zero = T::zero();
        if zero >= lo && zero <= hi {
            let k = ((zero - lo) / du).to_f64().unwrap_or(0.0).floor() as usize;
            let k = k.min(intervals - 1);
            let a = lo + du * cast_usize(k);
            let fa = d_scalar(a);
            let fm = d_scalar((a + zero) * half);
            let fb = d_scalar(zero);
            t0 = theta_values[k] + (zero - a) / six * (fa + cast::<T>(4.0) * fm + fb);
        }
        for v in theta_values.iter_mut() {
            *v = *v - t0;
        }
        Ok(Self {
            lo,
            hi,
            du,
            theta_values,
            d_scalar: Box::new(d_scalar),
        })
    }

    /// Theta(u): quadrature of the scalar dispersion from 0 to u.
    pub fn theta(&self, u: T) -> T {
        debug_assert!(u >= self.lo && u <= self.hi, "state outside the table");
        let k = (((u - self.lo) / self.du).to_f64().unwrap_or(0.0).floor() as isize)
            .clamp(0, self.theta_values.len() as isize - 2) as usize;
        let a = self.lo + self.du * cast_usize(k);
        let six = cast::<T>(6.0);
        let half = cast::<T>(0.5);
        let fa = (self.d_scalar)(a);
        let fm = (self.d_scalar)((a + u) * half);
        let fb = (self.d_scalar)(u);
        self.theta_values[k] + (u - a) / six * (fa + cast::<T>(4.0) * fm + fb)
    }

    /// beta(y) = Theta^{-1}(y) by bisection bracket plus Newton polish.
    pub fn beta(&self, y: T) -> Result<T, MacroError> {
        let n = self.theta_values.len();
        if y < self.theta_values[0] || y > self.theta_values[n - 1] {
            return Err(MacroError::InversionFailed {
                value: y.to_f64().unwrap_or(f64::NAN),
            });
        }
        // Binary search for the bracketing interval.
        let (mut lo_i, mut hi_i) = (0usize, n - 1);
        while hi_i - lo_i > 1 {
            let mid = (lo_i + hi_i) / 2;
            if self.theta_values[mid] <= y {
                lo_i = mid;
            } else {
                hi_i = mid;
            }
        }
        let mut a = self.lo + self.du * cast_usize(lo_i);
        let mut b = a + self.du;
        let mut x = (a + b) * cast::<T>(0.5);
        for _ in 0..100 {
            let fx = self.theta(x) - y;
            let dx = (self.d_scalar)(x);
            if dx <= T::zero() {
                return Err(MacroError::InversionFailed {
                    value: x.to_f64().unwrap_or(f64::NAN),
                });
            }
            let step = fx / dx;
            let x_new = x - step;
            // Keep the bracket when Newton overshoots.
            let x_new = if x_new < a || x_new > b {
                if fx > T::zero() {
                    b = x;
                } else {
                    a = x;
                }
                (a + b) * cast::<T>(0.5)
            } else {
                if fx > T::zero() {
                    b = x;
                } else {
                    a = x;
                }
                x_new
            };
            if (x_new - x).abs() <= cast::<T>(1e-15) * (T::one() + x.abs()) {
                return Ok(x_new);
            }
            x = x_new;
        }
        Ok(x)
    }
}

/// Guard: the tensor family must be a scalar multiple of the identity over
/// the admissible state range.
pub fn require_isotropic<T: Scalar>(tensors: &EffectiveTensors<T>) -> Result<(), MacroError> {
    let mut max_od = T::zero();
    let mut max_gap = T::zero();
    for k in 0..=20 {
        let u = cast_usize::<T>(k) / cast::<T>(20.0);
        let d = tensors.evaluate(u);
        max_od = max_od.max(d[0][1].abs()).max(d[1][0].abs());
        max_gap = max_gap.max((d[0][0] - d[1][1]).abs());
    }
    let tol = cast::<T>(1e-10);
    if max_od >= tol || max_gap >= tol {
        return Err(MacroError::NotIsotropic {
            max_offdiag: max_od.to_f64().unwrap_or(f64::NAN),
            max_diag_gap: max_gap.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Solve the parabolic problem through the Kirchhoff transform: the
/// nonlinearity moves into the time derivative, each step is a Newton
/// iteration on `beta(v) - dt Lap v = u_n + dt f`, and the plain 5-point
/// Laplacian replaces the state-dependent flux.
pub fn kirchhoff_solve<T: Scalar>(
    lattice: &MacroLattice<T>,
    tensors: &EffectiveTensors<T>,
    g: Vec<T>,
    f_tilde: &FTilde<T>,
    t_end: T,
    dt: T,
    opts: &StepOptions<T>,
) -> Result<Trajectory<T>, MacroError> {
    require_isotropic(tensors)?;
    let tens = tensors.clone();
    let transform = KirchhoffTransform::build(
        move |u| tens.evaluate(u)[0][0],
        cast(-0.5),
        cast(1.5),
        4096,
    )?;

    let m = lattice.m;
    let h = lattice.h;
    let h2 = h * h;
    let ncells = lattice.cell_count();

    // Constant unit-coefficient Laplacian (flux form).
    let mut trip = TripletBuilder::with_capacity(ncells, 5 * ncells);
    let two = cast::<T>(2.0);
    for j in 0..m {
        for i in 0..m {
            let c = lattice.idx(i, j);
            for (axis, dir) in [(0usize, -1isize), (0, 1), (1, -1), (1, 1)] {
                match lattice.step(i, j, axis, dir) {
                    Some(nb) => {
                        trip.add(c, c, T::one());
                        trip.add(c, nb, -T::one());
                    }
                    None => {
                        trip.add(c, c, two);
                    }
                }
            }
        }
    }
    let lap = trip.build().map_err(MacroError::LinearSolveFailed)?;

    let mut times = vec![T::zero()];
    let mut states = vec![g];
    let mut t = T::zero();
    let eps = dt * cast::<T>(1e-10);
    while t < t_end - eps {
        let step_dt = dt.min(t_end - t);
        let f_value = f_tilde.eval(t + step_dt);
        let u_n = states.last().unwrap().clone();

        // Newton in v = Theta(u).
        let mut v: Vec<T> = u_n.iter().map(|&u| transform.theta(u)).collect();
        let mut converged = false;
        for _ in 0..opts.picard_max {
            // Residual F(v) = h^2 beta(v)/dt + Lap v - h^2 (u_n/dt + f).
            let mut beta_v = vec![T::zero(); ncells];
            for (k, &vk) in v.iter().enumerate() {
                beta_v[k] = transform.beta(vk)?;
            }
            let lap_v = lap.matvec(&v);
            let mut residual = vec![T::zero(); ncells];
            let mut rmax = T::zero();
            for k in 0..ncells {
                residual[k] =
                    h2 / step_dt * beta_v[k] + lap_v[k] - h2 * (u_n[k] / step_dt + f_value);
                rmax = rmax.max(residual[k].abs());
            }
            // Jacobian: diag(h^2 beta'(v)/dt) + Lap, beta' = 1/d*(beta(v)).
            let mut jt = TripletBuilder::with_capacity(ncells, 5 * ncells + ncells);
            for k in 0..ncells {
                let dstar = tensors.evaluate(beta_v[k])[0][0];
                jt.add(k, k, h2 / (step_dt * dstar));
            }
            for r in 0..ncells {
                let (cols, vals) = lap.row(r);
                for (c, vv) in cols.iter().zip(vals) {
                    jt.add(r, *c, *vv);
                }
            }
            let jac = jt.build().map_err(MacroError::LinearSolveFailed)?;
            let neg_res: Vec<T> = residual.iter().map(|&r| -r).collect();
            let solve_opts = SolveOptions {
                tol: opts.lin_tol,
                symmetric: true,
                preconditioner: Preconditioner::Ilu0,
                ..Default::default()
            };
            let (delta, _) = sparse::solve(&jac, &neg_res, solve_opts)?;
            let mut dmax = T::zero();
            for k in 0..ncells {
                v[k] += delta[k];
                dmax = dmax.max(delta[k].abs());
            }
            if dmax.to_f64().unwrap_or(f64::INFINITY) < 1e-12
                && rmax.to_f64().unwrap_or(f64::INFINITY) < 1e-10
            {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(MacroError::PicardNotConverged {
                step: times.len(),
                diff: f64::NAN,
            });
        }
        let mut u = vec![T::zero(); ncells];
        for k in 0..ncells {
            u[k] = transform.beta(v[k])?;
        }
        t = t + step_dt;
        times.push(t);
        states.push(u);
    }
    Ok(Trajectory {
        lattice: lattice.clone(),
        times,
        states,
    })
}

// ---------------------------------------------------------------------------
// Growing-domain sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SweepPair<T: Scalar> {
    pub l_small: T,
    pub l_big: T,
    /// Largest value of (u_small - u_big) over nested cells and times.
    pub max_violation: T,
    /// L2 distance of the zero extensions at the final time.
    pub tail_l2: T,
}

#[derive(Clone, Debug)]
pub struct SweepReport<T: Scalar> {
    pub l_values: Vec<T>,
    pub pairs: Vec<SweepPair<T>>,
    pub final_states: Vec<(T, MacroLattice<T>, Vec<T>)>,
}

/// Solve the truncated problem on a rising ladder of domain half-widths at
/// fixed mesh width with shared tensors, assert the zero extensions grow
/// monotonically, and report the Cauchy tails.
#[allow(clippy::too_many_arguments)]
pub fn domain_sweep<T: Scalar>(
    l_list: &[T],
    h: T,
    g: &InitialDatum<T>,
    tensors: &EffectiveTensors<T>,
    f_tilde: &FTilde<T>,
    t_end: T,
    dt: T,
    opts: &StepOptions<T>,
    tol: T,
) -> Result<SweepReport<T>, MacroError> {
    let mut lattices = Vec::new();
    for &l in l_list {
        let m_f = (l + l) / h;
        let m = m_f.to_f64().unwrap_or(0.0).round() as usize;
        if ((m_f - cast_usize::<T>(m)).abs()).to_f64().unwrap_or(1.0) > 1e-9 || m < 4 {
            return Err(MacroError::GridsDoNotNest(format!(
                "2L/h = {} is not an integer cell count",
                m_f
            )));
        }
        lattices.push(MacroLattice {
            m,
            h,
            origin: [-l, -l],
            boundary: MacroBoundary::DirichletZero,
        });
    }
    for w in lattices.windows(2) {
        if (w[1].m - w[0].m) % 2 != 0 {
            return Err(MacroError::GridsDoNotNest(
                "cell-count difference is odd; centers do not align".to_string(),
            ));
        }
    }

    let mut trajectories = Vec::new();
    for lattice in &lattices {
        let g_field = g.sample_on(lattice);
        let traj = sweep_interval(
            lattice,
            g_field,
            tensors,
            f_tilde,
            T::zero(),
            t_end,
            dt,
            opts,
        )?;
        trajectories.push(traj);
    }

    let mut pairs = Vec::new();
    for w in trajectories.windows(2) {
        let (small, big) = (&w[0], &w[1]);
        if small.times.len() != big.times.len() {
            return Err(MacroError::TrajectoryMismatch);
        }
        let offset = (big.lattice.m - small.lattice.m) / 2;
        let mut max_violation = T::neg_infinity();
        for (ss, sb) in small.states.iter().zip(&big.states) {
            for j in 0..small.lattice.m {
                for i in 0..small.lattice.m {
                    let vs = ss[small.lattice.idx(i, j)];
                    let vb = sb[big.lattice.idx(i + offset, j + offset)];
                    max_violation = max_violation.max(vs - vb);
                }
            }
        }
        // Tail: L2 of (extension of small) - big at the final time.
        let ss = small.final_state();
        let sb = big.final_state();
        let mut acc = KahanSum::new();
        for j in 0..big.lattice.m {
            for i in 0..big.lattice.m {
                let vb = sb[big.lattice.idx(i, j)];
                let inside = i >= offset
                    && j >= offset
                    && i - offset < small.lattice.m
                    && j - offset < small.lattice.m;
                let vs = if inside {
                    ss[small.lattice.idx(i - offset, j - offset)]
                } else {
                    T::zero()
                };
                let d = vb - vs;
                acc.add(d * d);
            }
        }
        let tail = (acc.value() * h * h).sqrt();
        let pair = SweepPair {
            l_small: -small.lattice.origin[0],
            l_big: -big.lattice.origin[0],
            max_violation,
            tail_l2: tail,
        };
        if max_violation > tol {
            return Err(MacroError::MonotonicityViolated {
                l_small: pair.l_small.to_f64().unwrap_or(f64::NAN),
                l_big: pair.l_big.to_f64().unwrap_or(f64::NAN),
                max_violation: max_violation.to_f64().unwrap_or(f64::NAN),
            });
        }
        pairs.push(pair);
    }

    Ok(SweepReport {
        l_values: l_list.to_vec(),
        pairs,
        final_states: trajectories
            .into_iter()
            .map(|t| {
                (
                    -t.lattice.origin[0],
                    t.lattice.clone(),
                    t.states.into_iter().last().unwrap(),
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::DiffusionField;
    use crate::geometry::{build_cell_geometry, build_macro_grid, DirichletSides, Rect};

    fn identity_tensors() -> EffectiveTensors<f64> {
        EffectiveTensors::constant([[1.0, 0.0], [0.0, 1.0]], Polynomial::tasep())
    }

    fn unit_cell_geom() -> CellGeometry<f64> {
        build_cell_geometry(
            3,
            Some(Rect {
                x0: 1.0 / 3.0,
                x1: 2.0 / 3.0,
                y0: 1.0 / 3.0,
                y1: 2.0 / 3.0,
            }),
            DirichletSides::NONE,
        )
        .unwrap()
    }

    #[test]
    fn source_average_examples() {
        let geom = unit_cell_geom();
        let g = InitialDatum::Disk {
            center: [0.0, 0.0],
            radius: 1.0,
            value: 0.5,
        };
        // f = 1, g_N = 0: average is one.
        let src = SourceData::constant(1.0, 0.0, g.clone());
        let ft = compute_source(&src, &geom).unwrap();
        assert!((ft.eval(0.0) - 1.0).abs() < 1e-14);

        // f = 0, g_N = 1 violates the sign condition (value -1.5).
        let src = SourceData::constant(0.0, 1.0, g.clone());
        let err = compute_source(&src, &geom).unwrap_err();
        match err {
            MacroError::SignConditionViolated { value, .. } => {
                assert!((value - (-4.0 / 3.0)).abs() < 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }

        // f = 1, g_N = 0.5: (8/9 - 2/3)/(8/9) = 0.25.
        let src = SourceData::constant(1.0, 0.5, g);
        let ft = compute_source(&src, &geom).unwrap();
        assert!((ft.eval(0.0) - 0.25).abs() < 1e-13);
    }

    #[test]
    fn average_of_constant_states() {
        let grid = build_macro_grid::<f64>(1.0, 4).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let p = Polynomial::tasep();
        let traj = Trajectory {
            lattice: lattice.clone(),
            times: vec![0.0],
            states: vec![vec![0.0; lattice.cell_count()]],
        };
        let a = compute_average_a(&traj, &p, AverageConvention::Domain).unwrap();
        assert_eq!(a, 1.0);

        let traj = Trajectory {
            lattice: lattice.clone(),
            times: vec![0.0],
            states: vec![vec![0.5; lattice.cell_count()]],
        };
        let a = compute_average_a(&traj, &p, AverageConvention::Domain).unwrap();
        assert!(a.abs() < 1e-15);
    }

    #[test]
    fn average_of_linear_ramp_vanishes() {
        // u(t) uniform in space, u = t on [0, 1]: trapezoid of P' = 1 - 2t
        // over the uniform ladder is exactly zero.
        let grid = build_macro_grid::<f64>(1.0, 4).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let p = Polynomial::tasep();
        let steps = 10usize;
        let times: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        let states: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| vec![t; lattice.cell_count()])
            .collect();
        let traj = Trajectory {
            lattice,
            times,
            states,
        };
        let a = compute_average_a(&traj, &p, AverageConvention::Domain).unwrap();
        assert!(a.abs() < 1e-14, "got {a}");
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let grid = build_macro_grid::<f64>(1.0, 8).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let u0 = vec![0.0; lattice.cell_count()];
        let (u1, _) = step_parabolic(
            &lattice,
            &u0,
            &tensors,
            0.0,
            0.01,
            &StepOptions::default(),
        )
        .unwrap();
        assert!(u1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_max_cannot_grow_without_source() {
        let grid = build_macro_grid::<f64>(1.0, 16).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.3,
            amplitude: 0.9,
            support_radius: 0.9,
        };
        let u0 = g.sample_on(&lattice);
        let max0 = u0.iter().copied().fold(f64::MIN, f64::max);
        let (u1, _) = step_parabolic(
            &lattice,
            &u0,
            &tensors,
            0.0,
            1e-4,
            &StepOptions::default(),
        )
        .unwrap();
        let max1 = u1.iter().copied().fold(f64::MIN, f64::max);
        assert!(max1 <= max0 + 1e-12);
    }

    #[test]
    fn mass_is_nonincreasing_with_dirichlet_walls() {
        let grid = build_macro_grid::<f64>(2.0, 24).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.4,
            amplitude: 0.8,
            support_radius: 1.2,
        };
        let traj = sweep_interval(
            &lattice,
            g.sample_on(&lattice),
            &tensors,
            &FTilde::constant(0.0),
            0.0,
            0.2,
            0.02,
            &StepOptions::default(),
        )
        .unwrap();
        let mass = traj.mass_series();
        for w in mass.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "mass grew: {} -> {}", w[0], w[1]);
        }
        check_positivity(&traj, 1e-10).unwrap();
    }

    #[test]
    fn comparison_of_ordered_data_holds() {
        let grid = build_macro_grid::<f64>(2.0, 16).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.4,
            amplitude: 0.8,
            support_radius: 1.2,
        };
        let g2 = g.sample_on(&lattice);
        let g1: Vec<f64> = g2.iter().map(|v| 0.5 * v).collect();
        let opts = StepOptions::default();
        let ft = FTilde::constant(0.0);
        let t1 = sweep_interval(&lattice, g1, &tensors, &ft, 0.0, 0.1, 0.02, &opts).unwrap();
        let t2 = sweep_interval(&lattice, g2, &tensors, &ft, 0.0, 0.1, 0.02, &opts).unwrap();
        check_comparison(&t1, &t2, 1e-8).unwrap();
        // Equal data agree to solver tolerance.
        check_comparison(&t2, &t2, 1e-12).unwrap();
    }

    #[test]
    fn crossing_initial_data_rejected() {
        let grid = build_macro_grid::<f64>(1.0, 8).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let mk = |v: f64| Trajectory {
            lattice: lattice.clone(),
            times: vec![0.0],
            states: vec![vec![v; lattice.cell_count()]],
        };
        let mut a = mk(0.5);
        let b = mk(0.4);
        a.states[0][3] = 0.1; // crossing
        let err = check_comparison(&a, &b, 1e-8).unwrap_err();
        assert!(matches!(err, MacroError::UnorderedInitialData));
    }

    #[test]
    fn kirchhoff_transform_closed_form() {
        // d*(u) = 1 + u: Theta(u) = u + u^2/2, beta(0.625) = 0.5.
        let t = KirchhoffTransform::<f64>::build(|u| 1.0 + u, -0.5, 1.5, 2048).unwrap();
        assert!((t.theta(0.5) - 0.625).abs() < 1e-12);
        assert!((t.beta(0.625).unwrap() - 0.5).abs() < 1e-12);
        // Identity dispersion: Theta is the identity.
        let t = KirchhoffTransform::<f64>::build(|_| 1.0, -0.5, 1.5, 2048).unwrap();
        assert!((t.theta(0.3) - 0.3).abs() < 1e-13);
        assert!((t.beta(0.3).unwrap() - 0.3).abs() < 1e-13);
    }

    #[test]
    fn anisotropic_tensors_rejected_by_kirchhoff() {
        let tensors =
            EffectiveTensors::constant([[1.0, 0.2], [0.2, 1.0]], Polynomial::tasep());
        let err = require_isotropic(&tensors).unwrap_err();
        assert!(matches!(err, MacroError::NotIsotropic { .. }));
    }

    #[test]
    fn kirchhoff_matches_direct_on_linear_problem() {
        let grid = build_macro_grid::<f64>(1.0, 16).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.3,
            amplitude: 0.8,
            support_radius: 0.9,
        };
        let ft = FTilde::constant(0.0);
        let opts = StepOptions::default();
        let direct = sweep_interval(
            &lattice,
            g.sample_on(&lattice),
            &tensors,
            &ft,
            0.0,
            0.05,
            0.01,
            &opts,
        )
        .unwrap();
        let kirch = kirchhoff_solve(
            &lattice,
            &tensors,
            g.sample_on(&lattice),
            &ft,
            0.05,
            0.01,
            &opts,
        )
        .unwrap();
        // Identity dispersion makes the transform the identity map: the two
        // solvers integrate the same linear system.
        for (a, b) in direct.final_state().iter().zip(kirch.final_state()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn single_domain_sweep_has_no_comparisons() {
        let tensors = identity_tensors();
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.3,
            amplitude: 0.8,
            support_radius: 0.9,
        };
        let report = domain_sweep(
            &[2.0],
            0.25,
            &g,
            &tensors,
            &FTilde::constant(0.0),
            0.1,
            0.05,
            &StepOptions::default(),
            1e-8,
        )
        .unwrap();
        assert!(report.pairs.is_empty());
        assert_eq!(report.final_states.len(), 1);
    }

    #[test]
    fn coupled_loop_with_linear_flux_converges_in_one_sweep() {
        let geom = build_cell_geometry::<f64>(
            12,
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
            p: Polynomial::linear(),
            theta: 1.0,
        };
        let grid = build_macro_grid::<f64>(1.0, 8).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let g = InitialDatum::GaussianBump {
            center: [0.0, 0.0],
            sigma: 0.3,
            amplitude: 0.8,
            support_radius: 0.9,
        };
        let (_, _, report) = solve_coupled(
            &geom,
            &coeffs,
            &lattice,
            &g.sample_on(&lattice),
            &FTilde::constant(0.0),
            0.05,
            &CoupledOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.sweeps, 1);
        assert!((report.iterates[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn boundedness_bound_holds_for_heat_decay() {
        let grid = build_macro_grid::<f64>(1.0, 16).unwrap();
        let lattice = MacroLattice::from_macro_grid(&grid);
        let tensors = identity_tensors();
        let g = InitialDatum::Disk {
            center: [0.0, 0.0],
            radius: 0.4,
            value: 1.0,
        };
        let field = g.sample_on(&lattice);
        let g_sup = field.iter().copied().fold(0.0, f64::max);
        let traj = sweep_interval(
            &lattice,
            field,
            &tensors,
            &FTilde::constant(0.0),
            0.0,
            0.1,
            0.02,
            &StepOptions::default(),
        )
        .unwrap();
        let rep = check_boundedness(&traj, g_sup, 0.0, 0.0, 1e-8);
        assert!(rep.ok);
    }
}
