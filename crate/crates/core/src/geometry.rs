//! Perforated unit cell and truncated macroscopic grids on structured meshes.
//!
//! The unit cell is the unit square with an optional grid-aligned rectangular
//! obstacle strictly inside it. Cells are unit-square/n sized; faces live on
//! grid lines. The cell is treated as a torus: the outer boundary face at
//! x = 0 and x = 1 is the same face object, which makes periodic unknowns
//! single-valued by construction.

use crate::scalar::{cast, cast_usize, Scalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("obstacle touches or crosses the outer boundary of the unit cell")]
    ObstacleTouchesOuterBoundary,
    #[error("every obstacle side is Dirichlet; the flux part of the obstacle boundary must have positive length")]
    EmptyGammaN,
    #[error("obstacle corner {coord} = {value} does not lie on a grid line of the n = {n} mesh")]
    NonGridAlignedObstacle { coord: &'static str, value: f64, n: usize },
    #[error("obstacle rectangle is degenerate (zero width or height)")]
    DegenerateObstacle,
    #[error("cell resolution n = {0} too coarse; need n >= 3")]
    ResolutionTooCoarse(usize),
    #[error("invalid macroscopic grid: need L > 0 and m >= 4 (got L = {l}, m = {m})")]
    InvalidResolution { l: f64, m: usize },
}

/// Axis-aligned rectangle in unit-cell coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

/// Which obstacle sides carry the Dirichlet condition; the rest are flux
/// (Neumann) sides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirichletSides {
    #[serde(default)]
    pub left: bool,
    #[serde(default)]
    pub right: bool,
    #[serde(default)]
    pub bottom: bool,
    #[serde(default)]
    pub top: bool,
}

impl DirichletSides {
    pub const NONE: Self = Self {
        left: false,
        right: false,
        bottom: false,
        top: false,
    };

    pub fn any(&self) -> bool {
        self.left || self.right || self.bottom || self.top
    }

    pub fn all(&self) -> bool {
        self.left && self.right && self.bottom && self.top
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaceTag {
    /// Both sides fluid, strictly inside the cell.
    Interior,
    /// Outer-boundary face; the two periodic copies are one face object.
    Periodic,
    /// Obstacle-boundary face with the Dirichlet condition.
    GammaD,
    /// Obstacle-boundary face with the flux condition.
    GammaN,
    /// Both sides solid (interior to the obstacle); carries no unknowns.
    Solid,
}

/// Obstacle cell-index ranges: cells `[i0, i1) x [j0, j1)` are solid.
#[derive(Clone, Copy, Debug)]
pub struct ObstacleCells {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

/// The perforated unit cell on an n-by-n structured grid.
#[derive(Clone, Debug)]
pub struct CellGeometry<T: Scalar> {
    n: usize,
    h: T,
    obstacle: Option<ObstacleCells>,
    dirichlet: DirichletSides,
    cell_fluid: Vec<bool>,
    fluid_index: Vec<Option<usize>>,
    fluid_cells: Vec<(usize, usize)>,
    x_face_tags: Vec<FaceTag>,
    y_face_tags: Vec<FaceTag>,
    fluid_area: T,
    gamma_d_length: T,
    gamma_n_length: T,
}

fn snap_to_grid(value: f64, n: usize, coord: &'static str) -> Result<usize, GeometryError> {
    let scaled = value * n as f64;
    let k = scaled.round();
    if (scaled - k).abs() > 1e-9 {
        return Err(GeometryError::NonGridAlignedObstacle { coord, value, n });
    }
    Ok(k as usize)
}

/// Build the perforated unit cell.
///
/// Obstacle corners must lie on grid lines (within 1e-9 of a grid line they
/// are snapped; otherwise the build is rejected) and the obstacle must keep
/// at least one cell of clearance from the outer boundary.
pub fn build_cell_geometry<T: Scalar>(
    n: usize,
    obstacle: Option<Rect>,
    dirichlet: DirichletSides,
) -> Result<CellGeometry<T>, GeometryError> {
    if n < 3 {
        return Err(GeometryError::ResolutionTooCoarse(n));
    }
    let obs = match obstacle {
        None => None,
        Some(r) => {
            let i0 = snap_to_grid(r.x0, n, "x0")?;
            let i1 = snap_to_grid(r.x1, n, "x1")?;
            let j0 = snap_to_grid(r.y0, n, "y0")?;
            let j1 = snap_to_grid(r.y1, n, "y1")?;
            if i1 <= i0 || j1 <= j0 {
                return Err(GeometryError::DegenerateObstacle);
            }
            if i0 < 1 || j0 < 1 || i1 > n - 1 || j1 > n - 1 {
                return Err(GeometryError::ObstacleTouchesOuterBoundary);
            }
            if dirichlet.all() {
                return Err(GeometryError::EmptyGammaN);
            }
            Some(ObstacleCells { i0, i1, j0, j1 })
        }
    };

    let mut cell_fluid = vec![true; n * n];
    if let Some(o) = obs {
        for j in o.j0..o.j1 {
            for i in o.i0..o.i1 {
                cell_fluid[j * n + i] = false;
            }
        }
    }
    let mut fluid_index = vec![None; n * n];
    let mut fluid_cells = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if cell_fluid[j * n + i] {
                fluid_index[j * n + i] = Some(fluid_cells.len());
                fluid_cells.push((i, j));
            }
        }
    }

    let mut x_face_tags = vec![FaceTag::Interior; n * n];
    let mut y_face_tags = vec![FaceTag::Interior; n * n];
    for j in 0..n {
        for i in 0..n {
            let west = cell_fluid[j * n + (i + n - 1) % n];
            let east = cell_fluid[j * n + i];
            x_face_tags[j * n + i] = match (west, east) {
                (true, true) => {
                    if i == 0 {
                        FaceTag::Periodic
                    } else {
                        FaceTag::Interior
                    }
                }
                (true, false) => {
                    // left side of the obstacle
                    if dirichlet.left {
                        FaceTag::GammaD
                    } else {
                        FaceTag::GammaN
                    }
                }
                (false, true) => {
                    if dirichlet.right {
                        FaceTag::GammaD
                    } else {
                        FaceTag::GammaN
                    }
                }
                (false, false) => FaceTag::Solid,
            };
            let south = cell_fluid[((j + n - 1) % n) * n + i];
            let north = cell_fluid[j * n + i];
            y_face_tags[j * n + i] = match (south, north) {
                (true, true) => {
                    if j == 0 {
                        FaceTag::Periodic
                    } else {
                        FaceTag::Interior
                    }
                }
                (true, false) => {
                    if dirichlet.bottom {
                        FaceTag::GammaD
                    } else {
                        FaceTag::GammaN
                    }
                }
                (false, true) => {
                    if dirichlet.top {
                        FaceTag::GammaD
                    } else {
                        FaceTag::GammaN
                    }
                }
                (false, false) => FaceTag::Solid,
            };
        }
    }

    let nf = n as f64;
    let (area, gd, gn) = match obs {
        None => (1.0, 0.0, 0.0),
        Some(o) => {
            let w = (o.i1 - o.i0) as f64 / nf;
            let hgt = (o.j1 - o.j0) as f64 / nf;
            let mut gd = 0.0;
            if dirichlet.left {
                gd += hgt;
            }
            if dirichlet.right {
                gd += hgt;
            }
            if dirichlet.bottom {
                gd += w;
            }
            if dirichlet.top {
                gd += w;
            }
            let perimeter = 2.0 * (w + hgt);
            (1.0 - w * hgt, gd, perimeter - gd)
        }
    };

    Ok(CellGeometry {
        n,
        h: T::one() / cast_usize(n),
        obstacle: obs,
        dirichlet,
        cell_fluid,
        fluid_index,
        fluid_cells,
        x_face_tags,
        y_face_tags,
        fluid_area: cast(area),
        gamma_d_length: cast(gd),
        gamma_n_length: cast(gn),
    })
}

impl<T: Scalar> CellGeometry<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn obstacle(&self) -> Option<ObstacleCells> {
        self.obstacle
    }

    /// Obstacle rectangle in unit-cell coordinates (snapped).
    pub fn obstacle_rect(&self) -> Option<Rect> {
        self.obstacle.map(|o| {
            let nf = self.n as f64;
            Rect {
                x0: o.i0 as f64 / nf,
                x1: o.i1 as f64 / nf,
                y0: o.j0 as f64 / nf,
                y1: o.j1 as f64 / nf,
            }
        })
    }

    pub fn dirichlet_sides(&self) -> DirichletSides {
        self.dirichlet
    }

    pub fn fluid_area(&self) -> T {
        self.fluid_area
    }

    pub fn gamma_d_length(&self) -> T {
        self.gamma_d_length
    }

    pub fn gamma_n_length(&self) -> T {
        self.gamma_n_length
    }

    pub fn has_dirichlet(&self) -> bool {
        self.obstacle.is_some() && self.dirichlet.any()
    }

    #[inline]
    pub fn cell_id(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    #[inline]
    pub fn is_fluid(&self, i: usize, j: usize) -> bool {
        self.cell_fluid[self.cell_id(i, j)]
    }

    #[inline]
    pub fn fluid_unknown(&self, i: usize, j: usize) -> Option<usize> {
        self.fluid_index[self.cell_id(i, j)]
    }

    pub fn fluid_cells(&self) -> &[(usize, usize)] {
        &self.fluid_cells
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid_cells.len()
    }

    /// Cell-center coordinates in unit-cell units.
    pub fn cell_center(&self, i: usize, j: usize) -> [T; 2] {
        let half = cast::<T>(0.5);
        [
            (cast_usize::<T>(i) + half) * self.h,
            (cast_usize::<T>(j) + half) * self.h,
        ]
    }

    #[inline]
    pub fn x_face_tag(&self, i: usize, j: usize) -> FaceTag {
        self.x_face_tags[j * self.n + i]
    }

    #[inline]
    pub fn y_face_tag(&self, i: usize, j: usize) -> FaceTag {
        self.y_face_tags[j * self.n + i]
    }

    /// Neighbor cell across the face in the given axis direction
    /// (`+1` east/north, `-1` west/south), with periodic wrap.
    #[inline]
    pub fn neighbor(&self, i: usize, j: usize, axis: usize, dir: isize) -> (usize, usize) {
        let n = self.n;
        let step = |v: usize| -> usize {
            if dir > 0 {
                (v + 1) % n
            } else {
                (v + n - 1) % n
            }
        };
        if axis == 0 {
            (step(i), j)
        } else {
            (i, step(j))
        }
    }

    /// Number of faces carrying each tag, `(interior, periodic, gamma_d, gamma_n, solid)`.
    pub fn face_tag_counts(&self) -> (usize, usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0, 0);
        for tag in self.x_face_tags.iter().chain(self.y_face_tags.iter()) {
            match tag {
                FaceTag::Interior => c.0 += 1,
                FaceTag::Periodic => c.1 += 1,
                FaceTag::GammaD => c.2 += 1,
                FaceTag::GammaN => c.3 += 1,
                FaceTag::Solid => c.4 += 1,
            }
        }
        c
    }

    /// Full-grid field from fluid unknowns, solid cells filled with `fill`
    /// (plotting/export helper).
    pub fn scatter_to_grid(&self, fluid_values: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.n * self.n];
        for (k, &(i, j)) in self.fluid_cells.iter().enumerate() {
            out[self.cell_id(i, j)] = fluid_values[k];
        }
        out
    }
}

/// Uniform square grid over the truncated domain `[-L, L]^2` with a
/// homogeneous Dirichlet wall.
#[derive(Clone, Debug)]
pub struct MacroGrid<T: Scalar> {
    pub l: T,
    pub m: usize,
    pub h: T,
}

pub fn build_macro_grid<T: Scalar>(l: T, m: usize) -> Result<MacroGrid<T>, GeometryError> {
    if l <= T::zero() || m < 4 {
        return Err(GeometryError::InvalidResolution {
            l: l.to_f64().unwrap_or(f64::NAN),
            m,
        });
    }
    let h = (l + l) / cast_usize(m);
    Ok(MacroGrid { l, m, h })
}

impl<T: Scalar> MacroGrid<T> {
    pub fn cell_count(&self) -> usize {
        self.m * self.m
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [T; 2] {
        let half = cast::<T>(0.5);
        [
            -self.l + (cast_usize::<T>(i) + half) * self.h,
            -self.l + (cast_usize::<T>(j) + half) * self.h,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const THIRD: f64 = 1.0 / 3.0;
    const TWO_THIRDS: f64 = 2.0 / 3.0;

    fn default_obstacle() -> Rect {
        Rect {
            x0: THIRD,
            x1: TWO_THIRDS,
            y0: THIRD,
            y1: TWO_THIRDS,
        }
    }

    #[test]
    fn coarse_cell_measures() {
        let g = build_cell_geometry::<f64>(3, Some(default_obstacle()), DirichletSides::NONE)
            .unwrap();
        assert!((g.fluid_area() - 8.0 / 9.0).abs() < 1e-15);
        assert!((g.gamma_n_length() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.gamma_d_length(), 0.0);
        assert_eq!(g.fluid_count(), 8);
    }

    #[test]
    fn left_dirichlet_split_measures() {
        let sides = DirichletSides {
            left: true,
            ..DirichletSides::NONE
        };
        let g = build_cell_geometry::<f64>(48, Some(default_obstacle()), sides).unwrap();
        assert!((g.gamma_d_length() - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.gamma_n_length() - 1.0).abs() < 1e-15);
        assert!(g.has_dirichlet());
    }

    #[test]
    fn non_aligned_obstacle_rejected() {
        let err =
            build_cell_geometry::<f64>(4, Some(default_obstacle()), DirichletSides::NONE)
                .unwrap_err();
        assert!(matches!(err, GeometryError::NonGridAlignedObstacle { .. }));
    }

    #[test]
    fn obstacle_must_stay_interior() {
        let r = Rect {
            x0: 0.0,
            x1: 0.5,
            y0: 0.25,
            y1: 0.5,
        };
        let err = build_cell_geometry::<f64>(4, Some(r), DirichletSides::NONE).unwrap_err();
        assert!(matches!(err, GeometryError::ObstacleTouchesOuterBoundary));
    }

    #[test]
    fn all_dirichlet_sides_rejected() {
        let sides = DirichletSides {
            left: true,
            right: true,
            bottom: true,
            top: true,
        };
        let err = build_cell_geometry::<f64>(3, Some(default_obstacle()), sides).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyGammaN));
    }

    #[test]
    fn area_partition_is_exact() {
        for n in [3usize, 6, 24, 96] {
            let g = build_cell_geometry::<f64>(n, Some(default_obstacle()), DirichletSides::NONE)
                .unwrap();
            let obstacle_area = 1.0 - g.fluid_area();
            assert!(
                (g.fluid_area() + obstacle_area - 1.0).abs() < 1e-15,
                "partition defect at n = {n}"
            );
            // Measures agree with face/cell counting.
            let h = 1.0 / n as f64;
            assert!((g.fluid_count() as f64 * h * h - g.fluid_area()).abs() < 1e-12);
        }
    }

    #[test]
    fn face_tags_partition_obstacle_boundary() {
        let n = 24;
        let g = build_cell_geometry::<f64>(n, Some(default_obstacle()), DirichletSides::NONE)
            .unwrap();
        let (_, periodic, gd, gn, _) = g.face_tag_counts();
        // Obstacle spans n/3 cells per side: 4 sides of n/3 faces each.
        assert_eq!(gn, 4 * n / 3);
        assert_eq!(gd, 0);
        // One periodic face per boundary row and column (torus seam).
        assert_eq!(periodic, 2 * n);
        let h = 1.0 / n as f64;
        assert!((gn as f64 * h - g.gamma_n_length()).abs() < 1e-12);
    }

    #[test]
    fn every_face_has_exactly_one_tag() {
        let n = 12;
        let g = build_cell_geometry::<f64>(n, Some(default_obstacle()), DirichletSides::NONE)
            .unwrap();
        let (interior, periodic, gd, gn, solid) = g.face_tag_counts();
        assert_eq!(interior + periodic + gd + gn + solid, 2 * n * n);
    }

    #[test]
    fn periodic_faces_sit_on_the_seams() {
        let n = 6;
        let g = build_cell_geometry::<f64>(n, Some(default_obstacle()), DirichletSides::NONE)
            .unwrap();
        for j in 0..n {
            assert_eq!(g.x_face_tag(0, j), FaceTag::Periodic);
        }
        for i in 0..n {
            assert_eq!(g.y_face_tag(i, 0), FaceTag::Periodic);
        }
        // The seam face is shared: stepping east from the last column lands
        // on column zero, so the unknown across the seam is single-valued.
        assert_eq!(g.neighbor(n - 1, 2, 0, 1), (0, 2));
        assert_eq!(g.neighbor(0, 2, 0, -1), (n - 1, 2));
    }

    #[test]
    fn empty_obstacle_is_all_fluid() {
        let g = build_cell_geometry::<f64>(8, None, DirichletSides::NONE).unwrap();
        assert_eq!(g.fluid_count(), 64);
        assert_eq!(g.fluid_area(), 1.0);
        assert_eq!(g.gamma_n_length(), 0.0);
        let (_, _, gd, gn, solid) = g.face_tag_counts();
        assert_eq!(gd + gn + solid, 0);
    }

    #[test]
    fn macro_grid_examples() {
        let g = build_macro_grid::<f64>(1.0, 4).unwrap();
        assert_eq!(g.h, 0.5);
        assert_eq!(g.cell_count(), 16);
        let g = build_macro_grid::<f64>(8.0, 256).unwrap();
        assert_eq!(g.h, 0.0625);
        assert!(matches!(
            build_macro_grid::<f64>(0.0, 10),
            Err(GeometryError::InvalidResolution { .. })
        ));
    }
}
