//! Planar windows, point configurations, a bucket grid for fixed-radius
//! neighbor queries, and the square-cell partition driving the block
//! variance estimator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two points closer than this are treated as the same location.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

/// Relative slack used when checking that a length is an integer multiple
/// of a cell side.
const MULTIPLE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    #[inline]
    pub fn dist(&self, other: &Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Point {
        Point::new(self.x + dx, self.y + dy)
    }
}

/// Closed axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
///
/// Serializes as the array `[x_min, x_max, y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Window {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "window bounds must be finite, got [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::EmptyWindow(format!(
                "window [{x_min}, {x_max}] x [{y_min}, {y_max}] has no area"
            )));
        }
        Ok(Window {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    /// The square `[0, side]²`.
    pub fn square(side: f64) -> Result<Self> {
        Window::new(0.0, side, 0.0, side)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Closed-box membership.
    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// True when `other` lies inside `self`, allowing an absolute slack `tol`.
    pub fn contains_window(&self, other: &Window, tol: f64) -> bool {
        other.x_min >= self.x_min - tol
            && other.x_max <= self.x_max + tol
            && other.y_min >= self.y_min - tol
            && other.y_max <= self.y_max + tol
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Window {
        Window {
            x_min: self.x_min + dx,
            x_max: self.x_max + dx,
            y_min: self.y_min + dy,
            y_max: self.y_max + dy,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for Window {
    type Error = Error;

    fn try_from(a: [f64; 4]) -> Result<Self> {
        Window::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Window> for [f64; 4] {
    fn from(w: Window) -> Self {
        w.as_array()
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}, {}] x [{}, {}]",
            self.x_min, self.x_max, self.y_min, self.y_max
        )
    }
}

/// Grows each side of `w` by `r`.
///
/// This is the bounding box of the disk-Minkowski sum, so it contains every
/// location within distance `r` of `w`.
pub fn dilate(w: &Window, r: f64) -> Result<Window> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dilation radius must be a finite non-negative number, got {r}"
        )));
    }
    Window::new(w.x_min - r, w.x_max + r, w.y_min - r, w.y_max + r)
}

/// Shrinks each side of `w` by `r`.
pub fn erode(w: &Window, r: f64) -> Result<Window> {
    if !(r >= 0.0) || !r.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "erosion radius must be a finite non-negative number, got {r}"
        )));
    }
    let (x0, x1, y0, y1) = (w.x_min + r, w.x_max - r, w.y_min + r, w.y_max - r);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::EmptyWindow(format!(
            "eroding {w} by {r} leaves no area"
        )));
    }
    Window::new(x0, x1, y0, y1)
}

/// Number of whole cells of side `side` fitting into `length`.
fn whole_cells(length: f64, side: f64) -> usize {
    let k = length / side;
    (k + MULTIPLE_TOLERANCE * k.max(1.0)).floor() as usize
}

/// The largest window sharing `w`'s lower-left corner whose sides are integer
/// multiples of `cell_side`.
pub fn largest_admissible_subwindow(w: &Window, cell_side: f64) -> Result<Window> {
    if !(cell_side > 0.0) || !cell_side.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cell side must be positive, got {cell_side}"
        )));
    }
    let nx = whole_cells(w.width(), cell_side);
    let ny = whole_cells(w.height(), cell_side);
    if nx == 0 || ny == 0 {
        return Err(Error::EmptyWindow(format!(
            "{w} cannot hold a single cell of side {cell_side}"
        )));
    }
    Window::new(
        w.x_min,
        w.x_min + nx as f64 * cell_side,
        w.y_min,
        w.y_min + ny as f64 * cell_side,
    )
}

/// Estimation window for an observation window under minus sampling: erode by
/// the interaction range, then round the sides down to multiples of the cell
/// side.
pub fn estimation_window(observation: &Window, range: f64, cell_side: f64) -> Result<Window> {
    let eroded = erode(observation, range)?;
    largest_admissible_subwindow(&eroded, cell_side)
}

/// A finite, simple point pattern observed in a window.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    points: Vec<Point>,
    window: Window,
}

impl Configuration {
    /// Validates finiteness, window membership and simplicity.
    pub fn new(points: Vec<Point>, window: Window) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has a non-finite coordinate"
                )));
            }
            if !window.contains(p) {
                return Err(Error::InvalidArgument(format!(
                    "point {i} ({}, {}) lies outside the window {window}",
                    p.x, p.y
                )));
            }
        }
        // Sweep in x-order; only points within the tolerance in x can collide.
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x));
        let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
        for (k, &a) in order.iter().enumerate() {
            for &b in &order[k + 1..] {
                if points[b].x - points[a].x >= DUPLICATE_TOLERANCE {
                    break;
                }
                if points[a].dist2(&points[b]) < tol2 {
                    return Err(Error::InvalidArgument(format!(
                        "points {a} and {b} coincide at ({}, {})",
                        points[a].x, points[a].y
                    )));
                }
            }
        }
        Ok(Configuration { points, window })
    }

    pub fn empty(window: Window) -> Self {
        Configuration {
            points: Vec::new(),
            window,
        }
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(points: Vec<Point>, window: Window) -> Self {
        Configuration { points, window }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of points inside `w` (closed box).
    pub fn count_in(&self, w: &Window) -> usize {
        self.points.iter().filter(|p| w.contains(p)).count()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Configuration {
        Configuration {
            points: self.points.iter().map(|p| p.translate(dx, dy)).collect(),
            window: self.window.translate(dx, dy),
        }
    }
}

/// Uniform bucket grid over a bounding window.
///
/// Buckets store the point index alongside a copy of the coordinates so that
/// queries do not chase back into the configuration.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell_size: f64,
    origin: Point,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<(u32, Point)>>,
}

/// Upper bound on the number of buckets; larger requests coarsen the grid.
const MAX_BUCKETS: usize = 1 << 22;

impl SpatialGrid {
    /// An empty grid covering `bounds`.
    pub fn new(bounds: &Window, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid cell size must be positive, got {cell_size}"
            )));
        }
        let cell_size = cell_size.max((bounds.area() / MAX_BUCKETS as f64).sqrt());
        let nx = (bounds.width() / cell_size).floor() as usize + 1;
        let ny = (bounds.height() / cell_size).floor() as usize + 1;
        Ok(SpatialGrid {
            cell_size,
            origin: Point::new(bounds.x_min(), bounds.y_min()),
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        })
    }

    /// Grid over `cfg.window()` holding every point of `cfg`.
    pub fn build(cfg: &Configuration, cell_size: f64) -> Result<Self> {
        let mut grid = SpatialGrid::new(cfg.window(), cell_size)?;
        for (i, p) in cfg.points().iter().enumerate() {
            grid.insert(i, *p);
        }
        Ok(grid)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    #[inline]
    fn axis_cell(&self, v: f64, o: f64, n: usize) -> usize {
        let c = ((v - o) / self.cell_size).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(n - 1)
        }
    }

    #[inline]
    fn bucket_of(&self, p: &Point) -> usize {
        let i = self.axis_cell(p.x, self.origin.x, self.nx);
        let j = self.axis_cell(p.y, self.origin.y, self.ny);
        i * self.ny + j
    }

    pub fn insert(&mut self, index: usize, p: Point) {
        let b = self.bucket_of(&p);
        self.buckets[b].push((index as u32, p));
    }

    /// Removes the entry for `index` stored at location `p`. Returns false when
    /// no such entry exists.
    pub fn remove(&mut self, index: usize, p: &Point) -> bool {
        let b = self.bucket_of(p);
        let bucket = &mut self.buckets[b];
        match bucket.iter().position(|(i, _)| *i as usize == index) {
            Some(k) => {
                bucket.swap_remove(k);
                true
            }
            None => false,
        }
    }

    /// Renames the entry `from` (located at `p`) to `to`.
    pub fn relabel(&mut self, from: usize, to: usize, p: &Point) {
        let b = self.bucket_of(p);
        if let Some(e) = self.buckets[b].iter_mut().find(|(i, _)| *i as usize == from) {
            e.0 = to as u32;
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    /// Calls `f(index, point, squared_distance)` for every stored point with
    /// `‖point − center‖ ≤ r`, in a deterministic order.
    #[inline]
    pub fn for_each_within<F: FnMut(usize, &Point, f64)>(&self, center: &Point, r: f64, mut f: F) {
        let r2 = r * r;
        let lo_x = self.axis_cell(center.x - r, self.origin.x, self.nx);
        let hi_x = self.axis_cell(center.x + r, self.origin.x, self.nx);
        let lo_y = self.axis_cell(center.y - r, self.origin.y, self.ny);
        let hi_y = self.axis_cell(center.y + r, self.origin.y, self.ny);
        for i in lo_x..=hi_x {
            let row = i * self.ny;
            for bucket in &self.buckets[row + lo_y..=row + hi_y] {
                for (idx, p) in bucket {
                    let d2 = p.dist2(center);
                    if d2 <= r2 {
                        f(*idx as usize, p, d2);
                    }
                }
            }
        }
    }
}

/// Indices of the points of `cfg` within distance `r` (inclusive) of `center`.
///
/// With `exclude_self`, a point coinciding with `center` (within
/// [`DUPLICATE_TOLERANCE`]) is left out. The result is sorted.
pub fn neighbors_within(
    grid: &SpatialGrid,
    cfg: &Configuration,
    center: &Point,
    r: f64,
    exclude_self: bool,
) -> Vec<usize> {
    debug_assert_eq!(grid.len(), cfg.len());
    let tol2 = DUPLICATE_TOLERANCE * DUPLICATE_TOLERANCE;
    let mut out = Vec::new();
    grid.for_each_within(center, r.max(0.0), |i, _, d2| {
        if !(exclude_self && d2 < tol2) {
            out.push(i);
        }
    });
    out.sort_unstable();
    out
}

/// Tiling of an estimation window by squares of side `cell_side`.
///
/// Cell `(i, j)` is centered at `origin + cell_side·(i, j)`; indices run over
/// `0..nx × 0..ny` and are stored in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPartition {
    cell_side: f64,
    origin: Point,
    window: Window,
    nx: usize,
    ny: usize,
    index_set: Vec<(i64, i64)>,
}

/// Partitions `estimation_window` into square cells.
pub fn build_partition(estimation_window: &Window, cell_side: f64) -> Result<CellPartition> {
    if !(cell_side > 0.0) || !cell_side.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cell side must be positive, got {cell_side}"
        )));
    }
    let check = |length: f64| -> Option<usize> {
        let k = length / cell_side;
        let n = k.round();
        ((k - n).abs() <= MULTIPLE_TOLERANCE * k.max(1.0) && n >= 1.0).then_some(n as usize)
    };
    let (nx, ny) = match (check(estimation_window.width()), check(estimation_window.height())) {
        (Some(nx), Some(ny)) => (nx, ny),
        _ => {
            let hint = largest_admissible_subwindow(estimation_window, cell_side)
                .map(|w| format!("; largest admissible sub-window is {w}"))
                .unwrap_or_default();
            return Err(Error::InvalidArgument(format!(
                "window {estimation_window} sides are not integer multiples of the cell side {cell_side}{hint}"
            )));
        }
    };
    let index_set = (0..nx as i64)
        .flat_map(|i| (0..ny as i64).map(move |j| (i, j)))
        .collect();
    Ok(CellPartition {
        cell_side,
        origin: Point::new(
            estimation_window.x_min() + 0.5 * cell_side,
            estimation_window.y_min() + 0.5 * cell_side,
        ),
        window: *estimation_window,
        nx,
        ny,
        index_set,
    })
}

impl CellPartition {
    pub fn cell_side(&self) -> f64 {
        self.cell_side
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn index_set(&self) -> &[(i64, i64)] {
        &self.index_set
    }

    pub fn len(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_set.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Square of cell number `k` (position in [`Self::index_set`]).
    pub fn cell(&self, k: usize) -> Window {
        let (i, j) = self.index_set[k];
        let h = 0.5 * self.cell_side;
        let cx = self.origin.x + self.cell_side * i as f64;
        let cy = self.origin.y + self.cell_side * j as f64;
        Window::new(cx - h, cx + h, cy - h, cy + h).expect("cell side is positive")
    }

    fn axis_index(&self, v: f64, lo: f64, n: usize) -> usize {
        // Cells are (a, b]; a point on a shared edge goes to the lower index.
        let t = ((v - lo) / self.cell_side).ceil() - 1.0;
        if t <= 0.0 {
            0
        } else {
            (t as usize).min(n - 1)
        }
    }

    /// Position in [`Self::index_set`] of the cell holding `p`, or `None` when
    /// `p` is outside the partitioned window.
    pub fn cell_of(&self, p: &Point) -> Option<usize> {
        if !self.window.contains(p) {
            return None;
        }
        let i = self.axis_index(p.x, self.window.x_min(), self.nx);
        let j = self.axis_index(p.y, self.window.y_min(), self.ny);
        Some(i * self.ny + j)
    }

    /// Cells `j` with `|i − j|_∞ ≤ 1`, including `i` itself.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = self.index_set[k];
        let (nx, ny) = (self.nx as i64, self.ny as i64);
        (-1..=1).flat_map(move |di| {
            (-1..=1).filter_map(move |dj| {
                let (a, b) = (i + di, j + dj);
                (a >= 0 && a < nx && b >= 0 && b < ny).then_some((a * ny + b) as usize)
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Window {
        Window::square(1.0).unwrap()
    }

    #[test]
    fn dilate_examples() {
        assert_eq!(dilate(&unit(), 0.0).unwrap(), unit());
        assert_eq!(
            dilate(&unit(), 0.5).unwrap(),
            Window::new(-0.5, 1.5, -0.5, 1.5).unwrap()
        );
        let w = Window::new(0.0, 2.0, 0.0, 1.0).unwrap();
        assert_eq!(
            dilate(&w, 0.25).unwrap(),
            Window::new(-0.25, 2.25, -0.25, 1.25).unwrap()
        );
        assert!(matches!(dilate(&unit(), -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn erode_examples() {
        let w = Window::new(-0.5, 1.5, -0.5, 1.5).unwrap();
        assert_eq!(erode(&w, 0.5).unwrap(), unit());
        assert_eq!(erode(&unit(), 0.0).unwrap(), unit());
        assert!(matches!(erode(&unit(), 0.6), Err(Error::EmptyWindow(_))));
        assert!(matches!(erode(&unit(), -0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn degenerate_window_rejected() {
        assert!(matches!(Window::new(0.0, 0.0, 0.0, 1.0), Err(Error::EmptyWindow(_))));
        assert!(matches!(
            Window::new(0.0, f64::NAN, 0.0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn window_json_round_trip() {
        let w = Window::new(0.0, 8.0, -1.0, 2.5).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, "[0.0,8.0,-1.0,2.5]");
        assert_eq!(serde_json::from_str::<Window>(&s).unwrap(), w);
        assert!(serde_json::from_str::<Window>("[1,0,0,1]").is_err());
    }

    #[test]
    fn partition_examples() {
        let p = build_partition(&Window::square(2.0).unwrap(), 1.0).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.index_set(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let p = build_partition(&Window::square(3.0).unwrap(), 1.0).unwrap();
        assert_eq!(p.len(), 9);
        let err = build_partition(&Window::new(0.0, 2.5, 0.0, 2.0).unwrap(), 1.0).unwrap_err();
        match err {
            Error::InvalidArgument(msg) => assert!(msg.contains("[0, 2] x [0, 2]"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn partition_cells_tile_window() {
        let w = Window::new(-1.0, 2.0, 0.5, 2.0).unwrap();
        let p = build_partition(&w, 0.5).unwrap();
        assert_eq!(p.shape(), (6, 3));
        let total: f64 = (0..p.len()).map(|k| p.cell(k).area()).sum();
        assert!((total - w.area()).abs() <= 1e-12 * w.area());
        // cell centers sit at origin + side * index
        let c = p.cell(p.len() - 1);
        assert_eq!(c, Window::new(1.5, 2.0, 1.5, 2.0).unwrap());
        for k in 0..p.len() {
            let cell = p.cell(k);
            let mid = Point::new(
                0.5 * (cell.x_min() + cell.x_max()),
                0.5 * (cell.y_min() + cell.y_max()),
            );
            assert_eq!(p.cell_of(&mid), Some(k));
        }
    }

    #[test]
    fn partition_boundary_ties_go_to_smaller_index() {
        let p = build_partition(&Window::square(2.0).unwrap(), 1.0).unwrap();
        assert_eq!(p.cell_of(&Point::new(1.0, 0.5)), Some(0));
        assert_eq!(p.cell_of(&Point::new(1.0, 1.0)), Some(0));
        assert_eq!(p.cell_of(&Point::new(0.0, 0.0)), Some(0));
        assert_eq!(p.cell_of(&Point::new(2.0, 2.0)), Some(3));
        assert_eq!(p.cell_of(&Point::new(2.1, 0.5)), None);
    }

    #[test]
    fn partition_neighbors_use_uniform_norm() {
        let p = build_partition(&Window::square(3.0).unwrap(), 1.0).unwrap();
        let center = p.cell_of(&Point::new(1.5, 1.5)).unwrap();
        assert_eq!(p.neighbors(center).count(), 9);
        let corner = p.cell_of(&Point::new(0.5, 0.5)).unwrap();
        let mut n: Vec<_> = p.neighbors(corner).map(|k| p.index_set()[k]).collect();
        n.sort();
        assert_eq!(n, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn configuration_validation() {
        let w = unit();
        assert!(Configuration::new(vec![Point::new(0.5, 0.5), Point::new(1.0, 1.0)], w).is_ok());
        assert!(Configuration::new(vec![Point::new(1.5, 0.5)], w).is_err());
        assert!(Configuration::new(vec![Point::new(f64::NAN, 0.5)], w).is_err());
        let dup = Configuration::new(vec![Point::new(0.3, 0.3), Point::new(0.3, 0.3 + 1e-13)], w);
        assert!(matches!(dup, Err(Error::InvalidArgument(_))));
        assert!(Configuration::new(vec![Point::new(0.3, 0.3), Point::new(0.3, 0.3 + 1e-9)], w).is_ok());
    }

    #[test]
    fn neighbors_examples() {
        let w = Window::new(-1.0, 2.0, -1.0, 1.0).unwrap();
        let cfg = Configuration::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)], w).unwrap();
        let grid = SpatialGrid::build(&cfg, 0.5).unwrap();
        let o = Point::new(0.0, 0.0);
        assert!(neighbors_within(&grid, &cfg, &o, 0.5, true).is_empty());
        assert_eq!(neighbors_within(&grid, &cfg, &o, 1.0, true), vec![1]);
        assert_eq!(neighbors_within(&grid, &cfg, &o, 1.0, false), vec![0, 1]);
    }

    fn brute_force(cfg: &Configuration, c: &Point, r: f64) -> Vec<usize> {
        cfg.points()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.dist2(c) <= r * r)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn grid_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Window::new(0.0, 5.0, 0.0, 3.0).unwrap();
        for n in [0usize, 1, 100, 500] {
            let pts = (0..n)
                .map(|_| Point::new(rng.random_range(0.0..5.0), rng.random_range(0.0..3.0)))
                .collect();
            let cfg = Configuration::new(pts, w).unwrap();
            let grid = SpatialGrid::build(&cfg, 0.4).unwrap();
            for _ in 0..100 {
                let c = Point::new(rng.random_range(-1.0..6.0), rng.random_range(-1.0..4.0));
                let r = rng.random_range(0.0..1.2);
                assert_eq!(neighbors_within(&grid, &cfg, &c, r, false), brute_force(&cfg, &c, r));
            }
        }
    }

    #[test]
    fn grid_remove_and_relabel() {
        let w = unit();
        let mut grid = SpatialGrid::new(&w, 0.25).unwrap();
        let a = Point::new(0.1, 0.1);
        let b = Point::new(0.9, 0.9);
        grid.insert(0, a);
        grid.insert(1, b);
        assert!(grid.remove(0, &a));
        assert!(!grid.remove(0, &a));
        grid.relabel(1, 0, &b);
        let mut seen = vec![];
        grid.for_each_within(&b, 0.01, |i, _, _| seen.push(i));
        assert_eq!(seen, vec![0]);
        assert_eq!(grid.len(), 1);
    }

    proptest! {
        #[test]
        fn dilate_erode_inverse(
            x0 in -100.0f64..100.0, w in 0.01f64..50.0,
            y0 in -100.0f64..100.0, h in 0.01f64..50.0,
            r in 0.0f64..10.0,
        ) {
            let win = Window::new(x0, x0 + w, y0, y0 + h).unwrap();
            let back = erode(&dilate(&win, r).unwrap(), r).unwrap();
            // floating-point box arithmetic: (a - r) + r may differ from a by one ulp
            for (u, v) in back.as_array().iter().zip(win.as_array()) {
                prop_assert!((u - v).abs() <= 4.0 * f64::EPSILON * (v.abs() + r));
            }
        }

        #[test]
        fn dilate_erode_inverse_exact_for_dyadic(
            x0 in -64i32..64, w in 1i32..64, y0 in -64i32..64, h in 1i32..64, r in 0i32..64,
        ) {
            let s = 0.125;
            let win = Window::new(x0 as f64 * s, (x0 + w) as f64 * s, y0 as f64 * s, (y0 + h) as f64 * s).unwrap();
            let r = r as f64 * s;
            prop_assert_eq!(erode(&dilate(&win, r).unwrap(), r).unwrap(), win);
        }
    }
}
