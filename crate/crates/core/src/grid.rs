//! Ray-traced 3-D count grids and Beta-posterior occupancy.

use crate::error::{Error, Result};
use crate::geometry::{Vec2, Vec3};
use crate::scalar::Real;
use crate::special::beta_reg;

/// One laser measurement from `start` to `end` in the map frame.
///
/// `hit` is false for max-range returns, where `end` is the point at maximum
/// range along the beam and carries no reflection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub start: Vec3<T>,
    pub end: Vec3<T>,
    pub hit: bool,
}

impl<T: Real> Ray<T> {
    pub fn new(start: Vec3<T>, end: Vec3<T>, hit: bool) -> Result<Self> {
        if start == end {
            return Err(Error::DegenerateRay);
        }
        Ok(Self { start, end, hit })
    }
}

/// Rays captured at one instant, registered in a common frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan<T> {
    pub time: T,
    pub rays: Vec<Ray<T>>,
}

/// Axis-aligned raster with isotropic spacing. Voxels are stored with `z`
/// varying fastest so that vertical columns are contiguous.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry<T> {
    pub origin: Vec3<T>,
    pub spacing: T,
    pub dims: [usize; 3],
}

impl<T: Real> GridGeometry<T> {
    pub fn new(origin: Vec3<T>, spacing: T, dims: [usize; 3]) -> Result<Self> {
        if !(spacing > T::zero()) || !spacing.is_finite() {
            return Err(Error::InvalidGeometry(format!("spacing must be positive, got {spacing}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dims must be positive, got {dims:?}")));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidGeometry("origin not finite".into()));
        }
        Ok(Self { origin, spacing, dims })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unlinear(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let col = idx / self.dims[2];
        [col / self.dims[1], col % self.dims[1], k]
    }

    pub fn contains(&self, idx: [isize; 3]) -> bool {
        (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.dims[a])
    }

    /// Continuous grid coordinates of a world point (voxel units).
    pub fn to_grid(&self, p: Vec3<T>) -> Vec3<T> {
        (p - self.origin).scale(T::one() / self.spacing)
    }

    pub fn voxel_of(&self, p: Vec3<T>) -> Option<[usize; 3]> {
        let g = self.to_grid(p);
        let idx = [
            g.x.floor().to_isize()?,
            g.y.floor().to_isize()?,
            g.z.floor().to_isize()?,
        ];
        self.contains(idx)
            .then(|| [idx[0] as usize, idx[1] as usize, idx[2] as usize])
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> Vec3<T> {
        let h = T::of(0.5);
        Vec3::new(
            self.origin.x + (T::of_usize(i) + h) * self.spacing,
            self.origin.y + (T::of_usize(j) + h) * self.spacing,
            self.origin.z + (T::of_usize(k) + h) * self.spacing,
        )
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Vec2<T> {
        self.voxel_center([i, j, 0]).xy()
    }

    /// Ground-plane footprint `(min, max)` corners.
    pub fn footprint(&self) -> (Vec2<T>, Vec2<T>) {
        let lo = self.origin.xy();
        let hi = Vec2::new(
            lo.x + T::of_usize(self.dims[0]) * self.spacing,
            lo.y + T::of_usize(self.dims[1]) * self.spacing,
        );
        (lo, hi)
    }

    /// Calls `visit(voxel, terminal)` for every voxel the segment passes
    /// through, in order. `terminal` is set only for the voxel containing
    /// `end`, and only when that voxel lies inside the grid. An endpoint on
    /// a voxel boundary belongs to the voxel entered last.
    pub fn traverse(&self, start: Vec3<T>, end: Vec3<T>, mut visit: impl FnMut([usize; 3], bool)) {
        self.traverse_linear(start, end, |j, terminal| visit(self.unlinear(j), terminal));
    }

    /// [`traverse`](Self::traverse) reporting linear voxel indices.
    pub fn traverse_linear(&self, start: Vec3<T>, end: Vec3<T>, mut visit: impl FnMut(usize, bool)) {
        let p = self.to_grid(start);
        let q = self.to_grid(end);
        let p = [p.x, p.y, p.z];
        let q = [q.x, q.y, q.z];
        let d = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        let dims = self.dims.map(T::of_usize);

        let mut t0 = T::zero();
        let mut t1 = T::one();
        for a in 0..3 {
            if d[a] == T::zero() {
                if p[a] < T::zero() || p[a] >= dims[a] {
                    return;
                }
            } else {
                let ta = -p[a] / d[a];
                let tb = (dims[a] - p[a]) / d[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 > t1 || (t0 == t1 && t1 < T::one()) {
            return;
        }

        let strides = [
            (self.dims[1] * self.dims[2]) as isize,
            self.dims[2] as isize,
            1isize,
        ];
        let mut lin = 0isize;
        // steps left along each axis before leaving the grid
        let mut left = [usize::MAX; 3];
        let mut step = [0isize; 3];
        let mut t_max = [T::infinity(); 3];
        let mut t_delta = [T::infinity(); 3];
        for a in 0..3 {
            let entry = p[a] + d[a] * t0;
            let hi = self.dims[a] as isize - 1;
            let mut i = entry.floor().to_isize().unwrap_or(0).clamp(0, hi);
            // entering through the upper face
            if t0 > T::zero() && d[a] < T::zero() && T::of(i as f64) == entry {
                i = (i - 1).max(0);
            }
            lin += i * strides[a];
            if d[a] > T::zero() {
                step[a] = strides[a];
                left[a] = (hi - i) as usize;
                t_max[a] = (T::of((i + 1) as f64) - p[a]) / d[a];
                t_delta[a] = T::one() / d[a];
            } else if d[a] < T::zero() {
                step[a] = -strides[a];
                left[a] = i as usize;
                t_max[a] = (T::of(i as f64) - p[a]) / d[a];
                t_delta[a] = -T::one() / d[a];
            }
        }

        let end_inside = (0..3).all(|a| q[a] >= T::zero() && q[a] < dims[a]);
        // per-axis state lives in locals so the loop keeps it in registers
        let [mut tx, mut ty, mut tz] = t_max;
        let [dx, dy, dz] = t_delta;
        let [sx, sy, sz] = step;
        let [mut lx, mut ly, mut lz] = left;
        loop {
            // smallest t_max, lower axis first on ties
            if tx <= ty && tx <= tz {
                if tx > t1 {
                    break;
                }
                visit(lin as usize, false);
                if lx == 0 {
                    return;
                }
                lx -= 1;
                lin += sx;
                tx += dx;
            } else if ty <= tz {
                if ty > t1 {
                    break;
                }
                visit(lin as usize, false);
                if ly == 0 {
                    return;
                }
                ly -= 1;
                lin += sy;
                ty += dy;
            } else {
                if tz > t1 {
                    break;
                }
                visit(lin as usize, false);
                if lz == 0 {
                    return;
                }
                lz -= 1;
                lin += sz;
                tz += dz;
            }
        }
        visit(lin as usize, end_inside);
    }
}

/// Per-voxel reflection (hit) and transmission (miss) counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountGrid<T> {
    pub geometry: GridGeometry<T>,
    pub hits: Vec<u32>,
    pub misses: Vec<u32>,
}

impl<T: Real> CountGrid<T> {
    pub fn new(geometry: GridGeometry<T>) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            hits: vec![0; n],
            misses: vec![0; n],
        }
    }

    /// Traces `ray` through the grid: every voxel passed before the endpoint
    /// voxel gains a miss; the endpoint voxel gains a hit for reflections
    /// and a miss for no-return beams.
    pub fn insert_ray(&mut self, ray: &Ray<T>) -> Result<()> {
        if ray.start == ray.end {
            return Err(Error::DegenerateRay);
        }
        let geometry = self.geometry;
        let (hits, misses) = (&mut self.hits, &mut self.misses);
        geometry.traverse_linear(ray.start, ray.end, |j, terminal| {
            if terminal && ray.hit {
                hits[j] = hits[j].saturating_add(1);
            } else {
                misses[j] = misses[j].saturating_add(1);
            }
        });
        Ok(())
    }

    pub fn insert_rays<'a>(&mut self, rays: impl IntoIterator<Item = &'a Ray<T>>) -> Result<()> {
        rays.into_iter().try_for_each(|r| self.insert_ray(r))
    }

    pub fn observed(&self) -> usize {
        self.hits
            .iter()
            .zip(&self.misses)
            .filter(|(&h, &m)| h + m > 0)
            .count()
    }
}

/// Beta prior over per-voxel reflection rates together with the moments of
/// the maximum-likelihood reflection map it was fitted to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectionPrior<T> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub delta: T,
}

impl<T: Real> ReflectionPrior<T> {
    /// Moment-matched Beta parameters for mean `gamma` and variance `delta`.
    pub fn from_moments(gamma: T, delta: T) -> Result<Self> {
        if !(gamma > T::zero() && gamma < T::one()) {
            return Err(Error::PriorUndefined(format!("mean {gamma} outside (0, 1)")));
        }
        if !(delta > T::zero()) {
            return Err(Error::PriorUndefined(format!("variance {delta} is not positive")));
        }
        if delta >= gamma * (T::one() - gamma) {
            return Err(Error::PriorUndefined(format!(
                "variance {delta} admits no Beta distribution with mean {gamma}"
            )));
        }
        let g2 = gamma * gamma;
        let alpha = -gamma * (g2 - gamma + delta) / delta;
        let beta = (gamma - delta + gamma * delta - T::of(2.0) * g2 + g2 * gamma) / delta;
        Ok(Self { alpha, beta, gamma, delta })
    }

    /// Mean of `Beta(alpha, beta)`.
    pub fn mean(&self) -> T {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> T {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + T::one()))
    }
}

/// Fits the reflection prior to the maximum-likelihood reflection rates of
/// all observed voxels.
pub fn estimate_prior<T: Real>(grid: &CountGrid<T>) -> Result<ReflectionPrior<T>> {
    let rates: Vec<T> = grid
        .hits
        .iter()
        .zip(&grid.misses)
        .filter(|(&h, &m)| h + m > 0)
        .map(|(&h, &m)| T::of(h as f64) / T::of(h as f64 + m as f64))
        .collect();
    if rates.len() < 2 {
        return Err(Error::PriorUndefined(format!(
            "{} observed voxels, need at least 2",
            rates.len()
        )));
    }
    let n = T::of_usize(rates.len());
    let gamma = rates.iter().copied().sum::<T>() / n;
    let delta = rates.iter().map(|&r| (r - gamma) * (r - gamma)).sum::<T>() / n;
    ReflectionPrior::from_moments(gamma, delta)
}

/// Probability that a voxel with `h` hits and `m` misses reflects with a
/// rate above `mu_o`.
pub fn occupancy<T: Real>(h: u32, m: u32, prior: &ReflectionPrior<T>, mu_o: T) -> T {
    let a = T::of(h as f64) + prior.alpha;
    let b = T::of(m as f64) + prior.beta;
    (T::one() - beta_reg(a, b, mu_o)).max(T::zero()).min(T::one())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyField<T> {
    pub geometry: GridGeometry<T>,
    pub values: Vec<T>,
}

impl<T: Real> OccupancyField<T> {
    pub fn get(&self, v: [usize; 3]) -> T {
        self.values[self.geometry.linear(v)]
    }
}

const MEMO: usize = 64;

pub fn build_occupancy<T: Real>(
    grid: &CountGrid<T>,
    prior: &ReflectionPrior<T>,
    mu_o: T,
) -> Result<OccupancyField<T>> {
    if !(mu_o >= T::zero() && mu_o <= T::one()) {
        return Err(Error::param("mu_o", format!("{mu_o} outside [0, 1]")));
    }
    // counts are small almost everywhere
    let mut memo: Vec<Option<T>> = vec![None; MEMO * MEMO];
    let values = grid
        .hits
        .iter()
        .zip(&grid.misses)
        .map(|(&h, &m)| {
            if (h as usize) < MEMO && (m as usize) < MEMO {
                *memo[h as usize * MEMO + m as usize]
                    .get_or_insert_with(|| occupancy(h, m, prior, mu_o))
            } else {
                occupancy(h, m, prior, mu_o)
            }
        })
        .collect();
    Ok(OccupancyField {
        geometry: grid.geometry,
        values,
    })
}
