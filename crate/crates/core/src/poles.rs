//! Pole detection on occupancy fields.
//!
//! A pole of width `a` (in voxels) is an `a x a` stack of occupied voxels
//! surrounded by a free hull of thickness `f`. Each horizontal slice is
//! scored per width, the widths are merged, tall contiguous stacks are
//! reduced to a ground-plane score map, and mean shift turns the score map
//! into continuous pole positions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::grid::{build_occupancy, estimate_prior, CountGrid, GridGeometry, OccupancyField, Ray, ReflectionPrior};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams<T> {
    /// Reflection-rate threshold above which a voxel counts as occupied.
    pub mu_o: T,
    /// Largest pole width tried, in voxels.
    pub a_max: usize,
    /// Free-hull thickness in voxels.
    pub hull: usize,
    pub q_min: T,
    /// Minimum stack height (m).
    pub h_min: T,
    /// Mean-shift kernel standard deviation (m).
    pub bandwidth: T,
    /// Fixed reflection prior as (mean, variance); `None` fits one per grid.
    pub prior: Option<(T, T)>,
}

impl<T: Real> Default for DetectorParams<T> {
    fn default() -> Self {
        Self {
            mu_o: T::of(0.2),
            a_max: 3,
            hull: 1,
            q_min: T::of(0.6),
            h_min: T::of(1.0),
            bandwidth: T::of(0.2),
            prior: None,
        }
    }
}

impl<T: Real> DetectorParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_o >= T::zero() && self.mu_o <= T::one()) {
            return Err(Error::param("grid.mu_o", "must lie in [0, 1]"));
        }
        if self.a_max == 0 {
            return Err(Error::param("detector.a_max", "must be at least 1"));
        }
        if self.hull == 0 {
            return Err(Error::param("detector.f", "must be at least 1"));
        }
        if !(self.q_min >= T::zero() && self.q_min < T::one()) {
            return Err(Error::param("detector.q_min", "must lie in [0, 1)"));
        }
        if !(self.h_min > T::zero()) {
            return Err(Error::param("detector.h_min", "must be positive"));
        }
        if !(self.bandwidth > T::zero()) {
            return Err(Error::param("detector.bandwidth", "must be positive"));
        }
        if let Some((mean, var)) = self.prior {
            ReflectionPrior::from_moments(mean, var).map_err(|e| Error::param("grid.prior", e.to_string()))?;
        }
        Ok(())
    }
}

/// Per-voxel pole scores for a single width.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume<T> {
    pub geometry: GridGeometry<T>,
    pub width: usize,
    pub values: Vec<T>,
}

/// Element-wise maximum over widths, with the width that attained it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedVolume<T> {
    pub geometry: GridGeometry<T>,
    pub values: Vec<T>,
    pub argmax: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stack<T> {
    pub score: T,
    /// First voxel layer of the stack.
    pub z_begin: usize,
    /// One past the last voxel layer.
    pub z_end: usize,
}

/// Ground-plane score map; `None` marks "no pole".
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    pub geometry: GridGeometry<T>,
    pub cells: Vec<Option<Stack<T>>>,
}

impl<T: Real> ScoreMap<T> {
    pub fn get(&self, i: usize, j: usize) -> Option<Stack<T>> {
        self.cells[i * self.geometry.dims[1] + j]
    }

    pub fn scored(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleDetection<T> {
    pub center: Vec2<T>,
    pub width: T,
    pub score: T,
}

/// NaN-oblivious maximum; vectorizes where `Float::max` does not.
#[inline(always)]
fn fmax<T: Real>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

/// `out(x, y) = max over [x, x+wx) x [y, y+wy)`, valid where the window fits.
///
/// Columns are contiguous along y within an x row, so every step is a
/// shifted elementwise operation over a whole row.
fn window_max<T: Real>(src: &[T], dims: [usize; 3], wx: usize, wy: usize) -> Vec<T> {
    let [nx, ny, nz] = dims;
    let row = ny * nz;
    let valid = (ny + 1 - wy) * nz;
    let mut along_y = vec![T::neg_infinity(); src.len()];
    along_y.par_chunks_mut(row).enumerate().for_each(|(x, out)| {
        let r = &src[x * row..(x + 1) * row];
        out[..valid].copy_from_slice(&r[..valid]);
        for dy in 1..wy {
            for (o, &v) in out[..valid].iter_mut().zip(&r[dy * nz..dy * nz + valid]) {
                *o = fmax(*o, v);
            }
        }
    });
    let mut out = vec![T::neg_infinity(); src.len()];
    out.par_chunks_mut(row).enumerate().for_each(|(x, o)| {
        if x + wx > nx {
            return;
        }
        o.copy_from_slice(&along_y[x * row..(x + 1) * row]);
        for dx in 1..wx {
            for (a, &v) in o.iter_mut().zip(&along_y[(x + dx) * row..(x + dx + 1) * row]) {
                *a = fmax(*a, v);
            }
        }
    });
    out
}

/// Scores every voxel as part of a pole of width `a` with free hull `f`.
///
/// For each footprint alignment (lower-left corner `k`) the alignment score
/// is the mean occupancy inside the `a x a` footprint minus the maximum
/// occupancy of the surrounding hull. A voxel takes the best score among
/// the alignments whose footprint contains it; alignments whose footprint
/// or hull leave the grid are skipped, and voxels without any valid
/// alignment score `-1`.
pub fn score_volume<T: Real>(occ: &OccupancyField<T>, a: usize, f: usize) -> Result<ScoreVolume<T>> {
    let geometry = occ.geometry;
    let [nx, ny, nz] = geometry.dims;
    if a == 0 || f == 0 {
        return Err(Error::param("a/f", "pole width and hull thickness must be at least 1"));
    }
    let span = a + 2 * f;
    if span > nx || span > ny {
        return Err(Error::param(
            "a/f",
            format!("footprint plus hull ({span} voxels) exceeds grid extent {nx}x{ny}"),
        ));
    }
    let src = &occ.values;
    let row = ny * nz;
    // horizontal strips below/above the footprint, vertical strips left/right
    let strip_h = window_max(src, geometry.dims, span, f);
    let strip_v = window_max(src, geometry.dims, f, a);

    let area = T::of_usize(a * a);
    // valid alignments along y: ky in [f, ny - a - f]
    let y0 = f * nz;
    let seg = (ny - span + 1) * nz;
    let mut align = vec![T::neg_infinity(); src.len()];
    align.par_chunks_mut(row).enumerate().for_each(|(kx, out_row)| {
        if kx < f || kx + a + f > nx {
            return;
        }
        let mut sum = vec![T::zero(); seg];
        for dx in 0..a {
            let r = &src[(kx + dx) * row..(kx + dx + 1) * row];
            for dy in 0..a {
                for (acc, &v) in sum.iter_mut().zip(&r[y0 + dy * nz..y0 + dy * nz + seg]) {
                    *acc += v;
                }
            }
        }
        let sh = &strip_h[(kx - f) * row..(kx - f + 1) * row];
        let below = &sh[0..seg];
        let above = &sh[(f + a) * nz..(f + a) * nz + seg];
        let left = &strip_v[(kx - f) * row + y0..(kx - f) * row + y0 + seg];
        let right = &strip_v[(kx + a) * row + y0..(kx + a) * row + y0 + seg];
        let out = &mut out_row[y0..y0 + seg];
        for i in 0..seg {
            let hull = fmax(fmax(below[i], above[i]), fmax(left[i], right[i]));
            out[i] = sum[i] / area - hull;
        }
    });

    let mut values = vec![T::neg_infinity(); src.len()];
    values.par_chunks_mut(row).enumerate().for_each(|(x, out)| {
        for kx in (x + 1).saturating_sub(a)..=x {
            let ar = &align[kx * row..(kx + 1) * row];
            for dy in 0..a.min(ny) {
                let shift = dy * nz;
                for (o, &g) in out[shift..].iter_mut().zip(&ar[..row - shift]) {
                    *o = fmax(*o, g);
                }
            }
        }
        for o in out.iter_mut() {
            if *o == T::neg_infinity() {
                *o = -T::one();
            }
        }
    });
    Ok(ScoreVolume {
        geometry,
        width: a,
        values,
    })
}

pub fn merge_volumes<T: Real>(volumes: &[ScoreVolume<T>]) -> Result<MergedVolume<T>> {
    let first = volumes.first().ok_or(Error::Empty("score volumes"))?;
    if volumes.iter().any(|v| v.geometry != first.geometry || v.values.len() != first.values.len()) {
        return Err(Error::GeometryMismatch);
    }
    let mut values = first.values.clone();
    let mut argmax = vec![first.width; values.len()];
    for vol in &volumes[1..] {
        for ((best, arg), &v) in values.iter_mut().zip(argmax.iter_mut()).zip(&vol.values) {
            if v > *best || (v == *best && vol.width < *arg) {
                *best = v;
                *arg = vol.width;
            }
        }
    }
    Ok(MergedVolume {
        geometry: first.geometry,
        values,
        argmax,
    })
}

/// Reduces each vertical column to the tallest contiguous run of voxels
/// scoring above `q_min` (lowest run on ties); runs shorter than `h_min`
/// yield no pole.
pub fn aggregate_columns<T: Real>(merged: &MergedVolume<T>, q_min: T, h_min: T) -> ScoreMap<T> {
    let geometry = merged.geometry;
    let nz = geometry.dims[2];
    let needed = ((h_min / geometry.spacing).f64() - 1e-9).ceil().max(1.0) as usize;
    let cells = merged
        .values
        .par_chunks(nz)
        .map(|col| {
            let mut best: Option<(usize, usize)> = None;
            let mut z = 0;
            while z < nz {
                if col[z] > q_min {
                    let begin = z;
                    while z < nz && col[z] > q_min {
                        z += 1;
                    }
                    if best.is_none_or(|(b, e)| z - begin > e - b) {
                        best = Some((begin, z));
                    }
                } else {
                    z += 1;
                }
            }
            let (z_begin, z_end) = best?;
            if z_end - z_begin < needed {
                return None;
            }
            let run = &col[z_begin..z_end];
            let score = run.iter().copied().sum::<T>() / T::of_usize(run.len());
            Some(Stack { score, z_begin, z_end })
        })
        .collect();
    ScoreMap { geometry, cells }
}

struct ScoredCell<T> {
    i: usize,
    j: usize,
    pos: Vec2<T>,
    stack: Stack<T>,
}

fn scored_cells<T: Real>(map: &ScoreMap<T>) -> Vec<ScoredCell<T>> {
    let ny = map.geometry.dims[1];
    map.cells
        .iter()
        .enumerate()
        .filter_map(|(idx, c)| {
            let stack = (*c)?;
            let (i, j) = (idx / ny, idx % ny);
            Some(ScoredCell {
                i,
                j,
                pos: map.geometry.cell_center(i, j),
                stack,
            })
        })
        .collect()
}

fn is_seed<T: Real>(map: &ScoreMap<T>, i: usize, j: usize, score: T) -> bool {
    let [nx, ny, _] = map.geometry.dims;
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            if di == 0 && dj == 0 {
                continue;
            }
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni as usize >= nx || nj as usize >= ny {
                continue;
            }
            if let Some(n) = map.get(ni as usize, nj as usize) {
                if n.score > score {
                    return false;
                }
            }
        }
    }
    true
}

/// Kernel-weighted score density at `x`.
pub fn score_density<T: Real>(map: &ScoreMap<T>, x: Vec2<T>, bandwidth: T) -> T {
    let k = -T::one() / (T::of(2.0) * bandwidth * bandwidth);
    scored_cells(map)
        .iter()
        .map(|c| c.stack.score * ((x - c.pos).norm_squared() * k).exp())
        .sum()
}

/// Runs Gaussian mean shift over the scored cells starting at `seed` and
/// returns the visited iterates (seed first).
pub fn mean_shift_path<T: Real>(map: &ScoreMap<T>, seed: Vec2<T>, bandwidth: T) -> Vec<Vec2<T>> {
    mean_shift(&scored_cells(map), seed, bandwidth, map.geometry.spacing)
}

fn mean_shift<T: Real>(cells: &[ScoredCell<T>], seed: Vec2<T>, bandwidth: T, spacing: T) -> Vec<Vec2<T>> {
    let k = -T::one() / (T::of(2.0) * bandwidth * bandwidth);
    let tol = T::of(1e-4) * spacing;
    let mut path = vec![seed];
    let mut x = seed;
    for _ in 0..100 {
        let mut num = Vec2::new(T::zero(), T::zero());
        let mut den = T::zero();
        for c in cells {
            let w = c.stack.score * ((x - c.pos).norm_squared() * k).exp();
            num = num + c.pos.scale(w);
            den += w;
        }
        if !(den > T::zero()) {
            break;
        }
        let next = num.scale(T::one() / den);
        let step = (next - x).norm();
        x = next;
        path.push(x);
        if step < tol {
            break;
        }
    }
    path
}

/// Converts a score map into pole detections.
///
/// Seeds are the cells whose score is not exceeded by any scored
/// 8-neighbor. Modes closer than one voxel are merged. The width is the
/// average of the candidate widths weighted by the mean `Q_a` score near the
/// pole, and the score is the mean stack score of the scored cells within
/// one voxel of the center.
pub fn find_poles<T: Real>(
    map: &ScoreMap<T>,
    volumes: &[ScoreVolume<T>],
    bandwidth: T,
) -> Result<Vec<PoleDetection<T>>> {
    if !(bandwidth > T::zero()) {
        return Err(Error::param("detector.bandwidth", "must be positive"));
    }
    let geometry = map.geometry;
    let spacing = geometry.spacing;
    let cells = scored_cells(map);
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    let seeds: Vec<&ScoredCell<T>> = cells
        .iter()
        .filter(|c| is_seed(map, c.i, c.j, c.stack.score))
        .collect();
    let modes: Vec<(Vec2<T>, T)> = seeds
        .par_iter()
        .map(|s| {
            let path = mean_shift(&cells, s.pos, bandwidth, spacing);
            (*path.last().unwrap(), s.stack.score)
        })
        .collect();

    // greedy merge in seed order: (weighted center sum, weight, center)
    let mut clusters: Vec<(Vec2<T>, T, Vec2<T>)> = Vec::new();
    for (m, w) in modes {
        match clusters.iter_mut().find(|c| c.2.distance(m) < spacing) {
            Some(c) => {
                c.0 = c.0 + m.scale(w);
                c.1 += w;
                c.2 = c.0.scale(T::one() / c.1);
            }
            None => clusters.push((m.scale(w), w, m)),
        }
    }

    let mut poles: Vec<PoleDetection<T>> = clusters
        .iter()
        .map(|&(_, _, center)| describe_pole(&cells, volumes, geometry, center))
        .collect();
    poles.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.center.x.partial_cmp(&b.center.x).unwrap())
            .then(a.center.y.partial_cmp(&b.center.y).unwrap())
    });
    Ok(poles)
}

fn describe_pole<T: Real>(
    cells: &[ScoredCell<T>],
    volumes: &[ScoreVolume<T>],
    geometry: GridGeometry<T>,
    center: Vec2<T>,
) -> PoleDetection<T> {
    let spacing = geometry.spacing;
    let tol = spacing * T::of(1.0 + 1e-9);
    let mut support: Vec<&ScoredCell<T>> = cells
        .iter()
        .filter(|c| (c.pos.x - center.x).abs() <= tol && (c.pos.y - center.y).abs() <= tol)
        .collect();
    if support.is_empty() {
        let nearest = cells
            .iter()
            .min_by(|a, b| {
                a.pos.distance(center).partial_cmp(&b.pos.distance(center)).unwrap()
            })
            .unwrap();
        support.push(nearest);
    }
    let score = support.iter().map(|c| c.stack.score).sum::<T>() / T::of_usize(support.len());
    let z_begin = support.iter().map(|c| c.stack.z_begin).min().unwrap();
    let z_end = support.iter().map(|c| c.stack.z_end).max().unwrap();

    let [nx, ny, nz] = geometry.dims;
    let mut num = T::zero();
    let mut den = T::zero();
    for vol in volumes {
        let half = T::of_usize(vol.width + 1) * spacing * T::of(0.5) * T::of(1.0 + 1e-9);
        let mut sum = T::zero();
        let mut n = 0usize;
        for i in 0..nx {
            let c = geometry.cell_center(i, 0);
            if (c.x - center.x).abs() > half {
                continue;
            }
            for j in 0..ny {
                let c = geometry.cell_center(i, j);
                if (c.y - center.y).abs() > half {
                    continue;
                }
                let base = (i * ny + j) * nz;
                for z in z_begin..z_end {
                    sum += vol.values[base + z];
                    n += 1;
                }
            }
        }
        if n > 0 {
            let w = (sum / T::of_usize(n)).max(T::zero());
            num += w * T::of_usize(vol.width) * spacing;
            den += w;
        }
    }
    let width = if den > T::zero() { num / den } else { spacing };
    PoleDetection { center, width, score }
}

/// Count grid to pole detections.
pub fn extract_from_counts<T: Real>(
    grid: &CountGrid<T>,
    params: &DetectorParams<T>,
) -> Result<Vec<PoleDetection<T>>> {
    params.validate()?;
    let prior = match params.prior {
        Some((mean, var)) => ReflectionPrior::from_moments(mean, var)?,
        None => estimate_prior(grid)?,
    };
    let occ = build_occupancy(grid, &prior, params.mu_o)?;
    let [nx, ny, _] = grid.geometry.dims;
    let widths: Vec<usize> = (1..=params.a_max)
        .filter(|&a| a + 2 * params.hull <= nx.min(ny))
        .collect();
    if widths.is_empty() {
        return Err(Error::param("a_max", "no pole width fits the grid"));
    }
    let volumes = widths
        .par_iter()
        .map(|&a| score_volume(&occ, a, params.hull))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_volumes(&volumes)?;
    let map = aggregate_columns(&merged, params.q_min, params.h_min);
    find_poles(&map, &volumes, params.bandwidth)
}

/// Traces `rays` into a fresh grid and extracts poles.
pub fn extract_poles<'a, T: Real>(
    rays: impl IntoIterator<Item = &'a Ray<T>>,
    geometry: GridGeometry<T>,
    params: &DetectorParams<T>,
) -> Result<Vec<PoleDetection<T>>> {
    let mut grid = CountGrid::new(geometry);
    grid.insert_rays(rays)?;
    extract_from_counts(&grid, params)
}
