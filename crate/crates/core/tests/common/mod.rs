#![allow(dead_code)]

use std::collections::BTreeSet;

use polemap::grid::{GridGeometry, OccupancyField, Ray};

/// Dense point march along the segment: every sample point's voxel is
/// collected. Samples are taken every `spacing / steps_per_spacing` and, so
/// that voxels clipped over less than one step are not skipped, also at the
/// midpoint between every pair of consecutive grid-plane crossings.
/// Returns (voxels passed before the endpoint voxel, endpoint voxel when
/// inside the grid).
pub fn point_march(
    geo: &GridGeometry<f64>,
    ray: &Ray<f64>,
    steps_per_spacing: f64,
) -> (BTreeSet<[usize; 3]>, Option<[usize; 3]>) {
    let d = ray.end - ray.start;
    let len = d.norm();
    let n = ((len / geo.spacing) * steps_per_spacing).ceil() as usize;
    let mut params: Vec<f64> = (0..=n).map(|s| s as f64 / n as f64).collect();
    let mut crossings = vec![0.0, 1.0];
    for axis in 0..3 {
        let (p0, dp, o) = (ray.start.get(axis), d.get(axis), geo.origin.get(axis));
        if dp == 0.0 {
            continue;
        }
        for plane in 0..=geo.dims[axis] {
            let t = (o + plane as f64 * geo.spacing - p0) / dp;
            if t > 0.0 && t < 1.0 {
                crossings.push(t);
            }
        }
    }
    crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
    params.extend(crossings.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut seen = BTreeSet::new();
    for t in params {
        let p = ray.start + d * t;
        if let Some(v) = geo.voxel_of(p) {
            seen.insert(v);
        }
    }
    let terminal = geo.voxel_of(ray.end);
    if let Some(t) = terminal {
        seen.remove(&t);
    }
    (seen, terminal)
}

pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Upper-tail mass of Beta(a, b) above `x0`, normalized by quadrature over
/// the whole unit interval.
pub fn beta_tail_quadrature(a: f64, b: f64, x0: f64) -> f64 {
    // scale by the density's mode value to keep magnitudes near 1
    let mode = if a > 1.0 && b > 1.0 { (a - 1.0) / (a + b - 2.0) } else { 0.5 };
    let log_peak = (a - 1.0) * mode.ln() + (b - 1.0) * (1.0 - mode).ln();
    let pdf = move |x: f64| {
        if x <= 0.0 || x >= 1.0 {
            return 0.0;
        }
        ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - log_peak).exp()
    };
    let total = adaptive_simpson(&pdf, 0.0, 1.0, 1e-13);
    adaptive_simpson(&pdf, x0, 1.0, 1e-13) / total
}

/// Pole score by exhaustive enumeration of alignments and hull cells.
pub fn brute_force_score(occ: &OccupancyField<f64>, a: usize, f: usize) -> Vec<f64> {
    let [nx, ny, nz] = occ.geometry.dims;
    let o = |x: usize, y: usize, z: usize| occ.values[(x * ny + y) * nz + z];
    let mut out = vec![0.0; occ.values.len()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let mut best = f64::NEG_INFINITY;
                for kx in (x as isize - a as isize + 1)..=(x as isize) {
                    for ky in (y as isize - a as isize + 1)..=(y as isize) {
                        let (lo_x, lo_y) = (kx - f as isize, ky - f as isize);
                        let (hi_x, hi_y) = (kx + (a + f) as isize, ky + (a + f) as isize);
                        if lo_x < 0 || lo_y < 0 || hi_x > nx as isize || hi_y > ny as isize {
                            continue;
                        }
                        let (kx, ky) = (kx as usize, ky as usize);
                        let mut sum = 0.0;
                        for dx in 0..a {
                            for dy in 0..a {
                                sum += o(kx + dx, ky + dy, z);
                            }
                        }
                        let mut hull = f64::NEG_INFINITY;
                        for hx in lo_x as usize..hi_x as usize {
                            for hy in lo_y as usize..hi_y as usize {
                                let inside = hx >= kx && hx < kx + a && hy >= ky && hy < ky + a;
                                if !inside {
                                    hull = hull.max(o(hx, hy, z));
                                }
                            }
                        }
                        best = best.max(sum / (a * a) as f64 - hull);
                    }
                }
                out[(x * ny + y) * nz + z] = if best == f64::NEG_INFINITY { -1.0 } else { best };
            }
        }
    }
    out
}
