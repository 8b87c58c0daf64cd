//! Monte Carlo localization against a pole landmark map.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Pose2D, StampedPose, Vec2};
use crate::grid::{CountGrid, Scan};
use crate::mapping::{
    sliding_window_filter, LandmarkMap, LocalGridParams, LocalMapResult, TrajectorySegment,
};
use crate::poles::{extract_from_counts, DetectorParams};
use crate::rng::{counter_rng, normal_pair};
use crate::scalar::{wrap_angle, Real};

pub type Cov3<T> = [[T; 3]; 3];

/// Relative motion `chi = [x, y, phi]` in the body frame of the previous
/// pose, with its covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryIncrement<T> {
    pub chi: [T; 3],
    pub sigma: Cov3<T>,
}

impl<T: Real> OdometryIncrement<T> {
    pub fn new(chi: [T; 3], sigma: Cov3<T>) -> Result<Self> {
        psd_sqrt(&sigma)?;
        Ok(Self { chi, sigma })
    }

    pub fn noiseless(chi: [T; 3]) -> Self {
        Self {
            chi,
            sigma: [[T::zero(); 3]; 3],
        }
    }

    pub fn pose(&self) -> Pose2D<T> {
        Pose2D::new(self.chi[0], self.chi[1], self.chi[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryRecord<T> {
    /// End of the interval the increment covers.
    pub t: T,
    pub increment: OdometryIncrement<T>,
}

/// Factor `L` with `L Lᵀ = m` for a symmetric positive semidefinite `m`,
/// from its eigendecomposition (robust for singular and near-singular `m`).
pub fn psd_sqrt<T: Real>(m: &Cov3<T>) -> Result<Cov3<T>> {
    let scale = m.iter().flatten().map(|v| v.abs()).fold(T::zero(), T::max);
    let tol = T::of(1e-12) * scale.max(T::one());
    for i in 0..3 {
        for j in 0..i {
            if !((m[i][j] - m[j][i]).abs() <= tol) {
                return Err(Error::NotPositiveSemiDefinite);
            }
        }
    }
    let a = nalgebra::Matrix3::from_fn(|i, j| 0.5 * (m[i][j].f64() + m[j][i].f64()));
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NotPositiveSemiDefinite);
    }
    let eig = a.symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -tol.f64()) {
        return Err(Error::NotPositiveSemiDefinite);
    }
    let mut l = [[T::zero(); 3]; 3];
    for (i, row) in l.iter_mut().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = T::of(eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt());
        }
    }
    Ok(l)
}

/// How a sampled increment is applied to a particle pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Composition {
    /// `X · T(xi)`: the increment is expressed in the body frame.
    #[default]
    Body,
    /// `T(xi) · X`: the increment is applied in the map frame.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementParams<T> {
    /// Standard deviation of landmark positions (m).
    pub sigma: T,
    /// Constant added to every per-landmark likelihood.
    pub epsilon: T,
}

impl<T: Real> MeasurementParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > T::zero()) {
            return Err(Error::param("filter.sigma", "must be positive"));
        }
        if !(self.epsilon >= T::zero()) {
            return Err(Error::param("filter.epsilon", "must be non-negative"));
        }
        Ok(())
    }

    /// Likelihood of an online landmark lying `d` away from its match.
    pub fn likelihood(&self, d: T) -> T {
        let s = self.sigma;
        let norm = s * (T::PI() + T::PI()).sqrt();
        (-(d * d) / (T::of(2.0) * s * s)).exp() / norm + self.epsilon
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_MOTION: u64 = 1;
const STREAM_RESAMPLE: u64 = 2;

/// Weighted pose hypotheses. Randomness is drawn from counter streams keyed
/// by the seed and an update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<T> {
    pub poses: Vec<Pose2D<T>>,
    pub weights: Vec<T>,
    seed: u64,
    counter: u64,
}

/// Samples `n` particles area-uniformly in a disc of `radius` around
/// `center` with headings within `heading_range` of the center heading.
pub fn initialize<T: Real>(
    center: Pose2D<T>,
    radius: T,
    heading_range: T,
    n: usize,
    seed: u64,
) -> Result<ParticleSet<T>> {
    if n == 0 {
        return Err(Error::param("particles", "must be at least 1"));
    }
    if !(radius >= T::zero()) || !(heading_range >= T::zero()) {
        return Err(Error::param("init_radius", "radius and heading range must be non-negative"));
    }
    let poses = (0..n)
        .map(|i| {
            let mut rng = counter_rng(seed, STREAM_INIT, i as u64);
            let r = radius * T::of(rng.random::<f64>().sqrt());
            let theta = T::of(std::f64::consts::TAU * rng.random::<f64>());
            let dphi = heading_range * T::of(2.0 * rng.random::<f64>() - 1.0);
            Pose2D::new(
                center.x + r * theta.cos(),
                center.y + r * theta.sin(),
                center.phi + dphi,
            )
        })
        .collect();
    Ok(ParticleSet {
        poses,
        weights: vec![T::one() / T::of_usize(n); n],
        seed,
        counter: 0,
    })
}

/// `(Σ w)² / Σ w²`, which is `1 / Σ w²` for normalized weights.
pub fn effective_sample_size<T: Real>(weights: &[T]) -> Result<T> {
    let s: T = weights.iter().copied().sum();
    if !(s > T::zero()) || !s.is_finite() {
        return Err(Error::Empty("particle weights"));
    }
    let s2: T = weights.iter().map(|&w| (w / s) * (w / s)).sum();
    Ok(T::one() / s2)
}

/// Systematic resampling with pointers `(u + m) / N`, `u ∈ [0, 1)`.
/// Returns the selected input index for every output slot.
pub fn systematic_indices<T: Real>(weights: &[T], u: T) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let mut s = T::zero();
    let mut carry = T::zero();
    for &w in weights {
        let y = w - carry;
        let t = s + y;
        carry = (t - s) - y;
        s = t;
    }
    let scale = T::of_usize(n) / s;
    // boundaries within accumulated rounding of an integer are snapped to it,
    // so equal weights map to exact integer boundaries for every u
    let slack = T::of_usize(64 * n) * T::epsilon();
    let snap = |c: T| if (c - c.round()).abs() <= slack { c.round() } else { c };
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    // compensated running sum keeps the drift near n * epsilon
    let mut acc = weights[0] * scale;
    carry = T::zero();
    let mut c = snap(acc);
    for m in 0..n {
        let p = u + T::of_usize(m);
        while p >= c && i + 1 < n {
            i += 1;
            let y = weights[i] * scale - carry;
            let t = acc + y;
            carry = (t - acc) - y;
            acc = t;
            c = snap(acc);
        }
        out.push(i);
    }
    out
}

impl<T: Real> ParticleSet<T> {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn next_counter(&mut self) -> u64 {
        self.counter += 1;
        self.counter
    }

    /// Moves every particle by an increment drawn from
    /// `N(chi, inflation · sigma)`.
    pub fn motion_update(
        &mut self,
        odo: &OdometryIncrement<T>,
        inflation: T,
        composition: Composition,
    ) -> Result<()> {
        if !(inflation >= T::zero()) {
            return Err(Error::param("inflation", "must be non-negative"));
        }
        let mut cov = odo.sigma;
        for row in &mut cov {
            for v in row.iter_mut() {
                *v *= inflation;
            }
        }
        let l = psd_sqrt(&cov)?;
        let stream = STREAM_MOTION + (self.next_counter() << 2);
        let seed = self.seed;
        let noiseless = l.iter().flatten().all(|v| *v == T::zero());
        self.poses.par_iter_mut().enumerate().for_each(|(i, pose)| {
            let xi = if noiseless {
                odo.chi
            } else {
                let mut rng = counter_rng(seed, stream, i as u64);
                let (a, b) = normal_pair(&mut rng);
                let (c, _) = normal_pair(&mut rng);
                let z = [T::of(a), T::of(b), T::of(c)];
                let mut xi = odo.chi;
                for r in 0..3 {
                    for k in 0..3 {
                        xi[r] += l[r][k] * z[k];
                    }
                }
                xi
            };
            let step = Pose2D::new(xi[0], xi[1], xi[2]);
            *pose = match composition {
                Composition::Body => pose.compose(&step),
                Composition::Map => step.compose(pose),
            };
        });
        Ok(())
    }

    /// Reweights particles by the likelihood of the online landmarks (body
    /// frame) given their nearest map landmarks, then renormalizes.
    pub fn measurement_update(
        &mut self,
        online: &[Vec2<T>],
        map: &LandmarkMap<T>,
        params: &MeasurementParams<T>,
    ) -> Result<()> {
        params.validate()?;
        if online.is_empty() {
            return Ok(());
        }
        if map.is_empty() {
            return Err(Error::Empty("reference map"));
        }
        let log_lik: Vec<T> = self
            .poses
            .par_iter()
            .map(|pose| {
                online
                    .iter()
                    .map(|&p| {
                        let q = pose.transform_point(p);
                        let (_, d) = map.nearest(q).expect("non-empty map");
                        params.likelihood(d).ln()
                    })
                    .sum()
            })
            .collect();
        let best = log_lik.iter().copied().fold(T::neg_infinity(), T::max);
        if !best.is_finite() {
            return Err(Error::param("epsilon", "every particle has zero likelihood"));
        }
        for (w, ll) in self.weights.iter_mut().zip(&log_lik) {
            *w *= (*ll - best).exp();
        }
        self.normalize()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let s: T = self.weights.iter().copied().sum();
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::Empty("particle weights"));
        }
        for w in &mut self.weights {
            *w /= s;
        }
        Ok(())
    }

    pub fn effective_sample_size(&self) -> Result<T> {
        effective_sample_size(&self.weights)
    }

    /// Low-variance resampling; afterwards all weights equal `1 / N`.
    pub fn low_variance_resample(&mut self) {
        let n = self.len();
        if n == 0 {
            return;
        }
        let stream = STREAM_RESAMPLE + (self.next_counter() << 2);
        let u = T::of(counter_rng(self.seed, stream, 0).random::<f64>());
        let picks = systematic_indices(&self.weights, u);
        self.poses = picks.iter().map(|&i| self.poses[i]).collect();
        self.weights = vec![T::one() / T::of_usize(n); n];
    }

    /// Weighted mean of the `ceil(top_fraction · N)` heaviest particles,
    /// with a circular mean for the heading.
    pub fn pose_estimate(&self, top_fraction: T) -> Pose2D<T> {
        let n = self.len();
        let k = ((top_fraction * T::of_usize(n)).f64() - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let cmp = |a: &usize, b: &usize| {
            self.weights[*b]
                .partial_cmp(&self.weights[*a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        };
        if k < n {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_unstable();
        let (mut sw, mut sx, mut sy, mut sc, mut ss) = (T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
        for &i in &order {
            let (w, p) = (self.weights[i], self.poses[i]);
            sw += w;
            sx += w * p.x;
            sy += w * p.y;
            sc += w * p.phi.cos();
            ss += w * p.phi.sin();
        }
        if !(sw > T::zero()) {
            // degenerate weights: fall back to an unweighted mean
            let m = T::of_usize(order.len());
            sx = order.iter().map(|&i| self.poses[i].x).sum::<T>() / m;
            sy = order.iter().map(|&i| self.poses[i].y).sum::<T>() / m;
            sc = order.iter().map(|&i| self.poses[i].phi.cos()).sum();
            ss = order.iter().map(|&i| self.poses[i].phi.sin()).sum();
            return Pose2D::new(sx, sy, ss.atan2(sc));
        }
        Pose2D::new(sx / sw, sy / sw, wrap_angle(ss.atan2(sc)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams<T> {
    pub particles: usize,
    pub measurement: MeasurementParams<T>,
    /// Factor applied to the odometry covariance before sampling.
    pub inflation: T,
    /// Resample when `n_eff / N` drops below this.
    pub resample_ratio: T,
    pub top_fraction: T,
    pub init_radius: T,
    /// Half-width of the initial heading interval (rad).
    pub init_heading_range: T,
    pub composition: Composition,
}

impl<T: Real> Default for FilterParams<T> {
    fn default() -> Self {
        Self {
            particles: 5000,
            measurement: MeasurementParams {
                sigma: T::one(),
                epsilon: T::of(0.1),
            },
            inflation: T::of(4.0),
            resample_ratio: T::of(0.5),
            top_fraction: T::of(0.1),
            init_radius: T::of(2.5),
            init_heading_range: T::of(5f64.to_radians()),
            composition: Composition::Body,
        }
    }
}

impl<T: Real> FilterParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::param("filter.particles", "must be at least 1"));
        }
        self.measurement.validate()?;
        if !(self.inflation >= T::one()) {
            return Err(Error::param("filter.inflation", "must be at least 1"));
        }
        if !(self.resample_ratio >= T::zero() && self.resample_ratio <= T::one()) {
            return Err(Error::param("filter.resample_ratio", "must lie in [0, 1]"));
        }
        if !(self.top_fraction > T::zero() && self.top_fraction <= T::one()) {
            return Err(Error::param("filter.top_fraction", "must lie in (0, 1]"));
        }
        if !(self.init_radius >= T::zero() && self.init_heading_range >= T::zero()) {
            return Err(Error::param("filter.init_radius", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationParams<T> {
    pub filter: FilterParams<T>,
    pub detector: DetectorParams<T>,
    pub grid: LocalGridParams<T>,
    /// Arc length of odometry between measurement updates (m).
    pub segment_length: T,
    pub window_c: usize,
    pub window_w: usize,
    pub seed: u64,
}

impl<T: Real> Default for LocalizationParams<T> {
    fn default() -> Self {
        Self {
            filter: FilterParams::default(),
            detector: DetectorParams::default(),
            grid: LocalGridParams::default(),
            segment_length: T::of(1.5),
            window_c: 2,
            window_w: 3,
            seed: 0,
        }
    }
}

/// Tracks the vehicle through `odometry`, correcting with poles extracted
/// from `scans` (registered in the odometry frame, which coincides with the
/// vehicle frame at `initial.t`). Returns one estimate per odometry record,
/// preceded by the estimate at `initial.t`.
pub fn localize_run<T: Real, I>(
    map: &LandmarkMap<T>,
    initial: StampedPose<T>,
    odometry: &[OdometryRecord<T>],
    scans: I,
    params: &LocalizationParams<T>,
) -> Result<Vec<StampedPose<T>>>
where
    I: IntoIterator<Item = Scan<T>>,
{
    let fp = &params.filter;
    fp.validate()?;
    params.detector.validate()?;
    if !(params.segment_length > T::zero()) {
        return Err(Error::param("segment_length", "must be positive"));
    }
    if params.window_c == 0 || params.window_c > params.window_w {
        return Err(Error::param("localization.c", "need 1 <= c <= w"));
    }
    let mut ps = initialize(initial.pose, fp.init_radius, fp.init_heading_range, fp.particles, params.seed)?;
    let mut scans = scans.into_iter().peekable();
    let mut out = Vec::with_capacity(odometry.len() + 1);
    out.push(StampedPose::new(initial.t, ps.pose_estimate(fp.top_fraction)));

    let mut odom = StampedPose::new(initial.t, Pose2D::identity());
    let mut segment = vec![odom];
    let mut arc = T::zero();
    let mut buffered: Vec<Scan<T>> = Vec::new();
    let mut history: Vec<LocalMapResult<T>> = Vec::new();
    let close_at = params.segment_length * T::of(1.0 - 1e-9);

    for rec in odometry {
        ps.motion_update(&rec.increment, fp.inflation, fp.composition)?;
        let step = rec.increment.pose();
        odom = StampedPose::new(rec.t, odom.pose.compose(&step));
        arc += step.translation().norm();
        segment.push(odom);
        while let Some(s) = scans.next_if(|s| s.time <= rec.t) {
            buffered.push(s);
        }
        if arc >= close_at {
            let mid = TrajectorySegment {
                id: history.len(),
                poses: std::mem::replace(&mut segment, vec![odom]),
                arc_length: arc,
                scans: 0..0,
            }
            .midpoint();
            arc = T::zero();
            let geometry = params.grid.geometry_at(mid.pose.translation())?;
            let mut grid = CountGrid::new(geometry);
            for s in buffered.drain(..) {
                grid.insert_rays(&s.rays)?;
            }
            let detections = match extract_from_counts(&grid, &params.detector) {
                Ok(d) => d,
                Err(Error::PriorUndefined(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            let footprint = grid.geometry.footprint();
            drop(grid);
            history.push(LocalMapResult {
                segment_id: history.len(),
                detections,
                footprint,
            });
            if history.len() > params.window_w {
                history.remove(0);
            }
            let accepted = sliding_window_filter(&history, params.window_c, params.window_w)?;
            let to_body = odom.pose.inverse();
            let online: Vec<Vec2<T>> = accepted.iter().map(|d| to_body.transform_point(d.center)).collect();
            ps.measurement_update(&online, map, &fp.measurement)?;
            if ps.effective_sample_size()? < fp.resample_ratio * T::of_usize(ps.len()) {
                ps.low_variance_resample();
            }
        }
        out.push(StampedPose::new(rec.t, ps.pose_estimate(fp.top_fraction)));
    }
    Ok(out)
}
