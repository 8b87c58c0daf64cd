//! Synthetic worlds, a ray-cast multi-beam lidar and noisy odometry.
//!
//! Scans are cast lazily from a [`SimRun`] by index; all noise comes from
//! counter streams so any scan can be regenerated bit-identically.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{interpolate_pose, Pose2D, StampedPose, Vec2, Vec3};
use crate::grid::{Ray, Scan};
use crate::kdtree::KdTree;
use crate::localization::{OdometryIncrement, OdometryRecord};
use crate::rng::{counter_rng, normal_pair};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoleShape {
    /// Axis-aligned square prism.
    #[default]
    Square,
    /// Vertical cylinder with diameter `width`.
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleSpec<T> {
    pub center: Vec2<T>,
    pub width: T,
    pub height: T,
    pub shape: PoleShape,
}

/// Vertical rectangle of zero thickness standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wall<T> {
    pub a: Vec2<T>,
    pub b: Vec2<T>,
    pub height: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint<T> {
    pub t: T,
    pub position: Vec2<T>,
}

/// Box with a square footprint moving linearly between waypoints; it
/// exists only within its schedule's time span.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicObject<T> {
    pub width: T,
    pub height: T,
    pub schedule: Vec<Waypoint<T>>,
}

impl<T: Real> DynamicObject<T> {
    pub fn position_at(&self, t: T) -> Option<Vec2<T>> {
        let s = &self.schedule;
        let first = s.first()?;
        let last = s.last()?;
        if t < first.t || t > last.t {
            return None;
        }
        let k = s.partition_point(|w| w.t <= t);
        if k == s.len() {
            return Some(last.position);
        }
        let (a, b) = (s[k - 1], s[k]);
        let span = b.t - a.t;
        if span <= T::zero() {
            return Some(b.position);
        }
        let u = (t - a.t) / span;
        Some(a.position + (b.position - a.position) * u)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorldModel<T> {
    pub poles: Vec<PoleSpec<T>>,
    pub walls: Vec<Wall<T>>,
    pub dynamic: Vec<DynamicObject<T>>,
}

impl<T: Real> WorldModel<T> {
    pub fn validate(&self) -> Result<()> {
        for p in &self.poles {
            if !(p.width > T::zero() && p.height > T::zero()) || !p.center.x.is_finite() || !p.center.y.is_finite() {
                return Err(Error::InfeasibleWorld("pole with non-positive size".into()));
            }
        }
        for w in &self.walls {
            if !(w.height > T::zero()) || w.a == w.b {
                return Err(Error::InfeasibleWorld("degenerate wall".into()));
            }
        }
        for d in &self.dynamic {
            if !(d.width > T::zero() && d.height > T::zero()) || d.schedule.is_empty() {
                return Err(Error::InfeasibleWorld("degenerate dynamic object".into()));
            }
            if d.schedule.windows(2).any(|w| !(w[1].t >= w[0].t)) {
                return Err(Error::InfeasibleWorld("dynamic schedule not time-ordered".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel<T> {
    /// Beams per revolution and channel.
    pub azimuth_beams: usize,
    /// Channel elevation angles (rad).
    pub elevations: Vec<T>,
    pub max_range: T,
    /// Standard deviation of range noise (m).
    pub range_noise: T,
    /// Time between scans (s).
    pub period: T,
    /// Sensor origin in the vehicle frame (m).
    pub mount: Vec3<T>,
}

impl<T: Real> Default for SensorModel<T> {
    /// 64 channels from -24.8° to +2°, 0.4° azimuth step, 10 Hz.
    fn default() -> Self {
        Self::uniform(64, -24.8, 2.0, 900)
    }
}

impl<T: Real> SensorModel<T> {
    /// Channels evenly spaced between two elevations given in degrees.
    pub fn uniform(channels: usize, lowest_deg: f64, highest_deg: f64, azimuth_beams: usize) -> Self {
        let elevations = (0..channels)
            .map(|c| {
                let u = if channels > 1 { c as f64 / (channels - 1) as f64 } else { 0.5 };
                T::of((lowest_deg + u * (highest_deg - lowest_deg)).to_radians())
            })
            .collect();
        Self {
            azimuth_beams,
            elevations,
            max_range: T::of(40.0),
            range_noise: T::of(0.02),
            period: T::of(0.1),
            mount: Vec3::new(T::zero(), T::zero(), T::of(1.7)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth_beams == 0 || self.elevations.is_empty() {
            return Err(Error::param("sensor.beams", "need at least one beam and channel"));
        }
        if !(self.max_range > T::zero()) {
            return Err(Error::param("sensor.max_range", "must be positive"));
        }
        if !(self.range_noise >= T::zero()) {
            return Err(Error::param("sensor.range_noise", "must be non-negative"));
        }
        if !(self.period > T::zero()) {
            return Err(Error::param("sensor.period", "must be positive"));
        }
        Ok(())
    }

    pub fn beams(&self) -> usize {
        self.azimuth_beams * self.elevations.len()
    }
}

/// Distance along `dir` (unit) from `o` to the nearest hit, if any.
fn hit_box<T: Real>(o: Vec3<T>, dir: Vec3<T>, lo: Vec3<T>, hi: Vec3<T>) -> Option<T> {
    let mut t0 = T::neg_infinity();
    let mut t1 = T::infinity();
    for a in 0..3 {
        let (oa, da, l, h) = (o.get(a), dir.get(a), lo.get(a), hi.get(a));
        if da == T::zero() {
            if oa < l || oa > h {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((l - oa) / da, (h - oa) / da);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > T::zero()).then_some(t0)
}

fn hit_cylinder<T: Real>(o: Vec3<T>, dir: Vec3<T>, c: Vec2<T>, r: T, h: T) -> Option<T> {
    let mut best: Option<T> = None;
    let mut keep = |t: T| {
        if t > T::zero() && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (px, py) = (o.x - c.x, o.y - c.y);
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > T::zero() {
        let b = px * dir.x + py * dir.y;
        let cc = px * px + py * py - r * r;
        let disc = b * b - a * cc;
        if disc >= T::zero() {
            let t = (-b - disc.sqrt()) / a;
            let z = o.z + t * dir.z;
            if z >= T::zero() && z <= h {
                keep(t);
            }
        }
    }
    if dir.z != T::zero() {
        let t = (h - o.z) / dir.z;
        let (x, y) = (px + t * dir.x, py + t * dir.y);
        if x * x + y * y <= r * r {
            keep(t);
        }
    }
    best
}

fn hit_wall<T: Real>(o: Vec3<T>, dir: Vec3<T>, w: &Wall<T>) -> Option<T> {
    let e = w.b - w.a;
    let den = dir.x * e.y - dir.y * e.x;
    if den == T::zero() {
        return None;
    }
    let (qx, qy) = (w.a.x - o.x, w.a.y - o.y);
    let t = (qx * e.y - qy * e.x) / den;
    let s = (qx * dir.y - qy * dir.x) / den;
    let z = o.z + t * dir.z;
    (t > T::zero() && s >= T::zero() && s <= T::one() && z >= T::zero() && z <= w.height).then_some(t)
}

#[derive(Clone, Copy)]
enum Prim<T> {
    Box { lo: Vec3<T>, hi: Vec3<T> },
    Cylinder { c: Vec2<T>, r: T, h: T },
    Wall(Wall<T>),
}

impl<T: Real> Prim<T> {
    fn hit(&self, o: Vec3<T>, dir: Vec3<T>) -> Option<T> {
        match *self {
            Prim::Box { lo, hi } => hit_box(o, dir, lo, hi),
            Prim::Cylinder { c, r, h } => hit_cylinder(o, dir, c, r, h),
            Prim::Wall(ref w) => hit_wall(o, dir, w),
        }
    }

    /// Azimuth interval `(center, half_width)` seen from `o`, or `None`
    /// when the primitive may cover any azimuth.
    fn azimuth_span(&self, o: Vec2<T>) -> Option<(T, T)> {
        let (c, radius) = match *self {
            Prim::Box { lo, hi } => {
                let c = Vec2::new((lo.x + hi.x) * T::of(0.5), (lo.y + hi.y) * T::of(0.5));
                (c, (hi.xy() - lo.xy()).norm() * T::of(0.5))
            }
            Prim::Cylinder { c, r, .. } => (c, r),
            Prim::Wall(ref w) => ((w.a + w.b) * T::of(0.5), (w.b - w.a).norm() * T::of(0.5)),
        };
        let d = c - o;
        let dist = d.norm();
        if dist <= radius * T::of(1.01) {
            return None;
        }
        Some((d.y.atan2(d.x), (radius / dist).asin()))
    }

    fn within_range(&self, o: Vec2<T>, range: T) -> bool {
        match *self {
            Prim::Box { lo, hi } => {
                let dx = (lo.x - o.x).max(o.x - hi.x).max(T::zero());
                let dy = (lo.y - o.y).max(o.y - hi.y).max(T::zero());
                dx * dx + dy * dy <= range * range
            }
            Prim::Cylinder { c, r, .. } => c.distance(o) - r <= range,
            Prim::Wall(ref w) => {
                let e = w.b - w.a;
                let u = ((o - w.a).dot(e) / e.norm_squared()).max(T::zero()).min(T::one());
                (w.a + e * u).distance(o) <= range
            }
        }
    }
}

fn primitives<T: Real>(world: &WorldModel<T>, time: T) -> Vec<Prim<T>> {
    let half = T::of(0.5);
    let mut out: Vec<Prim<T>> = world
        .poles
        .iter()
        .map(|p| match p.shape {
            PoleShape::Square => Prim::Box {
                lo: Vec3::new(p.center.x - p.width * half, p.center.y - p.width * half, T::zero()),
                hi: Vec3::new(p.center.x + p.width * half, p.center.y + p.width * half, p.height),
            },
            PoleShape::Cylinder => Prim::Cylinder {
                c: p.center,
                r: p.width * half,
                h: p.height,
            },
        })
        .collect();
    out.extend(world.walls.iter().map(|w| Prim::Wall(*w)));
    out.extend(world.dynamic.iter().filter_map(|d| {
        let c = d.position_at(time)?;
        Some(Prim::Box {
            lo: Vec3::new(c.x - d.width * half, c.y - d.width * half, T::zero()),
            hi: Vec3::new(c.x + d.width * half, c.y + d.width * half, d.height),
        })
    }));
    out
}

/// Measured range and hit flag for every beam, channel-major within each
/// azimuth column: beam `a * channels + c`.
pub fn cast_ranges<T: Real>(
    world: &WorldModel<T>,
    sensor: &SensorModel<T>,
    pose: Pose2D<T>,
    time: T,
    seed: u64,
    stream: u64,
) -> Vec<(T, bool)> {
    let origin = pose.transform_point3(sensor.mount);
    let o2 = origin.xy();
    let prims: Vec<Prim<T>> = primitives(world, time)
        .into_iter()
        .filter(|p| p.within_range(o2, sensor.max_range))
        .collect();
    let spans: Vec<Option<(T, T)>> = prims.iter().map(|p| p.azimuth_span(o2)).collect();
    let n_az = sensor.azimuth_beams;
    let channels = sensor.elevations.len();
    let step = T::of(std::f64::consts::TAU / n_az as f64);
    (0..n_az)
        .into_par_iter()
        .flat_map_iter(|a| {
            let az = pose.phi + step * T::of_usize(a);
            let slack = step;
            let cands: Vec<&Prim<T>> = prims
                .iter()
                .zip(&spans)
                .filter(|(_, span)| match span {
                    None => true,
                    Some((c, hw)) => crate::scalar::wrap_angle(az - *c).abs() <= *hw + slack,
                })
                .map(|(p, _)| p)
                .collect();
            let (sa, ca) = az.sin_cos();
            (0..channels).map(move |c| {
                let el = sensor.elevations[c];
                let (se, ce) = el.sin_cos();
                let dir = Vec3::new(ce * ca, ce * sa, se);
                let mut best = sensor.max_range;
                let mut hit = false;
                if dir.z < T::zero() {
                    let t = -origin.z / dir.z;
                    if t < best {
                        best = t;
                        hit = true;
                    }
                }
                for p in cands.iter() {
                    if let Some(t) = p.hit(origin, dir) {
                        if t < best {
                            best = t;
                            hit = true;
                        }
                    }
                }
                if hit && sensor.range_noise > T::zero() {
                    let mut rng = counter_rng(seed, stream, (a * channels + c) as u64);
                    let (z, _) = normal_pair(&mut rng);
                    best = (best + sensor.range_noise * T::of(z)).max(T::of(1e-3));
                }
                (best, hit)
            })
        })
        .collect()
}

/// Unit beam directions in the vehicle frame, in [`cast_ranges`] order.
pub fn beam_directions<T: Real>(sensor: &SensorModel<T>) -> Vec<Vec3<T>> {
    let step = T::of(std::f64::consts::TAU / sensor.azimuth_beams as f64);
    (0..sensor.azimuth_beams)
        .flat_map(|a| {
            let (sa, ca) = (step * T::of_usize(a)).sin_cos();
            sensor.elevations.iter().map(move |&el| {
                let (se, ce) = el.sin_cos();
                Vec3::new(ce * ca, ce * sa, se)
            })
        })
        .collect()
}

/// Rays in the world frame for a sensor on a vehicle at `pose`.
pub fn cast_scan<T: Real>(
    world: &WorldModel<T>,
    sensor: &SensorModel<T>,
    pose: Pose2D<T>,
    time: T,
    seed: u64,
) -> Vec<Ray<T>> {
    let ranges = cast_ranges(world, sensor, pose, time, seed, STREAM_SCAN);
    register(sensor, &beam_directions(sensor), &ranges, pose)
}

fn register<T: Real>(sensor: &SensorModel<T>, dirs: &[Vec3<T>], ranges: &[(T, bool)], pose: Pose2D<T>) -> Vec<Ray<T>> {
    let start = pose.transform_point3(sensor.mount);
    let rot = Pose2D::new(T::zero(), T::zero(), pose.phi);
    dirs.iter()
        .zip(ranges)
        .map(|(d, &(r, hit))| Ray {
            start,
            end: start + rot.transform_point3(*d * r),
            hit,
        })
        .collect()
}

/// Odometry noise: per-axis standard deviations accrued per meter driven,
/// i.e. the covariance of a step of length `d` is `diag(s²) · d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryNoise<T> {
    pub x: T,
    pub y: T,
    /// rad
    pub phi: T,
}

impl<T: Real> Default for OdometryNoise<T> {
    fn default() -> Self {
        Self {
            x: T::of(0.02),
            y: T::of(0.02),
            phi: T::of(0.2f64.to_radians()),
        }
    }
}

impl<T: Real> OdometryNoise<T> {
    pub fn none() -> Self {
        Self {
            x: T::zero(),
            y: T::zero(),
            phi: T::zero(),
        }
    }

    pub fn covariance(&self, distance: T) -> [[T; 3]; 3] {
        let z = T::zero();
        [
            [self.x * self.x * distance, z, z],
            [z, self.y * self.y * distance, z],
            [z, z, self.phi * self.phi * distance],
        ]
    }
}

const STREAM_SCAN: u64 = 0x5ca2;
const STREAM_ODOM: u64 = 0x0d0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Registered with the true poses (map frame).
    Truth,
    /// Registered with integrated odometry; identity at the first scan.
    Odometry,
}

/// A simulated drive: one scan and one ground-truth pose per sensor period,
/// one odometry record between consecutive scans.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRun<T> {
    pub world: WorldModel<T>,
    pub sensor: SensorModel<T>,
    pub ground_truth: Vec<StampedPose<T>>,
    pub odometry: Vec<OdometryRecord<T>>,
    /// Integrated odometry, starting at the identity.
    pub odometry_poses: Vec<StampedPose<T>>,
    pub seed: u64,
}

/// Samples `trajectory` at the sensor period and draws noisy odometry.
pub fn simulate_run<T: Real>(
    world: &WorldModel<T>,
    sensor: &SensorModel<T>,
    trajectory: &[StampedPose<T>],
    noise: &OdometryNoise<T>,
    seed: u64,
) -> Result<SimRun<T>> {
    world.validate()?;
    sensor.validate()?;
    let (first, last) = match (trajectory.first(), trajectory.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(Error::Empty("trajectory")),
    };
    let mut ground_truth = Vec::new();
    let mut k = 0usize;
    loop {
        let t = first + sensor.period * T::of_usize(k);
        if t > last * (T::one() + T::epsilon()) + T::epsilon() {
            break;
        }
        let pose = interpolate_pose(trajectory, t.min(last)).expect("within span");
        ground_truth.push(StampedPose::new(t, pose));
        k += 1;
    }
    let mut odometry = Vec::with_capacity(ground_truth.len().saturating_sub(1));
    let mut odometry_poses = vec![StampedPose::new(first, Pose2D::identity())];
    for (i, w) in ground_truth.windows(2).enumerate() {
        let delta = w[0].pose.between(&w[1].pose);
        let d = delta.translation().norm();
        let sigma = noise.covariance(d);
        let mut rng = counter_rng(seed, STREAM_ODOM, i as u64);
        let (a, b) = normal_pair(&mut rng);
        let (c, _) = normal_pair(&mut rng);
        let chi = [
            delta.x + sigma[0][0].sqrt() * T::of(a),
            delta.y + sigma[1][1].sqrt() * T::of(b),
            delta.phi + sigma[2][2].sqrt() * T::of(c),
        ];
        let inc = OdometryIncrement { chi, sigma };
        let prev = odometry_poses.last().unwrap().pose;
        odometry_poses.push(StampedPose::new(w[1].t, prev.compose(&inc.pose())));
        odometry.push(OdometryRecord { t: w[1].t, increment: inc });
    }
    Ok(SimRun {
        world: world.clone(),
        sensor: sensor.clone(),
        ground_truth,
        odometry,
        odometry_poses,
        seed,
    })
}

impl<T: Real> SimRun<T> {
    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }

    pub fn scan_times(&self) -> Vec<T> {
        self.ground_truth.iter().map(|p| p.t).collect()
    }

    /// Casts scan `i` and registers it in `frame`.
    pub fn scan(&self, i: usize, frame: Frame) -> Scan<T> {
        self.scan_with(i, frame, &beam_directions(&self.sensor))
    }

    fn scan_with(&self, i: usize, frame: Frame, dirs: &[Vec3<T>]) -> Scan<T> {
        let truth = self.ground_truth[i];
        let stream = STREAM_SCAN + ((i as u64 + 1) << 16);
        let ranges = cast_ranges(&self.world, &self.sensor, truth.pose, truth.t, self.seed, stream);
        let pose = match frame {
            Frame::Truth => truth.pose,
            Frame::Odometry => self.odometry_poses[i].pose,
        };
        Scan {
            time: truth.t,
            rays: register(&self.sensor, dirs, &ranges, pose),
        }
    }

    /// Lazily cast scans in time order.
    pub fn scans(&self, frame: Frame) -> impl Iterator<Item = Scan<T>> + '_ {
        let dirs = beam_directions(&self.sensor);
        (0..self.len()).map(move |i| self.scan_with(i, frame, &dirs))
    }
}

/// Closed rectangle with rounded corners, as a dense polyline
/// (counter-clockwise, first point repeated at the end).
pub fn rounded_rectangle<T: Real>(center: Vec2<T>, width: T, height: T, radius: T, resolution: T) -> Vec<Vec2<T>> {
    let r = radius.min(width * T::of(0.5)).min(height * T::of(0.5));
    let (hx, hy) = (width * T::of(0.5) - r, height * T::of(0.5) - r);
    let corners = [(hx, -hy, -90.0), (hx, hy, 0.0), (-hx, hy, 90.0), (-hx, -hy, 180.0)];
    let mut pts = Vec::new();
    for (k, &(cx, cy, a0)) in corners.iter().enumerate() {
        // straight edge leading into this corner
        let prev = corners[(k + 3) % 4];
        let from = edge_point(center, prev.0, prev.1, r, prev.2 + 90.0);
        let to = edge_point(center, cx, cy, r, a0);
        push_line(&mut pts, from, to, resolution);
        let arc_steps = ((r * T::of(std::f64::consts::FRAC_PI_2) / resolution).ceil().f64() as usize).max(1);
        for s in 0..arc_steps {
            let a = a0 + 90.0 * s as f64 / arc_steps as f64;
            pts.push(edge_point(center, cx, cy, r, a));
        }
    }
    pts.push(pts[0]);
    pts
}

fn edge_point<T: Real>(c: Vec2<T>, cx: T, cy: T, r: T, deg: f64) -> Vec2<T> {
    let (s, co) = T::of(deg.to_radians()).sin_cos();
    Vec2::new(c.x + cx + r * co, c.y + cy + r * s)
}

fn push_line<T: Real>(pts: &mut Vec<Vec2<T>>, a: Vec2<T>, b: Vec2<T>, resolution: T) {
    let n = ((a.distance(b) / resolution).ceil().f64() as usize).max(1);
    for s in 0..n {
        pts.push(a + (b - a) * T::of(s as f64 / n as f64));
    }
}

/// Figure-eight (lemniscate of Gerono) of half-extent `a` along x and
/// `b` along y, as a closed dense polyline.
pub fn figure_eight<T: Real>(center: Vec2<T>, a: T, b: T, resolution: T) -> Vec<Vec2<T>> {
    let approx_len = (a + b) * T::of(4.0);
    let n = ((approx_len / resolution).ceil().f64() as usize).max(16);
    (0..=n)
        .map(|i| {
            let u = T::of(std::f64::consts::TAU * i as f64 / n as f64);
            Vec2::new(center.x + a * u.sin(), center.y + b * u.sin() * u.cos())
        })
        .collect()
}

pub fn polyline_length<T: Real>(pts: &[Vec2<T>]) -> T {
    pts.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Drives along `route` at constant `speed`, `laps` times, emitting a pose
/// every `dt` seconds. Headings follow the route tangent.
pub fn drive<T: Real>(route: &[Vec2<T>], laps: usize, speed: T, dt: T) -> Result<Vec<StampedPose<T>>> {
    if route.len() < 2 || laps == 0 {
        return Err(Error::Empty("route"));
    }
    if !(speed > T::zero() && dt > T::zero()) {
        return Err(Error::param("speed", "speed and time step must be positive"));
    }
    let mut cum = vec![T::zero()];
    for w in route.windows(2) {
        cum.push(*cum.last().unwrap() + w[0].distance(w[1]));
    }
    let lap = *cum.last().unwrap();
    if !(lap > T::zero()) {
        return Err(Error::Empty("route"));
    }
    let at = |s: T| -> Vec2<T> {
        let s = s.max(T::zero()).min(lap);
        let k = cum.partition_point(|&c| c <= s).clamp(1, cum.len() - 1);
        let (a, b) = (cum[k - 1], cum[k]);
        let u = if b > a { (s - a) / (b - a) } else { T::zero() };
        route[k - 1] + (route[k] - route[k - 1]) * u
    };
    let closed = route[0].distance(route[route.len() - 1]) < T::of(1e-9);
    let total = lap * T::of_usize(laps);
    let eps = T::of(0.05);
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let s = speed * dt * T::of_usize(i);
        if s > total + T::of(1e-9) {
            break;
        }
        let wrap = |x: T| if closed { x - (x / lap).floor() * lap } else { x.max(T::zero()).min(lap) };
        let p = at(wrap(s));
        let d = at(wrap(s + eps)) - at(wrap(s - eps));
        let d = if d.norm() > T::zero() { d } else { at(wrap(s + eps)) - p };
        out.push(StampedPose::new(dt * T::of_usize(i), Pose2D::new(p.x, p.y, d.y.atan2(d.x))));
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec<T> {
    /// Lower-left corner and size of the area poles are placed in.
    pub origin: Vec2<T>,
    pub extent: Vec2<T>,
    pub poles: usize,
    pub min_separation: T,
    pub width_range: (T, T),
    pub height_range: (T, T),
    pub shape: PoleShape,
    /// Poles keep at least this distance from `route`.
    pub route_clearance: T,
    /// ... and at most this one (street-side placement); infinite for none.
    pub route_band: T,
    pub route: Vec<Vec2<T>>,
    /// When set, every pole footprint lies inside a single cell of the
    /// raster with this spacing (anchored at the origin).
    pub raster: Option<T>,
    pub max_attempts: usize,
}

impl<T: Real> Default for WorldSpec<T> {
    fn default() -> Self {
        Self {
            origin: Vec2::new(T::of(-100.0), T::of(-100.0)),
            extent: Vec2::new(T::of(200.0), T::of(200.0)),
            poles: 40,
            min_separation: T::of(4.0),
            width_range: (T::of(0.2), T::of(0.4)),
            height_range: (T::of(3.0), T::of(6.0)),
            shape: PoleShape::Square,
            route_clearance: T::of(2.0),
            route_band: T::infinity(),
            route: Vec::new(),
            raster: None,
            max_attempts: 100_000,
        }
    }
}

const STREAM_WORLD: u64 = 0x3071d;

/// Places poles uniformly at random, rejecting candidates too close to an
/// existing pole or to the route.
pub fn generate_world<T: Real>(spec: &WorldSpec<T>, seed: u64) -> Result<WorldModel<T>> {
    if !(spec.extent.x > T::zero() && spec.extent.y > T::zero()) {
        return Err(Error::param("world.extent", "must be positive"));
    }
    let route = KdTree::new(densify(&spec.route, T::of(0.1)));
    let mut rng = counter_rng(seed, STREAM_WORLD, 0);
    let mut uniform = |lo: T, hi: T| lo + (hi - lo) * T::of(rng.random::<f64>());
    let mut poles: Vec<PoleSpec<T>> = Vec::with_capacity(spec.poles);
    let mut attempts = 0;
    while poles.len() < spec.poles {
        attempts += 1;
        if attempts > spec.max_attempts {
            return Err(Error::InfeasibleWorld(format!(
                "placed {} of {} poles after {} attempts",
                poles.len(),
                spec.poles,
                spec.max_attempts
            )));
        }
        let mut c = Vec2::new(
            uniform(spec.origin.x, spec.origin.x + spec.extent.x),
            uniform(spec.origin.y, spec.origin.y + spec.extent.y),
        );
        let width = uniform(spec.width_range.0, spec.width_range.1);
        let height = uniform(spec.height_range.0, spec.height_range.1);
        if let Some(s) = spec.raster {
            if width >= s {
                return Err(Error::InfeasibleWorld("pole wider than the raster cell".into()));
            }
            let slack = (s - width) * T::of(0.5);
            let mut snap = |v: T| ((v / s).floor() + T::of(0.5)) * s + uniform(-slack, slack);
            c = Vec2::new(snap(c.x), snap(c.y));
        }
        if poles.iter().any(|p| p.center.distance(c) < spec.min_separation) {
            continue;
        }
        if let Some((_, d2)) = route.nearest(c) {
            if d2.sqrt() < spec.route_clearance + width || d2.sqrt() > spec.route_band {
                continue;
            }
        }
        poles.push(PoleSpec {
            center: c,
            width,
            height,
            shape: spec.shape,
        });
    }
    Ok(WorldModel {
        poles,
        ..WorldModel::default()
    })
}

fn densify<T: Real>(pts: &[Vec2<T>], resolution: T) -> Vec<Vec2<T>> {
    let mut out = Vec::new();
    for w in pts.windows(2) {
        push_line(&mut out, w[0], w[1], resolution);
    }
    out.extend(pts.last().copied());
    out
}

/// Objects that cross the vehicle's path: each walks a straight line
/// perpendicular to the route, reaching the route `lead` seconds before the
/// vehicle does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingSpec<T> {
    pub count: usize,
    pub width: T,
    pub height: T,
    pub speed_range: (T, T),
    /// Length of each crossing path (m), centered on the route.
    pub path_length: T,
    pub lead: T,
}

impl<T: Real> Default for CrossingSpec<T> {
    fn default() -> Self {
        Self {
            count: 5,
            width: T::of(0.5),
            height: T::of(1.8),
            speed_range: (T::of(1.0), T::of(2.0)),
            path_length: T::of(16.0),
            lead: T::of(1.0),
        }
    }
}

pub fn crossing_objects<T: Real>(
    trajectory: &[StampedPose<T>],
    spec: &CrossingSpec<T>,
    seed: u64,
) -> Vec<DynamicObject<T>> {
    if trajectory.len() < 3 {
        return Vec::new();
    }
    let mut rng = counter_rng(seed, STREAM_WORLD, 1);
    (0..spec.count)
        .map(|k| {
            // spread crossings along the drive, away from its ends
            let u = (k as f64 + 0.25 + 0.5 * rng.random::<f64>()) / spec.count as f64;
            let idx = ((trajectory.len() - 1) as f64 * u).round() as usize;
            let p = trajectory[idx];
            let speed = spec.speed_range.0 + (spec.speed_range.1 - spec.speed_range.0) * T::of(rng.random::<f64>());
            let normal = Vec2::new(-p.pose.phi.sin(), p.pose.phi.cos());
            let dir = if rng.random_bool(0.5) { normal } else { -normal };
            let half = spec.path_length * T::of(0.5);
            let t_mid = p.t - spec.lead;
            let dt = half / speed;
            DynamicObject {
                width: spec.width,
                height: spec.height,
                schedule: vec![
                    Waypoint { t: t_mid - dt, position: p.pose.translation() - dir * half },
                    Waypoint { t: t_mid + dt, position: p.pose.translation() + dir * half },
                ],
            }
        })
        .collect()
}
