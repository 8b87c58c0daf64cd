//! Global pole maps built segment by segment.
//!
//! The trajectory is cut into segments of equal arc length; the scans of
//! each segment are traced into one local grid aligned with (and snapped
//! to) the global raster, poles are extracted, transient detections are
//! dropped by a c-of-w sliding window, and the survivors are merged into
//! the global map wherever their ground-plane squares overlap.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::{interpolate_pose, squares_overlap, StampedPose, Vec2, Vec3};
use crate::grid::{CountGrid, GridGeometry, Scan};
use crate::kdtree::KdTree;
use crate::poles::{extract_from_counts, DetectorParams, PoleDetection};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoleLandmark<T> {
    pub center: Vec2<T>,
    pub width: T,
    pub score: T,
    /// Accumulated merge weight (sum of contributing scores).
    pub weight: T,
}

impl<T: Real> From<PoleDetection<T>> for PoleLandmark<T> {
    fn from(d: PoleDetection<T>) -> Self {
        Self {
            center: d.center,
            width: d.width,
            score: d.score,
            weight: d.score,
        }
    }
}

impl<T: Real> PoleLandmark<T> {
    pub fn new(center: Vec2<T>, width: T, score: T) -> Self {
        Self { center, width, score, weight: score }
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        squares_overlap(self.center, self.width, other.center, other.width)
    }
}

/// Landmarks with a nearest-neighbor index and the positions of the poses
/// whose scans contributed to the map.
#[derive(Debug, Clone)]
pub struct LandmarkMap<T> {
    landmarks: Vec<PoleLandmark<T>>,
    index: KdTree<T>,
    max_width: T,
    pub visited: Vec<Vec2<T>>,
}

impl<T: Real> Default for LandmarkMap<T> {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl<T: Real> LandmarkMap<T> {
    pub fn new(landmarks: Vec<PoleLandmark<T>>) -> Self {
        let index = KdTree::new(landmarks.iter().map(|l| l.center).collect());
        let max_width = landmarks.iter().map(|l| l.width).fold(T::zero(), T::max);
        Self {
            landmarks,
            index,
            max_width,
            visited: Vec::new(),
        }
    }

    pub fn landmarks(&self) -> &[PoleLandmark<T>] {
        &self.landmarks
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    /// Index and distance of the landmark nearest to `p`.
    pub fn nearest(&self, p: Vec2<T>) -> Option<(usize, T)> {
        self.index.nearest(p).map(|(i, d2)| (i, d2.sqrt()))
    }

    /// Landmarks whose squares overlap the square of side `width` at `center`.
    pub fn overlapping(&self, center: Vec2<T>, width: T) -> Vec<usize> {
        // overlap implies center distance below (w1 + w2) / sqrt(2)
        let reach = (width + self.max_width) * T::of(std::f64::consts::FRAC_1_SQRT_2) * T::of(1.0 + 1e-9);
        self.index
            .within_radius(center, reach)
            .into_iter()
            .filter(|&i| squares_overlap(center, width, self.landmarks[i].center, self.landmarks[i].width))
            .collect()
    }

    /// Merges `incoming` into the map; afterwards no two squares overlap.
    pub fn integrate(&mut self, incoming: &[PoleLandmark<T>]) {
        if incoming.is_empty() {
            return;
        }
        let mut pending: Vec<PoleLandmark<T>> = incoming.to_vec();
        loop {
            let mut touched: Vec<usize> = pending
                .iter()
                .flat_map(|l| self.overlapping(l.center, l.width))
                .collect();
            touched.sort_unstable();
            touched.dedup();
            if touched.is_empty() {
                break;
            }
            let mut group: Vec<PoleLandmark<T>> = touched.iter().map(|&i| self.landmarks[i]).collect();
            group.extend_from_slice(&pending);
            pending = merge_overlapping(&group);
            let keep: Vec<PoleLandmark<T>> = self
                .landmarks
                .iter()
                .enumerate()
                .filter(|(i, _)| touched.binary_search(i).is_err())
                .map(|(_, l)| *l)
                .collect();
            self.reset(keep);
        }
        let mut all = std::mem::take(&mut self.landmarks);
        all.extend(merge_overlapping(&pending));
        self.reset(all);
    }

    fn reset(&mut self, landmarks: Vec<PoleLandmark<T>>) {
        let visited = std::mem::take(&mut self.visited);
        *self = Self::new(landmarks);
        self.visited = visited;
    }
}

/// Collapses every connected group of overlapping squares into one
/// landmark with weight-averaged center, width and score, repeating until
/// no squares overlap. Landmarks without overlap pass through untouched.
pub fn merge_overlapping<T: Real>(input: &[PoleLandmark<T>]) -> Vec<PoleLandmark<T>> {
    let mut current = input.to_vec();
    loop {
        let n = current.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut any = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if current[i].overlaps(&current[j]) {
                    any = true;
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        if !any {
            return current;
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; n];
        for i in 0..n {
            let r = find(&mut parent, i);
            if slot[r] == usize::MAX {
                slot[r] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[r]].push(i);
        }
        current = groups
            .iter()
            .map(|g| {
                if g.len() == 1 {
                    return current[g[0]];
                }
                let w: T = g.iter().map(|&i| current[i].weight).sum();
                let avg = |f: &dyn Fn(&PoleLandmark<T>) -> T| {
                    g.iter().map(|&i| f(&current[i]) * current[i].weight).sum::<T>() / w
                };
                PoleLandmark {
                    center: Vec2::new(avg(&|l| l.center.x), avg(&|l| l.center.y)),
                    width: avg(&|l| l.width),
                    score: avg(&|l| l.score),
                    weight: w,
                }
            })
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment<T> {
    pub id: usize,
    pub poses: Vec<StampedPose<T>>,
    pub arc_length: T,
    /// Indices into the time-ordered scan list.
    pub scans: Range<usize>,
}

impl<T: Real> TrajectorySegment<T> {
    pub fn t_begin(&self) -> T {
        self.poses[0].t
    }

    pub fn t_end(&self) -> T {
        self.poses[self.poses.len() - 1].t
    }

    /// Pose halfway along the segment's arc.
    pub fn midpoint(&self) -> StampedPose<T> {
        let half = self.arc_length * T::of(0.5);
        let mut acc = T::zero();
        for w in self.poses.windows(2) {
            let step = w[0].pose.translation().distance(w[1].pose.translation());
            if acc + step >= half {
                return w[1];
            }
            acc += step;
        }
        self.poses[self.poses.len() / 2]
    }
}

/// Cuts a trajectory into consecutive pieces of `segment_length` arc length
/// (the last one may be shorter). Neighboring segments share their boundary
/// pose.
pub fn segment_trajectory<T: Real>(
    trajectory: &[StampedPose<T>],
    segment_length: T,
) -> Result<Vec<TrajectorySegment<T>>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    if !(segment_length > T::zero()) {
        return Err(Error::param("segment_length", "must be positive"));
    }
    let close_at = segment_length * T::of(1.0 - 1e-9);
    let mut segments = Vec::new();
    let mut poses = vec![trajectory[0]];
    let mut arc = T::zero();
    for p in &trajectory[1..] {
        arc += poses.last().unwrap().pose.translation().distance(p.pose.translation());
        poses.push(*p);
        if arc >= close_at {
            segments.push(TrajectorySegment {
                id: segments.len(),
                poses: std::mem::replace(&mut poses, vec![*p]),
                arc_length: arc,
                scans: 0..0,
            });
            arc = T::zero();
        }
    }
    if poses.len() > 1 || segments.is_empty() {
        segments.push(TrajectorySegment {
            id: segments.len(),
            poses,
            arc_length: arc,
            scans: 0..0,
        });
    }
    Ok(segments)
}

/// Assigns time-ordered scan timestamps to segments: the first segment owns
/// `[t_begin, t_end]`, later ones `(t_begin, t_end]`.
pub fn assign_scans<T: Real>(segments: &mut [TrajectorySegment<T>], scan_times: &[T]) {
    let mut start = 0;
    for (k, seg) in segments.iter_mut().enumerate() {
        if k == 0 {
            start = scan_times.partition_point(|&t| t < seg.t_begin());
        }
        let end = scan_times.partition_point(|&t| t <= seg.t_end()).max(start);
        seg.scans = start..end;
        start = end;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMapResult<T> {
    pub segment_id: usize,
    pub detections: Vec<PoleDetection<T>>,
    /// Ground-plane footprint `(min, max)`.
    pub footprint: (Vec2<T>, Vec2<T>),
}

/// Keeps the detections of the newest local map that overlap a detection in
/// at least `c` of the most recent `w` local maps (counting their own).
pub fn sliding_window_filter<T: Real>(
    history: &[LocalMapResult<T>],
    c: usize,
    w: usize,
) -> Result<Vec<PoleDetection<T>>> {
    if c == 0 || w == 0 || c > w {
        return Err(Error::param("c/w", format!("need 1 <= c <= w, got c={c}, w={w}")));
    }
    let Some((newest, older)) = history.split_last() else {
        return Ok(Vec::new());
    };
    let window = &older[older.len().saturating_sub(w - 1)..];
    Ok(newest
        .detections
        .iter()
        .filter(|d| {
            let seen = window
                .iter()
                .filter(|m| {
                    m.detections
                        .iter()
                        .any(|o| squares_overlap(d.center, d.width, o.center, o.width))
                })
                .count();
            1 + seen >= c
        })
        .copied()
        .collect())
}

/// Placement of local grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalGridParams<T> {
    pub spacing: T,
    /// Extent in x, y, z (m).
    pub extent: [T; 3],
    /// Height of the grid's lower face (m).
    pub z_min: T,
}

impl<T: Real> Default for LocalGridParams<T> {
    fn default() -> Self {
        Self {
            spacing: T::of(0.2),
            extent: [T::of(30.0), T::of(30.0), T::of(5.0)],
            z_min: T::zero(),
        }
    }
}

impl<T: Real> LocalGridParams<T> {
    /// Axis-aligned grid centered (up to raster snapping) on `center`.
    pub fn geometry_at(&self, center: Vec2<T>) -> Result<GridGeometry<T>> {
        let s = self.spacing;
        let dims = self.extent.map(|e| (e / s).round().to_usize().unwrap_or(0));
        let half = T::of(0.5);
        let ox = ((center.x - self.extent[0] * half) / s).round() * s;
        let oy = ((center.y - self.extent[1] * half) / s).round() * s;
        GridGeometry::new(Vec3::new(ox, oy, self.z_min), s, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingParams<T> {
    pub grid: LocalGridParams<T>,
    pub detector: DetectorParams<T>,
    pub segment_length: T,
    pub window_c: usize,
    pub window_w: usize,
}

impl<T: Real> Default for MappingParams<T> {
    fn default() -> Self {
        Self {
            grid: LocalGridParams::default(),
            detector: DetectorParams::default(),
            segment_length: T::of(1.5),
            window_c: 2,
            window_w: 3,
        }
    }
}

/// Counters recorded while building a map.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BuildStats {
    pub local_maps: usize,
    pub scans_total: usize,
    pub scans_used: usize,
    /// Largest number of local grids alive at the same time.
    pub peak_live_grids: usize,
    pub peak_grid_voxels: usize,
}

impl BuildStats {
    pub fn fraction_used(&self) -> f64 {
        if self.scans_total == 0 {
            0.0
        } else {
            self.scans_used as f64 / self.scans_total as f64
        }
    }
}

/// Streams scans into one local grid at a time and folds the resulting
/// detections into a [`LandmarkMap`].
pub struct MapBuilder<T: Real> {
    params: MappingParams<T>,
    map: LandmarkMap<T>,
    history: VecDeque<LocalMapResult<T>>,
    current: Option<(usize, CountGrid<T>)>,
    stats: BuildStats,
    recorded: Option<Vec<LocalMapResult<T>>>,
}

impl<T: Real> MapBuilder<T> {
    pub fn new(params: MappingParams<T>, map: LandmarkMap<T>) -> Result<Self> {
        params.detector.validate()?;
        if params.window_c == 0 || params.window_c > params.window_w {
            return Err(Error::param("mapping.c", "need 1 <= c <= w"));
        }
        Ok(Self {
            params,
            map,
            history: VecDeque::new(),
            current: None,
            stats: BuildStats::default(),
            recorded: None,
        })
    }

    /// Adds `scan` to the local map of segment `segment_id` centered at
    /// `center`, finishing the previous local map when the segment changes.
    pub fn add_scan(&mut self, segment_id: usize, center: Vec2<T>, scan: &Scan<T>) -> Result<()> {
        if self.current.as_ref().is_some_and(|(id, _)| *id != segment_id) {
            self.finish_local_map()?;
        }
        if self.current.is_none() {
            let grid = CountGrid::new(self.params.grid.geometry_at(center)?);
            self.stats.peak_live_grids = self.stats.peak_live_grids.max(1);
            self.stats.peak_grid_voxels = self.stats.peak_grid_voxels.max(grid.geometry.len());
            self.current = Some((segment_id, grid));
        }
        let (_, grid) = self.current.as_mut().unwrap();
        grid.insert_rays(&scan.rays)
    }

    fn finish_local_map(&mut self) -> Result<()> {
        let Some((segment_id, grid)) = self.current.take() else {
            return Ok(());
        };
        let detections = match extract_from_counts(&grid, &self.params.detector) {
            Ok(d) => d,
            // nothing but free space or nothing at all: no poles
            Err(Error::PriorUndefined(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let footprint = grid.geometry.footprint();
        drop(grid);
        self.stats.local_maps += 1;
        let local = LocalMapResult {
            segment_id,
            detections,
            footprint,
        };
        if let Some(r) = self.recorded.as_mut() {
            r.push(local.clone());
        }
        self.history.push_back(local);
        while self.history.len() > self.params.window_w {
            self.history.pop_front();
        }
        let history = self.history.make_contiguous();
        let accepted = sliding_window_filter(history, self.params.window_c, self.params.window_w)?;
        let accepted: Vec<PoleLandmark<T>> = accepted.into_iter().map(PoleLandmark::from).collect();
        self.map.integrate(&accepted);
        Ok(())
    }

    pub fn finish(mut self) -> Result<(LandmarkMap<T>, BuildStats)> {
        self.finish_local_map()?;
        Ok((self.map, self.stats))
    }
}

fn stream_segments<T: Real, I>(
    builder: &mut MapBuilder<T>,
    scans: I,
    trajectory: &[StampedPose<T>],
    mut accept: impl FnMut(Vec2<T>) -> bool,
) -> Result<()>
where
    I: IntoIterator<Item = Scan<T>>,
{
    let segments = segment_trajectory(trajectory, builder.params.segment_length)?;
    let centers: Vec<Vec2<T>> = segments.iter().map(|s| s.midpoint().pose.translation()).collect();
    let mut seg = 0;
    for scan in scans {
        builder.stats.scans_total += 1;
        while seg + 1 < segments.len() && scan.time > segments[seg].t_end() {
            seg += 1;
        }
        if scan.time < segments[0].t_begin() || scan.time > segments[seg].t_end() {
            continue;
        }
        let Some(pose) = interpolate_pose(trajectory, scan.time) else {
            continue;
        };
        if !accept(pose.translation()) {
            continue;
        }
        builder.stats.scans_used += 1;
        builder.add_scan(seg, centers[seg], &scan)?;
    }
    Ok(())
}

/// Builds a landmark map from time-ordered scans registered in the map frame
/// and the trajectory they were recorded along.
pub fn build_global_map<T: Real, I>(
    scans: I,
    trajectory: &[StampedPose<T>],
    params: &MappingParams<T>,
) -> Result<(LandmarkMap<T>, BuildStats)>
where
    I: IntoIterator<Item = Scan<T>>,
{
    let mut builder = MapBuilder::new(*params, LandmarkMap::default())?;
    stream_segments(&mut builder, scans, trajectory, |_| true)?;
    let (mut map, stats) = builder.finish()?;
    map.visited.extend(trajectory.iter().map(|p| p.pose.translation()));
    Ok((map, stats))
}

/// Unfiltered local maps of a run, one per trajectory segment with scans.
pub fn collect_local_maps<T: Real, I>(
    scans: I,
    trajectory: &[StampedPose<T>],
    params: &MappingParams<T>,
) -> Result<Vec<LocalMapResult<T>>>
where
    I: IntoIterator<Item = Scan<T>>,
{
    let mut builder = MapBuilder::new(*params, LandmarkMap::default())?;
    builder.recorded = Some(Vec::new());
    stream_segments(&mut builder, scans, trajectory, |_| true)?;
    builder.finish_local_map()?;
    Ok(builder.recorded.unwrap_or_default())
}

/// Adds landmarks from a new session, using only scans recorded at least
/// `min_distance` away from every pose visited by earlier sessions. The
/// returned stats carry the fraction of scans used.
pub fn extend_map<T: Real, I>(
    map: LandmarkMap<T>,
    scans: I,
    trajectory: &[StampedPose<T>],
    min_distance: T,
    params: &MappingParams<T>,
) -> Result<(LandmarkMap<T>, BuildStats)>
where
    I: IntoIterator<Item = Scan<T>>,
{
    let previous = KdTree::new(map.visited.clone());
    let min_d2 = min_distance * min_distance;
    let mut builder = MapBuilder::new(*params, map)?;
    stream_segments(&mut builder, scans, trajectory, |p| match previous.nearest(p) {
        Some((_, d2)) => d2 >= min_d2,
        None => true,
    })?;
    let (mut map, stats) = builder.finish()?;
    map.visited.extend(trajectory.iter().map(|p| p.pose.translation()));
    Ok((map, stats))
}
