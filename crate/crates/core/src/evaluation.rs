//! Trajectory error metrics and the unmatched-landmark fraction.

use crate::error::{Error, Result};
use crate::geometry::{interpolate_pose, squares_overlap, StampedPose};
use crate::mapping::{LandmarkMap, LocalMapResult};
use crate::scalar::{wrap_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample<T> {
    pub t: T,
    /// Position error (m).
    pub position: T,
    /// Signed heading error in degrees, within (-180, 180].
    pub heading: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryErrorReport<T> {
    pub delta_pos: T,
    pub rmse_pos: T,
    pub delta_ang: T,
    pub rmse_ang: T,
    pub samples: Vec<ErrorSample<T>>,
}

impl<T: Real> TrajectoryErrorReport<T> {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn max_position_error(&self) -> T {
        self.samples.iter().map(|s| s.position).fold(T::zero(), T::max)
    }

    fn from_samples(samples: Vec<ErrorSample<T>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::DisjointTimeSpans);
        }
        let n = T::of_usize(samples.len());
        let mean = |f: &dyn Fn(&ErrorSample<T>) -> T| samples.iter().map(f).sum::<T>() / n;
        Ok(Self {
            delta_pos: mean(&|s| s.position),
            rmse_pos: mean(&|s| s.position * s.position).sqrt(),
            delta_ang: mean(&|s| s.heading.abs()),
            rmse_ang: mean(&|s| s.heading * s.heading).sqrt(),
            samples,
        })
    }
}

/// Errors of `estimate` at the given timestamps of `ground_truth`.
pub fn compare_at<T: Real>(
    estimate: &[StampedPose<T>],
    ground_truth: &[StampedPose<T>],
    times: &[T],
) -> Result<TrajectoryErrorReport<T>> {
    let samples = times
        .iter()
        .filter_map(|&t| {
            let e = interpolate_pose(estimate, t)?;
            let g = interpolate_pose(ground_truth, t)?;
            Some(ErrorSample {
                t,
                position: e.translation().distance(g.translation()),
                heading: wrap_angle(e.phi - g.phi).to_degrees(),
            })
        })
        .collect();
    TrajectoryErrorReport::from_samples(samples)
}

/// Samples the ground truth every `sample_spacing` meters of arc length and
/// compares against the time-interpolated estimate.
pub fn compare_trajectories<T: Real>(
    estimate: &[StampedPose<T>],
    ground_truth: &[StampedPose<T>],
    sample_spacing: T,
) -> Result<TrajectoryErrorReport<T>> {
    if !(sample_spacing > T::zero()) {
        return Err(Error::param("sample_spacing", "must be positive"));
    }
    let (Some(e0), Some(e1)) = (estimate.first(), estimate.last()) else {
        return Err(Error::Empty("estimate"));
    };
    if ground_truth.is_empty() {
        return Err(Error::Empty("ground truth"));
    }
    let mut times = vec![ground_truth[0].t];
    let mut next = sample_spacing;
    let mut arc = T::zero();
    for w in ground_truth.windows(2) {
        let step = w[0].pose.translation().distance(w[1].pose.translation());
        while step > T::zero() && arc + step >= next {
            let u = (next - arc) / step;
            times.push(w[0].t + (w[1].t - w[0].t) * u);
            next += sample_spacing;
        }
        arc += step;
    }
    times.retain(|&t| t >= e0.t && t <= e1.t);
    compare_at(estimate, ground_truth, &times)
}

/// Fraction of local landmarks from run B whose square overlaps no landmark
/// of run A's map.
pub fn estimate_epsilon<T: Real>(map_a: &LandmarkMap<T>, local_maps_b: &[LocalMapResult<T>]) -> Result<T> {
    let (mut matched, mut total) = (0usize, 0usize);
    for d in local_maps_b.iter().flat_map(|m| &m.detections) {
        total += 1;
        let hit = map_a
            .landmarks()
            .iter()
            .any(|l| squares_overlap(d.center, d.width, l.center, l.width));
        if hit {
            matched += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("local landmarks"));
    }
    Ok(T::of_usize(total - matched) / T::of_usize(total))
}
