//! Static 2-D k-d tree over landmark centers.

use crate::geometry::Vec2;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Vec2<T>>,
    // implicit balanced tree: `order[lo..hi]` with the median at the split
    order: Vec<usize>,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: Vec<Vec2<T>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        build(&points, &mut order, 0);
        Self { points, order }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec2<T>] {
        &self.points
    }

    /// Index and squared distance of the nearest point; ties go to the lower
    /// index.
    pub fn nearest(&self, q: Vec2<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::infinity());
        self.search(q, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, q: Vec2<T>, lo: usize, hi: usize, depth: usize, best: &mut (usize, T)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let diff = if depth % 2 == 0 { q.x - p.x } else { q.y - p.y };
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, depth + 1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }

    /// Indices of all points within `radius` (inclusive), ascending.
    pub fn within_radius(&self, q: Vec2<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect(q, radius * radius, 0, self.order.len(), 0, &mut out);
        out.sort_unstable();
        out
    }

    fn collect(&self, q: Vec2<T>, r2: T, lo: usize, hi: usize, depth: usize, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.points[idx];
        if (p - q).norm_squared() <= r2 {
            out.push(idx);
        }
        let diff = if depth % 2 == 0 { q.x - p.x } else { q.y - p.y };
        if diff <= T::zero() || diff * diff <= r2 {
            self.collect(q, r2, lo, mid, depth + 1, out);
        }
        if diff >= T::zero() || diff * diff <= r2 {
            self.collect(q, r2, mid + 1, hi, depth + 1, out);
        }
    }
}

fn build<T: Real>(points: &[Vec2<T>], order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let mid = order.len() / 2;
    let key = |i: &usize| if depth % 2 == 0 { points[*i].x } else { points[*i].y };
    order.select_nth_unstable_by(mid, |a, b| key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(b)));
    let (left, right) = order.split_at_mut(mid);
    build(points, left, depth + 1);
    build(points, &mut right[1..], depth + 1);
}
