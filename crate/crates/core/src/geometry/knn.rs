//! Static 3D kd-tree for k-nearest-neighbor queries over a fixed point set.

use nalgebra::Vector3;

pub(crate) struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    /// Point indices, permuted so every node's subtree is a contiguous slice
    /// with the splitting point in the middle.
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl<'a> KdTree<'a> {
    pub(crate) fn build(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build_rec(points, &mut order, &mut axes, 0);
        Self {
            points,
            order,
            axes,
        }
    }

    /// Squared distances to the `k` nearest other points of `points[query]`,
    /// ascending. The query point itself is excluded by index.
    pub(crate) fn knn_sq_dists(&self, query: usize, k: usize, out: &mut Vec<f64>) {
        out.clear();
        if k == 0 {
            return;
        }
        let q = self.points[query];
        self.search(0, self.order.len(), &q, query, k, out);
    }

    fn search(&self, lo: usize, hi: usize, q: &Vector3<f64>, skip: usize, k: usize, best: &mut Vec<f64>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if idx != skip {
            insert_bounded(best, (p - q).norm_squared(), k);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, skip, k, best);
        if best.len() < k || diff * diff < *best.last().unwrap() {
            self.search(far.0, far.1, q, skip, k, best);
        }
    }
}

fn insert_bounded(best: &mut Vec<f64>, d: f64, k: usize) {
    if best.len() == k {
        if d >= best[k - 1] {
            return;
        }
        best.pop();
    }
    let pos = best.partition_point(|&x| x <= d);
    best.insert(pos, d);
}

fn build_rec(points: &[Vector3<f64>], order: &mut [usize], axes: &mut [u8], depth: usize) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = (depth % 3) as u8;
        }
        return;
    }
    // Split on the axis of largest spread.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    axes[mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    let (left_axes, rest_axes) = axes.split_at_mut(mid);
    build_rec(points, left, left_axes, depth + 1);
    build_rec(points, &mut rest[1..], &mut rest_axes[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| Vector3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.1))
            .collect();
        let tree = KdTree::build(&pts);
        let mut out = Vec::new();
        for q in 0..pts.len() {
            tree.knn_sq_dists(q, 7, &mut out);
            let mut brute: Vec<f64> = (0..pts.len())
                .filter(|&j| j != q)
                .map(|j| (pts[j] - pts[q]).norm_squared())
                .collect();
            brute.sort_by(f64::total_cmp);
            assert_eq!(out, brute[..7].to_vec());
        }
    }
}
