//! Depth lifting and 3D box fitting.
//!
//! Camera frame throughout: x right, y down, z along the optical axis, meters.

mod knn;
mod pca;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataio::{BBox2D, BinaryMask, CameraIntrinsics, DepthImage};
use crate::{Error, Result};

pub use pca::pca_fit_box;

/// Extent used for fallback boxes when a cloud cannot be fitted.
pub const FALLBACK_EXTENT_M: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    pub fn to_arrays(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

/// Oriented 3D box `{T, R, D}`: the box frame's origin, its axes as the columns
/// of `r`, and the full extents along those axes (descending).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "BoxDoc", into = "BoxDoc")]
pub struct OrientedBox3D {
    pub t: Vector3<f64>,
    pub r: Matrix3<f64>,
    pub d: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxDoc {
    t: [f64; 3],
    /// Row-major.
    r: [f64; 9],
    d: [f64; 3],
}

impl From<BoxDoc> for OrientedBox3D {
    fn from(doc: BoxDoc) -> Self {
        Self {
            t: Vector3::from(doc.t),
            r: Matrix3::from_row_slice(&doc.r),
            d: Vector3::from(doc.d),
        }
    }
}

impl From<OrientedBox3D> for BoxDoc {
    fn from(b: OrientedBox3D) -> Self {
        BoxDoc {
            t: b.t.into(),
            r: b.rotation_row_major(),
            d: b.d.into(),
        }
    }
}

impl OrientedBox3D {
    pub fn axis_aligned(center: Vector3<f64>, extents: Vector3<f64>) -> Self {
        Self {
            t: center,
            r: Matrix3::identity(),
            d: extents,
        }
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.r;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    /// Half-extents of the box's support along the camera x, y, z axes.
    pub fn camera_half_extents(&self) -> Vector3<f64> {
        let abs = self.r.abs();
        abs * self.d * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let local = self.r.transpose() * (p - self.t);
        (0..3).all(|i| local[i].abs() <= 0.5 * self.d[i] + tol)
    }

    pub fn volume(&self) -> f64 {
        self.d.x * self.d.y * self.d.z
    }

    /// Checks the rotation is proper orthonormal and extents non-negative.
    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).amax() <= tol;
        let det = (self.r.determinant() - 1.0).abs() <= tol;
        let finite = self.t.iter().chain(self.r.iter()).chain(self.d.iter()).all(|v| v.is_finite());
        ortho && det && finite && self.d.iter().all(|&v| v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub k_neighbors: usize,
    pub std_ratio: f64,
    pub min_depth_mm: u16,
    pub max_depth_mm: u16,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 20,
            std_ratio: 2.0,
            min_depth_mm: 300,
            max_depth_mm: 10_000,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 1 {
            return Err(Error::validation("denoise.k_neighbors", "must be >= 1"));
        }
        if !(self.std_ratio > 0.0 && self.std_ratio.is_finite()) {
            return Err(Error::validation("denoise.std_ratio", "must be > 0"));
        }
        if self.min_depth_mm >= self.max_depth_mm {
            return Err(Error::validation("denoise.min_depth_mm", "must be < max_depth_mm"));
        }
        Ok(())
    }
}

/// Pixels to lift: a segmentation mask, or the whole 2D box when no mask exists.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    Mask(&'a BinaryMask),
    BBox(BBox2D),
}

impl Region<'_> {
    fn for_each_pixel(&self, width: u32, height: u32, mut f: impl FnMut(u32, u32)) {
        match self {
            Region::Mask(mask) => mask.pixels().for_each(|(u, v)| f(u, v)),
            Region::BBox(b) => {
                let c = b.clamped(width, height);
                let u0 = c.x.floor() as u32;
                let v0 = c.y.floor() as u32;
                let u1 = ((c.x + c.w).ceil() as u32).min(width);
                let v1 = ((c.y + c.h).ceil() as u32).min(height);
                for v in v0..v1 {
                    for u in u0..u1 {
                        f(u, v);
                    }
                }
            }
        }
    }
}

/// Lifts one pixel with depth in meters to a camera-frame point.
#[inline]
pub fn backproject_pixel(u: f64, v: f64, depth_m: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new(
        (u - k.cx) * depth_m / k.fx,
        (v - k.cy) * depth_m / k.fy,
        depth_m,
    )
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
#[inline]
pub fn project(p: &Vector3<f64>, k: &CameraIntrinsics) -> (f64, f64) {
    (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

pub fn backproject(depth: &DepthImage, region: Region<'_>, k: &CameraIntrinsics) -> Result<PointCloud> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", k.width, k.height),
            found: format!("{}x{}", depth.width, depth.height),
        });
    }
    if let Region::Mask(m) = region {
        if m.width() != depth.width || m.height() != depth.height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{} mask", depth.width, depth.height),
                found: format!("{}x{}", m.width(), m.height()),
            });
        }
    }
    let mut points = Vec::new();
    region.for_each_pixel(depth.width, depth.height, |u, v| {
        let d = depth.get(u, v);
        if d > 0 {
            points.push(backproject_pixel(u as f64, v as f64, d as f64 / 1000.0, k));
        }
    });
    if points.is_empty() {
        return Err(Error::EmptyCloud("no pixel in the region has valid depth".into()));
    }
    Ok(PointCloud::new(points))
}

/// Depth-range filter followed by statistical outlier removal: a point is
/// dropped when its mean distance to its `k` nearest neighbors exceeds both
/// `mean + std_ratio * std` and `std_ratio * mean` of those distances.
pub fn denoise(cloud: &PointCloud, cfg: &DenoiseConfig) -> Result<PointCloud> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("denoise input is empty".into()));
    }
    let zmin = cfg.min_depth_mm as f64 / 1000.0;
    let zmax = cfg.max_depth_mm as f64 / 1000.0;
    let in_range: Vec<Vector3<f64>> = cloud
        .points
        .iter()
        .copied()
        .filter(|p| p.z >= zmin && p.z <= zmax)
        .collect();
    if in_range.is_empty() {
        return Err(Error::EmptyCloud("all points outside the depth range".into()));
    }
    let n = in_range.len();
    let k = cfg.k_neighbors.min(n - 1);
    if k == 0 {
        return Ok(PointCloud::new(in_range));
    }

    let tree = knn::KdTree::build(&in_range);
    let mut buf = Vec::with_capacity(k);
    let mean_dists: Vec<f64> = (0..n)
        .map(|i| {
            tree.knn_sq_dists(i, k, &mut buf);
            buf.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let mean = mean_dists.iter().sum::<f64>() / n as f64;
    let var = mean_dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    // Relative floor: clean clouds pass through unchanged.
    let threshold = (mean + cfg.std_ratio * var.sqrt()).max(cfg.std_ratio * mean);

    let kept: Vec<Vector3<f64>> = in_range
        .into_iter()
        .zip(&mean_dists)
        .filter(|(_, &d)| d <= threshold)
        .map(|(p, _)| p)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCloud("outlier removal dropped every point".into()));
    }
    Ok(PointCloud::new(kept))
}

/// Stand-in box for an unusable cloud: a 1 cm cube on the ray through the
/// bbox center, at the median valid depth of the region (or of the whole
/// image, or 1 m when there is no depth at all).
pub fn fallback_box(depth: &DepthImage, region: Region<'_>, bbox: &BBox2D, k: &CameraIntrinsics) -> OrientedBox3D {
    let mut vals = Vec::new();
    region.for_each_pixel(depth.width, depth.height, |u, v| {
        let d = depth.get(u, v);
        if d > 0 {
            vals.push(d);
        }
    });
    if vals.is_empty() {
        vals = depth.values.iter().copied().filter(|&d| d > 0).collect();
    }
    let z = if vals.is_empty() {
        1.0
    } else {
        let mid = vals.len() / 2;
        *vals.select_nth_unstable(mid).1 as f64 / 1000.0
    };
    let (u, v) = bbox.clamped(k.width, k.height).center();
    OrientedBox3D::axis_aligned(backproject_pixel(u, v, z, k), Vector3::repeat(FALLBACK_EXTENT_M))
}

/// A fitted box for one detection, flagged when it came from the fallback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftedBox {
    pub bbox3d: OrientedBox3D,
    pub degenerate: bool,
}

/// backproject → denoise → PCA fit, falling back per [`fallback_box`] when
/// any stage fails.
pub fn lift_detection(
    depth: &DepthImage,
    mask: Option<&BinaryMask>,
    bbox: &BBox2D,
    k: &CameraIntrinsics,
    cfg: &DenoiseConfig,
) -> LiftedBox {
    let region = match mask {
        Some(m) if m.area() > 0 => Region::Mask(m),
        _ => Region::BBox(*bbox),
    };
    let fitted = backproject(depth, region, k)
        .and_then(|c| denoise(&c, cfg))
        .and_then(|c| pca_fit_box(&c));
    match fitted {
        Ok(b) => LiftedBox {
            bbox3d: b,
            degenerate: false,
        },
        Err(e) => {
            log::debug!("lift failed ({e}); using fallback box");
            LiftedBox {
                bbox3d: fallback_box(depth, region, bbox, k),
                degenerate: true,
            }
        }
    }
}

/// Intersection over union of two image boxes; 0 when the union is empty.
pub fn iou_2d(a: &BBox2D, b: &BBox2D) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 110.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        }
    }

    fn single_pixel_depth(u: u32, v: u32, mm: u16) -> (DepthImage, BinaryMask) {
        let k = intrinsics();
        let mut vals = vec![0u16; (k.width * k.height) as usize];
        vals[(v * k.width + u) as usize] = mm;
        let depth = DepthImage::new(k.width, k.height, vals).unwrap();
        let mask = BinaryMask::from_pixels(k.width, k.height, &[(u, v)].into_iter().collect());
        (depth, mask)
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let (depth, mask) = single_pixel_depth(32, 24, 1000);
        let c = backproject(&depth, Region::Mask(&mask), &intrinsics()).unwrap();
        assert_eq!(c.points, vec![Vector3::new(0.0, 0.0, 1.0)]);
    }

    #[test]
    fn unit_tangent_pixel() {
        let mut k = intrinsics();
        k.fx = 20.0;
        let (depth, mask) = single_pixel_depth(52, 24, 1000);
        let c = backproject(&depth, Region::Mask(&mask), &k).unwrap();
        assert_eq!(c.points, vec![Vector3::new(1.0, 0.0, 1.0)]);
    }

    #[test]
    fn invalid_depth_gives_empty_cloud() {
        let (depth, _) = single_pixel_depth(3, 3, 1000);
        let region = Region::BBox(BBox2D::new(10.0, 10.0, 5.0, 5.0));
        assert!(matches!(
            backproject(&depth, region, &intrinsics()),
            Err(Error::EmptyCloud(_))
        ));
    }

    #[test]
    fn bbox_region_covers_clamped_pixels() {
        let k = intrinsics();
        let depth = DepthImage::new(k.width, k.height, vec![500; (k.width * k.height) as usize]).unwrap();
        let region = Region::BBox(BBox2D::new(-2.0, 46.0, 4.0, 10.0));
        let c = backproject(&depth, region, &k).unwrap();
        assert_eq!(c.len(), 2 * 2);
    }

    #[test]
    fn principal_point_shift_equivariance() {
        let k = intrinsics();
        let depth = DepthImage::new(k.width, k.height, (0..(k.width * k.height)).map(|i| 400 + (i % 97) as u16 * 13).collect()).unwrap();
        let region = Region::BBox(BBox2D::new(5.0, 5.0, 20.0, 20.0));
        let base = backproject(&depth, region, &k).unwrap();
        let delta = 3.25;
        let mut shifted_k = k;
        shifted_k.cx += delta;
        let shifted = backproject(&depth, region, &shifted_k).unwrap();
        for (a, b) in base.points.iter().zip(&shifted.points) {
            let expected = a.x - delta * a.z / k.fx;
            assert!((b.x - expected).abs() < 1e-12);
            assert_eq!(a.y, b.y);
        }
    }

    fn cube_cloud(n: usize, size: f64, center: Vector3<f64>) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let f = |t: usize| (t as f64 / (n - 1) as f64 - 0.5) * size;
                    pts.push(center + Vector3::new(f(i), f(j), f(l)));
                }
            }
        }
        PointCloud::new(pts)
    }

    #[test]
    fn far_outlier_removed() {
        // 100 points inside a 10 cm cube plus one point 5 m away.
        let mut pts = Vec::new();
        for i in 0..100u32 {
            let a = (i % 5) as f64 * 0.025;
            let b = ((i / 5) % 5) as f64 * 0.025;
            let c = (i / 25) as f64 * 0.033;
            pts.push(Vector3::new(a, b, 1.0 + c));
        }
        pts.push(Vector3::new(0.0, 0.0, 6.0));
        let cfg = DenoiseConfig {
            k_neighbors: 20,
            std_ratio: 2.0,
            ..Default::default()
        };
        let out = denoise(&PointCloud::new(pts), &cfg).unwrap();
        assert!(out.points.iter().all(|p| p.z < 2.0));
        assert!(out.len() >= 99, "{}", out.len());
    }

    #[test]
    fn single_point_unchanged() {
        let cloud = PointCloud::new(vec![Vector3::new(0.1, 0.2, 1.0)]);
        let cfg = DenoiseConfig {
            k_neighbors: 1,
            ..Default::default()
        };
        assert_eq!(denoise(&cloud, &cfg).unwrap(), cloud);
    }

    #[test]
    fn uniform_cube_mostly_kept_and_idempotent() {
        let cloud = cube_cloud(12, 0.3, Vector3::new(0.0, 0.0, 2.0));
        let cfg = DenoiseConfig::default();
        let once = denoise(&cloud, &cfg).unwrap();
        assert!(once.len() as f64 >= 0.95 * cloud.len() as f64);
        let twice = denoise(&once, &cfg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn depth_range_filter_applies_first() {
        let cloud = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.1), Vector3::new(0.0, 0.0, 1.0)]);
        let out = denoise(&cloud, &DenoiseConfig::default()).unwrap();
        assert_eq!(out.points, vec![Vector3::new(0.0, 0.0, 1.0)]);
        let all_near = PointCloud::new(vec![Vector3::new(0.0, 0.0, 0.1)]);
        assert!(matches!(denoise(&all_near, &DenoiseConfig::default()), Err(Error::EmptyCloud(_))));
    }

    #[test]
    fn iou_examples() {
        let a = BBox2D::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou_2d(&a, &a), 1.0);
        assert_eq!(iou_2d(&a, &BBox2D::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let b = BBox2D::new(5.0, 0.0, 10.0, 10.0);
        assert!((iou_2d(&a, &b) - 50.0 / 150.0).abs() < 1e-9);
        let z = BBox2D::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(iou_2d(&z, &z), 0.0);
    }

    #[test]
    fn fallback_box_sits_on_center_ray() {
        let k = intrinsics();
        let depth = DepthImage::new(k.width, k.height, vec![2000; (k.width * k.height) as usize]).unwrap();
        let bbox = BBox2D::new(22.0, 14.0, 20.0, 20.0);
        let b = fallback_box(&depth, Region::BBox(bbox), &bbox, &k);
        assert!((b.t - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        assert_eq!(b.d, Vector3::repeat(FALLBACK_EXTENT_M));
    }

    #[test]
    fn lift_uses_fallback_on_empty_mask_region() {
        let k = intrinsics();
        let depth = DepthImage::new(k.width, k.height, vec![0; (k.width * k.height) as usize]).unwrap();
        let bbox = BBox2D::new(0.0, 0.0, 4.0, 4.0);
        let lifted = lift_detection(&depth, None, &bbox, &k, &DenoiseConfig::default());
        assert!(lifted.degenerate);
        assert_eq!(lifted.bbox3d.t.z, 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox2D> {
        (0.0..100.0f64, 0.0..100.0f64, 0.1..50.0f64, 0.1..50.0f64)
            .prop_map(|(x, y, w, h)| BBox2D::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou_2d(&a, &b), iou_2d(&b, &a));
            prop_assert!((iou_2d(&a, &a) - 1.0).abs() < 1e-12);
            let v = iou_2d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn project_inverts_backproject(u in 0.0..64.0f64, v in 0.0..48.0f64, z in 0.3..10.0f64) {
            let k = intrinsics();
            let (pu, pv) = project(&backproject_pixel(u, v, z, &k), &k);
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }
}
