//! PCA box fitting.
//!
//! Axis conventions (part of the feature contract, since trained relation
//! models depend on them):
//!
//! - Axes come from the covariance eigenvectors. When eigenvalues coincide the
//!   eigenspace has no preferred basis; inside such a subspace the basis with
//!   the smallest summed extents is chosen, and if that is still ambiguous the
//!   camera axes win (x, then y, then z).
//! - Axes are ordered by descending extent; equal extents are ordered by
//!   alignment with camera x, then y, then z.
//! - The first two axes are flipped so their largest-magnitude component is
//!   positive; the third is their cross product, so `det(R) = +1`.
//! - Extents are the min/max spread of the points along each axis and `T` is
//!   the center of that span, so the box contains every input point.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};

use super::{OrientedBox3D, PointCloud};
use crate::{Error, Result};

/// Relative gap below which two eigenvalues are treated as equal.
const EIGEN_TIE_REL: f64 = 1e-9;
/// Relative tolerance for equal extents and for preferring the camera basis.
const EXTENT_TIE_REL: f64 = 1e-9;
/// Below this largest variance (m^2) the cloud is a single point.
const MIN_VARIANCE: f64 = 1e-18;

pub fn pca_fit_box(cloud: &PointCloud) -> Result<OrientedBox3D> {
    let n = cloud.len();
    if n < 4 {
        return Err(Error::DegenerateCloud(format!("{n} points, need at least 4")));
    }
    let centroid = cloud.centroid().expect("non-empty");
    let centered: Vec<Vector3<f64>> = cloud.points.iter().map(|p| p - centroid).collect();
    let mut cov = Matrix3::zeros();
    for p in &centered {
        cov += p * p.transpose();
    }
    cov /= n as f64;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if !(lambdas[0] > MIN_VARIANCE) {
        return Err(Error::DegenerateCloud("covariance has rank 0".into()));
    }
    let vectors: Vec<Vector3<f64>> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    // Group consecutive (near-)equal eigenvalues; each group spans a subspace
    // whose basis is resolved by extent minimization.
    let tol = EIGEN_TIE_REL * lambdas[0];
    let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(3);
    let mut start = 0;
    while start < 3 {
        let mut end = start + 1;
        while end < 3 && lambdas[end - 1] - lambdas[end] <= tol {
            end += 1;
        }
        let group = &vectors[start..end];
        match group.len() {
            1 => axes.push(group[0]),
            2 => axes.extend(resolve_plane(&centered, group[0], group[1])),
            _ => axes.extend(resolve_space(&centered)),
        }
        start = end;
    }

    let extents: Vec<(f64, f64)> = axes.iter().map(|a| span(&centered, a)).collect();
    let mut idx: Vec<usize> = (0..3).collect();
    idx.sort_by(|&a, &b| {
        let ea = extents[a].1 - extents[a].0;
        let eb = extents[b].1 - extents[b].0;
        eb.total_cmp(&ea)
    });
    let scale = extents.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    reorder_ties(&mut idx, &axes, &extents, EXTENT_TIE_REL * scale);

    let c0 = canonical_sign(axes[idx[0]]);
    let c1 = canonical_sign(axes[idx[1]]);
    let c2 = c0.cross(&c1).normalize();
    let r = Matrix3::from_columns(&[c0, c1, c2]);

    let mut t = centroid;
    let mut d = Vector3::zeros();
    for (i, axis) in [c0, c1, c2].iter().enumerate() {
        let (lo, hi) = span(&centered, axis);
        d[i] = hi - lo;
        t += axis * (0.5 * (lo + hi));
    }
    Ok(OrientedBox3D { t, r, d })
}

fn span(points: &[Vector3<f64>], axis: &Vector3<f64>) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let s = p.dot(axis);
        (lo.min(s), hi.max(s))
    })
}

fn summed_extent(points: &[Vector3<f64>], axes: &[Vector3<f64>]) -> f64 {
    axes.iter()
        .map(|a| {
            let (lo, hi) = span(points, a);
            hi - lo
        })
        .sum()
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

/// Within runs of equal extents, order axes by alignment with camera x, y, z.
fn reorder_ties(idx: &mut [usize], axes: &[Vector3<f64>], extents: &[(f64, f64)], tol: f64) {
    let ext = |i: usize| extents[i].1 - extents[i].0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && ext(idx[end - 1]) - ext(idx[end]) <= tol {
            end += 1;
        }
        if end - start > 1 {
            let mut pool: Vec<usize> = idx[start..end].to_vec();
            let mut ordered = Vec::with_capacity(pool.len());
            for cam in 0..3 {
                if pool.is_empty() {
                    break;
                }
                let (pos, _) = pool
                    .iter()
                    .enumerate()
                    .max_by(|(_, &a), (_, &b)| axes[a][cam].abs().total_cmp(&axes[b][cam].abs()).then(b.cmp(&a)))
                    .expect("non-empty pool");
                ordered.push(pool.remove(pos));
            }
            idx[start..end].copy_from_slice(&ordered);
        }
        start = end;
    }
}

/// Orthonormal basis of the span of `basis` built from the camera axes in
/// x, y, z order (Gram-Schmidt of their projections).
fn camera_aligned_basis(basis: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(basis.len());
    for cam in 0..3 {
        if out.len() == basis.len() {
            break;
        }
        let e = Vector3::ith(cam, 1.0);
        let mut v: Vector3<f64> = basis.iter().map(|b| b * b.dot(&e)).sum();
        for o in &out {
            v -= o * o.dot(&v);
        }
        if v.norm() > 1e-6 {
            out.push(v.normalize());
        }
    }
    out
}

fn prefer_camera(points: &[Vector3<f64>], basis: &[Vector3<f64>], best: Vec<Vector3<f64>>, best_cost: f64) -> Vec<Vector3<f64>> {
    let cam = camera_aligned_basis(basis);
    if cam.len() == basis.len() {
        let cost = summed_extent(points, &cam);
        let scale = best_cost.abs().max(f64::MIN_POSITIVE);
        if cost <= best_cost + EXTENT_TIE_REL * scale {
            return cam;
        }
    }
    best
}

/// Basis of the plane spanned by `a`, `b` minimizing the summed extents.
fn resolve_plane(points: &[Vector3<f64>], a: Vector3<f64>, b: Vector3<f64>) -> Vec<Vector3<f64>> {
    let basis_at = |theta: f64| {
        let (s, c) = theta.sin_cos();
        [a * c + b * s, b * c - a * s]
    };
    let cost = |theta: f64| summed_extent(points, &basis_at(theta));

    const STEPS: usize = 180;
    let (mut best_theta, mut best_cost) = (0.0, cost(0.0));
    for i in 1..STEPS {
        let theta = FRAC_PI_2 * i as f64 / STEPS as f64;
        let c = cost(theta);
        if c < best_cost {
            best_theta = theta;
            best_cost = c;
        }
    }
    let step = FRAC_PI_2 / STEPS as f64;
    let (theta, c) = golden_min(&cost, best_theta - step, best_theta + step);
    if c < best_cost {
        best_theta = theta;
        best_cost = c;
    }
    prefer_camera(points, &[a, b], basis_at(best_theta).to_vec(), best_cost)
}

fn golden_min(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-13 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// Fully isotropic covariance: search all rotations for the smallest summed
/// extents (coarse grid over Euler angles, then pattern search).
fn resolve_space(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let cost = |r: &Rotation3<f64>| {
        let m = r.matrix();
        summed_extent(points, &[m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned()])
    };

    const STEPS: usize = 12;
    let mut best = Rotation3::identity();
    let mut best_cost = cost(&best);
    for i in 0..STEPS {
        for j in 0..STEPS {
            for l in 0..STEPS {
                let ang = |t: usize| FRAC_PI_2 * t as f64 / STEPS as f64;
                let r = Rotation3::from_euler_angles(ang(i), ang(j), ang(l));
                let c = cost(&r);
                if c < best_cost {
                    best = r;
                    best_cost = c;
                }
            }
        }
    }

    let mut step = FRAC_PI_2 / STEPS as f64;
    while step > 1e-13 {
        let mut improved = false;
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let local = best.matrix().column(axis).into_owned();
                let delta = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(local), sign * step);
                let cand = delta * best;
                let c = cost(&cand);
                if c < best_cost {
                    best = cand;
                    best_cost = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let m = best.matrix();
    let found = vec![m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned()];
    prefer_camera(points, &[Vector3::x(), Vector3::y(), Vector3::z()], found, best_cost)
}
