//! 3D pose metrics and box overlap.
//!
//! Joint and vertex positions are in meters; reported errors are in
//! millimeters.

use nalgebra::{Matrix3, SVD};

use crate::body_model::{Mat3, Vec3};
use crate::camera::NormBox;
use crate::{Error, Result};

/// Default 3D-PCK threshold in millimeters.
pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

fn check_pair(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted points vs {} ground truth", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty point sets"));
    }
    Ok(())
}

fn mean_distance_mm(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let total: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    total / pred.len() as f64 * 1000.0
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean_distance_mm(pred, gt))
}

/// Mean per-vertex error in millimeters.
pub fn pve(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(mean_distance_mm(pred, gt))
}

/// Least-squares similarity transform taking `pred` onto `gt`, and the aligned points.
///
/// Orthogonal Procrustes via SVD of the cross-covariance, with the sign of
/// the last singular direction flipped when needed so the rotation is proper.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<(SimilarityTransform, Vec<Vec3>)> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Alignment(format!("need at least 3 points, got {}", pred.len())));
    }
    let n = pred.len() as f64;
    let mu_p = pred.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mu_g = gt.iter().fold(Vec3::zeros(), |a, g| a + g) / n;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mu_p, g - mu_g);
        cross += pc * gc.transpose();
        scatter += pc * pc.transpose();
        var_p += pc.norm_squared();
    }

    let spread = SVD::new(scatter, false, false).singular_values;
    let mut sv: Vec<f64> = spread.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Alignment("predicted points are rank-deficient (collinear or coincident)".into()));
    }

    let svd = SVD::new(cross, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Alignment("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // nalgebra does not sort singular values; the reflection must flip the smallest one
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap_or(2);
    if smallest != 2 && d[(2, 2)] < 0.0 {
        d[(2, 2)] = 1.0;
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_p;
    if !(scale > 0.0) {
        return Err(Error::Alignment(format!("non-positive alignment scale {scale}")));
    }
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation: mu_g - rotation * mu_p * scale,
    };
    let aligned = pred.iter().map(|p| transform.apply(p)).collect();
    Ok((transform, aligned))
}

/// MPJPE after similarity alignment.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let (_, aligned) = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt)
}

/// Fraction of joints whose error is at most `thresh_mm`.
pub fn pck3d(pred: &[Vec3], gt: &[Vec3], thresh_mm: f64) -> Result<f64> {
    Ok(pck3d_count(pred, gt, thresh_mm)? as f64 / pred.len() as f64)
}

/// Number of joints whose error is at most `thresh_mm`.
pub fn pck3d_count(pred: &[Vec3], gt: &[Vec3], thresh_mm: f64) -> Result<usize> {
    check_pair(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| (*p - *g).norm() * 1000.0 <= thresh_mm)
        .count())
}

/// Intersection over union.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let (inter, union, _) = overlap_areas(a, b);
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered by the union.
pub fn giou(a: &NormBox, b: &NormBox) -> f64 {
    let (inter, union, hull) = overlap_areas(a, b);
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

fn overlap_areas(a: &NormBox, b: &NormBox) -> (f64, f64, f64) {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    (inter, union, hull)
}
