//! Weak-perspective camera and normalized 2D boxes.
//!
//! Image coordinates are normalized to `[0, 1]` along each axis; pixel
//! conversion only happens at the CLI boundary.

use serde::{Deserialize, Serialize};

use crate::body_model::Vec3;
use crate::{Error, Result};

/// Smallest allowed box side after clamping.
pub const MIN_BOX_SIDE: f64 = 1e-4;

/// Weak-perspective camera `p = s·(X, Y) + (t_x, t_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub s: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CameraParams {
    pub fn new(s: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(s.is_finite() && tx.is_finite() && ty.is_finite()) {
            return Err(Error::Domain("camera parameters must be finite".into()));
        }
        if s <= 0.0 {
            return Err(Error::Domain(format!("camera scale must be positive, got {s}")));
        }
        Ok(Self { s, tx, ty })
    }
}

/// Focal length and image extent used to turn a weak-perspective scale into depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConvention {
    /// Focal length in pixels.
    pub focal: f64,
    /// Longer image side in pixels.
    pub img_extent: f64,
}

impl Default for DepthConvention {
    fn default() -> Self {
        Self {
            focal: 5000.0,
            img_extent: 1288.0,
        }
    }
}

impl DepthConvention {
    pub fn depth(&self, s: f64) -> Result<f64> {
        scale_to_depth(s, self.focal, self.img_extent)
    }

    /// Camera-space translation of the model origin: the weak-perspective
    /// offset from the image center lifted by `1/s`, at the converted depth.
    pub fn translation(&self, cam: &CameraParams) -> Result<Vec3> {
        Ok(Vec3::new(
            (cam.tx - 0.5) / cam.s,
            (cam.ty - 0.5) / cam.s,
            self.depth(cam.s)?,
        ))
    }
}

/// Normalized center-size box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    /// Box with centers clamped to `[0, 1]` and sides to `[MIN_BOX_SIDE, 1]`.
    pub fn clamped(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let c = |v: f64, lo: f64| if v.is_nan() { lo } else { v.clamp(lo, 1.0) };
        Self {
            cx: c(cx, 0.0),
            cy: c(cy, 0.0),
            w: c(w, MIN_BOX_SIDE),
            h: c(h, MIN_BOX_SIDE),
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::clamped(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn l1(&self, other: &NormBox) -> f64 {
        (self.cx - other.cx).abs()
            + (self.cy - other.cy).abs()
            + (self.w - other.w).abs()
            + (self.h - other.h).abs()
    }
}

/// Orthographic projection scaled by `s` and shifted by `(t_x, t_y)`.
pub fn project(points: &[Vec3], cam: &CameraParams) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [cam.s * p.x + cam.tx, cam.s * p.y + cam.ty])
        .collect()
}

/// `depth = 2·focal / (s·img_extent)`.
pub fn scale_to_depth(s: f64, focal: f64, img_extent: f64) -> Result<f64> {
    if !(s > 0.0) || !(focal > 0.0) || !(img_extent > 0.0) {
        return Err(Error::Domain(format!(
            "depth conversion needs positive scale, focal and extent (s={s}, focal={focal}, extent={img_extent})"
        )));
    }
    Ok(2.0 * focal / (s * img_extent))
}

/// Inverse of [`scale_to_depth`].
pub fn depth_to_scale(depth: f64, focal: f64, img_extent: f64) -> Result<f64> {
    if !(depth > 0.0) || !(focal > 0.0) || !(img_extent > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {depth}")));
    }
    Ok(2.0 * focal / (depth * img_extent))
}

/// Tight axis-aligned box around the points, clamped to the image.
pub fn box_from_points(points: &[[f64; 2]]) -> Result<NormBox> {
    if points.is_empty() {
        return Err(Error::Domain("box of an empty point set".into()));
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
    let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
    Ok(NormBox::clamped(
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        x1 - x0,
        y1 - y0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn project_examples() {
        let cam = CameraParams::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(project(&[Vec3::new(0.2, 0.3, 5.0)], &cam), vec![[0.2, 0.3]]);
        let cam = CameraParams::new(2.0, 0.1, 0.0).unwrap();
        let p = project(&[Vec3::new(0.1, 0.1, -3.0)], &cam)[0];
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn project_ignores_depth() {
        let cam = CameraParams::new(0.7, 0.2, 0.4).unwrap();
        let a = project(&[Vec3::new(0.1, -0.2, 1.0)], &cam);
        let b = project(&[Vec3::new(0.1, -0.2, 41.0)], &cam);
        assert_eq!(a, b);
    }

    #[test]
    fn camera_rejects_nonpositive_scale() {
        assert!(CameraParams::new(0.0, 0.0, 0.0).is_err());
        assert!(CameraParams::new(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn depth_examples() {
        let d1 = scale_to_depth(0.5, 1000.0, 1288.0).unwrap();
        let d2 = scale_to_depth(1.0, 1000.0, 1288.0).unwrap();
        assert_eq!(d1, 2.0 * d2);
        assert!((d1 - 2000.0 / 644.0).abs() < 1e-12);
        assert!((d1 - 3.1056).abs() < 1e-4);
        assert_eq!(scale_to_depth(2.0 * 1000.0 / 1288.0, 1000.0, 1288.0).unwrap(), 1.0);
        assert!(scale_to_depth(0.0, 1000.0, 1288.0).is_err());
        assert!(scale_to_depth(-0.1, 1000.0, 1288.0).is_err());
    }

    #[test]
    fn box_examples() {
        let b = box_from_points(&[[0.5, 0.5]]).unwrap();
        assert_eq!(b, NormBox { cx: 0.5, cy: 0.5, w: MIN_BOX_SIDE, h: MIN_BOX_SIDE });
        let b = box_from_points(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        assert_eq!(b, NormBox { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 });
        assert!(box_from_points(&[]).is_err());
    }

    #[test]
    fn box_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.2..0.7)])
            .collect();
        let b = box_from_points(&pts).unwrap();
        let mut xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let mut ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let (x0, y0, x1, y1) = (xs[0], ys[0], xs[49], ys[49]);
        assert_eq!(b.cx, (x0 + x1) / 2.0);
        assert_eq!(b.cy, (y0 + y1) / 2.0);
        assert_eq!(b.w, x1 - x0);
        assert_eq!(b.h, y1 - y0);
    }

    proptest! {
        #[test]
        fn project_is_affine(
            p in proptest::array::uniform3(-5.0f64..5.0),
            q in proptest::array::uniform3(-5.0f64..5.0),
            alpha in -3.0f64..3.0,
            s in 0.05f64..4.0, tx in -1.0f64..1.0, ty in -1.0f64..1.0,
        ) {
            let cam = CameraParams::new(s, tx, ty).unwrap();
            let (p, q) = (Vec3::from(p), Vec3::from(q));
            let lhs = project(&[p * alpha + q], &cam)[0];
            let pp = project(&[p], &cam)[0];
            let pq = project(&[q], &cam)[0];
            let origin = project(&[Vec3::zeros()], &cam)[0];
            for c in 0..2 {
                let rhs = alpha * (pp[c] - origin[c]) + pq[c];
                prop_assert!((lhs[c] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()) * 10.0);
            }
        }

        #[test]
        fn depth_round_trip(s in 0.01f64..100.0) {
            let d = scale_to_depth(s, 5000.0, 1288.0).unwrap();
            let back = depth_to_scale(d, 5000.0, 1288.0).unwrap();
            prop_assert!((back - s).abs() <= 1e-9 * s.max(1.0));
        }

        #[test]
        fn boxes_always_valid(pts in proptest::collection::vec(proptest::array::uniform2(-2.0f64..3.0), 1..20)) {
            prop_assert!(box_from_points(&pts).unwrap().is_valid());
        }
    }
}
