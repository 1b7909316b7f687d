//! Depth images to surface-normal images.
//!
//! Depth is back-projected through a pinhole camera into a camera-frame point
//! field (x right, y down, z forward). Normals are the normalized cross
//! product of central-difference tangents of that field, oriented to face the
//! camera, and stored with the usual `(n + 1) / 2` color encoding. Pixels
//! without a full valid stencil are encoded as black.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEGENERATE_CROSS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.check_focal()?;
        Ok(k)
    }

    fn check_focal(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Checks the intrinsics against an image of `height` x `width` pixels.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.check_focal()?;
        let inside = |c: f64, n: usize| c.is_finite() && c >= 0.0 && c <= n as f64;
        if !inside(self.cx, width) || !inside(self.cy, height) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside a {height}x{width} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Camera-frame viewing ray through pixel `(u, v)`, scaled to unit depth.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Metric depth in meters. A value of zero marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
}

impl DepthMap {
    /// Wraps a depth array. Non-finite entries become missing (0); negative
    /// depth is rejected.
    pub fn from_meters(mut values: Array2<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            } else if *v < 0.0 {
                return Err(Error::Input(format!("negative depth {v}")));
            }
        }
        Ok(Self { values })
    }

    pub fn from_millimeters(mm: &Array2<u16>) -> Self {
        Self {
            values: mm.mapv(|d| f64::from(d) / 1000.0),
        }
    }

    /// Quantizes to integer millimeters, saturating at the u16 range.
    pub fn to_millimeters(&self) -> Array2<u16> {
        self.values
            .mapv(|d| (d * 1000.0).round().clamp(0.0, f64::from(u16::MAX)) as u16)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn validity(&self) -> Array2<bool> {
        self.values.mapv(|d| d > 0.0)
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// Camera-frame 3-D coordinates per pixel, shape `3 x H x W`.
#[derive(Debug, Clone)]
pub struct PointMap {
    pub points: Array3<f64>,
    pub valid: Array2<bool>,
}

impl PointMap {
    pub fn point(&self, row: usize, col: usize) -> [f64; 3] {
        [
            self.points[[0, row, col]],
            self.points[[1, row, col]],
            self.points[[2, row, col]],
        ]
    }
}

pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Result<PointMap> {
    let (h, w) = (depth.height(), depth.width());
    k.validate_for(h, w)?;
    let mut points = Array3::zeros((3, h, w));
    let valid = depth.validity();
    for ((row, col), &z) in depth.values.indexed_iter() {
        if z <= 0.0 {
            continue;
        }
        points[[0, row, col]] = (col as f64 - k.cx) * z / k.fx;
        points[[1, row, col]] = (row as f64 - k.cy) * z / k.fy;
        points[[2, row, col]] = z;
    }
    Ok(PointMap { points, valid })
}

/// Unit normals encoded as `(n + 1) / 2` in a `3 x H x W` array.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceNormalImage {
    channels: Array3<f32>,
    valid: Array2<bool>,
}

impl SurfaceNormalImage {
    pub fn channels(&self) -> &Array3<f32> {
        &self.channels
    }

    pub fn validity(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn height(&self) -> usize {
        self.valid.nrows()
    }

    pub fn width(&self) -> usize {
        self.valid.ncols()
    }

    /// Decoded unit normal at a pixel, `None` where invalid.
    pub fn normal(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        if !self.valid[[row, col]] {
            return None;
        }
        Some(std::array::from_fn(|c| {
            2.0 * f64::from(self.channels[[c, row, col]]) - 1.0
        }))
    }

    /// 8-bit interleaved RGB representation used for the on-disk cache.
    pub fn to_rgb8(&self) -> Array3<u8> {
        let (h, w) = (self.height(), self.width());
        Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
            (self.channels[[ch, r, c]] * 255.0).round().clamp(0.0, 255.0) as u8
        })
    }

    /// Inverse of [`to_rgb8`](Self::to_rgb8); pure black decodes as invalid.
    pub fn from_rgb8(rgb: &Array3<u8>) -> Self {
        let (h, w, _) = rgb.dim();
        let valid = Array2::from_shape_fn((h, w), |(r, c)| {
            (0..3).any(|ch| rgb[[r, c, ch]] != 0)
        });
        let channels = Array3::from_shape_fn((3, h, w), |(ch, r, c)| {
            f32::from(rgb[[r, c, ch]]) / 255.0
        });
        Self { channels, valid }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Per-pixel normal of the point field from a one-pixel central-difference
/// stencil. The border ring and any pixel whose stencil touches an invalid
/// point stay invalid.
pub fn estimate_normals(points: &PointMap) -> SurfaceNormalImage {
    let (h, w) = points.valid.dim();
    let mut channels = Array3::zeros((3, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    if h < 3 || w < 3 {
        return SurfaceNormalImage { channels, valid };
    }
    for row in 1..h - 1 {
        for col in 1..w - 1 {
            let stencil = [
                (row, col),
                (row, col - 1),
                (row, col + 1),
                (row - 1, col),
                (row + 1, col),
            ];
            if stencil.iter().any(|&(r, c)| !points.valid[[r, c]]) {
                continue;
            }
            let tu = sub(points.point(row, col + 1), points.point(row, col - 1));
            let tv = sub(points.point(row + 1, col), points.point(row - 1, col));
            let mut n = cross(tu, tv);
            let norm = dot(n, n).sqrt();
            if norm < DEGENERATE_CROSS {
                continue;
            }
            n = n.map(|x| x / norm);
            if dot(n, points.point(row, col)) > 0.0 {
                n = n.map(|x| -x);
            }
            for (ch, x) in n.iter().enumerate() {
                channels[[ch, row, col]] = ((x + 1.0) / 2.0) as f32;
            }
            valid[[row, col]] = true;
        }
    }
    SurfaceNormalImage { channels, valid }
}

/// Back-projection followed by normal estimation.
pub fn surface_normals(depth: &DepthMap, k: &CameraIntrinsics) -> Result<SurfaceNormalImage> {
    Ok(estimate_normals(&backproject(depth, k)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    /// Depth of the plane `n . X = d` seen through each pixel; 0 where the
    /// ray misses the plane in front of the camera.
    fn plane_depth(k: &CameraIntrinsics, h: usize, w: usize, n: [f64; 3], d: f64) -> DepthMap {
        let values = Array2::from_shape_fn((h, w), |(r, c)| {
            let ray = k.ray(c as f64, r as f64);
            let denom = dot(n, ray);
            if denom.abs() < 1e-9 {
                return 0.0;
            }
            let t = d / denom;
            if t > 0.0 && t < 1e4 {
                t
            } else {
                0.0
            }
        });
        DepthMap::from_meters(values).unwrap()
    }

    fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
        dot(a, b).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn principal_point_backprojects_onto_axis() {
        let mut depth = Array2::zeros((100, 100));
        depth[[50, 50]] = 2.0;
        depth[[50, 60]] = 1.0;
        let pm = backproject(&DepthMap::from_meters(depth).unwrap(), &k100()).unwrap();
        assert_eq!(pm.point(50, 50), [0.0, 0.0, 2.0]);
        let p = pm.point(50, 60);
        assert_abs_diff_eq!(p[0], 0.1, epsilon = 1e-15);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 1.0);
        assert!(!pm.valid[[0, 0]]);
    }

    #[test]
    fn non_positive_focal_length_is_rejected() {
        assert!(matches!(
            CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        let bad = CameraIntrinsics { fx: -1.0, fy: 1.0, cx: 1.0, cy: 1.0 };
        let depth = DepthMap::from_meters(Array2::ones((4, 4))).unwrap();
        assert!(matches!(backproject(&depth, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn fronto_parallel_plane_faces_the_camera() {
        let depth = DepthMap::from_meters(Array2::from_elem((20, 30), 3.5)).unwrap();
        let k = CameraIntrinsics::new(40.0, 40.0, 15.0, 10.0).unwrap();
        let sn = surface_normals(&depth, &k).unwrap();
        for r in 1..19 {
            for c in 1..29 {
                let n = sn.normal(r, c).unwrap();
                assert_abs_diff_eq!(n[0], 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!(n[1], 0.0, epsilon = 1e-6);
                assert_abs_diff_eq!(n[2], -1.0, epsilon = 1e-6);
                assert_abs_diff_eq!(sn.channels()[[0, r, c]], 0.5);
                assert_abs_diff_eq!(sn.channels()[[2, r, c]], 0.0);
            }
        }
        // border ring
        assert!(sn.normal(0, 5).is_none());
        assert!(sn.normal(5, 29).is_none());
    }

    #[test]
    fn ground_plane_normal_points_up() {
        let k = k100();
        // y = 1.5 in camera frame; only rows below the horizon hit it.
        let depth = plane_depth(&k, 100, 100, [0.0, 1.0, 0.0], 1.5);
        let sn = surface_normals(&depth, &k).unwrap();
        let mut checked = 0;
        for r in 55..99 {
            for c in 1..99 {
                let n = sn.normal(r, c).unwrap();
                assert!(angle(n, [0.0, -1.0, 0.0]) < 1e-3);
                checked += 1;
            }
        }
        assert!(checked > 1000);
        assert!(sn.normal(40, 50).is_none());
    }

    #[test]
    fn missing_top_half_is_black() {
        let mut values = Array2::from_elem((16, 16), 2.0);
        values.slice_mut(ndarray::s![..8, ..]).fill(0.0);
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let sn = surface_normals(&DepthMap::from_meters(values).unwrap(), &k).unwrap();
        for r in 0..8 {
            for c in 0..16 {
                assert!(!sn.validity()[[r, c]]);
                for ch in 0..3 {
                    assert_eq!(sn.channels()[[ch, r, c]], 0.0);
                }
            }
        }
        // row 8 touches the invalid row 7 through its stencil
        assert!(sn.normal(8, 8).is_none());
        assert!(sn.normal(9, 8).is_some());
    }

    #[test]
    fn millimeter_round_trip() {
        let mm = Array2::from_shape_fn((3, 4), |(r, c)| (r * 1000 + c * 7) as u16);
        assert_eq!(DepthMap::from_millimeters(&mm).to_millimeters(), mm);
    }

    #[test]
    fn nan_depth_is_missing_and_negative_is_rejected() {
        let d = DepthMap::from_meters(Array2::from_elem((2, 2), f64::NAN)).unwrap();
        assert!(d.validity().iter().all(|v| !v));
        assert!(DepthMap::from_meters(Array2::from_elem((2, 2), -1.0)).is_err());
    }

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = dot(v, v).sqrt();
        v.map(|x| x / n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn tilted_planes_are_recovered(
            nx in -0.6f64..0.6, ny in -0.6f64..0.6, d in 1.0f64..8.0,
        ) {
            let k = CameraIntrinsics::new(60.0, 55.0, 24.0, 20.0).unwrap();
            let n = unit([nx, ny, 1.0]);
            let depth = plane_depth(&k, 40, 48, n, d);
            let sn = surface_normals(&depth, &k).unwrap();
            let pm = backproject(&depth, &k).unwrap();
            let facing = if dot(n, pm.point(20, 24)) > 0.0 { n.map(|x| -x) } else { n };
            for r in 0..40 {
                for c in 0..48 {
                    if let Some(est) = sn.normal(r, c) {
                        prop_assert!((dot(est, est).sqrt() - 1.0).abs() < 1e-4);
                        prop_assert!(dot(est, pm.point(r, c)) <= 0.0);
                        prop_assert!(angle(est, facing) < 1e-3);
                    }
                }
            }
        }

        #[test]
        fn translated_plane_keeps_normals(tx in -1.0f64..1.0, ty in -1.0f64..1.0, tz in 0.0f64..2.0) {
            let k = CameraIntrinsics::new(50.0, 50.0, 20.0, 20.0).unwrap();
            // translating n . X = d by t gives n . X = d + n . t
            let n = unit([0.3, -0.2, 1.0]);
            let depth = plane_depth(&k, 40, 40, n, 4.0);
            let moved = plane_depth(&k, 40, 40, n, 4.0 + dot(n, [tx, ty, tz]));
            let a = surface_normals(&depth, &k).unwrap();
            let b = surface_normals(&moved, &k).unwrap();
            for r in 1..39 {
                for c in 1..39 {
                    if let (Some(x), Some(y)) = (a.normal(r, c), b.normal(r, c)) {
                        prop_assert!(angle(x, y) < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn rgb8_cache_is_within_quantization() {
        let k = k100();
        let depth = plane_depth(&k, 100, 100, unit([0.2, 1.0, 0.4]), 1.5);
        let sn = surface_normals(&depth, &k).unwrap();
        let back = SurfaceNormalImage::from_rgb8(&sn.to_rgb8());
        assert_eq!(back.validity(), sn.validity());
        for (a, b) in back.channels().iter().zip(sn.channels().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
