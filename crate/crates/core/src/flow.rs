//! Optical flow synthesis from depth and pose, per-region compositing, and
//! decomposition of flow back into depth.
//!
//! Flow is stored as displacement: `target - source` in pixels.

use nalgebra::{Point2, Vector2, Vector3};

use crate::error::{check_shape, Error, Result};
use crate::field::ScalarField;
use crate::geometry::{
    pixel_of, project_unchecked, reproject_coords, DepthMap, Intrinsics, PoseSE3,
};
use crate::segmentation::RegionLabels;

/// Minimum translation-induced displacement, in pixels, for a depth to be
/// considered observable from flow.
pub const MIN_PARALLAX_PX: f64 = 0.5;

/// Per-pixel 2D displacement with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<Vector2<f64>>,
    valid: Vec<bool>,
}

impl FlowField {
    /// Builds a flow field; invalid entries are stored as zero.
    pub fn new(
        width: usize,
        height: usize,
        mut data: Vec<Vector2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if data.len() != width * height || valid.len() != width * height {
            return Err(Error::Domain(format!(
                "flow buffers must hold {} entries",
                width * height
            )));
        }
        for (f, v) in data.iter_mut().zip(&valid) {
            if !*v {
                *f = Vector2::zeros();
            } else if !(f.x.is_finite() && f.y.is_finite()) {
                return Err(Error::Domain("valid flow entry is not finite".into()));
            }
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn uniform(width: usize, height: usize, flow: Vector2<f64>) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![flow; width * height],
            vec![true; width * height],
        )
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> Vector2<f64>,
    ) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, data, vec![true; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn vectors(&self) -> &[Vector2<f64>] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Option<Vector2<f64>> {
        self.valid[idx].then(|| self.data[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// One flow component (0 = horizontal, 1 = vertical) as a plain raster.
    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.data.iter().map(|f| f[axis]).collect()
    }

    pub(crate) fn with_components(&self, u: Vec<f64>, v: Vec<f64>) -> FlowField {
        let data = u
            .into_iter()
            .zip(v)
            .map(|(a, b)| Vector2::new(a, b))
            .collect();
        FlowField {
            width: self.width,
            height: self.height,
            data,
            valid: self.valid.clone(),
        }
    }
}

/// Flow induced by viewing the scene `depth` through the rigid motion `pose`.
pub fn synthesize_flow(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Result<FlowField> {
    let grid = reproject_coords(depth, pose, k)?;
    let w = grid.width();
    let data = grid
        .coords()
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            if grid.valid()[idx] {
                c - pixel_of(idx, w)
            } else {
                Vector2::zeros()
            }
        })
        .collect();
    Ok(FlowField {
        width: w,
        height: grid.height(),
        data,
        valid: grid.valid().to_vec(),
    })
}

/// One contribution to [`composite_flow`]: the flow of `region` in `labels`.
#[derive(Debug, Clone, Copy)]
pub struct FlowPart<'a> {
    pub flow: &'a FlowField,
    pub labels: &'a RegionLabels,
    pub region: usize,
}

/// Assembles a full flow field from per-region flows. Every pixel takes the
/// flow of the single part whose region contains it.
pub fn composite_flow(parts: &[FlowPart<'_>]) -> Result<FlowField> {
    let first = parts
        .first()
        .ok_or_else(|| Error::EmptyDomain("no flow parts to composite".into()))?;
    let dims = first.flow.dims();
    for part in parts {
        check_shape(dims, part.flow.dims())?;
        check_shape(dims, part.labels.dims())?;
    }
    let (h, w) = dims;
    let mut data = vec![Vector2::zeros(); w * h];
    let mut valid = vec![false; w * h];
    let mut claimed = vec![false; w * h];
    for part in parts {
        for (idx, label) in part.labels.labels().iter().enumerate() {
            if *label != part.region {
                continue;
            }
            if claimed[idx] {
                return Err(Error::Consistency(format!(
                    "pixel ({}, {}) claimed by more than one region",
                    idx % w,
                    idx / w
                )));
            }
            claimed[idx] = true;
            if let Some(f) = part.flow.get(idx) {
                data[idx] = f;
                valid[idx] = true;
            }
        }
    }
    FlowField::new(w, h, data, valid)
}

/// Recovers per-pixel depth from flow given the rigid motion that produced it.
///
/// Each pixel solves the two projection equations, linear in depth, by least
/// squares. Pixels whose translation-induced displacement at the recovered
/// depth is below [`MIN_PARALLAX_PX`] are marked invalid.
pub fn decompose_flow(flow: &FlowField, pose: &PoseSE3, k: &Intrinsics) -> Result<DepthMap> {
    check_shape(k.dims(), flow.dims())?;
    let t = pose.translation;
    if !(t.norm() > 1e-12) {
        return Err(Error::DegenerateParallax(
            "pose has no translation, depth is unobservable".into(),
        ));
    }
    let (w, h) = (flow.width, flow.height);
    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for idx in 0..w * h {
        let Some(f) = flow.get(idx) else { continue };
        if let Some(d) = depth_from_displacement(&pixel_of(idx, w), &f, pose, k) {
            depth[idx] = d;
            valid[idx] = true;
        }
    }
    DepthMap::new(w, h, depth, valid)
}

fn depth_from_displacement(
    p: &Point2<f64>,
    f: &Vector2<f64>,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Option<f64> {
    let ray = Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0);
    let a = pose.rotation * ray;
    let t = pose.translation;
    let q = p + f;
    let qx = (q.x - k.cx) / k.fx;
    let qy = (q.y - k.cy) / k.fy;
    // d * coef = rhs for each image axis, scaled to pixel units.
    let (ax, bx) = (k.fx * (a.x - qx * a.z), k.fx * (qx * t.z - t.x));
    let (ay, by) = (k.fy * (a.y - qy * a.z), k.fy * (qy * t.z - t.y));
    let (big, small) = if ax.abs() >= ay.abs() {
        (ax, ay)
    } else {
        (ay, ax)
    };
    if big == 0.0 {
        return None;
    }
    let d = if small.abs() < 1e-3 * big.abs() {
        if ax.abs() >= ay.abs() {
            bx / ax
        } else {
            by / ay
        }
    } else {
        (ax * bx + ay * by) / (ax * ax + ay * ay)
    };
    if !(d.is_finite() && d > 0.0) {
        return None;
    }
    let rotated = a * d;
    let moved = rotated + t;
    if rotated.z <= 0.0 || moved.z <= 0.0 {
        return None;
    }
    let parallax = project_unchecked(&moved.into(), k) - project_unchecked(&rotated.into(), k);
    (parallax.norm() >= MIN_PARALLAX_PX).then_some(d)
}

/// Per-pixel Euclidean distance between two flows over jointly valid pixels.
pub fn endpoint_error_map(a: &FlowField, b: &FlowField) -> Result<ScalarField> {
    check_shape(a.dims(), b.dims())?;
    let n = a.width * a.height;
    let mut values = vec![0.0; n];
    let mut valid = vec![false; n];
    for idx in 0..n {
        if let (Some(fa), Some(fb)) = (a.get(idx), b.get(idx)) {
            values[idx] = (fa - fb).norm();
            valid[idx] = true;
        }
    }
    Ok(ScalarField {
        width: a.width,
        height: a.height,
        values,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::RegionLabels;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn k_small() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn identity_pose_gives_zero_flow() {
        let k = k_small();
        let d = DepthMap::from_depths(
            64,
            48,
            (0..64 * 48).map(|i| 1.0 + (i % 13) as f64 * 0.3).collect(),
        )
        .unwrap();
        let f = synthesize_flow(&d, &PoseSE3::identity(), &k).unwrap();
        assert!(f.vectors().iter().all(|v| *v == Vector2::zeros()));
        assert!(f.valid().iter().all(|v| *v));
    }

    #[test]
    fn lateral_translation_gives_uniform_flow() {
        let k = k_small();
        let d = DepthMap::constant(64, 48, 2.0).unwrap();
        let pose = PoseSE3::from_translation(Vector3::new(-0.1, 0.0, 0.0));
        let f = synthesize_flow(&d, &pose, &k).unwrap();
        for idx in 0..64 * 48 {
            if let Some(v) = f.get(idx) {
                assert_relative_eq!(v.x, -5.0, epsilon = 1e-12);
                assert_relative_eq!(v.y, 0.0, epsilon = 1e-12);
            }
        }
        let d2 = decompose_flow(&f, &pose, &k).unwrap();
        for idx in 0..64 * 48 {
            if let Some(z) = d2.get(idx) {
                assert_relative_eq!(z, 2.0, max_relative = 1e-6);
            }
        }
        assert_eq!(d2.valid_count(), f.valid_count());
    }

    #[test]
    fn two_plane_flow_inverse_to_depth() {
        let k = k_small();
        let d = DepthMap::from_fn(64, 48, |x, _| if x < 32 { 2.0 } else { 4.0 }).unwrap();
        let pose = PoseSE3::from_translation(Vector3::new(0.08, 0.0, 0.0));
        let f = synthesize_flow(&d, &pose, &k).unwrap();
        let near = f.get(10).unwrap().norm();
        let far = f.get(50).unwrap().norm();
        assert_relative_eq!(near / far, 2.0, max_relative = 1e-12);
        assert_relative_eq!(near * 2.0, 100.0 * 0.08, max_relative = 1e-12);
    }

    #[test]
    fn decompose_rejects_rotation_only() {
        let k = k_small();
        let f = FlowField::uniform(64, 48, Vector2::new(1.0, 0.0)).unwrap();
        assert!(matches!(
            decompose_flow(&f, &PoseSE3::identity(), &k),
            Err(Error::DegenerateParallax(_))
        ));
        let rot = PoseSE3::from_axis_angle(Vector3::new(0.0, 0.05, 0.0), Vector3::zeros());
        assert!(matches!(
            decompose_flow(&f, &rot, &k),
            Err(Error::DegenerateParallax(_))
        ));
    }

    #[test]
    fn decompose_marks_low_parallax_invalid() {
        let k = k_small();
        // 100 * 0.001 / 2 = 0.05 px of parallax.
        let pose = PoseSE3::from_translation(Vector3::new(0.001, 0.0, 0.0));
        let f = synthesize_flow(&DepthMap::constant(64, 48, 2.0).unwrap(), &pose, &k).unwrap();
        let d = decompose_flow(&f, &pose, &k).unwrap();
        assert_eq!(d.valid_count(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn decompose_inverts_synthesis(
            w in prop::array::uniform3(-0.05..0.05f64),
            dir in prop::array::uniform3(-1.0..1.0f64),
            mag in 0.05..0.3f64,
            base in 1.0..10.0f64,
        ) {
            let dir = Vector3::from(dir);
            prop_assume!(dir.norm() > 0.1);
            let k = k_small();
            let pose = PoseSE3::from_axis_angle(Vector3::from(w), dir.normalize() * mag);
            let d = DepthMap::from_fn(64, 48, |x, y| base + 0.05 * x as f64 + 0.02 * y as f64).unwrap();
            let f = synthesize_flow(&d, &pose, &k).unwrap();
            let rec = decompose_flow(&f, &pose, &k).unwrap();
            for idx in 0..64 * 48 {
                if let Some(z) = rec.get(idx) {
                    let truth = d.get(idx).unwrap();
                    prop_assert!(((z - truth) / truth).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn endpoint_error_symmetric_and_triangle(seed in 0u64..1000) {
            let mk = |s: u64| FlowField::from_fn(6, 5, |x, y| {
                let h = (x as u64 * 31 + y as u64 * 17 + s * 7919) % 97;
                Vector2::new(h as f64 * 0.1 - 4.0, (h * 3 % 41) as f64 * 0.2 - 4.0)
            }).unwrap();
            let (a, b, c) = (mk(seed), mk(seed + 1), mk(seed + 2));
            let ab = endpoint_error_map(&a, &b).unwrap();
            let ba = endpoint_error_map(&b, &a).unwrap();
            let bc = endpoint_error_map(&b, &c).unwrap();
            let ac = endpoint_error_map(&a, &c).unwrap();
            prop_assert_eq!(&ab, &ba);
            for i in 0..30 {
                prop_assert!(ac.values[i] <= ab.values[i] + bc.values[i] + 1e-12);
            }
        }
    }

    #[test]
    fn endpoint_error_examples() {
        let a = FlowField::from_fn(5, 4, |x, y| Vector2::new(x as f64, -(y as f64))).unwrap();
        let zero = endpoint_error_map(&a, &a).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let b =
            FlowField::from_fn(5, 4, |x, y| Vector2::new(x as f64 + 3.0, 4.0 - y as f64)).unwrap();
        let e = endpoint_error_map(&a, &b).unwrap();
        assert!(e.values.iter().all(|v| (*v - 5.0).abs() < 1e-12));

        let left = FlowField::new(2, 1, vec![Vector2::zeros(); 2], vec![true, false]).unwrap();
        let right = FlowField::new(2, 1, vec![Vector2::zeros(); 2], vec![false, true]).unwrap();
        assert!(endpoint_error_map(&left, &right).unwrap().is_empty());
        assert!(matches!(
            endpoint_error_map(&left, &a),
            Err(Error::Shape { .. })
        ));
    }

    fn square_labels(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> RegionLabels {
        let labels = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                usize::from(x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
            })
            .collect();
        RegionLabels::from_labels(w, h, labels).unwrap()
    }

    #[test]
    fn composite_single_region() {
        let f = FlowField::from_fn(8, 6, |x, y| Vector2::new(x as f64, y as f64)).unwrap();
        let labels = RegionLabels::single(8, 6);
        let out = composite_flow(&[FlowPart {
            flow: &f,
            labels: &labels,
            region: 0,
        }])
        .unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn composite_two_regions_piecewise() {
        let bg = FlowField::uniform(20, 16, Vector2::new(-5.0, 0.0)).unwrap();
        let obj = FlowField::uniform(20, 16, Vector2::new(5.0, 0.0)).unwrap();
        let labels = square_labels(20, 16, 4, 3, 8);
        let out = composite_flow(&[
            FlowPart {
                flow: &bg,
                labels: &labels,
                region: 0,
            },
            FlowPart {
                flow: &obj,
                labels: &labels,
                region: 1,
            },
        ])
        .unwrap();
        for (idx, l) in labels.labels().iter().enumerate() {
            let expected = if *l == 1 { 5.0 } else { -5.0 };
            assert_eq!(out.get(idx).unwrap(), Vector2::new(expected, 0.0));
        }
    }

    #[test]
    fn composite_uncovered_and_overlap() {
        let f = FlowField::uniform(20, 16, Vector2::new(1.0, 2.0)).unwrap();
        let labels = square_labels(20, 16, 4, 3, 8);
        let out = composite_flow(&[FlowPart {
            flow: &f,
            labels: &labels,
            region: 1,
        }])
        .unwrap();
        assert_eq!(out.valid_count(), 64);
        assert!(!out.is_valid(0));

        let all = RegionLabels::single(20, 16);
        let err = composite_flow(&[
            FlowPart {
                flow: &f,
                labels: &all,
                region: 0,
            },
            FlowPart {
                flow: &f,
                labels: &labels,
                region: 1,
            },
        ]);
        assert!(matches!(err, Err(Error::Consistency(_))));
    }

    #[test]
    fn composite_of_identical_flows_is_that_flow() {
        let f = FlowField::from_fn(20, 16, |x, y| Vector2::new(x as f64 * 0.5, y as f64)).unwrap();
        let labels = square_labels(20, 16, 2, 2, 10);
        let out = composite_flow(&[
            FlowPart {
                flow: &f,
                labels: &labels,
                region: 0,
            },
            FlowPart {
                flow: &f,
                labels: &labels,
                region: 1,
            },
        ])
        .unwrap();
        assert_eq!(out, f);
    }
}
