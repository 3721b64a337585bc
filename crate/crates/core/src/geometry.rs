//! Pinhole camera model, rigid poses, coordinate reprojection and bilinear
//! inverse warping.
//!
//! # Pose convention
//!
//! A [`PoseSE3`] passed to [`reproject_coords`] or [`warp_image`] maps 3D
//! points expressed in the camera frame that owns the depth map into the
//! camera frame of the image being sampled. For a frame pair `(t, t+1)` the
//! forward pose `T_fwd` satisfies `X_{t+1} = T_fwd * X_t`, so
//! `warp_image(I_{t+1}, D_t, T_fwd, K)` synthesizes frame `t` from frame `t+1`.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// `(height, width)`, the order used by every raster in this crate.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Scales the intrinsics linearly to a new image size.
    pub fn rescaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// Rigid transformation with a unit-quaternion rotation and a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Builds a pose from an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_scaled_axis(axis_angle), translation)
    }

    /// Builds a pose from a row-major 3x4 `[R | t]` matrix. The rotation block
    /// is projected onto the nearest rotation.
    pub fn from_matrix_3x4(m: &[f64; 12]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("pose matrix has non-finite entries".into()));
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let rot = Rotation3::from_matrix_eps(&r, 1e-15, 100, Rotation3::identity());
        let t = Vector3::new(m[3], m[7], m[11]);
        Ok(Self::new(UnitQuaternion::from_rotation_matrix(&rot), t))
    }

    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = self.rotation.to_rotation_matrix();
        let r = r.matrix();
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv = self.rotation.inverse();
        PoseSE3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn apply(&self, x: &Point3<f64>) -> Point3<f64> {
        self.rotation * x + self.translation
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Angle of the relative rotation between two poses, radians.
    pub fn angular_distance(&self, other: &PoseSE3) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance(&self, other: &PoseSE3) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Bitwise identity, as produced by [`PoseSE3::identity`].
    pub fn is_exact_identity(&self) -> bool {
        self.rotation == UnitQuaternion::identity() && self.translation == Vector3::zeros()
    }

    pub fn is_identity(&self, eps: f64) -> bool {
        self.rotation_angle() <= eps && self.translation.norm() <= eps
    }
}

/// Row-major raster of real intensities in `[0, 1]` with an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Domain("image needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Domain(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(bad) = data
            .iter()
            .find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(Error::Domain(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            mask: None,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    /// Builds a single-channel image from a function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.width * self.height {
            return Err(Error::Shape {
                expected: (self.height, self.width),
                actual: (mask.len(), 1),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub(crate) fn from_parts(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
            mask,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.as_ref().map_or(self.width * self.height, |m| {
            m.iter().filter(|v| **v).count()
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-interleaved values of pixel `idx`.
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Extracts one channel as its own image, keeping the mask.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self
            .data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Self::from_parts(self.width, self.height, 1, data, self.mask.clone())
    }
}

/// Per-pixel depth in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a depth map; invalid entries are stored as zero.
    pub fn new(width: usize, height: usize, mut depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != width * height || valid.len() != width * height {
            return Err(Error::Domain(format!(
                "depth map buffers must hold {} values",
                width * height
            )));
        }
        for (d, v) in depth.iter_mut().zip(&valid) {
            if *v {
                if !(d.is_finite() && *d > 0.0) {
                    return Err(Error::Domain(format!("valid depth {d} is not positive")));
                }
            } else {
                *d = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
        })
    }

    /// Marks every finite, strictly positive entry valid.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = depth.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(width, height, depth, valid)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let depth = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_depths(width, height, depth)
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_depths(width, height, vec![depth; width * height])
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
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

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Option<f64> {
        self.valid[idx].then(|| self.depth[idx])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Multiplies every valid depth by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Domain(format!(
                "scale factor {factor} must be positive"
            )));
        }
        let depth = self.depth.iter().map(|d| d * factor).collect();
        Self::new(self.width, self.height, depth, self.valid.clone())
    }
}

/// Per-pixel continuous target coordinates with validity.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    coords: Vec<Point2<f64>>,
    valid: Vec<bool>,
}

impl PixelGrid {
    /// Sentinel stored at invalid entries.
    pub const INVALID: Point2<f64> = Point2::new(f64::NAN, f64::NAN);

    pub fn identity(width: usize, height: usize) -> Self {
        let coords = (0..height)
            .flat_map(|y| (0..width).map(move |x| Point2::new(x as f64, y as f64)))
            .collect();
        Self {
            width,
            height,
            coords,
            valid: vec![true; width * height],
        }
    }

    pub fn new(
        width: usize,
        height: usize,
        mut coords: Vec<Point2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if coords.len() != width * height || valid.len() != width * height {
            return Err(Error::Domain(format!(
                "pixel grid buffers must hold {} entries",
                width * height
            )));
        }
        for (c, v) in coords.iter_mut().zip(&valid) {
            if !*v {
                *c = Self::INVALID;
            } else if !(c.x.is_finite() && c.y.is_finite()) {
                return Err(Error::Domain("valid grid coordinate is not finite".into()));
            }
        }
        Ok(Self {
            width,
            height,
            coords,
            valid,
        })
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

    pub fn coords(&self) -> &[Point2<f64>] {
        &self.coords
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Option<Point2<f64>> {
        self.valid[idx].then(|| self.coords[idx])
    }
}

/// Lifts pixel `p` at depth `d` to a camera-frame point.
pub fn backproject(p: &Point2<f64>, d: f64, k: &Intrinsics) -> Result<Point3<f64>> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::Domain(format!(
            "depth {d} must be finite and positive"
        )));
    }
    Ok(backproject_unchecked(p, d, k))
}

#[inline]
pub(crate) fn backproject_unchecked(p: &Point2<f64>, d: f64, k: &Intrinsics) -> Point3<f64> {
    Point3::new((p.x - k.cx) * d / k.fx, (p.y - k.cy) * d / k.fy, d)
}

/// Projects a camera-frame point onto the image plane.
pub fn project_point(x: &Point3<f64>, k: &Intrinsics) -> Result<Point2<f64>> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera { z: x.z });
    }
    Ok(project_unchecked(x, k))
}

#[inline]
pub(crate) fn project_unchecked(x: &Point3<f64>, k: &Intrinsics) -> Point2<f64> {
    Point2::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy)
}

#[inline]
pub(crate) fn pixel_of(idx: usize, width: usize) -> Point2<f64> {
    Point2::new((idx % width) as f64, (idx / width) as f64)
}

/// True when `c` lies inside the image rectangle grown by one pixel on every side.
#[inline]
pub(crate) fn inside_expanded(c: &Point2<f64>, width: usize, height: usize) -> bool {
    c.x >= -1.0 && c.x <= width as f64 && c.y >= -1.0 && c.y <= height as f64
}

/// Maps every pixel of `depth` through `pose` into the other camera.
pub fn reproject_coords(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Result<PixelGrid> {
    check_shape(k.dims(), depth.dims())?;
    let (w, h) = (depth.width, depth.height);
    // Round-tripping through 3D is not bit-exact, the identity must be.
    let exact_identity = pose.is_exact_identity();
    let mut coords = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for idx in 0..w * h {
        let target = depth.get(idx).and_then(|d| {
            if exact_identity {
                return Some(pixel_of(idx, w));
            }
            let x = pose.apply(&backproject_unchecked(&pixel_of(idx, w), d, k));
            if x.z <= 0.0 {
                return None;
            }
            let c = project_unchecked(&x, k);
            inside_expanded(&c, w, h).then_some(c)
        });
        match target {
            Some(c) => {
                coords.push(c);
                valid.push(true);
            }
            None => {
                coords.push(PixelGrid::INVALID);
                valid.push(false);
            }
        }
    }
    Ok(PixelGrid {
        width: w,
        height: h,
        coords,
        valid,
    })
}

/// Interpolation cell along one axis: the lower tap index and the weight of
/// the upper tap. The lower tap never exceeds `size - 2`, so a coordinate on
/// the last row/column is interpolated inside the last full cell.
#[inline]
pub(crate) fn cell(coord: f64, size: usize) -> (usize, f64) {
    if size < 2 {
        return (0, 0.0);
    }
    let c = coord.clamp(0.0, (size - 1) as f64);
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, c - i0 as f64)
}

/// Bilinear tap layout for one sample location.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

impl Taps {
    #[inline]
    pub fn new(c: &Point2<f64>, width: usize, height: usize) -> Self {
        let (x0, ax) = cell(c.x, width);
        let (y0, ay) = cell(c.y, height);
        Taps {
            x0,
            y0,
            x1: (x0 + 1).min(width - 1),
            y1: (y0 + 1).min(height - 1),
            ax,
            ay,
        }
    }

    /// Indices and weights of the four taps.
    #[inline]
    pub fn weighted(&self, width: usize) -> [(usize, f64); 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (self.y0 * width + self.x0, (1.0 - ax) * (1.0 - ay)),
            (self.y0 * width + self.x1, ax * (1.0 - ay)),
            (self.y1 * width + self.x0, (1.0 - ax) * ay),
            (self.y1 * width + self.x1, ax * ay),
        ]
    }

    #[inline]
    pub fn sample(&self, img: &ImageBuffer, ch: usize) -> f64 {
        let w = img.width;
        let n = img.channels;
        let d = &img.data;
        let i00 = d[(self.y0 * w + self.x0) * n + ch];
        let i10 = d[(self.y0 * w + self.x1) * n + ch];
        let i01 = d[(self.y1 * w + self.x0) * n + ch];
        let i11 = d[(self.y1 * w + self.x1) * n + ch];
        let top = (1.0 - self.ax) * i00 + self.ax * i10;
        let bottom = (1.0 - self.ax) * i01 + self.ax * i11;
        (1.0 - self.ay) * top + self.ay * bottom
    }

    /// Partial derivatives of the bilinear surface of the current cell.
    #[inline]
    pub fn gradient(&self, img: &ImageBuffer, ch: usize) -> (f64, f64) {
        let w = img.width;
        let n = img.channels;
        let d = &img.data;
        let i00 = d[(self.y0 * w + self.x0) * n + ch];
        let i10 = d[(self.y0 * w + self.x1) * n + ch];
        let i01 = d[(self.y1 * w + self.x0) * n + ch];
        let i11 = d[(self.y1 * w + self.x1) * n + ch];
        let du = if self.x1 > self.x0 {
            (1.0 - self.ay) * (i10 - i00) + self.ay * (i11 - i01)
        } else {
            0.0
        };
        let dv = if self.y1 > self.y0 {
            (1.0 - self.ax) * (i01 - i00) + self.ax * (i11 - i10)
        } else {
            0.0
        };
        (du, dv)
    }

    /// Every tap carrying nonzero weight is valid in `img`'s mask.
    #[inline]
    pub fn source_valid(&self, img: &ImageBuffer) -> bool {
        match img.mask() {
            None => true,
            Some(m) => self
                .weighted(img.width)
                .iter()
                .all(|(i, wgt)| *wgt == 0.0 || m[*i]),
        }
    }
}

/// True when bilinear interpolation at `c` touches only in-image taps.
#[inline]
pub(crate) fn in_sampling_bounds(c: &Point2<f64>, width: usize, height: usize) -> bool {
    c.x >= 0.0 && c.x <= (width - 1) as f64 && c.y >= 0.0 && c.y <= (height - 1) as f64
}

/// Samples `img` at every grid coordinate.
///
/// Coordinates are clamped to the image for interpolation. An output pixel is
/// valid when its grid entry is valid, the coordinate lies inside the image
/// (no clamping was needed), and every nonzero-weight tap is valid in the
/// source mask.
pub fn sample_bilinear(img: &ImageBuffer, grid: &PixelGrid) -> Result<ImageBuffer> {
    check_shape(img.dims(), grid.dims())?;
    let (w, h, n) = (img.width, img.height, img.channels);
    let mut data = vec![0.0; w * h * n];
    let mut mask = vec![false; w * h];
    for idx in 0..w * h {
        let Some(c) = grid.get(idx) else { continue };
        let taps = Taps::new(&c, w, h);
        for ch in 0..n {
            data[idx * n + ch] = taps.sample(img, ch);
        }
        mask[idx] = in_sampling_bounds(&c, w, h) && taps.source_valid(img);
    }
    Ok(ImageBuffer::from_parts(w, h, n, data, Some(mask)))
}

/// Synthesizes the view of `src` seen from the frame that owns `depth`.
pub fn warp_image(
    src: &ImageBuffer,
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &Intrinsics,
) -> Result<ImageBuffer> {
    check_shape(src.dims(), depth.dims())?;
    let grid = reproject_coords(depth, pose, k)?;
    sample_bilinear(src, &grid)
}
