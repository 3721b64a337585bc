//! Synthetic rigid scenes with exact ground truth.
//!
//! A scene is a background plane plus fronto-parallel textured patches, seen
//! by a camera that moves between frames `t` and `t+1` while every patch may
//! carry its own rigid motion. Both frames are ray-cast analytically: each
//! pixel intersects every surface, the nearest hit wins and its texture is
//! evaluated at the hit point in the surface's rest coordinates. Frame `t+1`
//! is therefore never produced by resampling frame `t`.

use nalgebra::{Point2, Point3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{
    in_sampling_bounds, project_unchecked, DepthMap, ImageBuffer, Intrinsics, PoseSE3, Taps,
};
use crate::segmentation::RegionLabels;

const MIN_DEPTH: f64 = 0.1;
const MAX_DEPTH: f64 = 200.0;

/// Rigid motion written as an axis-angle rotation in degrees plus a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self::new([0.0; 3], [0.0; 3])
    }
}

impl MotionSpec {
    pub fn new(rotation_deg: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation_deg,
            translation,
        }
    }

    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::from_axis_angle(
            Vector3::from(self.rotation_deg).map(f64::to_radians),
            Vector3::from(self.translation),
        )
    }

    pub fn from_pose(pose: &PoseSE3) -> Self {
        let w = pose.rotation.scaled_axis().map(f64::to_degrees);
        let t = pose.translation;
        Self::new([w.x, w.y, w.z], [t.x, t.y, t.z])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Background {
    /// Plane `Z = depth` in frame-`t` camera coordinates.
    FrontoParallel { depth: f64 },
    /// Plane `Z = depth + slope_x * X + slope_y * Y`.
    Slanted {
        depth: f64,
        slope_x: f64,
        slope_y: f64,
    },
}

impl Background {
    /// Normal `n` and offset `c` of the plane `n . X = c`.
    fn plane(&self) -> (Vector3<f64>, f64) {
        match *self {
            Background::FrontoParallel { depth } => (Vector3::z(), depth),
            Background::Slanted {
                depth,
                slope_x,
                slope_y,
            } => (Vector3::new(-slope_x, -slope_y, 1.0), depth),
        }
    }
}

/// Object outline in frame-`t` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Footprint {
    /// Covers pixel centres `x..x+width` by `y..y+height`.
    Rect {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
    },
}

impl Footprint {
    fn contains(&self, p: &Point2<f64>) -> bool {
        match *self {
            Footprint::Rect {
                x,
                y,
                width,
                height,
            } => {
                p.x >= x - 0.5 && p.x < x + width - 0.5 && p.y >= y - 0.5 && p.y < y + height - 0.5
            }
            Footprint::Ellipse { cx, cy, rx, ry } => {
                ((p.x - cx) / rx).powi(2) + ((p.y - cy) / ry).powi(2) <= 1.0
            }
        }
    }

    /// `(min_x, min_y, max_x, max_y)` of the covered area.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Footprint::Rect {
                x,
                y,
                width,
                height,
            } => (x - 0.5, y - 0.5, x + width - 0.5, y + height - 0.5),
            Footprint::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub footprint: Footprint,
    /// Depth of the fronto-parallel patch in frame `t`.
    pub depth: f64,
    /// Motion of the patch in frame-`t` camera coordinates, applied before the camera motion.
    #[serde(default)]
    pub motion: MotionSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextureKind {
    /// Sum of random sinusoids with projected wavelengths of at least `min_wavelength_px`.
    Smooth {
        waves: usize,
        min_wavelength_px: f64,
    },
    Checkerboard {
        cell_px: f64,
    },
}

impl Default for TextureKind {
    fn default() -> Self {
        TextureKind::Smooth {
            waves: 6,
            min_wavelength_px: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub background: Background,
    #[serde(default)]
    pub texture: TextureKind,
    #[serde(default)]
    pub camera_motion: MotionSpec,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

impl SceneSpec {
    /// A fronto-parallel background 5 m away, no motion, no objects.
    pub fn static_scene(width: usize, height: usize, seed: u64) -> Self {
        let f = 0.75 * width as f64;
        Self {
            seed,
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
                width,
                height,
            },
            background: Background::FrontoParallel { depth: 5.0 },
            texture: TextureKind::default(),
            camera_motion: MotionSpec::default(),
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        k.validate().map_err(|e| Error::Spec(e.to_string()))?;
        if k.width < 2 || k.height < 2 {
            return Err(Error::Spec("image must be at least 2x2".into()));
        }
        let (_, c) = self.background.plane();
        if !(MIN_DEPTH..MAX_DEPTH).contains(&c) {
            return Err(Error::Spec(format!(
                "background depth {c} outside ({MIN_DEPTH}, {MAX_DEPTH})"
            )));
        }
        match self.texture {
            TextureKind::Smooth {
                waves,
                min_wavelength_px,
            } => {
                if !(1..=8).contains(&waves) || !(min_wavelength_px >= 2.0) {
                    return Err(Error::Spec(
                        "smooth texture needs 1-8 waves of wavelength >= 2 px".into(),
                    ));
                }
            }
            TextureKind::Checkerboard { cell_px } => {
                if !(cell_px >= 1.0) {
                    return Err(Error::Spec(
                        "checkerboard cell must be at least 1 px".into(),
                    ));
                }
            }
        }
        let all_finite = |m: &MotionSpec| {
            m.rotation_deg
                .iter()
                .chain(&m.translation)
                .all(|v| v.is_finite())
        };
        if !all_finite(&self.camera_motion) || !self.objects.iter().all(|o| all_finite(&o.motion)) {
            return Err(Error::Spec("motions must be finite".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.depth > MIN_DEPTH && o.depth < MAX_DEPTH) {
                return Err(Error::Spec(format!(
                    "object {i} depth {} out of range",
                    o.depth
                )));
            }
            let (x0, y0, x1, y1) = o.footprint.bounds();
            let ok_size = match o.footprint {
                Footprint::Rect { width, height, .. } => width > 0.0 && height > 0.0,
                Footprint::Ellipse { rx, ry, .. } => rx > 0.0 && ry > 0.0,
            };
            if !ok_size
                || x0 < -0.5
                || y0 < -0.5
                || x1 > k.width as f64 - 0.5
                || y1 > k.height as f64 - 0.5
            {
                return Err(Error::Spec(format!(
                    "object {i} footprint must lie inside the image"
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Rendered frame pair with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub intrinsics: Intrinsics,
    pub frame_t: ImageBuffer,
    pub frame_t1: ImageBuffer,
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub camera_motion: PoseSE3,
    pub object_motions: Vec<PoseSE3>,
    /// Frame-`t` to frame-`t+1` motion of each region: the camera motion for
    /// the static region, camera motion after object motion otherwise.
    pub region_poses: Vec<PoseSE3>,
    /// Flow of every frame-`t` pixel; valid where the point stays in front of the camera.
    pub flow_gt: FlowField,
    pub labels_gt: RegionLabels,
    pub labels_t1_gt: RegionLabels,
    /// Frame-`t` pixels whose surface point is visible at `t+1`.
    pub nonoccluded_t: Vec<bool>,
    /// Frame-`t+1` pixels whose surface point was visible at `t`.
    pub nonoccluded_t1: Vec<bool>,
}

#[derive(Debug, Clone)]
struct Wave {
    k: Vector2<f64>,
    phase: f64,
    amplitude: f64,
}

#[derive(Debug, Clone)]
enum Texture {
    Waves(Vec<Wave>),
    Checker { cell: f64 },
}

impl Texture {
    /// `scale` is the surface length in meters of one pixel at the farthest
    /// visible point.
    fn new(kind: &TextureKind, scale: f64, seed: u64, stream: u64) -> Self {
        match *kind {
            TextureKind::Smooth {
                waves,
                min_wavelength_px,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let mut out: Vec<Wave> = (0..waves)
                    .map(|_| {
                        let theta = rng.random_range(0.0..std::f64::consts::TAU);
                        let wavelength =
                            rng.random_range(min_wavelength_px..3.0 * min_wavelength_px) * scale;
                        let freq = std::f64::consts::TAU / wavelength;
                        Wave {
                            k: Vector2::new(theta.cos(), theta.sin()) * freq,
                            phase: rng.random_range(0.0..std::f64::consts::TAU),
                            amplitude: rng.random_range(0.5..1.0),
                        }
                    })
                    .collect();
                let total: f64 = out.iter().map(|w| w.amplitude).sum();
                for w in &mut out {
                    w.amplitude *= 0.4 / total;
                }
                Texture::Waves(out)
            }
            TextureKind::Checkerboard { cell_px } => Texture::Checker {
                cell: cell_px * scale,
            },
        }
    }

    fn eval(&self, p: &Point3<f64>) -> f64 {
        match self {
            Texture::Waves(waves) => {
                0.5 + waves
                    .iter()
                    .map(|w| w.amplitude * (w.k.x * p.x + w.k.y * p.y + w.phase).sin())
                    .sum::<f64>()
            }
            Texture::Checker { cell } => {
                let parity = ((p.x / cell).floor() + (p.y / cell).floor()).rem_euclid(2.0);
                if parity < 0.5 {
                    0.25
                } else {
                    0.75
                }
            }
        }
    }
}

/// Visible surface at one pixel.
#[derive(Debug, Clone, Copy)]
struct Hit {
    surface: usize,
    depth: f64,
    /// Hit point in the surface's frame-`t` camera coordinates.
    rest: Point3<f64>,
}

struct Renderer<'a> {
    spec: &'a SceneSpec,
    k: &'a Intrinsics,
}

impl Renderer<'_> {
    /// Casts every pixel with surface `s` placed by `poses[s]` (rest frame to
    /// viewing camera).
    fn render(&self, poses: &[PoseSE3]) -> Result<Vec<Hit>> {
        let k = self.k;
        let (w, h) = (k.width, k.height);
        let mut planes = Vec::with_capacity(poses.len());
        let (n, c) = self.spec.background.plane();
        planes.push((n, c));
        for o in &self.spec.objects {
            planes.push((Vector3::z(), o.depth));
        }
        // Each plane n.X = c moved by pose A becomes (R n).X' = c + (R n).t.
        let moved: Vec<(Vector3<f64>, f64)> = planes
            .iter()
            .zip(poses)
            .map(|((n, c), a)| {
                let n2 = a.rotation * n;
                (n2, c + n2.dot(&a.translation))
            })
            .collect();
        let inverses: Vec<PoseSE3> = poses.iter().map(PoseSE3::inverse).collect();
        let mut hits = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let ray = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                let mut best: Option<Hit> = None;
                for (s, (n, c)) in moved.iter().enumerate() {
                    let denom = n.dot(&ray);
                    if denom == 0.0 {
                        continue;
                    }
                    let z = c / denom;
                    if !(z > 0.0) || best.is_some_and(|b| b.depth <= z) {
                        continue;
                    }
                    let rest = inverses[s].apply(&Point3::from(ray * z));
                    if s > 0
                        && !self.spec.objects[s - 1]
                            .footprint
                            .contains(&project_unchecked(&rest, k))
                    {
                        continue;
                    }
                    best = Some(Hit {
                        surface: s,
                        depth: z,
                        rest,
                    });
                }
                let Some(hit) = best else {
                    return Err(Error::Spec(format!(
                        "background does not cover pixel ({x}, {y})"
                    )));
                };
                if !(hit.depth > MIN_DEPTH && hit.depth < MAX_DEPTH) {
                    return Err(Error::Spec(format!(
                        "pixel ({x}, {y}) sees depth {} outside ({MIN_DEPTH}, {MAX_DEPTH}) m",
                        hit.depth
                    )));
                }
                hits.push(hit);
            }
        }
        Ok(hits)
    }
}

/// Renders the spec. Deterministic for a given spec.
pub fn generate(spec: &SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let k = &spec.intrinsics;
    let (w, h) = (k.width, k.height);
    let camera = spec.camera_motion.to_pose();
    let object_motions: Vec<PoseSE3> = spec.objects.iter().map(|o| o.motion.to_pose()).collect();
    let mut region_poses = vec![camera];
    region_poses.extend(object_motions.iter().map(|m| camera.compose(m)));
    let surfaces = region_poses.len();

    let renderer = Renderer { spec, k };
    let hits_t = renderer.render(&vec![PoseSE3::identity(); surfaces])?;
    let hits_t1 = renderer.render(&region_poses)?;

    let scale = (0..surfaces)
        .map(|s| {
            let far = hits_t
                .iter()
                .chain(&hits_t1)
                .filter(|hit| hit.surface == s)
                .map(|hit| hit.depth)
                .fold(
                    if s == 0 {
                        spec.background.plane().1
                    } else {
                        spec.objects[s - 1].depth
                    },
                    f64::max,
                );
            far / k.fx.min(k.fy)
        })
        .collect::<Vec<_>>();
    let textures: Vec<Texture> = (0..surfaces)
        .map(|s| Texture::new(&spec.texture, scale[s], spec.seed, s as u64))
        .collect();

    let shade = |hits: &[Hit]| -> Result<ImageBuffer> {
        ImageBuffer::new(
            w,
            h,
            1,
            hits.iter()
                .map(|hit| textures[hit.surface].eval(&hit.rest))
                .collect(),
        )
    };
    let depth =
        |hits: &[Hit]| DepthMap::from_depths(w, h, hits.iter().map(|hit| hit.depth).collect());
    let ids = |hits: &[Hit]| -> Vec<usize> { hits.iter().map(|hit| hit.surface).collect() };
    let (ids_t, ids_t1) = (ids(&hits_t), ids(&hits_t1));

    // A point is unoccluded when every bilinear tap around its projection in
    // the other frame shows the same surface.
    let seen_in = |q: &Point2<f64>, surface: usize, other: &[usize]| {
        in_sampling_bounds(q, w, h)
            && Taps::new(q, w, h)
                .weighted(w)
                .iter()
                .all(|(i, wgt)| *wgt == 0.0 || other[*i] == surface)
    };

    let mut flow = Vec::with_capacity(w * h);
    let mut flow_valid = Vec::with_capacity(w * h);
    let mut nonoccluded_t = Vec::with_capacity(w * h);
    for (idx, hit) in hits_t.iter().enumerate() {
        let pose = &region_poses[hit.surface];
        let y = pose.apply(&hit.rest);
        if y.z > 0.0 {
            let q = if pose.is_exact_identity() {
                Point2::new((idx % w) as f64, (idx / w) as f64)
            } else {
                project_unchecked(&y, k)
            };
            flow.push(q - Point2::new((idx % w) as f64, (idx / w) as f64));
            flow_valid.push(true);
            nonoccluded_t.push(seen_in(&q, hit.surface, &ids_t1));
        } else {
            flow.push(Vector2::zeros());
            flow_valid.push(false);
            nonoccluded_t.push(false);
        }
    }
    let nonoccluded_t1 = hits_t1
        .iter()
        .map(|hit| seen_in(&project_unchecked(&hit.rest, k), hit.surface, &ids_t))
        .collect();

    Ok(SceneBundle {
        intrinsics: *k,
        frame_t: shade(&hits_t)?,
        frame_t1: shade(&hits_t1)?,
        depth_t: depth(&hits_t)?,
        depth_t1: depth(&hits_t1)?,
        camera_motion: camera,
        object_motions,
        region_poses,
        flow_gt: FlowField::new(w, h, flow, flow_valid)?,
        labels_gt: RegionLabels::with_region_count(w, h, ids_t, surfaces)?,
        labels_t1_gt: RegionLabels::with_region_count(w, h, ids_t1, surfaces)?,
        nonoccluded_t,
        nonoccluded_t1,
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Applies a random rotation of exactly `rot_deg` about a uniformly random
/// axis and a translation of exactly `trans_m` in a uniformly random
/// direction after `pose`.
pub fn perturb_pose(pose: &PoseSE3, rot_deg: f64, trans_m: f64, seed: u64) -> PoseSE3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = random_unit(&mut rng);
    let dir = random_unit(&mut rng);
    PoseSE3::from_axis_angle(axis * rot_deg.to_radians(), dir * trans_m).compose(pose)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{decompose_flow, synthesize_flow};

    fn moving_object(seed: u64) -> SceneSpec {
        let mut spec = SceneSpec::static_scene(128, 96, seed);
        spec.camera_motion = MotionSpec::new([0.0, 0.5, 0.0], [-0.1, 0.0, 0.05]);
        spec.objects.push(ObjectSpec {
            footprint: Footprint::Rect {
                x: 40.0,
                y: 30.0,
                width: 30.0,
                height: 20.0,
            },
            depth: 3.0,
            motion: MotionSpec::new([0.0, 0.0, 1.0], [0.15, 0.0, 0.0]),
        });
        spec
    }

    #[test]
    fn static_world() {
        let b = generate(&SceneSpec::static_scene(40, 30, 1)).unwrap();
        assert_eq!(b.frame_t, b.frame_t1);
        assert!(b.flow_gt.vectors().iter().all(|f| *f == Vector2::zeros()));
        assert_eq!(b.labels_gt.motion_regions(), 0);
        assert!(b.nonoccluded_t.iter().all(|v| *v));
    }

    #[test]
    fn translation_gives_uniform_flow() {
        let mut spec = SceneSpec::static_scene(60, 40, 2);
        spec.intrinsics.fx = 100.0;
        spec.intrinsics.fy = 100.0;
        spec.background = Background::FrontoParallel { depth: 2.0 };
        spec.camera_motion = MotionSpec::new([0.0; 3], [-0.1, 0.0, 0.0]);
        let b = generate(&spec).unwrap();
        for f in b.flow_gt.vectors() {
            assert!((f - Vector2::new(-5.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn object_region_and_piecewise_flow() {
        let mut spec = moving_object(3);
        spec.camera_motion = MotionSpec::new([0.0; 3], [-0.1, 0.0, 0.0]);
        spec.objects[0].motion = MotionSpec::new([0.0; 3], [0.2, 0.0, 0.0]);
        let b = generate(&spec).unwrap();
        assert_eq!(b.labels_gt.motion_regions(), 1);
        assert_eq!(b.labels_gt.counts()[1], 600);
        let f = spec.intrinsics.fx;
        for (idx, v) in b.flow_gt.vectors().iter().enumerate() {
            let expected = if b.labels_gt.labels()[idx] == 1 {
                0.1 * f / 3.0
            } else {
                -0.1 * f / 5.0
            };
            assert!((v.x - expected).abs() < 1e-9 && v.y.abs() < 1e-12);
        }
    }

    #[test]
    fn flow_matches_synthesis_per_region() {
        let b = generate(&moving_object(4)).unwrap();
        let k = b.intrinsics;
        for (m, pose) in b.region_poses.iter().enumerate() {
            let synth = synthesize_flow(&b.depth_t, pose, &k).unwrap();
            for idx in 0..b.labels_gt.labels().len() {
                if b.labels_gt.labels()[idx] == m && synth.is_valid(idx) {
                    assert!((synth.vectors()[idx] - b.flow_gt.vectors()[idx]).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn decomposition_recovers_background_depth() {
        let b = generate(&moving_object(5)).unwrap();
        let d = decompose_flow(&b.flow_gt, &b.camera_motion, &b.intrinsics).unwrap();
        let mut checked = 0;
        for idx in 0..b.labels_gt.labels().len() {
            if b.labels_gt.labels()[idx] == 0 {
                if let Some(z) = d.get(idx) {
                    let truth = b.depth_t.get(idx).unwrap();
                    assert!((z - truth).abs() / truth < 1e-6);
                    checked += 1;
                }
            }
        }
        assert!(checked > 5000);
    }

    #[test]
    fn occlusion_masks() {
        let b = generate(&moving_object(6)).unwrap();
        let hidden_t = b.nonoccluded_t.iter().filter(|v| !**v).count();
        let hidden_t1 = b.nonoccluded_t1.iter().filter(|v| !**v).count();
        assert!(hidden_t > 0 && hidden_t1 > 0);
        // Pixels far from the object are never occluded.
        assert!(b.nonoccluded_t[5 * 128 + 120]);
        assert_eq!(b.labels_t1_gt.region_count(), 2);
        assert!(b.labels_t1_gt.counts()[1] > 0);
    }

    #[test]
    fn textures_stay_in_range_and_are_deterministic() {
        for texture in [
            TextureKind::default(),
            TextureKind::Checkerboard { cell_px: 8.0 },
        ] {
            let mut spec = moving_object(7);
            spec.texture = texture;
            let a = generate(&spec).unwrap();
            let b = generate(&spec).unwrap();
            assert_eq!(a, b);
            assert!(a.frame_t.data().iter().all(|v| (0.05..=0.95).contains(v)));
        }
        let a = generate(&moving_object(8)).unwrap();
        let b = generate(&moving_object(9)).unwrap();
        assert_ne!(a.frame_t, b.frame_t);
    }

    #[test]
    fn spec_validation_and_toml() {
        let spec = moving_object(10);
        let back = SceneSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        let mut bad = spec.clone();
        bad.objects[0].footprint = Footprint::Rect {
            x: 120.0,
            y: 0.0,
            width: 20.0,
            height: 5.0,
        };
        assert!(matches!(generate(&bad), Err(Error::Spec(_))));
        let mut bad = spec.clone();
        bad.background = Background::FrontoParallel { depth: 500.0 };
        assert!(matches!(generate(&bad), Err(Error::Spec(_))));
        let mut bad = spec;
        bad.background = Background::Slanted {
            depth: 5.0,
            slope_x: 5.0,
            slope_y: 0.0,
        };
        assert!(matches!(generate(&bad), Err(Error::Spec(_))));
        assert!(SceneSpec::from_toml("seed = 1").is_err());
    }

    #[test]
    fn perturbation_magnitudes() {
        let t = PoseSE3::from_axis_angle(Vector3::new(0.1, 0.2, -0.1), Vector3::new(1.0, 0.0, 0.5));
        assert_eq!(
            perturb_pose(&t, 0.0, 0.0, 3),
            t.compose(&PoseSE3::identity())
        );
        for seed in 0..10 {
            let p = perturb_pose(&t, 1.0, 0.05, seed);
            assert!((p.angular_distance(&t).to_degrees() - 1.0).abs() < 1e-9);
            let pure = perturb_pose(&PoseSE3::identity(), 0.0, 0.05, seed);
            assert!((pure.translation.norm() - 0.05).abs() < 1e-15);
        }
        assert_ne!(
            perturb_pose(&t, 1.0, 0.05, 1),
            perturb_pose(&t, 1.0, 0.05, 2)
        );
    }
}
