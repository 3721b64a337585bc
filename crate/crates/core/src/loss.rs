//! Photometric and flow objectives.
//!
//! The photometric error mixes a windowed SSIM term with a per-pixel
//! absolute difference:
//!
//! ```text
//! L_pe(I1, I2) = alpha * (1 - SSIM) + (1 - 2 * alpha) * |I1 - I2|
//! ```
//!
//! averaged over jointly valid pixels. The bilateral reprojection loss sums
//! `L_pe` over both warp directions of a frame pair, and the multi-region loss
//! sums bilateral terms over the static region and every motion region.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::field::ScalarField;
use crate::flow::{endpoint_error_map, FlowField};
use crate::geometry::{warp_image, DepthMap, ImageBuffer, Intrinsics, PoseSE3};
use crate::segmentation::{mask_image, RegionLabels};

/// Per-pixel intensity penalty of the photometric error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    L1,
    /// Quadratic below `delta`, linear above.
    SmoothL1 {
        delta: f64,
    },
}

impl Penalty {
    #[inline]
    fn apply(&self, diff: f64) -> f64 {
        let a = diff.abs();
        match *self {
            Penalty::L1 => a,
            Penalty::SmoothL1 { delta } => {
                if a < delta {
                    0.5 * a * a / delta
                } else {
                    a - 0.5 * delta
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM weight; the intensity term is weighted by `1 - 2 * alpha`.
    pub alpha: f64,
    /// Weight of the flow synthesis loss in the depth and pose objectives.
    pub lambda: f64,
    pub ssim_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub penalty: Penalty,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.45,
            lambda: 0.1,
            ssim_window: 3,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            penalty: Penalty::L1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 0.5], got {}",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "SSIM window must be odd, got {}",
                self.ssim_window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM stabilizers must be positive".into()));
        }
        if let Penalty::SmoothL1 { delta } = self.penalty {
            if !(delta > 0.0) {
                return Err(Error::Config(format!(
                    "smooth-L1 delta must be positive, got {delta}"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn joint_valid(a: &ImageBuffer, b: &ImageBuffer, idx: usize) -> bool {
    a.is_valid(idx) && b.is_valid(idx)
}

/// Per-pixel SSIM averaged over channels.
///
/// Local statistics use a square box window clipped to the image and
/// restricted to jointly valid pixels; variances and covariance are
/// population moments.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &LossConfig) -> Result<ScalarField> {
    check_shape(a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::Consistency(format!(
            "channel count {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let (w, h, nc) = (a.width(), a.height(), a.channels());
    let r = (cfg.ssim_window / 2) as isize;
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let idx = y as usize * w + x as usize;
            if !joint_valid(a, b, idx) {
                continue;
            }
            let mut total = 0.0;
            for ch in 0..nc {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab, mut n) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        let j = yy as usize * w + xx as usize;
                        if !joint_valid(a, b, j) {
                            continue;
                        }
                        let (va, vb) = (a.data()[j * nc + ch], b.data()[j * nc + ch]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                        n += 1.0;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let var_a = (saa / n - ma * ma).max(0.0);
                let var_b = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + cfg.c1) * (2.0 * cov + cfg.c2))
                    / ((ma * ma + mb * mb + cfg.c1) * (var_a + var_b + cfg.c2));
            }
            values[idx] = total / nc as f64;
            valid[idx] = true;
        }
    }
    Ok(ScalarField {
        width: w,
        height: h,
        values,
        valid,
    })
}

/// Photometric error and the number of pixels it was averaged over.
pub fn photometric_error_counted(
    a: &ImageBuffer,
    b: &ImageBuffer,
    cfg: &LossConfig,
) -> Result<(f64, usize)> {
    let s = ssim(a, b, cfg)?;
    let nc = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for idx in 0..a.width() * a.height() {
        if !s.valid[idx] {
            continue;
        }
        let intensity = a
            .pixel(idx)
            .iter()
            .zip(b.pixel(idx))
            .map(|(x, y)| cfg.penalty.apply(x - y))
            .sum::<f64>()
            / nc as f64;
        sum += cfg.alpha * (1.0 - s.values[idx]) + (1.0 - 2.0 * cfg.alpha) * intensity;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDomain("images share no valid pixel".into()));
    }
    Ok((sum / n as f64, n))
}

/// Mean photometric error over jointly valid pixels.
pub fn photometric_error(a: &ImageBuffer, b: &ImageBuffer, cfg: &LossConfig) -> Result<f64> {
    photometric_error_counted(a, b, cfg).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy)]
pub struct FramePair<'a> {
    pub t: &'a ImageBuffer,
    pub t1: &'a ImageBuffer,
}

#[derive(Debug, Clone, Copy)]
pub struct DepthPair<'a> {
    pub t: &'a DepthMap,
    pub t1: &'a DepthMap,
}

/// Motion between frames `t` and `t+1` in both directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    /// Maps frame-`t` camera points into frame `t+1`.
    pub forward: PoseSE3,
    /// Maps frame-`t+1` camera points into frame `t`.
    pub backward: PoseSE3,
}

impl PosePair {
    pub fn from_forward(forward: PoseSE3) -> Self {
        Self {
            forward,
            backward: forward.inverse(),
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            forward: self.backward,
            backward: self.forward,
        }
    }
}

/// Both directions of the bilateral reprojection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralTerms {
    /// `L_pe(I_{t+1}, I_t warped into t+1)`.
    pub forward: f64,
    /// `L_pe(I_t, I_{t+1} warped into t)`.
    pub backward: f64,
    pub forward_pixels: usize,
    pub backward_pixels: usize,
}

impl BilateralTerms {
    pub fn total(&self) -> f64 {
        self.forward + self.backward
    }

    pub fn pixels(&self) -> usize {
        self.forward_pixels + self.backward_pixels
    }
}

pub fn bilateral_terms(
    frames: FramePair<'_>,
    depths: DepthPair<'_>,
    poses: &PosePair,
    k: &Intrinsics,
    cfg: &LossConfig,
) -> Result<BilateralTerms> {
    let into_t1 = warp_image(frames.t, depths.t1, &poses.backward, k)?;
    let into_t = warp_image(frames.t1, depths.t, &poses.forward, k)?;
    let (forward, forward_pixels) = photometric_error_counted(frames.t1, &into_t1, cfg)?;
    let (backward, backward_pixels) = photometric_error_counted(frames.t, &into_t, cfg)?;
    Ok(BilateralTerms {
        forward,
        backward,
        forward_pixels,
        backward_pixels,
    })
}

/// Photometric reprojection loss summed over both warp directions.
pub fn bilateral_reprojection_loss(
    frames: FramePair<'_>,
    depths: DepthPair<'_>,
    poses: &PosePair,
    k: &Intrinsics,
    cfg: &LossConfig,
) -> Result<f64> {
    bilateral_terms(frames, depths, poses, k, cfg).map(|t| t.total())
}

/// Bilateral loss of one region; `loss` is `None` when the region had no
/// valid overlap and was excluded from the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionTerm {
    pub region: usize,
    pub loss: Option<f64>,
    pub pixels: usize,
}

impl RegionTerm {
    pub fn value(&self) -> f64 {
        self.loss.unwrap_or(0.0)
    }

    pub fn excluded(&self) -> bool {
        self.loss.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedLosses {
    pub depth: f64,
    pub pose: f64,
    pub optical: f64,
}

/// Depth and pose objectives `L_ph + lambda * L_flow`; the flow objective is `L_flow`.
pub fn combined_losses(ph: f64, flow: f64, cfg: &LossConfig) -> CombinedLosses {
    debug_assert!(ph >= 0.0 && flow >= 0.0);
    let joint = ph + cfg.lambda * flow;
    CombinedLosses {
        depth: joint,
        pose: joint,
        optical: flow,
    }
}

/// Evaluated objectives of one frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub static_term: RegionTerm,
    pub motion_terms: Vec<RegionTerm>,
    /// Static plus all included motion terms.
    pub ph: f64,
    pub flow: f64,
    pub flow_pixels: usize,
    pub depth: f64,
    pub pose: f64,
    pub optical: f64,
}

impl LossReport {
    /// Attaches a flow synthesis loss and recomputes the combined objectives.
    pub fn with_flow_loss(mut self, flow: f64, pixels: usize, cfg: &LossConfig) -> Self {
        self.flow = flow;
        self.flow_pixels = pixels;
        let c = combined_losses(self.ph, flow, cfg);
        self.depth = c.depth;
        self.pose = c.pose;
        self.optical = c.optical;
        self
    }

    pub fn terms(&self) -> impl Iterator<Item = &RegionTerm> {
        std::iter::once(&self.static_term).chain(&self.motion_terms)
    }

    /// Fixed-order CSV rows: one header line, one line per region term, one
    /// line per objective.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,region,value,pixels,excluded\n");
        for t in self.terms() {
            let name = if t.region == 0 { "L_ph_s" } else { "L_ph_m" };
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                t.region,
                t.value(),
                t.pixels,
                t.excluded()
            ));
        }
        let total_pixels: usize = self.terms().map(|t| t.pixels).sum();
        for (name, value, pixels) in [
            ("L_ph", self.ph, total_pixels),
            ("L_flow", self.flow, self.flow_pixels),
            ("L_depth", self.depth, total_pixels),
            ("L_pose", self.pose, total_pixels),
            ("L_optical", self.optical, self.flow_pixels),
        ] {
            out.push_str(&format!("{name},,{value},{pixels},false\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in self.terms() {
            let name = if t.region == 0 { "L_ph,s" } else { "L_ph,m" };
            match t.loss {
                Some(v) => out.push_str(&format!(
                    "{name:<10} region {:>2}  {v:>12.6}  ({} px)\n",
                    t.region, t.pixels
                )),
                None => out.push_str(&format!(
                    "{name:<10} region {:>2}  {:>12}  (no valid overlap)\n",
                    t.region, "excluded"
                )),
            }
        }
        for (name, value) in [
            ("L_ph", self.ph),
            ("L_flow", self.flow),
            ("L_depth", self.depth),
            ("L_pose", self.pose),
            ("L_optical", self.optical),
        ] {
            out.push_str(&format!("{name:<10}            {value:>12.6}\n"));
        }
        out
    }
}

/// Region labels of both frames. Both rasters must carry the same region count.
#[derive(Debug, Clone, Copy)]
pub struct LabelPair<'a> {
    pub t: &'a RegionLabels,
    pub t1: &'a RegionLabels,
}

/// Sum of bilateral reprojection losses over the static and all motion
/// regions, each region warped with its own pose pair.
///
/// Region `m` compares `I_t` and `I_{t+1}` restricted to the pixels labelled
/// `m` in the respective frame. A region without valid overlap in either
/// direction is excluded and flagged in the report.
pub fn multi_region_loss(
    frames: FramePair<'_>,
    depths: DepthPair<'_>,
    poses: &[PosePair],
    labels: LabelPair<'_>,
    k: &Intrinsics,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let regions = labels.t.region_count();
    if labels.t1.region_count() != regions {
        return Err(Error::Consistency(format!(
            "frame labels disagree on region count: {} vs {}",
            regions,
            labels.t1.region_count()
        )));
    }
    if poses.len() != regions {
        return Err(Error::Consistency(format!(
            "{} pose pairs for {regions} regions",
            poses.len()
        )));
    }
    let mut terms = Vec::with_capacity(regions);
    for (m, pose) in poses.iter().enumerate() {
        let t = mask_image(frames.t, labels.t, m)?;
        let t1 = mask_image(frames.t1, labels.t1, m)?;
        let term = match bilateral_terms(FramePair { t: &t, t1: &t1 }, depths, pose, k, cfg) {
            Ok(b) => RegionTerm {
                region: m,
                loss: Some(b.total()),
                pixels: b.pixels(),
            },
            Err(Error::EmptyDomain(_)) => RegionTerm {
                region: m,
                loss: None,
                pixels: 0,
            },
            Err(e) => return Err(e),
        };
        terms.push(term);
    }
    let ph = terms.iter().map(RegionTerm::value).sum();
    let static_term = terms.remove(0);
    let c = combined_losses(ph, 0.0, cfg);
    Ok(LossReport {
        static_term,
        motion_terms: terms,
        ph,
        flow: 0.0,
        flow_pixels: 0,
        depth: c.depth,
        pose: c.pose,
        optical: c.optical,
    })
}

/// Mean endpoint error between two flows and the number of compared pixels.
pub fn flow_loss_counted(predicted: &FlowField, reference: &FlowField) -> Result<(f64, usize)> {
    let epe = endpoint_error_map(predicted, reference)?;
    let n = epe.valid_count();
    epe.mean()
        .map(|m| (m, n))
        .ok_or_else(|| Error::EmptyDomain("flows share no valid pixel".into()))
}

/// Mean endpoint error over jointly valid pixels.
pub fn flow_loss(predicted: &FlowField, reference: &FlowField) -> Result<f64> {
    flow_loss_counted(predicted, reference).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::new(w, h, 1, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Textbook SSIM of two windows given as explicit sample lists.
    fn ssim_window_oracle(xs: &[f64], ys: &[f64], c1: f64, c2: f64) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
        let cxy = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / n;
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }

    fn ssim_oracle(
        a: &ImageBuffer,
        b: &ImageBuffer,
        window: usize,
        c1: f64,
        c2: f64,
    ) -> Vec<Option<f64>> {
        let (w, h) = (a.width() as isize, a.height() as isize);
        let r = (window / 2) as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = (y * w + x) as usize;
                if !(a.is_valid(idx) && b.is_valid(idx)) {
                    out.push(None);
                    continue;
                }
                let (mut xs, mut ys) = (Vec::new(), Vec::new());
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w || yy >= h {
                            continue;
                        }
                        let j = (yy * w + xx) as usize;
                        if a.is_valid(j) && b.is_valid(j) {
                            xs.push(a.data()[j]);
                            ys.push(b.data()[j]);
                        }
                    }
                }
                out.push(Some(ssim_window_oracle(&xs, &ys, c1, c2)));
            }
        }
        out
    }

    #[test]
    fn ssim_self_similarity() {
        let img = noise(12, 9, 3);
        let s = ssim(&img, &img, &LossConfig::default()).unwrap();
        assert!(s.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let cfg = LossConfig::default();
        let a = ImageBuffer::constant(8, 8, 1, 0.5).unwrap();
        let b = ImageBuffer::constant(8, 8, 1, 0.7).unwrap();
        let s = ssim(&a, &b, &cfg).unwrap();
        let expected = (2.0 * 0.35 + 1e-4) / (0.25 + 0.49 + 1e-4);
        assert!((expected - 0.9460f64).abs() < 1e-4);
        for v in &s.values {
            assert!((v - expected).abs() < 1e-12);
        }
        let pe = photometric_error(&a, &b, &cfg).unwrap();
        let expected_pe = 0.45 * (1.0 - expected) + 0.10 * 0.2;
        assert!((pe - expected_pe).abs() < 1e-12);
        assert!((pe - 0.0443).abs() < 1e-4);
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        for seed in 0..5 {
            let a = noise(16, 16, seed);
            let b = noise(16, 16, seed + 100);
            for window in [3, 5] {
                let cfg = LossConfig {
                    ssim_window: window,
                    ..Default::default()
                };
                let s = ssim(&a, &b, &cfg).unwrap();
                let oracle = ssim_oracle(&a, &b, window, cfg.c1, cfg.c2);
                for (i, o) in oracle.iter().enumerate() {
                    assert!((s.values[i] - o.unwrap()).abs() < 1e-9);
                }
                assert!(s.mean().unwrap() < 1.0);
            }
        }
    }

    #[test]
    fn ssim_with_masks_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask_a: Vec<bool> = (0..256).map(|_| rng.random::<f64>() > 0.2).collect();
        let mask_b: Vec<bool> = (0..256).map(|_| rng.random::<f64>() > 0.2).collect();
        let a = noise(16, 16, 1).with_mask(mask_a).unwrap();
        let b = noise(16, 16, 2).with_mask(mask_b).unwrap();
        let cfg = LossConfig::default();
        let s = ssim(&a, &b, &cfg).unwrap();
        for (i, o) in ssim_oracle(&a, &b, 3, cfg.c1, cfg.c2).iter().enumerate() {
            assert_eq!(s.get(i).is_some(), o.is_some());
            if let (Some(x), Some(y)) = (s.get(i), o) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn photometric_zero_and_weights() {
        let img = noise(10, 10, 5);
        assert_eq!(
            photometric_error(&img, &img, &LossConfig::default()).unwrap(),
            0.0
        );
        let a = ImageBuffer::constant(6, 6, 1, 0.2).unwrap();
        let b = ImageBuffer::constant(6, 6, 1, 0.6).unwrap();
        let cfg = LossConfig {
            alpha: 0.5,
            ..Default::default()
        };
        let s = ssim(&a, &b, &cfg).unwrap().values[0];
        // Pure SSIM term at alpha = 0.5.
        assert!((photometric_error(&a, &b, &cfg).unwrap() - 0.5 * (1.0 - s)).abs() < 1e-12);
        let cfg = LossConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!((photometric_error(&a, &b, &cfg).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_penalty() {
        let a = ImageBuffer::constant(4, 4, 1, 0.2).unwrap();
        let b = ImageBuffer::constant(4, 4, 1, 0.6).unwrap();
        let cfg = LossConfig {
            alpha: 0.0,
            penalty: Penalty::SmoothL1 { delta: 1.0 },
            ..Default::default()
        };
        assert!((photometric_error(&a, &b, &cfg).unwrap() - 0.5 * 0.16).abs() < 1e-12);
        assert_eq!(Penalty::SmoothL1 { delta: 0.1 }.apply(0.5), 0.45);
    }

    #[test]
    fn photometric_empty_domain() {
        let a = ImageBuffer::constant(2, 1, 1, 0.2)
            .unwrap()
            .with_mask(vec![true, false])
            .unwrap();
        let b = ImageBuffer::constant(2, 1, 1, 0.2)
            .unwrap()
            .with_mask(vec![false, true])
            .unwrap();
        assert!(matches!(
            photometric_error(&a, &b, &LossConfig::default()),
            Err(Error::EmptyDomain(_))
        ));
    }

    #[test]
    fn photometric_masking_one_side_equals_both() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mask: Vec<bool> = (0..144).map(|_| rng.random::<f64>() > 0.3).collect();
        let a = noise(12, 12, 7);
        let b = noise(12, 12, 8);
        let cfg = LossConfig::default();
        let one = photometric_error(&a.clone().with_mask(mask.clone()).unwrap(), &b, &cfg).unwrap();
        let both = photometric_error(
            &a.with_mask(mask.clone()).unwrap(),
            &b.with_mask(mask).unwrap(),
            &cfg,
        )
        .unwrap();
        assert_eq!(one, both);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig {
            alpha: 0.6,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            lambda: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            ssim_window: 4,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    fn textured(w: usize, h: usize, phase: f64) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, |x, y| {
            0.5 + 0.2 * ((x as f64 * 0.3 + phase).sin()) + 0.2 * ((y as f64 * 0.23).cos())
        })
        .unwrap()
    }

    #[test]
    fn bilateral_static_scene_is_zero_and_symmetric() {
        let k = Intrinsics::new(60.0, 60.0, 16.0, 12.0, 32, 24).unwrap();
        let img = textured(32, 24, 0.0);
        let d = DepthMap::constant(32, 24, 3.0).unwrap();
        let cfg = LossConfig::default();
        let id = PosePair::from_forward(PoseSE3::identity());
        let frames = FramePair { t: &img, t1: &img };
        let depths = DepthPair { t: &d, t1: &d };
        assert_eq!(
            bilateral_reprojection_loss(frames, depths, &id, &k, &cfg).unwrap(),
            0.0
        );

        let other = textured(32, 24, 0.7);
        let d2 = DepthMap::constant(32, 24, 4.0).unwrap();
        let pose = PosePair::from_forward(PoseSE3::from_axis_angle(
            Vector3::new(0.01, -0.02, 0.0),
            Vector3::new(0.1, 0.0, 0.05),
        ));
        let fwd = bilateral_reprojection_loss(
            FramePair {
                t: &img,
                t1: &other,
            },
            DepthPair { t: &d, t1: &d2 },
            &pose,
            &k,
            &cfg,
        )
        .unwrap();
        let swapped = bilateral_reprojection_loss(
            FramePair {
                t: &other,
                t1: &img,
            },
            DepthPair { t: &d2, t1: &d },
            &pose.swapped(),
            &k,
            &cfg,
        )
        .unwrap();
        assert!((fwd - swapped).abs() < 1e-15);
    }

    #[test]
    fn multi_region_single_partition_matches_bilateral() {
        let k = Intrinsics::new(60.0, 60.0, 16.0, 12.0, 32, 24).unwrap();
        let (a, b) = (textured(32, 24, 0.0), textured(32, 24, 0.4));
        let (d0, d1) = (
            DepthMap::constant(32, 24, 3.0).unwrap(),
            DepthMap::constant(32, 24, 3.2).unwrap(),
        );
        let pose = PosePair::from_forward(PoseSE3::from_translation(Vector3::new(0.05, 0.0, 0.1)));
        let cfg = LossConfig::default();
        let frames = FramePair { t: &a, t1: &b };
        let depths = DepthPair { t: &d0, t1: &d1 };
        let single = RegionLabels::single(32, 24);
        let report = multi_region_loss(
            frames,
            depths,
            &[pose],
            LabelPair {
                t: &single,
                t1: &single,
            },
            &k,
            &cfg,
        )
        .unwrap();
        let direct = bilateral_reprojection_loss(frames, depths, &pose, &k, &cfg).unwrap();
        assert!((report.ph - direct).abs() < 1e-9);
        assert!(report.motion_terms.is_empty());
        assert_eq!(report.ph, report.static_term.value());
    }

    #[test]
    fn multi_region_additivity_and_exclusion() {
        let k = Intrinsics::new(60.0, 60.0, 16.0, 12.0, 32, 24).unwrap();
        let (a, b) = (textured(32, 24, 0.0), textured(32, 24, 0.3));
        let d = DepthMap::constant(32, 24, 3.0).unwrap();
        let labels = RegionLabels::from_labels(
            32,
            24,
            (0..768).map(|i| usize::from(i % 32 >= 20)).collect(),
        )
        .unwrap();
        // Region 1 disappears in frame t+1, so its term has no overlap.
        let labels_t1 = RegionLabels::with_region_count(32, 24, vec![0; 768], 2).unwrap();
        let poses = [
            PosePair::from_forward(PoseSE3::from_translation(Vector3::new(0.02, 0.0, 0.0))),
            PosePair::from_forward(PoseSE3::from_translation(Vector3::new(-0.03, 0.01, 0.0))),
        ];
        let cfg = LossConfig::default();
        let frames = FramePair { t: &a, t1: &b };
        let depths = DepthPair { t: &d, t1: &d };
        let r = multi_region_loss(
            frames,
            depths,
            &poses,
            LabelPair {
                t: &labels,
                t1: &labels,
            },
            &k,
            &cfg,
        )
        .unwrap();
        let sum = r.static_term.value() + r.motion_terms.iter().map(|t| t.value()).sum::<f64>();
        assert!((r.ph - sum).abs() < 1e-12);
        assert!(r.motion_terms.iter().all(|t| !t.excluded()));

        let r = multi_region_loss(
            frames,
            depths,
            &poses,
            LabelPair {
                t: &labels,
                t1: &labels_t1,
            },
            &k,
            &cfg,
        )
        .unwrap();
        assert!(r.motion_terms[0].excluded());
        assert_eq!(r.ph, r.static_term.value());
        assert!(matches!(
            multi_region_loss(
                frames,
                depths,
                &poses[..1],
                LabelPair {
                    t: &labels,
                    t1: &labels
                },
                &k,
                &cfg
            ),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn flow_loss_examples() {
        let a =
            FlowField::from_fn(7, 5, |x, y| Vector2::new(x as f64 * 0.3, y as f64 - 2.0)).unwrap();
        assert_eq!(flow_loss(&a, &a).unwrap(), 0.0);
        let b = FlowField::from_fn(7, 5, |x, y| {
            Vector2::new(x as f64 * 0.3 + 3.0, y as f64 + 2.0)
        })
        .unwrap();
        assert!((flow_loss(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(flow_loss(&a, &b).unwrap(), flow_loss(&b, &a).unwrap());
        let none = FlowField::new(7, 5, vec![Vector2::zeros(); 35], vec![false; 35]).unwrap();
        assert!(matches!(flow_loss(&a, &none), Err(Error::EmptyDomain(_))));
    }

    #[test]
    fn combined_loss_examples() {
        let cfg = LossConfig::default();
        let c = combined_losses(0.5, 1.0, &cfg);
        assert!((c.depth - 0.6).abs() < 1e-15);
        assert_eq!(c.depth, c.pose);
        assert_eq!(c.optical, 1.0);
        let c = combined_losses(
            0.5,
            1.0,
            &LossConfig {
                lambda: 0.0,
                ..Default::default()
            },
        );
        assert_eq!(c.depth, 0.5);
        let c = combined_losses(0.25, 0.0, &cfg);
        assert_eq!((c.depth, c.pose, c.optical), (0.25, 0.25, 0.0));
    }
}
