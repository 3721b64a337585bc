//! Optical-flow-based motion segmentation.
//!
//! The pipeline smooths the flow with a cascade of box filters, extracts
//! motion boundaries with a Sobel operator, seals nearly closed outlines by
//! morphological closing, groups the remaining pixels into 8-connected
//! regions and finally merges regions below a minimum area into the static
//! region. The largest region is always the static one (label 0).

use std::collections::VecDeque;

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::flow::FlowField;
use crate::geometry::{
    backproject_unchecked, pixel_of, project_unchecked, DepthMap, ImageBuffer, Intrinsics, PoseSE3,
};

/// Per-pixel region labels. Label 0 is the static region, `1..=k` are motion regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionLabels {
    width: usize,
    height: usize,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl RegionLabels {
    /// Every pixel in the static region.
    pub fn single(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
            counts: vec![width * height],
        }
    }

    /// Wraps a label raster; the region count is `max(label) + 1` and every
    /// label below the maximum must occur.
    pub fn from_labels(width: usize, height: usize, labels: Vec<usize>) -> Result<Self> {
        let regions = labels.iter().copied().max().map_or(1, |m| m + 1);
        let out = Self::with_region_count(width, height, labels, regions)?;
        if let Some(missing) = out.counts.iter().position(|c| *c == 0) {
            return Err(Error::Consistency(format!(
                "labels are not contiguous, region {missing} is empty"
            )));
        }
        Ok(out)
    }

    /// Wraps a label raster with a fixed region count. Regions may be empty,
    /// which happens when a region leaves the field of view between frames.
    pub fn with_region_count(
        width: usize,
        height: usize,
        labels: Vec<usize>,
        regions: usize,
    ) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Domain(format!(
                "label raster must hold {} entries",
                width * height
            )));
        }
        if regions == 0 {
            return Err(Error::Domain("at least one region is required".into()));
        }
        let mut counts = vec![0; regions];
        for l in &labels {
            if *l >= regions {
                return Err(Error::Domain(format!(
                    "label {l} exceeds region count {regions}"
                )));
            }
            counts[*l] += 1;
        }
        Ok(Self {
            width,
            height,
            labels,
            counts,
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of motion regions `k`.
    pub fn motion_regions(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn region_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn region_mask(&self, id: usize) -> Vec<bool> {
        self.labels.iter().map(|l| *l == id).collect()
    }

    /// Intersection over union of region `id` here and region `other_id` in `other`.
    pub fn iou(&self, id: usize, other: &RegionLabels, other_id: usize) -> Result<f64> {
        check_shape(self.dims(), other.dims())?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.labels.iter().zip(&other.labels) {
            let (x, y) = (*a == id, *b == other_id);
            inter += usize::from(x && y);
            union += usize::from(x || y);
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }
}

/// Binary per-pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl EdgeMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Box-filter sizes applied in order.
    pub kernels: Vec<usize>,
    /// Sobel magnitude threshold in pixels of flow per pixel.
    pub threshold: f64,
    /// Regions smaller than this many pixels are merged into the static region.
    pub min_area: usize,
    /// Chebyshev radius of the closing applied to the edge mask.
    pub closing_radius: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            kernels: vec![3, 5, 9],
            threshold: 0.5,
            min_area: 3000,
            closing_radius: 2,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        validate_kernels(&self.kernels)?;
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "edge threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.min_area == 0 {
            return Err(Error::Config(
                "minimum region area must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn validate_kernels(kernels: &[usize]) -> Result<()> {
    match kernels.iter().find(|k| **k == 0 || **k % 2 == 0) {
        Some(k) => Err(Error::Config(format!(
            "kernel size {k} must be odd and positive"
        ))),
        None => Ok(()),
    }
}

/// Sliding-window reduction along rows (`axis = 0`) or columns (`axis = 1`)
/// with border replication.
fn sliding<T: Copy>(
    src: &[T],
    width: usize,
    height: usize,
    radius: usize,
    axis: usize,
    init: T,
    op: impl Fn(T, T) -> T,
) -> Vec<T> {
    let r = radius as isize;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..height {
        for x in 0..width {
            let mut acc = init;
            for o in -r..=r {
                let (sx, sy) = if axis == 0 {
                    ((x as isize + o).clamp(0, width as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + o).clamp(0, height as isize - 1) as usize)
                };
                acc = op(acc, src[sy * width + sx]);
            }
            out.push(acc);
        }
    }
    out
}

/// Box mean of one raster with edge replication.
fn box_mean(src: &[f64], width: usize, height: usize, kernel: usize) -> Vec<f64> {
    let r = kernel / 2;
    let norm = kernel as f64;
    let rows: Vec<f64> = sliding(src, width, height, r, 0, 0.0, |a, b| a + b)
        .into_iter()
        .map(|v| v / norm)
        .collect();
    sliding(&rows, width, height, r, 1, 0.0, |a, b| a + b)
        .into_iter()
        .map(|v| v / norm)
        .collect()
}

/// Applies box-mean filters of the given odd sizes in sequence to both flow channels.
pub fn smooth_flow(flow: &FlowField, kernels: &[usize]) -> Result<FlowField> {
    validate_kernels(kernels)?;
    let (w, h) = (flow.width(), flow.height());
    let mut u = flow.component(0);
    let mut v = flow.component(1);
    for k in kernels {
        u = box_mean(&u, w, h, *k);
        v = box_mean(&v, w, h, *k);
    }
    Ok(flow.with_components(u, v))
}

/// Normalized Sobel gradient magnitude of one raster. Dividing the raw
/// stencil response by 8 makes a linear ramp of slope `s` report exactly `s`.
pub(crate) fn sobel_magnitude(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, width as isize - 1) as usize;
        let cy = y.clamp(0, height as isize - 1) as usize;
        src[cy * width + cx]
    };
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push((gx * gx + gy * gy).sqrt() / 8.0);
        }
    }
    out
}

/// Marks pixels whose largest per-channel Sobel magnitude exceeds `threshold`.
pub fn edge_map(flow: &FlowField, threshold: f64) -> Result<EdgeMask> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!(
            "edge threshold must be positive, got {threshold}"
        )));
    }
    let (w, h) = (flow.width(), flow.height());
    let gu = sobel_magnitude(&flow.component(0), w, h);
    let gv = sobel_magnitude(&flow.component(1), w, h);
    let data = gu
        .iter()
        .zip(&gv)
        .map(|(a, b)| a.max(*b) > threshold)
        .collect();
    Ok(EdgeMask {
        width: w,
        height: h,
        data,
    })
}

/// Morphological closing with a square structuring element. Erosion only
/// looks at in-image neighbours so borders are not eaten away.
pub(crate) fn close_mask(mask: &EdgeMask, radius: usize) -> EdgeMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let dilated = sliding(&mask.data, w, h, radius, 0, false, |a, b| a || b);
    let dilated = sliding(&dilated, w, h, radius, 1, false, |a, b| a || b);
    // For a min filter, replicated borders equal a window clipped to the image.
    let eroded = sliding(&dilated, w, h, radius, 0, true, |a, b| a && b);
    let eroded = sliding(&eroded, w, h, radius, 1, true, |a, b| a && b);
    EdgeMask {
        width: w,
        height: h,
        data: eroded,
    }
}

const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn neighbours(idx: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((idx % width) as isize, (idx / width) as isize);
    NEIGHBOURS_8.iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < width as isize && ny < height as isize)
            .then(|| ny as usize * width + nx as usize)
    })
}

/// 8-connected components of the non-edge pixels, numbered in scan order of
/// their first pixel. Edge pixels get `None`.
pub(crate) fn connected_components(mask: &EdgeMask) -> (Vec<Option<usize>>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels: Vec<Option<usize>> = vec![None; w * h];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for seed in 0..w * h {
        if mask.data[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            for n in neighbours(idx, w, h) {
                if !mask.data[n] && labels[n].is_none() {
                    labels[n] = Some(next);
                    queue.push_back(n);
                }
            }
        }
        next += 1;
    }
    (labels, next)
}

/// Groups non-edge pixels into 8-connected regions after closing the edge
/// mask, then assigns edge pixels by majority vote of labelled 8-neighbours
/// (ties to the lowest label), growing inward from the band borders.
pub fn label_regions(edges: &EdgeMask, closing_radius: usize) -> RegionLabels {
    let (w, h) = (edges.width, edges.height);
    let closed = close_mask(edges, closing_radius);
    let (mut labels, regions) = connected_components(&closed);
    if regions == 0 {
        return RegionLabels::single(w, h);
    }
    let mut votes = vec![0usize; regions];
    loop {
        let mut updates = Vec::new();
        for idx in 0..w * h {
            if labels[idx].is_some() {
                continue;
            }
            votes.iter_mut().for_each(|v| *v = 0);
            let mut any = false;
            for n in neighbours(idx, w, h) {
                if let Some(l) = labels[n] {
                    votes[l] += 1;
                    any = true;
                }
            }
            if any {
                let best =
                    votes
                        .iter()
                        .enumerate()
                        .fold(0, |best, (l, v)| if *v > votes[best] { l } else { best });
                updates.push((idx, best));
            }
        }
        if updates.is_empty() {
            break;
        }
        for (idx, l) in updates {
            labels[idx] = Some(l);
        }
    }
    let labels = labels.into_iter().map(|l| l.unwrap_or(0)).collect();
    RegionLabels::with_region_count(w, h, labels, regions).expect("labels bounded by region count")
}

/// Makes the largest region static, merges regions below `min_area` into it
/// and renumbers the surviving motion regions contiguously in label order.
pub fn filter_regions(labels: &RegionLabels, min_area: usize) -> Result<RegionLabels> {
    if min_area == 0 {
        return Err(Error::Config(
            "minimum region area must be at least 1".into(),
        ));
    }
    let counts = labels.counts();
    let largest = counts
        .iter()
        .enumerate()
        .fold(0, |best, (l, c)| if *c > counts[best] { l } else { best });
    let mut remap = vec![0usize; counts.len()];
    let mut next = 1;
    for (l, c) in counts.iter().enumerate() {
        if l != largest && *c >= min_area {
            remap[l] = next;
            next += 1;
        }
    }
    let out = labels.labels().iter().map(|l| remap[*l]).collect();
    RegionLabels::with_region_count(labels.width, labels.height, out, next)
}

/// Full motion segmentation of a flow field.
pub fn segment_motion(flow: &FlowField, cfg: &SegmentationConfig) -> Result<RegionLabels> {
    cfg.validate()?;
    let smoothed = smooth_flow(flow, &cfg.kernels)?;
    let edges = edge_map(&smoothed, cfg.threshold)?;
    filter_regions(&label_regions(&edges, cfg.closing_radius), cfg.min_area)
}

/// Keeps the pixels of region `id`; everything else becomes zero and invalid.
pub fn mask_image(img: &ImageBuffer, labels: &RegionLabels, id: usize) -> Result<ImageBuffer> {
    check_shape(img.dims(), labels.dims())?;
    if id >= labels.region_count() {
        return Err(Error::Domain(format!(
            "region {id} does not exist (k = {})",
            labels.motion_regions()
        )));
    }
    let n = img.channels();
    let mut data = img.data().to_vec();
    let mut mask = Vec::with_capacity(labels.labels.len());
    for (idx, l) in labels.labels.iter().enumerate() {
        let inside = *l == id;
        if !inside {
            data[idx * n..(idx + 1) * n]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        mask.push(inside && img.is_valid(idx));
    }
    Ok(ImageBuffer::from_parts(
        img.width(),
        img.height(),
        n,
        data,
        Some(mask),
    ))
}

/// Relative depth disagreement tolerated when transferring labels between frames.
const TRANSFER_DEPTH_TOLERANCE: f64 = 0.05;

/// Transfers frame-`t` labels to frame `t+1`.
///
/// A pixel of frame `t+1` joins region `m` when moving it back with the
/// inverse of `region_poses[m]` lands on a frame-`t` pixel labelled `m` whose
/// depth agrees with the transported point. Among several candidates the one
/// with the smallest depth disagreement wins; unclaimed pixels are static.
pub fn propagate_labels(
    labels_t: &RegionLabels,
    depth_t: &DepthMap,
    depth_t1: &DepthMap,
    region_poses: &[PoseSE3],
    k: &Intrinsics,
) -> Result<RegionLabels> {
    check_shape(labels_t.dims(), depth_t.dims())?;
    check_shape(labels_t.dims(), depth_t1.dims())?;
    check_shape(labels_t.dims(), k.dims())?;
    if region_poses.len() != labels_t.region_count() {
        return Err(Error::Consistency(format!(
            "{} region poses for {} regions",
            region_poses.len(),
            labels_t.region_count()
        )));
    }
    let (w, h) = (labels_t.width, labels_t.height);
    let inverses: Vec<PoseSE3> = region_poses.iter().map(PoseSE3::inverse).collect();
    let mut out = vec![0usize; w * h];
    for (idx, slot) in out.iter_mut().enumerate() {
        let Some(d) = depth_t1.get(idx) else { continue };
        let x = backproject_unchecked(&pixel_of(idx, w), d, k);
        let mut best: Option<(usize, f64)> = None;
        for (m, inv) in inverses.iter().enumerate() {
            let z = inv.apply(&x);
            if z.z <= 0.0 {
                continue;
            }
            let c = project_unchecked(&z, k);
            let Some(src) = round_index(&c, w, h) else {
                continue;
            };
            if labels_t.labels[src] != m {
                continue;
            }
            let Some(dt) = depth_t.get(src) else { continue };
            let err = (dt - z.z).abs() / z.z;
            if err <= TRANSFER_DEPTH_TOLERANCE && best.is_none_or(|(_, e)| err < e) {
                best = Some((m, err));
            }
        }
        if let Some((m, _)) = best {
            *slot = m;
        }
    }
    RegionLabels::with_region_count(w, h, out, labels_t.region_count())
}

fn round_index(c: &Point2<f64>, width: usize, height: usize) -> Option<usize> {
    let (x, y) = (c.x.round(), c.y.round());
    (x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64)
        .then(|| y as usize * width + x as usize)
}
