//! KITTI raster codecs, calibration parsing and resizing.
//!
//! Depth maps are 16-bit grayscale PNGs holding `depth * 256`, with 0 marking
//! missing depth. Flow fields are 16-bit RGB PNGs holding `u * 64 + 2^15`,
//! `v * 64 + 2^15` and a validity flag.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer as PngBuffer, Luma, Rgb};
use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{DepthMap, ImageBuffer, Intrinsics, PoseSE3};
use crate::segmentation::RegionLabels;

const DEPTH_SCALE: f64 = 256.0;
const FLOW_SCALE: f64 = 64.0;
const FLOW_OFFSET: f64 = 32768.0;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

fn load(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(image_err(path))
}

fn read_gray16(path: &Path) -> Result<PngBuffer<Luma<u16>, Vec<u16>>> {
    match load(path)? {
        DynamicImage::ImageLuma16(img) => Ok(img),
        other => Err(format_err(
            path,
            format!("expected 16-bit grayscale, found {:?}", other.color()),
        )),
    }
}

fn save(img: &DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(image_err(path))
}

/// Reads a KITTI depth PNG.
pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let img = read_gray16(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = raw.iter().map(|v| *v != 0).collect();
    DepthMap::new(
        w,
        h,
        raw.iter().map(|v| f64::from(*v) / DEPTH_SCALE).collect(),
        valid,
    )
}

/// Writes a KITTI depth PNG. Valid depths are rounded half-up to the 1/256 m
/// grid and kept nonzero; depths beyond the 16-bit range saturate.
pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth
        .depths()
        .iter()
        .zip(depth.valid())
        .map(|(d, v)| {
            if *v {
                (d * DEPTH_SCALE + 0.5).floor().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let img = PngBuffer::<Luma<u16>, _>::from_raw(depth.width() as u32, depth.height() as u32, raw)
        .expect("buffer matches dimensions");
    save(&DynamicImage::ImageLuma16(img), path)
}

/// Reads a KITTI flow PNG.
pub fn read_flow_png(path: &Path) -> Result<FlowField> {
    let img = match load(path)? {
        DynamicImage::ImageRgb16(img) => img,
        other => {
            return Err(format_err(
                path,
                format!("expected 16-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for px in img.pixels() {
        let [u, v, ok] = px.0;
        data.push(Vector2::new(
            (f64::from(u) - FLOW_OFFSET) / FLOW_SCALE,
            (f64::from(v) - FLOW_OFFSET) / FLOW_SCALE,
        ));
        valid.push(ok != 0);
    }
    FlowField::new(w, h, data, valid)
}

fn encode_flow(c: f64) -> u16 {
    (c * FLOW_SCALE + FLOW_OFFSET + 0.5)
        .floor()
        .clamp(0.0, 65535.0) as u16
}

/// Writes a KITTI flow PNG; invalid pixels are stored as all zeros.
pub fn write_flow_png(flow: &FlowField, path: &Path) -> Result<()> {
    let mut raw = Vec::with_capacity(flow.vectors().len() * 3);
    for (f, v) in flow.vectors().iter().zip(flow.valid()) {
        if *v {
            raw.extend([encode_flow(f.x), encode_flow(f.y), 1]);
        } else {
            raw.extend([0, 0, 0]);
        }
    }
    let img = PngBuffer::<Rgb<u16>, _>::from_raw(flow.width() as u32, flow.height() as u32, raw)
        .expect("buffer matches dimensions");
    save(&DynamicImage::ImageRgb16(img), path)
}

/// Reads a grayscale or RGB image (8 or 16 bit) into `[0, 1]` intensities.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let img = load(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = if img.color().has_color() {
        (
            3,
            img.into_rgb16()
                .into_raw()
                .iter()
                .map(|v| f64::from(*v) / 65535.0)
                .collect(),
        )
    } else {
        (
            1,
            img.into_luma16()
                .into_raw()
                .iter()
                .map(|v| f64::from(*v) / 65535.0)
                .collect(),
        )
    };
    ImageBuffer::new(w, h, channels, data)
}

/// Writes an image as a 16-bit grayscale or RGB PNG. Masks are not stored.
pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let raw: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v * 65535.0 + 0.5).floor().clamp(0.0, 65535.0) as u16)
        .collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma16(
            PngBuffer::from_raw(w, h, raw).expect("buffer matches dimensions"),
        ),
        3 => DynamicImage::ImageRgb16(
            PngBuffer::from_raw(w, h, raw).expect("buffer matches dimensions"),
        ),
        n => return Err(format_err(path, format!("cannot store {n}-channel images"))),
    };
    save(&dynamic, path)
}

/// Reads region labels stored as a 16-bit grayscale PNG.
pub fn read_labels_png(path: &Path) -> Result<RegionLabels> {
    let img = read_gray16(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = img.into_raw().into_iter().map(usize::from).collect();
    RegionLabels::from_labels(w, h, labels).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_labels_png(labels: &RegionLabels, path: &Path) -> Result<()> {
    if labels.region_count() > usize::from(u16::MAX) + 1 {
        return Err(format_err(path, "too many regions for a 16-bit raster"));
    }
    let raw: Vec<u16> = labels.labels().iter().map(|l| *l as u16).collect();
    let img =
        PngBuffer::<Luma<u16>, _>::from_raw(labels.width() as u32, labels.height() as u32, raw)
            .expect("buffer matches dimensions");
    save(&DynamicImage::ImageLuma16(img), path)
}

/// A camera projection matrix from a KITTI calibration file.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub key: String,
    /// Row-major 3x4 projection matrix.
    pub projection: [f64; 12],
}

impl CalibrationRecord {
    /// Intrinsics for an image of the native size `width` x `height`.
    pub fn intrinsics(&self, width: usize, height: usize) -> Result<Intrinsics> {
        let p = &self.projection;
        Intrinsics::new(p[0], p[5], p[2], p[6], width, height)
    }

    /// Intrinsics rescaled linearly from the native to the target size.
    pub fn intrinsics_scaled(
        &self,
        native: (usize, usize),
        target: (usize, usize),
    ) -> Result<Intrinsics> {
        self.intrinsics(native.0, native.1)?
            .rescaled(target.0, target.1)
    }
}

/// Parses the calibration text layout `KEY: v0 v1 ... v11`.
pub fn parse_calibration(text: &str, key: &str, path: &Path) -> Result<CalibrationRecord> {
    for line in text.lines() {
        let Some((k, rest)) = line.split_once(':') else {
            continue;
        };
        if k.trim() != key {
            continue;
        }
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_err(path, format!("{key}: malformed number {v:?}")))
            })
            .collect::<Result<_>>()?;
        let projection: [f64; 12] = values.try_into().map_err(|v: Vec<f64>| {
            parse_err(
                path,
                format!("{key}: expected 12 values, found {}", v.len()),
            )
        })?;
        if projection[0] <= 0.0 || projection[5] <= 0.0 {
            return Err(parse_err(
                path,
                format!("{key}: focal lengths must be positive"),
            ));
        }
        return Ok(CalibrationRecord {
            key: key.to_string(),
            projection,
        });
    }
    Err(parse_err(path, format!("missing key {key}")))
}

pub fn read_calibration(path: &Path, key: &str) -> Result<CalibrationRecord> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_calibration(&text, key, path)
}

/// Reads a pose stored as one line of 12 row-major `[R | t]` values.
pub fn read_pose(path: &Path) -> Result<PoseSE3> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| parse_err(path, format!("malformed number {v:?}")))
        })
        .collect::<Result<_>>()?;
    let m: [f64; 12] = values
        .try_into()
        .map_err(|v: Vec<f64>| parse_err(path, format!("expected 12 values, found {}", v.len())))?;
    PoseSE3::from_matrix_3x4(&m).map_err(|e| parse_err(path, e.to_string()))
}

pub fn format_pose(pose: &PoseSE3) -> String {
    let m = pose.to_matrix_3x4();
    let mut out = m.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    out.push('\n');
    out
}

pub fn write_pose(pose: &PoseSE3, path: &Path) -> Result<()> {
    fs::write(path, format_pose(pose)).map_err(io_err(path))
}

fn check_target(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!(
            "resize target {width}x{height} must be positive"
        )));
    }
    Ok(())
}

/// Source coordinate of target pixel centre `i` under pixel-centre alignment.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Bilinear resize with pixel-centre alignment. Masks are dropped.
pub fn resize_image(img: &ImageBuffer, width: usize, height: usize) -> Result<ImageBuffer> {
    check_target(width, height)?;
    if (width, height) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let (sw, sh, nc) = (img.width(), img.height(), img.channels());
    let axis = |i: usize, src: usize, dst: usize| {
        let c = source_coord(i, src, dst).clamp(0.0, (src - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut data = Vec::with_capacity(width * height * nc);
    for y in 0..height {
        let (y0, y1, ay) = axis(y, sh, height);
        for x in 0..width {
            let (x0, x1, ax) = axis(x, sw, width);
            for ch in 0..nc {
                let top = (1.0 - ax) * img.get(x0, y0, ch) + ax * img.get(x1, y0, ch);
                let bottom = (1.0 - ax) * img.get(x0, y1, ch) + ax * img.get(x1, y1, ch);
                data.push(((1.0 - ay) * top + ay * bottom).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(width, height, nc, data)
}

/// For each target pixel, the valid source pixel inside its footprint that is
/// nearest to the footprint centre, if any.
fn nearest_valid(
    valid: &[bool],
    (sw, sh): (usize, usize),
    (width, height): (usize, usize),
) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(width * height);
    let span = |i: usize, src: usize, dst: usize| {
        let lo = (i as f64 * src as f64 / dst as f64).floor() as usize;
        let hi = (((i + 1) as f64 * src as f64 / dst as f64).ceil() as usize).clamp(lo + 1, src);
        (lo.min(src - 1), hi)
    };
    for y in 0..height {
        let (ylo, yhi) = span(y, sh, height);
        let cy = source_coord(y, sh, height);
        for x in 0..width {
            let (xlo, xhi) = span(x, sw, width);
            let cx = source_coord(x, sw, width);
            let mut best: Option<(f64, usize)> = None;
            for yy in ylo..yhi {
                for xx in xlo..xhi {
                    let idx = yy * sw + xx;
                    if !valid[idx] {
                        continue;
                    }
                    let d = (xx as f64 - cx).powi(2) + (yy as f64 - cy).powi(2);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, idx));
                    }
                }
            }
            out.push(best.map(|(_, i)| i));
        }
    }
    out
}

/// Nearest-valid resize: never blends depths and never invents valid pixels
/// outside the footprint of a valid source pixel.
pub fn resize_depth(depth: &DepthMap, width: usize, height: usize) -> Result<DepthMap> {
    check_target(width, height)?;
    if (width, height) == (depth.width(), depth.height()) {
        return Ok(depth.clone());
    }
    let picks = nearest_valid(
        depth.valid(),
        (depth.width(), depth.height()),
        (width, height),
    );
    let values = picks
        .iter()
        .map(|p| p.map_or(0.0, |i| depth.depths()[i]))
        .collect();
    DepthMap::new(
        width,
        height,
        values,
        picks.iter().map(Option::is_some).collect(),
    )
}

/// Nearest-valid resize with flow vectors scaled by the axis ratios.
pub fn resize_flow(flow: &FlowField, width: usize, height: usize) -> Result<FlowField> {
    check_target(width, height)?;
    if (width, height) == (flow.width(), flow.height()) {
        return Ok(flow.clone());
    }
    let sx = width as f64 / flow.width() as f64;
    let sy = height as f64 / flow.height() as f64;
    let picks = nearest_valid(flow.valid(), (flow.width(), flow.height()), (width, height));
    let data = picks
        .iter()
        .map(|p| {
            p.map_or(Vector2::zeros(), |i| {
                let f = flow.vectors()[i];
                Vector2::new(f.x * sx, f.y * sy)
            })
        })
        .collect();
    FlowField::new(
        width,
        height,
        data,
        picks.iter().map(Option::is_some).collect(),
    )
}
