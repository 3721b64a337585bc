//! KITTI-style depth and flow evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::flow::{endpoint_error_map, FlowField};
use crate::geometry::DepthMap;

/// Ground truth at or below this depth is never evaluated.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

/// Outlier rule for F1-all: error above this many pixels...
pub const F1_ABS_PX: f64 = 3.0;
/// ...and above this fraction of the ground-truth magnitude.
pub const F1_REL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthCaps {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthCaps {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: 120.0,
        }
    }
}

impl DepthCaps {
    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Config(format!(
                "depth caps must satisfy 0 <= min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn lower(&self) -> f64 {
        self.min.max(MIN_EVAL_DEPTH)
    }

    fn admits(&self, gt: f64) -> bool {
        gt > self.lower() && gt < self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
    /// Median scale applied to the prediction, 1 when scaling is disabled.
    pub scale: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "AbsRel,SqRel,RMS,RMSlog,d1,d2,d3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel,
            self.sq_rel,
            self.rms,
            self.rms_log,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }

    pub fn to_text(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "AbsRel",
            "SqRel",
            "RMS",
            "RMSlog",
            "d1",
            "d2",
            "d3",
            self.abs_rel,
            self.sq_rel,
            self.rms,
            self.rms_log,
            self.delta1,
            self.delta2,
            self.delta3
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub f1_all: f64,
    pub pixels: usize,
}

impl FlowMetrics {
    pub const CSV_HEADER: &'static str = "EPE,F1-all";

    pub fn csv_row(&self) -> String {
        format!("{},{}", self.epe, self.f1_all)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{:>8} {:>8}\n{:>8.3} {:>8.4}\n",
            "EPE", "F1-all", self.epe, self.f1_all
        )
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_ratio(pred: &DepthMap, gt: &DepthMap, keep: impl Fn(usize) -> bool) -> Result<f64> {
    let (mut p, mut g): (Vec<f64>, Vec<f64>) = (0..pred.depths().len())
        .filter(|&i| pred.is_valid(i) && gt.is_valid(i) && keep(i))
        .map(|i| (pred.depths()[i], gt.depths()[i]))
        .unzip();
    if p.is_empty() {
        return Err(Error::EmptyDomain("no jointly valid depth".into()));
    }
    let mp = median(&mut p);
    if mp <= 0.0 {
        return Err(Error::Degenerate("median predicted depth is zero".into()));
    }
    Ok(median(&mut g) / mp)
}

/// Rescales `pred` so its median over jointly valid pixels equals that of `gt`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap) -> Result<(DepthMap, f64)> {
    check_shape(gt.dims(), pred.dims())?;
    let s = median_ratio(pred, gt, |_| true)?;
    Ok((pred.scaled(s)?, s))
}

/// Depth error metrics over pixels whose ground truth lies strictly inside
/// the caps. Predictions are optionally median-scaled over that set and then
/// clamped to the caps.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    caps: &DepthCaps,
    median_scaling: bool,
) -> Result<DepthMetrics> {
    check_shape(gt.dims(), pred.dims())?;
    caps.validate()?;
    let evaluable = |i: usize| pred.is_valid(i) && gt.get(i).is_some_and(|g| caps.admits(g));
    let scale = if median_scaling {
        median_ratio(pred, gt, evaluable)?
    } else {
        1.0
    };
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for i in (0..gt.depths().len()).filter(|&i| evaluable(i)) {
        let g = gt.depths()[i];
        let p = (pred.depths()[i] * scale).clamp(caps.lower(), caps.max);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        for (j, count) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(j as i32 + 1) {
                *count += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDomain(
            "no ground-truth depth within the caps".into(),
        ));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rms: (sq / nf).sqrt(),
        rms_log: (sq_log / nf).sqrt(),
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
        pixels: n,
        scale,
    })
}

/// Mean endpoint error and outlier fraction over jointly valid pixels.
///
/// A pixel is an outlier when its endpoint error exceeds both 3 px and 5% of
/// the ground-truth flow magnitude.
pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    let epe = endpoint_error_map(pred, gt)?;
    let (mut sum, mut outliers, mut n) = (0.0, 0usize, 0usize);
    for i in 0..epe.values.len() {
        let Some(e) = epe.get(i) else { continue };
        sum += e;
        if e > F1_ABS_PX && e > F1_REL * gt.vectors()[i].norm() {
            outliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDomain("flows share no valid pixel".into()));
    }
    Ok(FlowMetrics {
        epe: sum / n as f64,
        f1_all: outliers as f64 / n as f64,
        pixels: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize, f: f64) -> DepthMap {
        DepthMap::from_fn(w, h, |x, y| f * (1.0 + x as f64 + 2.0 * y as f64)).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = ramp(8, 8, 1.0);
        let m = depth_metrics(&gt, &gt, &DepthCaps::default(), false).unwrap();
        assert_eq!(
            (m.abs_rel, m.sq_rel, m.rms, m.rms_log),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!(m.pixels, 64);
    }

    #[test]
    fn constant_ratio() {
        let gt = ramp(8, 8, 1.0);
        let pred = gt.scaled(1.1).unwrap();
        let m = depth_metrics(&pred, &gt, &DepthCaps::default(), false).unwrap();
        assert!((m.abs_rel - 0.1).abs() < 1e-12);
        assert!((m.rms_log - 1.1f64.ln()).abs() < 1e-12);
        assert_eq!(m.delta1, 1.0);
        let m = depth_metrics(&pred, &gt, &DepthCaps::default(), true).unwrap();
        assert!(m.abs_rel < 1e-12 && m.rms < 1e-12);
        assert!((m.scale - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn median_scale_examples() {
        let gt = ramp(4, 4, 1.0);
        let (out, s) = median_scale(&gt, &gt).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(out, gt);
        let half = ramp(4, 4, 0.5);
        let (out, s) = median_scale(&half, &gt).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(out.depths(), gt.depths());
    }

    #[test]
    fn caps_exclude_and_clamp() {
        let gt = DepthMap::from_depths(3, 1, vec![10.0, 130.0, 50.0]).unwrap();
        let pred = DepthMap::from_depths(3, 1, vec![200.0, 1.0, 50.0]).unwrap();
        let m = depth_metrics(&pred, &gt, &DepthCaps::default(), false).unwrap();
        assert_eq!(m.pixels, 2);
        // 200 is clamped to 120 before comparing with 10.
        assert!((m.abs_rel - 11.0 / 2.0).abs() < 1e-12);
        let far = DepthMap::constant(3, 1, 130.0).unwrap();
        assert!(matches!(
            depth_metrics(&pred, &far, &DepthCaps::default(), false),
            Err(Error::EmptyDomain(_))
        ));
        assert!(DepthCaps { min: 5.0, max: 1.0 }.validate().is_err());
    }

    #[test]
    fn f1_rule() {
        let gt = FlowField::uniform(5, 5, Vector2::new(10.0, 0.0)).unwrap();
        let pred = FlowField::uniform(5, 5, Vector2::new(14.0, 0.0)).unwrap();
        let m = flow_metrics(&pred, &gt).unwrap();
        assert!((m.epe - 4.0).abs() < 1e-12);
        assert_eq!(m.f1_all, 1.0);
        let gt = FlowField::uniform(5, 5, Vector2::new(100.0, 0.0)).unwrap();
        let pred = FlowField::uniform(5, 5, Vector2::new(104.0, 0.0)).unwrap();
        let m = flow_metrics(&pred, &gt).unwrap();
        assert!((m.epe - 4.0).abs() < 1e-12);
        assert_eq!(m.f1_all, 0.0);
        let m = flow_metrics(&gt, &gt).unwrap();
        assert_eq!((m.epe, m.f1_all), (0.0, 0.0));
    }

    #[test]
    fn flow_offset_epe() {
        let gt = FlowField::from_fn(6, 4, |x, y| Vector2::new(x as f64, -(y as f64))).unwrap();
        let pred =
            FlowField::from_fn(6, 4, |x, y| Vector2::new(x as f64 + 3.0, 4.0 - y as f64)).unwrap();
        assert!((flow_metrics(&pred, &gt).unwrap().epe - 5.0).abs() < 1e-12);
    }

    fn depth_pair() -> impl Strategy<Value = (DepthMap, DepthMap)> {
        (
            prop::collection::vec(prop::option::weighted(0.9, 0.5f64..150.0), 64),
            prop::collection::vec(prop::option::weighted(0.9, 0.5f64..150.0), 64),
        )
            .prop_map(|(p, g)| {
                let to_map = |v: Vec<Option<f64>>| {
                    DepthMap::new(
                        8,
                        8,
                        v.iter().map(|d| d.unwrap_or(0.0)).collect(),
                        v.iter().map(Option::is_some).collect(),
                    )
                    .unwrap()
                };
                (to_map(p), to_map(g))
            })
    }

    proptest! {
        #[test]
        fn deltas_monotone((pred, gt) in depth_pair(), scaling in any::<bool>()) {
            if let Ok(m) = depth_metrics(&pred, &gt, &DepthCaps::default(), scaling) {
                prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
                prop_assert!(m.abs_rel.is_finite() && m.rms_log.is_finite());
            }
        }

        #[test]
        fn median_scaled_median_matches((pred, gt) in depth_pair()) {
            if let Ok((scaled, _)) = median_scale(&pred, &gt) {
                let joint: Vec<usize> = (0..64).filter(|&i| pred.is_valid(i) && gt.is_valid(i)).collect();
                let mut a: Vec<f64> = joint.iter().map(|&i| scaled.depths()[i]).collect();
                let mut b: Vec<f64> = joint.iter().map(|&i| gt.depths()[i]).collect();
                prop_assert!((median(&mut a) - median(&mut b)).abs() < 1e-9 * median(&mut b).max(1.0));
            }
        }

        #[test]
        fn median_scaling_invariance((pred, gt) in depth_pair(), factor in 0.01f64..100.0) {
            let a = depth_metrics(&pred, &gt, &DepthCaps::default(), true);
            let b = depth_metrics(&pred.scaled(factor).unwrap(), &gt, &DepthCaps::default(), true);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
                prop_assert!((a.sq_rel - b.sq_rel).abs() < 1e-9);
                prop_assert!((a.rms - b.rms).abs() < 1e-9);
                prop_assert!((a.rms_log - b.rms_log).abs() < 1e-9);
                prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
            }
        }
    }
}
