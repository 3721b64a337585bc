//! Subcommand implementations behind the `jointflow` binary.
//!
//! Every command validates its [`RunConfig`] before touching any input,
//! writes its outputs into an output directory together with the resolved
//! configuration (`config.toml`), and returns the text it prints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use jointflow::flow::{composite_flow, decompose_flow, synthesize_flow, FlowField, FlowPart};
use jointflow::geometry::{DepthMap, ImageBuffer, Intrinsics, PoseSE3};
use jointflow::kitti_io;
use jointflow::loss::{
    flow_loss_counted, multi_region_loss, DepthPair, FramePair, LabelPair, LossConfig, LossReport,
    PosePair,
};
use jointflow::metrics::{depth_metrics, flow_metrics, DepthCaps, DepthMetrics, FlowMetrics};
use jointflow::optimize::{
    estimate_pose, fit_pose_to_flow, OptimizeConfig, OptimizeTrace, PoseProblem,
};
use jointflow::segmentation::{
    mask_image, propagate_labels, segment_motion, RegionLabels, SegmentationConfig,
};
use jointflow::synth::{generate, SceneSpec};

/// Calibration key written by `gen` and read by the other commands.
pub const CALIB_KEY: &str = "P2";

/// File names of a generated scene directory.
pub mod files {
    pub const FRAME_T: &str = "frame_t.png";
    pub const FRAME_T1: &str = "frame_t1.png";
    pub const DEPTH_T: &str = "depth_t.png";
    pub const DEPTH_T1: &str = "depth_t1.png";
    pub const FLOW_GT: &str = "flow_gt.png";
    pub const LABELS_T: &str = "labels_t.png";
    pub const LABELS_T1: &str = "labels_t1.png";
    pub const CALIB: &str = "calib.txt";
    pub const POSE_CAM: &str = "pose_cam.txt";
    pub const REGION_POSES: &str = "region_poses.txt";
    pub const SPEC: &str = "spec.toml";
    pub const CONFIG: &str = "config.toml";
}

/// Every tunable of a run in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub median_scaling: bool,
    pub caps: DepthCaps,
    pub segmentation: SegmentationConfig,
    pub loss: LossConfig,
    pub optimize: OptimizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            median_scaling: true,
            caps: DepthCaps::default(),
            segmentation: SegmentationConfig::default(),
            loss: LossConfig::default(),
            optimize: OptimizeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        self.segmentation.validate()?;
        self.loss.validate()?;
        self.optimize.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn echo(&self, out: &Path) -> Result<()> {
        write_text(&out.join(files::CONFIG), &self.to_toml())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(out)
}

/// Writes `K` as a KITTI projection matrix line.
pub fn format_calibration(k: &Intrinsics) -> String {
    format!(
        "{CALIB_KEY}: {} 0 {} 0 0 {} {} 0 0 0 1 0\n",
        k.fx, k.cx, k.fy, k.cy
    )
}

/// Intrinsics from a calibration file, rescaled when the native size differs
/// from the frame size.
pub fn load_intrinsics(
    path: &Path,
    native: Option<(usize, usize)>,
    frame: (usize, usize),
) -> Result<Intrinsics> {
    let rec = kitti_io::read_calibration(path, CALIB_KEY)?;
    Ok(rec.intrinsics_scaled(native.unwrap_or(frame), frame)?)
}

fn read_poses(path: &Path) -> Result<Vec<PoseSE3>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("{} line {}: malformed number", path.display(), i + 1))?;
            let m: [f64; 12] = values.try_into().map_err(|_| {
                anyhow::anyhow!("{} line {}: expected 12 values", path.display(), i + 1)
            })?;
            Ok(PoseSE3::from_matrix_3x4(&m)?)
        })
        .collect()
}

fn format_poses(poses: &[PoseSE3]) -> String {
    poses.iter().map(kitti_io::format_pose).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders a scene spec and writes all rasters, poses and calibration.
pub fn cmd_gen(spec_path: &Path, out: &Path, cfg: &RunConfig) -> Result<String> {
    let bytes = fs::read(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let text = std::str::from_utf8(&bytes).context("scene spec is not UTF-8")?;
    let mut spec = SceneSpec::from_toml(text)?;
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    prepare(cfg, out)?;
    let b = generate(&spec)?;
    kitti_io::write_image(&b.frame_t, &out.join(files::FRAME_T))?;
    kitti_io::write_image(&b.frame_t1, &out.join(files::FRAME_T1))?;
    kitti_io::write_depth_png(&b.depth_t, &out.join(files::DEPTH_T))?;
    kitti_io::write_depth_png(&b.depth_t1, &out.join(files::DEPTH_T1))?;
    kitti_io::write_flow_png(&b.flow_gt, &out.join(files::FLOW_GT))?;
    kitti_io::write_labels_png(&b.labels_gt, &out.join(files::LABELS_T))?;
    kitti_io::write_labels_png(&b.labels_t1_gt, &out.join(files::LABELS_T1))?;
    write_text(&out.join(files::CALIB), &format_calibration(&b.intrinsics))?;
    kitti_io::write_pose(&b.camera_motion, &out.join(files::POSE_CAM))?;
    write_text(
        &out.join(files::REGION_POSES),
        &format_poses(&b.region_poses),
    )?;
    write_text(&out.join(files::SPEC), &spec.to_toml())?;
    Ok(format!(
        "spec sha256: {}\nk={}\n",
        sha256_hex(&bytes),
        b.labels_gt.motion_regions()
    ))
}

/// Segments a flow file into motion regions.
pub fn cmd_segment(
    flow_path: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(RegionLabels, String)> {
    prepare(cfg, out)?;
    let flow = kitti_io::read_flow_png(flow_path)?;
    let labels = segment_motion(&flow, &cfg.segmentation)?;
    kitti_io::write_labels_png(&labels, &out.join(files::LABELS_T))?;
    let mut summary = format!("k={}\n", labels.motion_regions());
    for (m, count) in labels.counts().iter().enumerate() {
        summary.push_str(&format!("region {m}: {count} px\n"));
    }
    write_text(&out.join("summary.txt"), &summary)?;
    Ok((labels, summary))
}

/// Inputs shared by the loss, optimization and pipeline commands.
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub frame_t: PathBuf,
    pub frame_t1: PathBuf,
    pub depth_t: PathBuf,
    pub depth_t1: PathBuf,
    pub calib: PathBuf,
    /// Native image size the calibration refers to, when frames were resized.
    pub native_size: Option<(usize, usize)>,
}

impl FrameInputs {
    /// The standard file layout written by `gen`.
    pub fn from_dir(dir: &Path) -> Self {
        Self {
            frame_t: dir.join(files::FRAME_T),
            frame_t1: dir.join(files::FRAME_T1),
            depth_t: dir.join(files::DEPTH_T),
            depth_t1: dir.join(files::DEPTH_T1),
            calib: dir.join(files::CALIB),
            native_size: None,
        }
    }
}

struct Loaded {
    frame_t: ImageBuffer,
    frame_t1: ImageBuffer,
    depth_t: DepthMap,
    depth_t1: DepthMap,
    k: Intrinsics,
}

impl Loaded {
    fn read(inputs: &FrameInputs) -> Result<Self> {
        let frame_t = kitti_io::read_image(&inputs.frame_t)?;
        let frame_t1 = kitti_io::read_image(&inputs.frame_t1)?;
        let depth_t = kitti_io::read_depth_png(&inputs.depth_t)?;
        let depth_t1 = kitti_io::read_depth_png(&inputs.depth_t1)?;
        let dims = frame_t.dims();
        for (name, d) in [
            ("frame t+1", frame_t1.dims()),
            ("depth t", depth_t.dims()),
            ("depth t+1", depth_t1.dims()),
        ] {
            if d != dims {
                bail!("{name} has size {:?}, frame t has {:?}", d, dims);
            }
        }
        let k = load_intrinsics(
            &inputs.calib,
            inputs.native_size,
            (frame_t.width(), frame_t.height()),
        )?;
        Ok(Self {
            frame_t,
            frame_t1,
            depth_t,
            depth_t1,
            k,
        })
    }

    fn frames(&self) -> FramePair<'_> {
        FramePair {
            t: &self.frame_t,
            t1: &self.frame_t1,
        }
    }

    fn depths(&self) -> DepthPair<'_> {
        DepthPair {
            t: &self.depth_t,
            t1: &self.depth_t1,
        }
    }
}

/// Flow of every region synthesized from its pose and composited by the frame-`t` labels.
pub fn composite_region_flow(
    depth_t: &DepthMap,
    poses: &[PoseSE3],
    labels: &RegionLabels,
    k: &Intrinsics,
) -> Result<FlowField> {
    let flows = poses
        .iter()
        .map(|p| synthesize_flow(depth_t, p, k))
        .collect::<jointflow::Result<Vec<_>>>()?;
    let parts: Vec<FlowPart<'_>> = flows
        .iter()
        .enumerate()
        .map(|(region, flow)| FlowPart {
            flow,
            labels,
            region,
        })
        .collect();
    Ok(composite_flow(&parts)?)
}

fn write_report(report: &LossReport, out: &Path) -> Result<String> {
    write_text(&out.join("report.csv"), &report.to_csv())?;
    let text = report.to_text();
    write_text(&out.join("report.txt"), &text)?;
    Ok(text)
}

/// Optional inputs of [`cmd_losses`].
#[derive(Debug, Clone, Default)]
pub struct LossInputs {
    /// Frame-`t+1` labels; transferred from frame `t` with the region poses when absent.
    pub labels_t1: Option<PathBuf>,
    /// Reference flow for the flow synthesis loss.
    pub flow: Option<PathBuf>,
}

/// Evaluates every loss term for given region poses and labels.
pub fn cmd_losses(
    inputs: &FrameInputs,
    poses_path: &Path,
    labels_path: &Path,
    extra: &LossInputs,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(LossReport, String)> {
    prepare(cfg, out)?;
    let data = Loaded::read(inputs)?;
    let poses = read_poses(poses_path)?;
    let labels_t = kitti_io::read_labels_png(labels_path)?;
    if poses.len() < labels_t.region_count() {
        bail!(
            "{} poses for {} regions",
            poses.len(),
            labels_t.region_count()
        );
    }
    let labels_t = RegionLabels::with_region_count(
        labels_t.width(),
        labels_t.height(),
        labels_t.labels().to_vec(),
        poses.len(),
    )?;
    let labels_t1 = match &extra.labels_t1 {
        Some(p) => {
            let l = kitti_io::read_labels_png(p)?;
            RegionLabels::with_region_count(
                l.width(),
                l.height(),
                l.labels().to_vec(),
                poses.len(),
            )?
        }
        None => propagate_labels(&labels_t, &data.depth_t, &data.depth_t1, &poses, &data.k)?,
    };
    let pairs: Vec<PosePair> = poses.iter().copied().map(PosePair::from_forward).collect();
    let mut report = multi_region_loss(
        data.frames(),
        data.depths(),
        &pairs,
        LabelPair {
            t: &labels_t,
            t1: &labels_t1,
        },
        &data.k,
        &cfg.loss,
    )?;
    if let Some(flow_path) = &extra.flow {
        let reference = kitti_io::read_flow_png(flow_path)?;
        let composite = composite_region_flow(&data.depth_t, &poses, &labels_t, &data.k)?;
        let (l, n) = flow_loss_counted(&composite, &reference)?;
        report = report.with_flow_loss(l, n, &cfg.loss);
    }
    let text = write_report(&report, out)?;
    Ok((report, text))
}

/// Depth or flow prediction to evaluate.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    Depth { pred: PathBuf, gt: PathBuf },
    Flow { pred: PathBuf, gt: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metrics {
    Depth(DepthMetrics),
    Flow(FlowMetrics),
}

pub fn cmd_eval(target: &EvalTarget, out: &Path, cfg: &RunConfig) -> Result<(Metrics, String)> {
    prepare(cfg, out)?;
    let (metrics, csv, text) = match target {
        EvalTarget::Depth { pred, gt } => {
            let m = depth_metrics(
                &kitti_io::read_depth_png(pred)?,
                &kitti_io::read_depth_png(gt)?,
                &cfg.caps,
                cfg.median_scaling,
            )?;
            (
                Metrics::Depth(m),
                format!("{}\n{}\n", DepthMetrics::CSV_HEADER, m.csv_row()),
                m.to_text(),
            )
        }
        EvalTarget::Flow { pred, gt } => {
            let m = flow_metrics(
                &kitti_io::read_flow_png(pred)?,
                &kitti_io::read_flow_png(gt)?,
            )?;
            (
                Metrics::Flow(m),
                format!("{}\n{}\n", FlowMetrics::CSV_HEADER, m.csv_row()),
                m.to_text(),
            )
        }
    };
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("metrics.txt"), &text)?;
    Ok((metrics, text))
}

/// Estimates the camera motion between two frames by direct photometric optimization.
pub fn cmd_optimize(
    inputs: &FrameInputs,
    init: Option<&Path>,
    reference_flow: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(PoseSE3, OptimizeTrace, String)> {
    prepare(cfg, out)?;
    let data = Loaded::read(inputs)?;
    let init = match init {
        Some(p) => kitti_io::read_pose(p)?,
        None => PoseSE3::identity(),
    };
    let flow = reference_flow.map(kitti_io::read_flow_png).transpose()?;
    let problem = PoseProblem {
        frames: data.frames(),
        depths: data.depths(),
        k: &data.k,
        loss: &cfg.loss,
        reference_flow: flow.as_ref(),
    };
    let (pose, trace) = estimate_pose(&problem, &init, &cfg.optimize)?;
    kitti_io::write_pose(&pose, &out.join("pose.txt"))?;
    write_text(&out.join("trace.csv"), &trace.to_csv())?;
    let text = format!(
        "status: {:?}\naccepted steps: {}\nloss: {} -> {}\npose: {}",
        trace.status,
        trace.losses.len() - 1,
        trace.losses[0],
        trace.final_loss(),
        kitti_io::format_pose(&pose)
    );
    Ok((pose, trace, text))
}

/// Result of the full joint pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub labels_t: RegionLabels,
    pub labels_t1: RegionLabels,
    pub region_poses: Vec<PoseSE3>,
    pub composite_flow: FlowField,
    pub report: LossReport,
    /// Photometric loss of the best single pose for the whole frame.
    pub single_pose_ph: f64,
    pub single_pose: PoseSE3,
    pub flow_metrics: FlowMetrics,
    /// Static-region depth decomposed from flow, scored against the input depth.
    pub decomposed_depth: Option<DepthMetrics>,
}

/// Segments the flow, estimates one pose per region, synthesizes and
/// composites flow, and scores everything against the unsegmented
/// single-pose alternative.
///
/// `flow_path` stands in for a flow network; frame-`t` depth from `inputs`
/// supplies per-region depth.
pub fn cmd_pipeline(
    inputs: &FrameInputs,
    flow_path: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(PipelineOutcome, String)> {
    prepare(cfg, out)?;
    let data = Loaded::read(inputs)?;
    let flow = kitti_io::read_flow_png(flow_path)?;
    if flow.dims() != data.frame_t.dims() {
        bail!(
            "flow has size {:?}, frames have {:?}",
            flow.dims(),
            data.frame_t.dims()
        );
    }
    let k = &data.k;

    let labels_t = segment_motion(&flow, &cfg.segmentation)?;
    let regions = labels_t.region_count();
    let fitted = (0..regions)
        .map(|m| {
            let mask = labels_t.region_mask(m);
            fit_pose_to_flow(
                &flow,
                &data.depth_t,
                Some(&mask),
                k,
                &PoseSE3::identity(),
                &cfg.optimize,
            )
        })
        .collect::<jointflow::Result<Vec<_>>>()?;
    let labels_t1 = propagate_labels(&labels_t, &data.depth_t, &data.depth_t1, &fitted, k)?;

    let mut region_poses = Vec::with_capacity(regions);
    for (m, init) in fitted.iter().enumerate() {
        let t = mask_image(&data.frame_t, &labels_t, m)?;
        let t1 = mask_image(&data.frame_t1, &labels_t1, m)?;
        let problem = PoseProblem {
            frames: FramePair { t: &t, t1: &t1 },
            depths: data.depths(),
            k,
            loss: &cfg.loss,
            reference_flow: None,
        };
        let pose = match estimate_pose(&problem, init, &cfg.optimize) {
            Ok((pose, _)) => pose,
            // A region with no photometric overlap keeps its flow-fitted pose.
            Err(jointflow::Error::EmptyDomain(_)) => *init,
            Err(e) => return Err(e.into()),
        };
        region_poses.push(pose);
    }

    let composite = composite_region_flow(&data.depth_t, &region_poses, &labels_t, k)?;
    let pairs: Vec<PosePair> = region_poses
        .iter()
        .copied()
        .map(PosePair::from_forward)
        .collect();
    let labels = LabelPair {
        t: &labels_t,
        t1: &labels_t1,
    };
    let (flow_l, flow_n) = flow_loss_counted(&composite, &flow)?;
    let report = multi_region_loss(data.frames(), data.depths(), &pairs, labels, k, &cfg.loss)?
        .with_flow_loss(flow_l, flow_n, &cfg.loss);
    let fm = flow_metrics(&composite, &flow)?;

    // Unsegmented alternative: one pose for the whole frame.
    let whole_init = fit_pose_to_flow(
        &flow,
        &data.depth_t,
        None,
        k,
        &PoseSE3::identity(),
        &cfg.optimize,
    )?;
    let whole = PoseProblem {
        frames: data.frames(),
        depths: data.depths(),
        k,
        loss: &cfg.loss,
        reference_flow: None,
    };
    let (single_pose, _) = estimate_pose(&whole, &whole_init, &cfg.optimize)?;
    let single = RegionLabels::single(labels_t.width(), labels_t.height());
    let single_pose_ph = multi_region_loss(
        data.frames(),
        data.depths(),
        &[PosePair::from_forward(single_pose)],
        LabelPair {
            t: &single,
            t1: &single,
        },
        k,
        &cfg.loss,
    )?
    .ph;

    let decomposed_depth = match decompose_flow(&flow, &region_poses[0], k) {
        Ok(d) => {
            let keep: Vec<bool> = (0..d.valid().len())
                .map(|i| d.is_valid(i) && labels_t.labels()[i] == 0)
                .collect();
            let static_depth = DepthMap::new(d.width(), d.height(), d.depths().to_vec(), keep)?;
            depth_metrics(&static_depth, &data.depth_t, &cfg.caps, cfg.median_scaling).ok()
        }
        Err(jointflow::Error::DegenerateParallax(_)) => None,
        Err(e) => return Err(e.into()),
    };

    kitti_io::write_labels_png(&labels_t, &out.join(files::LABELS_T))?;
    kitti_io::write_labels_png(&labels_t1, &out.join(files::LABELS_T1))?;
    write_text(&out.join(files::REGION_POSES), &format_poses(&region_poses))?;
    kitti_io::write_flow_png(&composite, &out.join("flow_composite.png"))?;
    let mut text = format!("k={}\n", labels_t.motion_regions());
    text.push_str(&write_report(&report, out)?);
    text.push_str(&format!("single-pose L_ph     {single_pose_ph:>12.6}\n"));
    text.push_str(&format!("flow\n{}", fm.to_text()));
    let mut csv = format!("{}\n{}\n", FlowMetrics::CSV_HEADER, fm.csv_row());
    match &decomposed_depth {
        Some(m) => {
            text.push_str(&format!("static depth from flow\n{}", m.to_text()));
            csv.push_str(&format!("{}\n{}\n", DepthMetrics::CSV_HEADER, m.csv_row()));
        }
        None => text.push_str("static depth from flow: unobservable\n"),
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("summary.txt"), &text)?;
    Ok((
        PipelineOutcome {
            labels_t,
            labels_t1,
            region_poses,
            composite_flow: composite,
            report,
            single_pose_ph,
            single_pose,
            flow_metrics: fm,
            decomposed_depth,
        },
        text,
    ))
}
