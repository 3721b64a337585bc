use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use jointflow::optimize::Method;
use jointflow_cli::{
    cmd_eval, cmd_gen, cmd_losses, cmd_optimize, cmd_pipeline, cmd_segment, EvalTarget,
    FrameInputs, LossInputs, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "jointflow",
    version,
    about = "Joint depth, pose and optical-flow geometry toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// SSIM weight of the photometric error.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the flow loss in the depth and pose objectives.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Box-filter sizes, e.g. 3,5,9.
    #[arg(long, global = true, value_delimiter = ',')]
    kernels: Option<Vec<usize>>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    #[arg(long, global = true)]
    min_area: Option<usize>,
    #[arg(long, global = true)]
    cap_min: Option<f64>,
    #[arg(long, global = true)]
    cap_max: Option<f64>,
    /// Disable median scaling in depth evaluation.
    #[arg(long, global = true)]
    no_median_scaling: bool,
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lm,
    Gd,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(v) = self.alpha {
            cfg.loss.alpha = v;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = &self.kernels {
            cfg.segmentation.kernels = v.clone();
        }
        if let Some(v) = self.threshold {
            cfg.segmentation.threshold = v;
        }
        if let Some(v) = self.min_area {
            cfg.segmentation.min_area = v;
        }
        if let Some(v) = self.cap_min {
            cfg.caps.min = v;
        }
        if let Some(v) = self.cap_max {
            cfg.caps.max = v;
        }
        if self.no_median_scaling {
            cfg.median_scaling = false;
        }
        if let Some(v) = self.max_iterations {
            cfg.optimize.max_iterations = v;
        }
        if let Some(m) = self.method {
            cfg.optimize.method = match m {
                MethodArg::Lm => Method::LevenbergMarquardt,
                MethodArg::Gd => Method::GradientDescent,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Frames {
    /// Directory laid out like the output of `gen`; individual paths override it.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    frame_t: Option<PathBuf>,
    #[arg(long)]
    frame_t1: Option<PathBuf>,
    #[arg(long)]
    depth_t: Option<PathBuf>,
    #[arg(long)]
    depth_t1: Option<PathBuf>,
    /// KITTI calibration file with a P2 line.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Native WIDTHxHEIGHT of the calibration when frames were resized.
    #[arg(long, value_parser = parse_size)]
    native_size: Option<(usize, usize)>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok((
        w.parse().map_err(|_| "bad width")?,
        h.parse().map_err(|_| "bad height")?,
    ))
}

impl Frames {
    fn resolve(&self) -> Result<FrameInputs> {
        let base = self.input.as_deref().map(FrameInputs::from_dir);
        let pick = |explicit: &Option<PathBuf>, from_base: Option<PathBuf>, name: &str| {
            explicit
                .clone()
                .or(from_base)
                .ok_or_else(|| anyhow::anyhow!("missing --{name} (or --input)"))
        };
        Ok(FrameInputs {
            frame_t: pick(
                &self.frame_t,
                base.as_ref().map(|b| b.frame_t.clone()),
                "frame-t",
            )?,
            frame_t1: pick(
                &self.frame_t1,
                base.as_ref().map(|b| b.frame_t1.clone()),
                "frame-t1",
            )?,
            depth_t: pick(
                &self.depth_t,
                base.as_ref().map(|b| b.depth_t.clone()),
                "depth-t",
            )?,
            depth_t1: pick(
                &self.depth_t1,
                base.as_ref().map(|b| b.depth_t1.clone()),
                "depth-t1",
            )?,
            calib: pick(&self.calib, base.as_ref().map(|b| b.calib.clone()), "calib")?,
            native_size: self.native_size,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene from a TOML spec.
    Gen {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segment a KITTI flow PNG into motion regions.
    Segment {
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate all loss terms for given region poses and labels.
    Losses {
        #[command(flatten)]
        frames: Frames,
        /// One 3x4 pose per line, static region first.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        labels_t1: Option<PathBuf>,
        /// Reference flow for the flow synthesis loss.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Depth or flow evaluation.
    Eval {
        #[arg(long, value_enum)]
        kind: EvalKind,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Estimate camera motion by direct photometric optimization.
    Optimize {
        #[command(flatten)]
        frames: Frames,
        /// Initial pose file; identity when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Reference flow adding the flow term to the objective.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Segmentation, per-region pose estimation, flow synthesis and scoring.
    Pipeline {
        #[command(flatten)]
        frames: Frames,
        /// Flow source; defaults to flow_gt.png in --input.
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Depth,
    Flow,
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen {
            spec,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            cmd_gen(&spec, &out, &cfg)
        }
        Command::Segment {
            flow,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            Ok(cmd_segment(&flow, &out, &cfg)?.1)
        }
        Command::Losses {
            frames,
            poses,
            labels,
            labels_t1,
            flow,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let extra = LossInputs { labels_t1, flow };
            Ok(cmd_losses(&frames.resolve()?, &poses, &labels, &extra, &out, &cfg)?.1)
        }
        Command::Eval {
            kind,
            pred,
            gt,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let target = match kind {
                EvalKind::Depth => EvalTarget::Depth { pred, gt },
                EvalKind::Flow => EvalTarget::Flow { pred, gt },
            };
            Ok(cmd_eval(&target, &out, &cfg)?.1)
        }
        Command::Optimize {
            frames,
            init,
            flow,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            Ok(cmd_optimize(
                &frames.resolve()?,
                init.as_deref(),
                flow.as_deref(),
                &out,
                &cfg,
            )?
            .2)
        }
        Command::Pipeline {
            frames,
            flow,
            out,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let flow = match (flow, &frames.input) {
                (Some(f), _) => f,
                (None, Some(dir)) => dir.join(jointflow_cli::files::FLOW_GT),
                (None, None) => anyhow::bail!("missing --flow (or --input)"),
            };
            Ok(cmd_pipeline(&frames.resolve()?, &flow, &out, &cfg)?.1)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
