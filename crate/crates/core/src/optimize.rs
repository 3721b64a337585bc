//! Direct pose estimation by minimizing the bilateral photometric loss.
//!
//! Poses are searched in a local chart around the current estimate: a
//! 6-vector `(omega, t)` stands for the pose `D(omega, t) ∘ center`, where `D`
//! rotates by the axis-angle `omega` and then translates by `t`. The chart is
//! re-centred on every accepted step.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Point3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::flow::{synthesize_flow, FlowField};
use crate::geometry::{
    backproject_unchecked, in_sampling_bounds, inside_expanded, pixel_of, project_unchecked,
    DepthMap, ImageBuffer, Intrinsics, PoseSE3, Taps,
};
use crate::loss::{
    bilateral_reprojection_loss, flow_loss, DepthPair, FramePair, LossConfig, PosePair,
};

/// Local pose coordinates: axis-angle rotation (radians) then translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams(pub Vector6<f64>);

impl PoseParams {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn new(omega: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self(Vector6::new(omega.x, omega.y, omega.z, t.x, t.y, t.z))
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    /// The pose these coordinates denote in the chart centred at `center`.
    pub fn pose_around(&self, center: &PoseSE3) -> PoseSE3 {
        PoseSE3::from_axis_angle(self.omega(), self.translation()).compose(center)
    }

    /// Coordinates of `pose` in the chart centred at `center`.
    pub fn from_pose(pose: &PoseSE3, center: &PoseSE3) -> Result<Self> {
        let d = pose.compose(&center.inverse());
        let omega = d.rotation.scaled_axis();
        if omega.norm() >= std::f64::consts::PI - 1e-9 {
            return Err(Error::Domain("pose lies outside the chart".into()));
        }
        Ok(Self::new(omega, d.translation))
    }
}

/// Everything the pose objective depends on besides the pose itself.
#[derive(Debug, Clone, Copy)]
pub struct PoseProblem<'a> {
    pub frames: FramePair<'a>,
    pub depths: DepthPair<'a>,
    pub k: &'a Intrinsics,
    pub loss: &'a LossConfig,
    /// When present, `lambda * L_flow` against this flow joins the objective.
    pub reference_flow: Option<&'a FlowField>,
}

/// `L_ph` of the pose pair `(T, T^-1)`, plus `lambda * L_flow` when a
/// reference flow is supplied. `T` is `params` read in the chart at `center`.
pub fn pose_loss(params: &PoseParams, problem: &PoseProblem<'_>, center: &PoseSE3) -> Result<f64> {
    loss_at(&params.pose_around(center), problem)
}

fn loss_at(pose: &PoseSE3, problem: &PoseProblem<'_>) -> Result<f64> {
    let pair = PosePair::from_forward(*pose);
    let mut loss = bilateral_reprojection_loss(
        problem.frames,
        problem.depths,
        &pair,
        problem.k,
        problem.loss,
    )?;
    if let Some(reference) = problem.reference_flow {
        let synthesized = synthesize_flow(problem.depths.t, pose, problem.k)?;
        loss += problem.loss.lambda * flow_loss(&synthesized, reference)?;
    }
    Ok(loss)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(
    f: impl Fn(&Vector6<f64>) -> Result<f64>,
    x: &Vector6<f64>,
    eps: f64,
) -> Result<Vector6<f64>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference epsilon must be positive, got {eps}"
        )));
    }
    let mut g = Vector6::zeros();
    for i in 0..6 {
        let mut step = Vector6::zeros();
        step[i] = eps;
        let (plus, minus) = (f(&(x + step))?, f(&(x - step))?);
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::Probe { coordinate: i });
        }
        g[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(g)
}

/// Central finite-difference gradient of [`pose_loss`] in the chart at `center`.
pub fn numeric_gradient(
    params: &PoseParams,
    problem: &PoseProblem<'_>,
    center: &PoseSE3,
    eps: f64,
) -> Result<Vector6<f64>> {
    central_difference(
        |x| pose_loss(&PoseParams(*x), problem, center),
        &params.0,
        eps,
    )
}

/// Quadratic model of the squared-residual objective
///
/// ```text
/// E = 1/2 * (mean r_fwd^2 + mean r_bwd^2 + lambda * mean |O_syn - O_ref|^2)
/// ```
///
/// at `delta = 0` of the chart centred at the linearization pose.
/// `r_fwd = I_t - I_{t+1}(warp)` and `r_bwd = I_{t+1} - I_t(warp)`, averaged
/// over valid pixels and channels. The flow term is present only with a
/// reference flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub energy: f64,
    pub gradient: Vector6<f64>,
    /// Gauss-Newton approximation `J^T J`.
    pub hessian: Matrix6<f64>,
    pub pixels: usize,
}

#[derive(Default)]
struct Accumulator {
    sq: f64,
    g: Vector6<f64>,
    h: Matrix6<f64>,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, r: f64, j: &SMatrix<f64, 1, 6>) {
        self.sq += r * r;
        self.g += j.transpose() * r;
        self.h += j.transpose() * j;
    }

    /// Adds this term's mean over `n * per_sample` residuals, scaled by `weight`.
    fn fold_into(self, out: &mut Linearization, per_sample: usize, weight: f64) {
        if self.n == 0 {
            return;
        }
        let s = weight / (self.n * per_sample) as f64;
        out.energy += 0.5 * self.sq * s;
        out.gradient += self.g * s;
        out.hessian += self.h * s;
        out.pixels += self.n;
    }
}

fn projection_jacobian(y: &Point3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / y.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * y.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * y.y * iz * iz,
    )
}

/// Photometric residuals of `target` against `src` sampled at `pose(X)`,
/// where `X` is lifted from `depth`. `chart` maps a warped point to its
/// derivative with respect to the 6 chart coordinates.
fn photometric_term(
    target: &ImageBuffer,
    src: &ImageBuffer,
    depth: &DepthMap,
    pose: &PoseSE3,
    k: &Intrinsics,
    chart: impl Fn(&Point3<f64>, &Point3<f64>) -> SMatrix<f64, 3, 6>,
) -> Accumulator {
    let (w, h, nc) = (target.width(), target.height(), target.channels());
    let mut acc = Accumulator::default();
    for idx in 0..w * h {
        let Some(d) = depth.get(idx) else { continue };
        if !target.is_valid(idx) {
            continue;
        }
        let x = backproject_unchecked(&pixel_of(idx, w), d, k);
        let y = pose.apply(&x);
        if y.z <= 0.0 {
            continue;
        }
        let c = project_unchecked(&y, k);
        if !in_sampling_bounds(&c, w, h) {
            continue;
        }
        let taps = Taps::new(&c, w, h);
        if !taps.source_valid(src) {
            continue;
        }
        let jy = projection_jacobian(&y, k) * chart(&x, &y);
        for ch in 0..nc {
            let r = target.pixel(idx)[ch] - taps.sample(src, ch);
            let (gu, gv) = taps.gradient(src, ch);
            let j = -(jy.row(0) * gu + jy.row(1) * gv);
            acc.add(r, &j);
        }
        acc.n += 1;
    }
    acc
}

/// Linearizes the squared-residual objective around `center`.
pub fn linearize(problem: &PoseProblem<'_>, center: &PoseSE3) -> Result<Linearization> {
    let k = problem.k;
    let FramePair {
        t: img_t,
        t1: img_t1,
    } = problem.frames;
    let rc_t = center
        .rotation
        .to_rotation_matrix()
        .transpose()
        .into_inner();
    let mut out = Linearization {
        energy: 0.0,
        gradient: Vector6::zeros(),
        hessian: Matrix6::zeros(),
        pixels: 0,
    };

    // Left perturbation of the forward pose: dY/domega = -[Y]x, dY/dt = I.
    let forward = |_: &Point3<f64>, y: &Point3<f64>| forward_chart(y);
    // The backward pose is center^-1 ∘ D^-1: dZ/domega = R^T [X]x, dZ/dt = -R^T.
    let backward_chart = |x: &Point3<f64>, _: &Point3<f64>| {
        let mut m = SMatrix::<f64, 3, 6>::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(rc_t * x.coords.cross_matrix()));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rc_t));
        m
    };

    let nc = img_t.channels();
    let fwd = photometric_term(img_t, img_t1, problem.depths.t, center, k, forward);
    let bwd = photometric_term(
        img_t1,
        img_t,
        problem.depths.t1,
        &center.inverse(),
        k,
        backward_chart,
    );
    if fwd.n == 0 || bwd.n == 0 {
        return Err(Error::EmptyDomain("warp leaves no valid pixel".into()));
    }
    fwd.fold_into(&mut out, nc, 1.0);
    bwd.fold_into(&mut out, nc, 1.0);

    if let Some(reference) = problem.reference_flow {
        let depth = problem.depths.t;
        let (w, h) = (depth.width(), depth.height());
        let mut acc = Accumulator::default();
        for idx in 0..w * h {
            let (Some(d), Some(o)) = (depth.get(idx), reference.get(idx)) else {
                continue;
            };
            let p = pixel_of(idx, w);
            let x = backproject_unchecked(&p, d, k);
            let y = center.apply(&x);
            if y.z <= 0.0 {
                continue;
            }
            let c = project_unchecked(&y, k);
            if !inside_expanded(&c, w, h) {
                continue;
            }
            let jy = projection_jacobian(&y, k) * forward_chart(&y);
            let r = c - p - o;
            acc.add(r.x, &jy.row(0).into_owned());
            acc.add(r.y, &jy.row(1).into_owned());
            acc.n += 1;
        }
        acc.fold_into(&mut out, 2, problem.loss.lambda);
    }
    Ok(out)
}

fn forward_chart(y: &Point3<f64>) -> SMatrix<f64, 3, 6> {
    let mut m = SMatrix::<f64, 3, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-y.coords.cross_matrix()));
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    m
}

/// Mean squared flow residual of `pose` and its Gauss-Newton model.
fn flow_fit_model(
    flow: &FlowField,
    depth: &DepthMap,
    mask: Option<&[bool]>,
    k: &Intrinsics,
    pose: &PoseSE3,
) -> Result<Linearization> {
    let w = depth.width();
    let mut acc = Accumulator::default();
    for idx in 0..depth.depths().len() {
        if mask.is_some_and(|m| !m[idx]) {
            continue;
        }
        let (Some(d), Some(o)) = (depth.get(idx), flow.get(idx)) else {
            continue;
        };
        let p = pixel_of(idx, w);
        let x = backproject_unchecked(&p, d, k);
        let y = pose.apply(&x);
        if y.z <= 0.0 {
            continue;
        }
        let jy = projection_jacobian(&y, k) * forward_chart(&y);
        let r = project_unchecked(&y, k) - p - o;
        acc.add(r.x, &jy.row(0).into_owned());
        acc.add(r.y, &jy.row(1).into_owned());
        acc.n += 1;
    }
    if acc.n == 0 {
        return Err(Error::EmptyDomain(
            "no pixel carries both depth and flow".into(),
        ));
    }
    let mut out = Linearization {
        energy: 0.0,
        gradient: Vector6::zeros(),
        hessian: Matrix6::zeros(),
        pixels: 0,
    };
    acc.fold_into(&mut out, 2, 1.0);
    Ok(out)
}

/// Rigid motion that best explains `flow` given frame-`t` depth, by damped
/// Gauss-Newton on the flow residuals of the pixels selected by `mask`.
pub fn fit_pose_to_flow(
    flow: &FlowField,
    depth: &DepthMap,
    mask: Option<&[bool]>,
    k: &Intrinsics,
    init: &PoseSE3,
    cfg: &OptimizeConfig,
) -> Result<PoseSE3> {
    cfg.validate()?;
    check_shape(depth.dims(), flow.dims())?;
    if let Some(m) = mask {
        if m.len() != depth.depths().len() {
            return Err(Error::Consistency(
                "mask does not match the depth raster".into(),
            ));
        }
    }
    let mut pose = *init;
    let mut model = flow_fit_model(flow, depth, mask, k, &pose)?;
    let mut damping = cfg.initial_damping;
    for _ in 0..cfg.max_iterations {
        let diag = Matrix6::from_diagonal(&model.hessian.diagonal());
        let mut improved = false;
        for _ in 0..MAX_DAMPING_RETRIES {
            let system = model.hessian + diag * damping + Matrix6::identity() * 1e-12;
            let Some(chol) = system.cholesky() else {
                damping *= 4.0;
                continue;
            };
            let candidate =
                PoseParams(clip_step(-chol.solve(&model.gradient), cfg)).pose_around(&pose);
            match flow_fit_model(flow, depth, mask, k, &candidate) {
                Ok(next) if next.energy < model.energy => {
                    let converged = model.energy - next.energy <= cfg.tolerance * model.energy;
                    pose = candidate;
                    model = next;
                    damping = (damping / 3.0).max(1e-9);
                    improved = !converged;
                    break;
                }
                Ok(_) | Err(Error::EmptyDomain(_)) => damping *= 4.0,
                Err(e) => return Err(e),
            }
        }
        if !improved {
            break;
        }
    }
    Ok(pose)
}

/// Squared-residual objective at `params` in the chart centred at `center`.
pub fn residual_energy(
    params: &PoseParams,
    problem: &PoseProblem<'_>,
    center: &PoseSE3,
) -> Result<f64> {
    linearize(problem, &params.pose_around(center)).map(|l| l.energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Backtracking line search along the numeric gradient of the pose loss.
    GradientDescent,
    /// Damped Gauss-Newton on the per-pixel residuals; steps are accepted on
    /// the pose loss.
    LevenbergMarquardt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the loss by less than this fraction.
    pub tolerance: f64,
    pub initial_damping: f64,
    /// Largest rotation per step, radians.
    pub max_step_rotation: f64,
    /// Largest translation per step, meters.
    pub max_step_translation: f64,
    pub fd_epsilon: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::LevenbergMarquardt,
            max_iterations: 100,
            tolerance: 1e-10,
            initial_damping: 1e-3,
            max_step_rotation: 0.05,
            max_step_translation: 0.05,
            fd_epsilon: 1e-6,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("tolerance", self.tolerance),
            ("initial_damping", self.initial_damping),
            ("max_step_rotation", self.max_step_rotation),
            ("max_step_translation", self.max_step_translation),
            ("fd_epsilon", self.fd_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_step_rotation >= std::f64::consts::PI {
            return Err(Error::Config("max_step_rotation must stay below pi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// The loss decrease fell below tolerance or the loss reached zero.
    Converged,
    /// No trial step lowered the loss.
    Stalled,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeTrace {
    /// Loss at the initial pose followed by the loss after each accepted step.
    pub losses: Vec<f64>,
    pub final_pose: PoseSE3,
    pub status: Status,
    pub iterations: usize,
}

impl OptimizeTrace {
    pub fn is_monotone(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace holds the initial loss")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

fn clip_step(mut delta: Vector6<f64>, cfg: &OptimizeConfig) -> Vector6<f64> {
    let rot = delta.fixed_rows::<3>(0).norm();
    let trans = delta.fixed_rows::<3>(3).norm();
    let scale = (cfg.max_step_rotation / rot)
        .min(cfg.max_step_translation / trans)
        .min(1.0);
    if scale < 1.0 {
        delta *= scale;
    }
    delta
}

/// Evaluates a trial pose. Poses that leave no valid overlap count as rejected.
fn trial(pose: &PoseSE3, problem: &PoseProblem<'_>) -> Result<Option<f64>> {
    match loss_at(pose, problem) {
        Ok(l) => Ok(Some(l)),
        Err(Error::EmptyDomain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

struct Search {
    pose: PoseSE3,
    losses: Vec<f64>,
}

impl Search {
    fn current(&self) -> f64 {
        *self.losses.last().unwrap()
    }

    fn finish(self, status: Status, iterations: usize) -> (PoseSE3, OptimizeTrace) {
        let trace = OptimizeTrace {
            losses: self.losses,
            final_pose: self.pose,
            status,
            iterations,
        };
        (trace.final_pose, trace)
    }

    fn diverged(&self, reason: String, iterations: usize) -> Error {
        Error::Optimization {
            reason,
            trace: Box::new(OptimizeTrace {
                losses: self.losses.clone(),
                final_pose: self.pose,
                status: Status::Stalled,
                iterations,
            }),
        }
    }

    /// Records an accepted loss; returns true when the decrease was below tolerance.
    fn accept(&mut self, pose: PoseSE3, loss: f64, cfg: &OptimizeConfig) -> bool {
        let prev = self.current();
        self.pose = pose;
        self.losses.push(loss);
        prev - loss <= cfg.tolerance * prev || loss == 0.0
    }
}

/// Minimizes [`pose_loss`] starting from `init`.
///
/// Returns the best pose found and the trace of accepted losses, which never
/// increases.
pub fn estimate_pose(
    problem: &PoseProblem<'_>,
    init: &PoseSE3,
    cfg: &OptimizeConfig,
) -> Result<(PoseSE3, OptimizeTrace)> {
    cfg.validate()?;
    problem.loss.validate()?;
    let initial = loss_at(init, problem)?;
    let search = Search {
        pose: *init,
        losses: vec![initial],
    };
    if !initial.is_finite() {
        return Err(search.diverged(format!("initial loss is {initial}"), 0));
    }
    if initial == 0.0 {
        return Ok(search.finish(Status::Converged, 0));
    }
    match cfg.method {
        Method::LevenbergMarquardt => levenberg_marquardt(problem, search, cfg),
        Method::GradientDescent => gradient_descent(problem, search, cfg),
    }
}

const MAX_DAMPING_RETRIES: usize = 12;
const MAX_BACKTRACKS: usize = 30;

fn levenberg_marquardt(
    problem: &PoseProblem<'_>,
    mut search: Search,
    cfg: &OptimizeConfig,
) -> Result<(PoseSE3, OptimizeTrace)> {
    let mut damping = cfg.initial_damping;
    for iter in 1..=cfg.max_iterations {
        let lin = linearize(problem, &search.pose)?;
        let diag = Matrix6::from_diagonal(&lin.hessian.diagonal());
        let mut accepted = None;
        for _ in 0..MAX_DAMPING_RETRIES {
            let system = lin.hessian + diag * damping + Matrix6::identity() * 1e-12;
            let Some(chol) = system.cholesky() else {
                damping *= 4.0;
                continue;
            };
            let delta = clip_step(-chol.solve(&lin.gradient), cfg);
            let pose = PoseParams(delta).pose_around(&search.pose);
            match trial(&pose, problem)? {
                Some(l) if !l.is_finite() => {
                    return Err(search.diverged(format!("loss became {l}"), iter));
                }
                Some(l) if l < search.current() => {
                    accepted = Some((pose, l));
                    break;
                }
                _ => damping *= 4.0,
            }
        }
        let Some((pose, loss)) = accepted else {
            return Ok(search.finish(Status::Stalled, iter));
        };
        damping = (damping / 3.0).max(1e-9);
        if search.accept(pose, loss, cfg) {
            return Ok(search.finish(Status::Converged, iter));
        }
    }
    Ok(search.finish(Status::MaxIterations, cfg.max_iterations))
}

fn gradient_descent(
    problem: &PoseProblem<'_>,
    mut search: Search,
    cfg: &OptimizeConfig,
) -> Result<(PoseSE3, OptimizeTrace)> {
    let mut step = cfg.max_step_translation.min(cfg.max_step_rotation);
    for iter in 1..=cfg.max_iterations {
        let g = numeric_gradient(&PoseParams::zero(), problem, &search.pose, cfg.fd_epsilon)?;
        let gn = g.norm();
        if gn == 0.0 {
            return Ok(search.finish(Status::Converged, iter));
        }
        let mut accepted = None;
        let mut s = (step * 2.0).min(cfg.max_step_translation.max(cfg.max_step_rotation));
        for _ in 0..MAX_BACKTRACKS {
            let delta = clip_step(-g * (s / gn), cfg);
            let pose = PoseParams(delta).pose_around(&search.pose);
            match trial(&pose, problem)? {
                Some(l) if !l.is_finite() => {
                    return Err(search.diverged(format!("loss became {l}"), iter));
                }
                // Armijo sufficient decrease.
                Some(l)
                    if l <= search.current() - 1e-4 * g.dot(&-delta) && l < search.current() =>
                {
                    accepted = Some((pose, l));
                    break;
                }
                _ => s *= 0.5,
            }
        }
        let Some((pose, loss)) = accepted else {
            return Ok(search.finish(Status::Stalled, iter));
        };
        step = s;
        if search.accept(pose, loss, cfg) {
            return Ok(search.finish(Status::Converged, iter));
        }
    }
    Ok(search.finish(Status::MaxIterations, cfg.max_iterations))
}
