use jointflow::flow::synthesize_flow;
use jointflow::geometry::{reproject_coords, sample_bilinear, PixelGrid};
use jointflow::loss::{bilateral_reprojection_loss, DepthPair, FramePair, LossConfig, PosePair};
use jointflow::optimize::{pose_loss, PoseParams, PoseProblem};
use jointflow::synth::{generate, perturb_pose, Background, MotionSpec, SceneBundle, SceneSpec};
use nalgebra::Point2;

fn scene(seed: u64) -> SceneBundle {
    let mut spec = SceneSpec::static_scene(128, 64, seed);
    spec.background = Background::Slanted {
        depth: 5.0,
        slope_x: 0.2,
        slope_y: -0.15,
    };
    spec.camera_motion = MotionSpec::new([0.6, -1.2, 0.4], [0.07, -0.02, 0.05]);
    generate(&spec).unwrap()
}

#[test]
fn flow_and_reprojection_give_the_same_warp() {
    let b = scene(1);
    let k = b.intrinsics;
    let direct = reproject_coords(&b.depth_t, &b.camera_motion, &k).unwrap();
    let flow = synthesize_flow(&b.depth_t, &b.camera_motion, &k).unwrap();
    let base = PixelGrid::identity(k.width, k.height);
    let coords: Vec<Point2<f64>> = base
        .coords()
        .iter()
        .zip(flow.vectors())
        .map(|(p, o)| p + o)
        .collect();
    let via_flow = PixelGrid::new(k.width, k.height, coords, flow.valid().to_vec()).unwrap();

    let a = sample_bilinear(&b.frame_t1, &direct).unwrap();
    let c = sample_bilinear(&b.frame_t1, &via_flow).unwrap();
    let mut compared = 0;
    for i in 0..k.width * k.height {
        if a.is_valid(i) && c.is_valid(i) {
            assert!((a.data()[i] - c.data()[i]).abs() < 1e-9);
            compared += 1;
        }
    }
    assert!(compared > k.width * k.height / 2);
    for i in 0..k.width * k.height {
        if direct.valid()[i] && via_flow.valid()[i] {
            assert!((direct.coords()[i] - via_flow.coords()[i]).norm() < 1e-9);
        }
    }
}

#[test]
fn ground_truth_pose_beats_one_degree_perturbations() {
    let b = scene(2);
    let cfg = LossConfig::default();
    let frames = FramePair {
        t: &b.frame_t,
        t1: &b.frame_t1,
    };
    let depths = DepthPair {
        t: &b.depth_t,
        t1: &b.depth_t1,
    };
    let truth = bilateral_reprojection_loss(
        frames,
        depths,
        &PosePair::from_forward(b.camera_motion),
        &b.intrinsics,
        &cfg,
    )
    .unwrap();
    for seed in 0..10 {
        let off = perturb_pose(&b.camera_motion, 1.0, 0.0, seed);
        let l = bilateral_reprojection_loss(
            frames,
            depths,
            &PosePair::from_forward(off),
            &b.intrinsics,
            &cfg,
        )
        .unwrap();
        assert!(truth < l, "seed {seed}: {truth} vs {l}");
    }
}

#[test]
fn pose_loss_is_smallest_at_the_true_pose() {
    let b = scene(3);
    let cfg = LossConfig::default();
    let problem = PoseProblem {
        frames: FramePair {
            t: &b.frame_t,
            t1: &b.frame_t1,
        },
        depths: DepthPair {
            t: &b.depth_t,
            t1: &b.depth_t1,
        },
        k: &b.intrinsics,
        loss: &cfg,
        reference_flow: Some(&b.flow_gt),
    };
    let at_truth = pose_loss(&PoseParams::zero(), &problem, &b.camera_motion).unwrap();
    for seed in 0..50 {
        let off = perturb_pose(&b.camera_motion, 0.5, 0.02, 100 + seed);
        let params = PoseParams::from_pose(&off, &b.camera_motion).unwrap();
        let l = pose_loss(&params, &problem, &b.camera_motion).unwrap();
        assert!(at_truth <= l, "seed {seed}: {at_truth} vs {l}");
    }
}
