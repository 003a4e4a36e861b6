use probtrack_core::synth::{
    generate, ObjectScript, OcclusionWindow, SceneScript, WindowDirection,
};
use probtrack_core::tracker::{backward_pass, forward_pass, track_query, QueryMode};
use probtrack_core::{DatasetContainer, EngineConfig, Point2, Provenance};

fn scene(num_frames: usize, noise: f64) -> SceneScript {
    let mut s = SceneScript::new(48, 48, num_frames);
    s.seed = 11;
    s.flow_noise_sigma = noise;
    let mut o = ObjectScript::new(1, Point2::new(4.0, 4.0), Point2::new(44.0, 44.0));
    o.motion = probtrack_core::synth::Motion::Constant {
        velocity: Point2::new(0.1, 0.05),
    };
    o.queries.push((0, Point2::new(18.0, 20.0)));
    o.keypoints.sigma = 0.2;
    s.objects.push(o);
    s
}

#[test]
fn occlusion_then_keypoint_relocation() {
    let mut s = scene(60, 0.1);
    s.objects[0].windows.push(OcclusionWindow::new(20, 30));
    s.objects[0].keypoints.frames.insert(30);
    let (c, gt) = generate(&s).unwrap();
    let traj = track_query(&c, 0, &EngineConfig::default(), QueryMode::QueryFirst).unwrap();
    for t in 20..30 {
        assert!(!traj.states[t].visible, "frame {t}");
        assert_eq!(traj.states[t].provenance, Provenance::Occluded);
    }
    assert_eq!(traj.states[30].provenance, Provenance::KeypointOnly);
    assert!(traj.states[30].estimate.mean.distance(&gt[0][30].position) < 1.5);
    for t in 31..60 {
        assert!(traj.states[t].visible, "frame {t}");
        assert_eq!(traj.states[t].provenance, Provenance::Forward);
        assert!(traj.states[t].estimate.mean.distance(&gt[0][t].position) < 2.0);
    }
}

#[test]
fn backward_pass_recovers_late_appearance() {
    let mut s = scene(60, 0.1);
    let mut w = OcclusionWindow::new(1, 40);
    w.direction = WindowDirection::Forward;
    s.objects[0].windows.push(w);
    s.objects[0].keypoints.frames.extend(40..60);
    let (c, gt) = generate(&s).unwrap();
    let cfg = EngineConfig::default();
    let fwd = forward_pass(&c, 0, &cfg).unwrap();
    assert!((1..40).all(|t| !fwd[t].unwrap().visible));
    let traj = track_query(&c, 0, &cfg, QueryMode::QueryFirst).unwrap();
    for t in 1..40 {
        let st = traj.states[t];
        assert!(st.visible, "frame {t}");
        assert_eq!(st.provenance, Provenance::Backward);
        assert!(st.estimate.mean.distance(&gt[0][t].position) < 2.0);
    }
}

/// Same container with time running backwards.
fn reverse_time(c: &DatasetContainer) -> DatasetContainer {
    let last = c.num_frames - 1;
    let mut r = c.clone();
    r.flows = c
        .flows
        .iter()
        .map(|(&(j, i), f)| ((last - j, last - i), f.clone()))
        .collect();
    r.absent_flows = c
        .absent_flows
        .iter()
        .map(|&(j, i)| (last - j, last - i))
        .collect();
    for m in r.masks.values_mut() {
        m.reverse();
    }
    if let Some(f) = r.features.as_mut() {
        f.frames.reverse();
    }
    for k in &mut r.keypoints {
        k.reverse();
    }
    for q in &mut r.queries {
        q.query_frame = last - q.query_frame;
    }
    r.ground_truth = None;
    r
}

#[test]
fn backward_pass_mirrors_forward_pass() {
    let mut s = scene(40, 0.3);
    s.objects[0].windows.push(OcclusionWindow::new(12, 17));
    s.objects[0].keypoints.frames.extend([17, 25, 33]);
    let (c, _) = generate(&s).unwrap();
    let r = reverse_time(&c);
    r.validate().unwrap();
    let cfg = EngineConfig::default();
    let fwd = forward_pass(&c, 0, &cfg).unwrap();
    let bwd = backward_pass(&r, 0, &cfg, &[], QueryMode::QueryStrided).unwrap();
    let last = c.num_frames - 1;
    for t in 0..c.num_frames {
        let (f, b) = (fwd[t].unwrap(), bwd[last - t].unwrap());
        assert_eq!(f.estimate, b.estimate, "frame {t}");
        assert_eq!(f.visible, b.visible, "frame {t}");
        let expected = match f.provenance {
            Provenance::Forward => Provenance::Backward,
            p => p,
        };
        assert_eq!(b.provenance, expected, "frame {t}");
    }
}

#[test]
fn distractor_is_rejected_by_feature_filter() {
    // A high-confidence keypoint lands on a distractor whose features are
    // dissimilar; the filter must drop it and the flow track stays put.
    let mut s = scene(20, 0.05);
    s.feature_channels = 8;
    s.feature_stride = 2;
    let mut d = ObjectScript::new(2, Point2::new(30.0, 30.0), Point2::new(40.0, 40.0));
    d.distractor_of = Some((1, 0.1));
    s.objects.push(d);
    let (mut c, gt) = generate(&s).unwrap();
    let mut kp = probtrack_core::dataset::Keypoint {
        x: 35.0,
        y: 35.0,
        confidence: 0.99,
    };
    c.keypoints[0][10] = Some(kp);
    // A tight keypoint sigma makes any accepted keypoint dominate the fusion.
    let cfg = EngineConfig {
        keypoint_sigma: 0.05,
        ..EngineConfig::default()
    };
    let traj = track_query(&c, 0, &cfg, QueryMode::QueryFirst).unwrap();
    assert_eq!(traj.states[10].provenance, Provenance::Forward);
    assert!(traj.states[10].estimate.mean.distance(&gt[0][10].position) < 1.0);

    // The same keypoint on the tracked object is accepted and pulls the mean.
    let truth = gt[0][10].position;
    kp.x = truth.x as f32 + 0.8;
    kp.y = truth.y as f32;
    c.keypoints[0][10] = Some(kp);
    let traj = track_query(&c, 0, &cfg, QueryMode::QueryFirst).unwrap();
    assert!(traj.states[10].estimate.mean.x > truth.x + 0.2);
}
