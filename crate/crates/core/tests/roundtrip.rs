use probtrack_core::synth::{
    generate, Motion, ObjectScript, OcclusionWindow, SceneScript, WindowDirection,
};
use probtrack_core::{DatasetContainer, IntervalSchedule, Point2};
use proptest::prelude::*;

fn arb_script() -> impl Strategy<Value = SceneScript> {
    (
        4usize..20,
        4usize..16,
        2usize..12,
        any::<u64>(),
        0.0f64..2.0,
        prop_oneof![Just(0usize), 2usize..6],
        1usize..4,
        0usize..3,
        any::<bool>(),
    )
        .prop_map(|(w, h, t, seed, noise, channels, stride, motion, anchor)| {
            let mut s = SceneScript::new(w, h, t);
            s.seed = seed;
            s.flow_noise_sigma = noise;
            s.uncertainty_honesty = 0.5 + noise;
            s.feature_channels = channels;
            s.feature_stride = stride;
            s.intervals = IntervalSchedule::new(anchor || t < 3, vec![1, 2]);
            let mut o =
                ObjectScript::new(3, Point2::new(0.0, 0.0), Point2::new(w as f64, h as f64));
            o.motion = match motion {
                0 => Motion::Constant {
                    velocity: Point2::new(0.3, -0.1),
                },
                1 => Motion::Sinusoidal {
                    velocity: Point2::ZERO,
                    amplitude: Point2::new(1.0, 0.5),
                    period: 5.0,
                    phase: 0.2,
                },
                _ => {
                    Motion::Keyframes(vec![(0.0, Point2::ZERO), (t as f64, Point2::new(2.0, 1.0))])
                }
            };
            o.queries
                .push((0, Point2::new(w as f64 / 2.0, h as f64 / 2.0)));
            o.query_grid = Some((t - 1, 3));
            o.keypoints.frames.extend(0..t);
            o.keypoints.sigma = noise;
            if t > 3 {
                let mut win = OcclusionWindow::new(1, t - 1);
                win.direction = WindowDirection::Forward;
                win.keypoints_supplied = true;
                o.windows.push(win);
            }
            s.objects.push(o);
            if channels > 0 {
                let mut d = ObjectScript::new(9, Point2::new(0.0, 0.0), Point2::new(2.0, 2.0));
                d.distractor_of = Some((3, 0.5));
                s.objects.push(d);
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn write_then_load_is_identity(script in arb_script()) {
        let (c, _) = generate(&script).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = DatasetContainer::load(dir.path()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn zero_noise_flows_compose_to_ground_truth(script in arb_script()) {
        let mut script = script;
        script.flow_noise_sigma = 0.0;
        let (c, gt) = generate(&script).unwrap();
        // Chain interval-1 flow from frame 0 and compare with the jump flows.
        let q = c.queries[0];
        let mut p = q.position;
        for i in 1..c.num_frames {
            p = p + c.flow(i - 1, i).unwrap().flow.sample_vec2(p).unwrap();
            let truth = gt[0][i].position;
            prop_assert!(p.distance(&truth) < 1e-4, "frame {} {:?} vs {:?}", i, p, truth);
            if let Some(f) = c.flow(0, i) {
                let jump = q.position + f.flow.sample_vec2(q.position).unwrap();
                prop_assert!(jump.distance(&truth) < 1e-4);
            }
        }
    }
}
