use super::*;
use proptest::prelude::*;

fn quiet() -> SceneParams {
    SceneParams::default().noiseless()
}

#[test]
fn seed_split_is_pinned() {
    // Reference values of the SplitMix64 sequence seeded with 0.
    assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| derive_seed(42, i)).collect();
    assert_eq!(seeds.len(), 10_000);
}

#[test]
fn centred_gaze_centres_the_iris() {
    let p = quiet();
    let img = render_eye(GazeAngles::new(0.0, 0.0), Side::Left, &p, 0);
    let g = pupil_centroid_gaze(&img, &p).unwrap();
    assert!(g.pitch.abs() < 1e-9 && g.yaw.abs() < 1e-9, "{g:?}");
    // Symmetric about the vertical line between columns 63 and 64.
    let row = 64 * IMAGE_SIZE;
    for dx in 0..20 {
        assert_eq!(img.data()[row + 63 - dx], img.data()[row + 64 + dx] , "dx {dx}");
    }
}

#[test]
fn iris_travel_follows_the_gain() {
    let p = quiet();
    // gain·sin(yaw) = 20 ⇒ iris centre x = 84.
    let yaw = (20.0 / p.gain_px).asin();
    let img = render_eye(GazeAngles::new(0.0, yaw), Side::Right, &p, 0);
    let g = pupil_centroid_gaze(&img, &p).unwrap();
    let cx = CENTRE + p.gain_px * g.yaw.sin();
    assert!((cx - 84.0).abs() < 0.05, "{cx}");
}

#[test]
fn centroid_oracle_recovers_gaze_across_the_range() {
    let p = quiet();
    let r = p.gaze_range_deg;
    let mut worst: f64 = 0.0;
    for i in 0..=10 {
        for j in 0..=10 {
            let g = GazeAngles::from_degrees(-r + 2.0 * r * i as f64 / 10.0, -r + 2.0 * r * j as f64 / 10.0);
            for side in [Side::Left, Side::Right] {
                let est = pupil_centroid_gaze(&render_eye(g, side, &p, 0), &p).unwrap();
                worst = worst.max((est.yaw - g.yaw).abs().to_degrees());
                worst = worst.max((est.pitch - g.pitch).abs().to_degrees());
            }
        }
    }
    assert!(worst < 0.5, "worst centroid error {worst}°");
}

#[test]
fn render_is_deterministic_and_seeded() {
    let p = SceneParams::default();
    let g = GazeAngles::from_degrees(5.0, -7.0);
    assert_eq!(render_eye(g, Side::Left, &p, 9), render_eye(g, Side::Left, &p, 9));
    assert_ne!(render_eye(g, Side::Left, &p, 9), render_eye(g, Side::Left, &p, 10));
    assert_eq!(render_face(g, &p, 3), render_face(g, &p, 3));
    let img = render_face(g, &p, 3);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn centred_face_is_mirror_symmetric() {
    let p = quiet();
    let img = render_face(GazeAngles::new(0.0, 0.0), &p, 0);
    assert_eq!(img.hflip(), img);
    // The face contains dark pupils at both sockets.
    let at = |x: f64, y: f64| img.data()[((CENTRE + y) as usize) * IMAGE_SIZE + (CENTRE + x) as usize];
    assert!(at(-FACE_SOCKET_X, FACE_SOCKET_Y) < 0.1 && at(FACE_SOCKET_X, FACE_SOCKET_Y) < 0.1);
    let shifted = render_face(GazeAngles::new(0.0, 0.0), &SceneParams { head_pose_px: 6.0, ..quiet() }, 0);
    assert_ne!(shifted.hflip(), shifted);
}

proptest! {
    #[test]
    fn eyes_are_mirror_images(pitch in -25.0f64..25.0, yaw in -25.0f64..25.0) {
        let p = quiet();
        let left = render_eye(GazeAngles::from_degrees(pitch, -yaw), Side::Left, &p, 0);
        let right = render_eye(GazeAngles::from_degrees(pitch, yaw), Side::Right, &p, 0);
        prop_assert!(left == right.hflip());
    }

    #[test]
    fn labels_stay_in_range(seed in any::<u64>()) {
        let p = SceneParams { step_std_deg: 15.0, ..SceneParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = p.gaze_range_deg.to_radians() + 1e-7;
        for g in gaze_trajectory(30, &p, &mut rng) {
            prop_assert!(g.pitch.abs() <= r && g.yaw.abs() <= r);
        }
    }
}

#[test]
fn degenerate_walk_is_constant_zero() {
    let p = SceneParams { gaze_range_deg: 0.0, step_std_deg: 0.0, ..SceneParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(gaze_trajectory(10, &p, &mut rng).iter().all(|g| g.pitch == 0.0 && g.yaw == 0.0));
}

#[test]
fn sequences_depend_only_on_seed() {
    let p = SceneParams::default();
    let a = gen_sequence(3, &p, 11, 0).unwrap();
    assert_eq!(a, gen_sequence(3, &p, 11, 0).unwrap());
    let b = gen_sequence(3, &p, 12, 0).unwrap();
    assert_ne!(a.labels, b.labels);
    assert_ne!(a.frames[0].eye_left, b.frames[0].eye_left);
    assert!(matches!(gen_sequence(0, &p, 1, 0), Err(Error::InvalidArgument(_))));
}

#[test]
fn offset_augmentation_shifts_all_frames_equally() {
    let s = gen_sequence(5, &SceneParams::default(), 3, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_eq!(offset_augment(&s, 0.0, &mut rng), s);
    let a = offset_augment(&s, 3.0, &mut rng);
    assert_eq!(a.frames, s.frames);
    let d0 = (a.labels[0].pitch - s.labels[0].pitch, a.labels[0].yaw - s.labels[0].yaw);
    assert!(d0.0 != 0.0 && d0.1 != 0.0);
    for (x, y) in a.labels.iter().zip(&s.labels) {
        assert!((x.pitch - y.pitch - d0.0).abs() < 1e-12 && (x.yaw - y.yaw - d0.1).abs() < 1e-12);
    }
}

#[test]
fn offset_sampler_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| draw_offset(3.0, &mut rng).0.to_degrees()).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let std = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((std - 3.0).abs() < 0.06, "std {std}");
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = SceneParams::default();
    let summary = dataset_write(dir.path(), "train", &p, 7, 3, 2).unwrap();
    assert_eq!((summary.sequences, summary.frames), (3, 6));
    let (manifest, clips) = dataset_read(dir.path()).unwrap();
    assert_eq!(manifest.files.len(), 3);
    for (i, c) in clips.iter().enumerate() {
        assert_eq!(c, &gen_sequence(2, &p, manifest.sequence_seed(i), i as u64).unwrap());
    }

    let path = dir.path().join(&manifest.files[1]);
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    let err = read_sequence(bytes.as_slice(), 1, 0).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    let err = read_sequence(&fs::read(&path).unwrap()[..100], 1, 0).unwrap_err();
    assert!(matches!(err, Error::Format { offset: 100, .. }), "{err}");
    let mut bad_version = fs::read(&path).unwrap();
    bad_version[4] = 9;
    assert!(matches!(read_sequence(bad_version.as_slice(), 1, 0), Err(Error::Format { offset: 4, .. })));

    fs::remove_file(&path).unwrap();
    match DiskDataset::open(dir.path()) {
        Err(Error::Validation(msg)) => assert!(msg.contains(&manifest.files[1]), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn datasets_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let p = SceneParams::default();
    let sa = dataset_write(a.path(), "val", &p, 99, 2, 3).unwrap();
    let sb = dataset_write(b.path(), "val", &p, 99, 2, 3).unwrap();
    assert_eq!(sa, sb);
    for name in ["manifest.json", "seq_00000.stgz", "seq_00001.stgz"] {
        assert_eq!(file_sha256(a.path().join(name)).unwrap(), file_sha256(b.path().join(name)).unwrap());
    }
    assert!(dataset_write(a.path(), "val", &p, 99, 0, 3).is_err());
}

#[test]
fn synthetic_set_matches_written_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = SceneParams::default();
    dataset_write(dir.path(), "train", &p, 5, 2, 2).unwrap();
    let disk = DiskDataset::open(dir.path()).unwrap();
    let mem = SyntheticSet::new(p, 5, 2, 2).unwrap();
    for i in 0..2 {
        assert_eq!(disk.clip(i).unwrap(), mem.clip(i).unwrap());
    }
}
