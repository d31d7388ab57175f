use softrep::dataset::{generate_dataset, Dataset, DatasetError, GenConfig, Split, SplitPart};
use softrep::scene::SceneConfig;

fn small_scene() -> SceneConfig {
    SceneConfig {
        particles: 96,
        episode_len: 4,
        ..SceneConfig::push()
    }
}

fn small_data(trajectories: usize, seed: u64) -> Dataset {
    let cfg = GenConfig {
        trajectories,
        seed,
        opt_iters: 1,
        ..GenConfig::default()
    };
    generate_dataset(&small_scene(), &cfg).unwrap()
}

#[test]
fn save_load_round_trip_is_exact() {
    let data = small_data(6, 1);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let loaded = Dataset::load(dir.path(), 1.0).unwrap();
    assert_eq!(loaded, data);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(small_data(4, 7), small_data(4, 7));
    assert_ne!(small_data(4, 7), small_data(4, 8));
}

#[test]
fn shape_and_bookkeeping() {
    let data = small_data(12, 2);
    let m = &data.manifest;
    assert_eq!(data.trajectories.len(), 12);
    assert_eq!(m.random.iter().filter(|&&r| r).count(), 4);
    assert_eq!(m.split, Split::new(12, 2));
    assert_eq!(m.scene_hash, small_scene().hash());
    for t in &data.trajectories {
        assert_eq!(t.states.len(), 5);
        assert_eq!(t.actions.len(), 4);
        assert_eq!(t.rewards.len(), 4);
        assert_eq!(t.target.len(), 96);
        assert!(t.states.iter().all(|s| s.len() == 96 && s.rigid_poses.len() == 1));
        let bound = m.scene.sim.action_bound;
        assert!(t.actions.iter().flat_map(|a| &a.0).all(|v| v.amax() <= bound));
        for (s, &r) in t.states[1..].iter().zip(&t.rewards) {
            let expected = m.scene.reward(s, &t.target).unwrap();
            // labels come from the unrounded target, the stored one is f32
            assert!(
                (r - expected).abs() <= 1e-6 * expected.abs().max(1.0),
                "{r} vs {expected}"
            );
        }
    }
    let train = data.split_windows(SplitPart::Train, 3);
    assert_eq!(train.len(), 2 * m.split.train.len());
    for w in &train {
        assert_eq!(data.window_actions(w).len(), 3);
        assert_eq!(data.window_truth(w).len(), 3);
    }
    assert!(data.split_windows(SplitPart::Test, 5).is_empty());
}

#[test]
fn tampered_trajectory_fails_replay() {
    let mut data = small_data(3, 3);
    data.verify_replay(1.0).unwrap();
    data.trajectories[1].actions[2].0[0].x += 0.5;
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    assert!(matches!(
        Dataset::load(dir.path(), 1.0),
        Err(DatasetError::Replay { traj: 1, step: 3 })
    ));
    assert!(Dataset::load(dir.path(), 0.0).is_ok());
}

#[test]
fn truncated_blob_and_foreign_manifest_are_rejected() {
    let data = small_data(2, 4);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let blob = dir.path().join("rewards.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(
        Dataset::load(dir.path(), 0.0),
        Err(DatasetError::Blob { name: "rewards", .. })
    ));

    data.save(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("softrep-dataset 1", "other 2")).unwrap();
    assert!(matches!(Dataset::load(dir.path(), 0.0), Err(DatasetError::Manifest(_))));
}

#[test]
fn bad_random_fraction_is_a_config_error() {
    let cfg = GenConfig {
        trajectories: 2,
        random_fraction: 1.5,
        ..GenConfig::default()
    };
    assert!(matches!(
        generate_dataset(&small_scene(), &cfg),
        Err(DatasetError::Config(_))
    ));
}
