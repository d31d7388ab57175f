use std::sync::OnceLock;

use softrep::dataset::{generate_dataset, Dataset, GenConfig};
use softrep::models::{Architecture, Component};
use softrep::regulator::RegulatorConfig;
use softrep::scene::SceneConfig;
use softrep::training::{
    beta_schedule, multi_step_loss, total_loss, train_baseline, train_srl, BaselineKind, LossReport, TrainConfig,
    TrainError,
};
use softrep::Vec3;

fn data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let scene = SceneConfig {
            particles: 64,
            episode_len: 4,
            ..SceneConfig::push()
        };
        let cfg = GenConfig {
            trajectories: 12,
            seed: 11,
            opt_iters: 1,
            ..GenConfig::default()
        };
        generate_dataset(&scene, &cfg).unwrap()
    })
}

fn config() -> TrainConfig {
    TrainConfig {
        k: 3,
        epochs: 3,
        batch: 2,
        lr: 1e-3,
        max_samples: Some(6),
        validate_every: 1,
        arch: Architecture::small(0, 8, 0),
        ..TrainConfig::default()
    }
}

fn strip_timing(mut r: LossReport) -> LossReport {
    r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
    r
}

#[test]
fn logged_steps_satisfy_the_total_loss_identity() {
    let cfg = config();
    let (_, report) = train_srl(data(), &cfg).unwrap();
    assert_eq!(report.kind, "srl");
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.steps.len(), 9);
    assert_eq!(report.validation.len(), 3);
    assert!(report.max_identity_error() < 1e-9);
    for s in &report.steps {
        assert_eq!(s.beta, beta_schedule(s.epoch, cfg.beta0, cfg.lambda));
        assert!(s.multi_step > 0.0 && s.constraint >= 0.0);
    }
}

#[test]
fn ablation_has_zero_constraint_loss() {
    let cfg = TrainConfig {
        regulator: RegulatorConfig {
            penetration_loss: false,
            ..RegulatorConfig::default()
        },
        ..config()
    };
    let (_, report) = train_srl(data(), &cfg).unwrap();
    assert_eq!(report.kind, "srl_no_penetration");
    assert!(report.steps.iter().all(|s| s.constraint == 0.0));
    assert!(report.max_identity_error() < 1e-9);
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 1,
        validate_every: 0,
        ..config()
    };
    let (a, ra) = train_srl(data(), &cfg).unwrap();
    let (b, rb) = train_srl(data(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(strip_timing(ra), strip_timing(rb));
}

#[test]
fn resuming_from_a_checkpoint_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        validate_every: 0,
        ..config()
    };
    let (whole, whole_report) = train_baseline(BaselineKind::Autoencoder, data(), &base).unwrap();
    let first = TrainConfig {
        epochs: 1,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..base.clone()
    };
    train_baseline(BaselineKind::Autoencoder, data(), &first).unwrap();
    let rest = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..base
    };
    let (resumed, report) = train_baseline(BaselineKind::Autoencoder, data(), &rest).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.steps.len(), whole_report.steps.len());
    // optimizer moments restart, so only the shape of the run is shared
    assert_eq!(resumed.names(), whole.names());
    assert_eq!(report.steps[..3], whole_report.steps[..3]);
}

#[test]
fn autoencoder_reconstruction_improves() {
    let cfg = TrainConfig {
        epochs: 15,
        max_samples: None,
        validate_every: 0,
        lr: 3e-3,
        ..config()
    };
    let (_, report) = train_baseline(BaselineKind::Autoencoder, data(), &cfg).unwrap();
    let first = report.epochs.first().unwrap().total;
    let last = report.epochs.last().unwrap().total;
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn transition_baselines_train_a_decoder_afterwards() {
    let cfg = TrainConfig { epochs: 1, ..config() };
    for (kind, head) in [
        (BaselineKind::Forward, Component::Forward),
        (BaselineKind::Inverse, Component::Inverse),
    ] {
        let (params, report) = train_baseline(kind, data(), &cfg).unwrap();
        assert!(params.has(Component::Encoder) && params.has(Component::Decoder) && params.has(head));
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.validation.len(), 1);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { k: 4, ..config() },
        TrainConfig { k: 0, ..config() },
        TrainConfig { batch: 0, ..config() },
        TrainConfig { lr: 0.0, ..config() },
    ] {
        assert!(matches!(train_srl(data(), &cfg), Err(TrainError::Config(_))));
    }
}

#[test]
fn multi_step_weights_start_at_one() {
    let p = |x: f64| vec![Vec3::new(x, 0.0, 0.0)];
    let truth = [p(0.0), p(0.0), p(0.0)];
    let rolled = [p(1.0), p(1.0), p(2.0)];
    let l = multi_step_loss(&truth, &rolled, 0.5).unwrap();
    assert!((l - (2.0 + 0.5 * 2.0 + 0.25 * 8.0)).abs() < 1e-15);
    assert!(matches!(
        multi_step_loss(&truth, &rolled[..2], 0.5),
        Err(TrainError::LengthMismatch { a: 3, b: 2 })
    ));
    assert_eq!(total_loss(1.0, 3.0, 0.25), 1.5);
}
