use std::sync::OnceLock;

use softrep::dataset::{generate_dataset, Dataset, GenConfig, SplitPart};
use softrep::eval::{
    eval_reward_pred, eval_traj_recon, fit_reward_head, mean_std, reward_samples, robustness_eval, run_mbpo, EvalError,
    EvalReport, Features, MbpoConfig, MbpoReport, RewardFitConfig, Verbatim,
};
use softrep::models::{Architecture, Component, ModelParams};
use softrep::regulator::RegulatorConfig;
use softrep::scene::SceneConfig;
use softrep::Vec3;

fn scene() -> SceneConfig {
    SceneConfig {
        particles: 96,
        episode_len: 4,
        ..SceneConfig::push()
    }
}

fn data() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let cfg = GenConfig {
            trajectories: 24,
            seed: 5,
            opt_iters: 1,
            ..GenConfig::default()
        };
        generate_dataset(&scene(), &cfg).unwrap()
    })
}

fn encoder() -> ModelParams {
    ModelParams::init(
        Architecture::small(96, 8, 3),
        &[Component::Encoder, Component::Decoder],
        3,
    )
    .unwrap()
}

fn mbpo_config() -> MbpoConfig {
    MbpoConfig {
        epochs: 3,
        horizon: 3,
        hidden: vec![16, 16],
        ..MbpoConfig::default()
    }
}

#[test]
fn verbatim_reconstruction_rolls_out_the_recorded_trajectory() {
    let r = eval_traj_recon(&Verbatim, data(), SplitPart::Test, 3, &RegulatorConfig::default()).unwrap();
    assert_eq!(r.values.len(), 2 * data().manifest.split.test.len());
    assert_eq!(r.flagged, 0);
    assert!(r.values.iter().all(|&v| v < 1e-6), "{:?}", r.values);
}

#[test]
fn report_statistics_are_recomputable() {
    let model = encoder();
    let r = eval_traj_recon(&model, data(), SplitPart::Val, 2, &RegulatorConfig::default()).unwrap();
    let (m, s) = mean_std(&r.values);
    assert!((r.mean - m).abs() <= 1e-12 && (r.std - s).abs() <= 1e-12);
    assert!(r.mean > 0.0);
    let again = eval_traj_recon(&model, data(), SplitPart::Val, 2, &RegulatorConfig::default()).unwrap();
    assert_eq!(again.values, r.values);
    assert_eq!(again.config_hash, r.config_hash);
    let other = eval_traj_recon(&model, data(), SplitPart::Val, 3, &RegulatorConfig::default()).unwrap();
    assert_ne!(other.config_hash, r.config_hash);
}

#[test]
fn reward_predictor_oracles() {
    let samples = reward_samples(data(), SplitPart::Test).unwrap();
    let labels: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let (mean, std) = mean_std(&labels);

    let constant = |_: &[Vec3]| mean;
    let r = eval_reward_pred(&constant, data(), SplitPart::Test).unwrap();
    assert!((r.mean - std * std).abs() < 1e-9);

    let reference = data().scene().reference_cloud();
    let perfect = |obs: &[Vec3]| data().scene().object_reward(obs, &reference).unwrap();
    let r = eval_reward_pred(&perfect, data(), SplitPart::Test).unwrap();
    assert_eq!(r.mean, 0.0);
}

#[test]
fn fitted_reward_head_beats_the_label_variance() {
    let mut model = encoder();
    let cfg = RewardFitConfig {
        epochs: 150,
        batch: 16,
        lr: 3e-3,
        seed: 0,
    };
    let train_mse = fit_reward_head(&mut model, data(), &cfg).unwrap();
    let labels: Vec<f64> = reward_samples(data(), SplitPart::Train)
        .unwrap()
        .iter()
        .map(|s| s.1)
        .collect();
    let var = mean_std(&labels).1.powi(2);
    assert!(train_mse < var, "{train_mse} vs {var}");
    assert!(model.has(Component::Reward));
    assert!(eval_reward_pred(&model, data(), SplitPart::Test)
        .unwrap()
        .mean
        .is_finite());
}

#[test]
fn zero_horizon_or_epochs_give_an_empty_curve() {
    let enc = encoder();
    for cfg in [
        MbpoConfig {
            horizon: 0,
            ..mbpo_config()
        },
        MbpoConfig {
            epochs: 0,
            ..mbpo_config()
        },
    ] {
        assert!(run_mbpo(Some(&enc), &scene(), &cfg).unwrap().curve.is_empty());
    }
}

#[test]
fn mbpo_is_deterministic_and_logs_every_epoch() {
    let enc = encoder();
    let a = run_mbpo(Some(&enc), &scene(), &mbpo_config()).unwrap();
    let b = run_mbpo(Some(&enc), &scene(), &mbpo_config()).unwrap();
    assert_eq!(a.curve.len(), 3);
    assert_eq!(a.curve, b.curve);
    assert!(a.curve.iter().all(|r| r.is_finite() && *r < 0.0));

    let raw = MbpoConfig {
        features: Features::Downsample { points: 20 },
        ..mbpo_config()
    };
    assert_eq!(run_mbpo(None, &scene(), &raw).unwrap().curve.len(), 3);
    assert!(matches!(
        run_mbpo(None, &scene(), &mbpo_config()),
        Err(EvalError::Config(_))
    ));
}

#[test]
fn robustness_at_the_full_count_is_a_plain_run() {
    let enc = encoder();
    let plain = run_mbpo(Some(&enc), &scene(), &mbpo_config()).unwrap();
    let runs = robustness_eval(&enc, &scene(), &[96, 48], &mbpo_config()).unwrap();
    assert_eq!(runs[0].curve, plain.curve);
    assert_eq!(runs[1].obs_points, Some(48));
    assert_eq!(runs[1].curve.len(), 3);
    assert!(matches!(
        robustness_eval(&enc, &scene(), &[97], &mbpo_config()),
        Err(EvalError::TooManyPoints {
            count: 97,
            available: 96
        })
    ));
}

#[test]
fn csv_and_json_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let r = EvalReport::new("traj_recon", vec![0.5, 1.5, 1.0], 1, "abc".into(), 0.25);
    let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
    r.save(&csv, &json).unwrap();
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["metric", "sample", "value", "mean", "std"]
    );
    assert_eq!(reader.records().count(), 3);
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(back, r);

    let curves = [MbpoReport {
        seed: 1,
        obs_points: None,
        curve: vec![-1.0, -0.5],
        config_hash: "h".into(),
        wall_time_s: 0.0,
    }];
    let mut buf = Vec::new();
    MbpoReport::write_csv(&curves, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "seed,obs_points,epoch,reward\n1,all,0,-1\n1,all,1,-0.5\n"
    );
}
