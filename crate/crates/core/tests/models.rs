use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softrep::autodiff::{check_gradient, AdError, Tape, Tensor, Var};
use softrep::models::{Adam, AdamConfig, Architecture, Component, ModelError, ModelParams, Net};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_shape_fn((n, 3), |_| rng.random())
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_shape_fn(t.dim(), |(i, j)| t[[perm[i], j]])
}

#[test]
fn encoder_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ModelParams::init(Architecture::new(256, 64, 3), &[Component::Encoder], 4).unwrap();
    let x = cloud(&mut rng, 256);
    let base = p.encode(&x).unwrap();
    let mut perm: Vec<usize> = (0..256).collect();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        perm.shuffle(&mut rng);
        let h = p.encode(&permute_rows(&x, &perm)).unwrap();
        for (a, b) in h.iter().zip(&base) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn encoder_accepts_any_point_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ModelParams::init(Architecture::small(64, 8, 3), &[Component::Encoder], 1).unwrap();
    for n in [1, 7, 2000] {
        let h = p.encode(&cloud(&mut rng, n)).unwrap();
        assert_eq!(h.len(), 8);
        assert!(h.iter().all(|x| x.is_finite()));
    }
    let empty = Tensor::zeros((0, 3));
    assert!(matches!(p.encode(&empty), Err(ModelError::EmptyCloud)));
}

#[test]
fn dimension_mismatches_are_errors() {
    let p = ModelParams::init(Architecture::small(16, 8, 3), &Component::ALL, 1).unwrap();
    assert!(matches!(p.decode(&[0.0; 7]), Err(ModelError::Dimension { .. })));
    assert!(matches!(p.reward(&[0.0; 9]), Err(ModelError::Dimension { .. })));
    assert!(matches!(
        p.forward_model(&[0.0; 8], &[0.0; 2]),
        Err(ModelError::Dimension { .. })
    ));
    assert!(matches!(
        p.inverse_model(&[0.0; 8], &[0.0; 4]),
        Err(ModelError::Dimension { .. })
    ));
    assert!(matches!(p.policy_act(&[0.0; 3]), Err(ModelError::Dimension { .. })));
    let enc = ModelParams::init(Architecture::small(16, 8, 3), &[Component::Encoder], 1).unwrap();
    assert!(matches!(
        enc.decode(&[0.0; 8]),
        Err(ModelError::Missing(Component::Decoder))
    ));
}

#[test]
fn output_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Architecture::small(32, 8, 3);
    let p = ModelParams::init(arch.clone(), &Component::ALL, 9).unwrap();
    let h: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = [0.3, -0.2, 0.1];
    let d1 = p.decode(&h).unwrap();
    let d2 = p.decode(&h).unwrap();
    assert_eq!(d1.dim(), (32, 3));
    assert!(d1.iter().zip(d2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(p.reward(&h).unwrap().is_finite());
    assert_eq!(p.forward_model(&h, &a).unwrap().len(), 8);
    assert_eq!(p.forward_model(&h, &a).unwrap(), p.forward_model(&h, &a).unwrap());
    assert_eq!(p.inverse_model(&h, &h).unwrap().len(), 3);
    let f: Vec<f64> = (0..arch.policy_input).map(|_| rng.random_range(-50.0..50.0)).collect();
    let act = p.policy_act(&f).unwrap();
    assert_eq!(act.len(), 3);
    assert!(act.iter().all(|x| x.abs() <= arch.action_bound));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = Architecture::small(24, 8, 3);
    let mut p = ModelParams::init(arch.clone(), &Component::ALL, 5).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let grads: Vec<Option<Tensor>> = p
        .tensors()
        .iter()
        .map(|t| Some(random_tensor(&mut rng, t.nrows(), t.ncols(), 1.0)))
        .collect();
    adam.step(&mut p, &grads).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert_eq!(p, q);

    let x = cloud(&mut rng, 50);
    let h1 = p.encode(&x).unwrap();
    let h2 = q.encode(&x).unwrap();
    assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
    let c1 = p.decode(&h1).unwrap();
    let c2 = q.decode(&h2).unwrap();
    assert!(c1.iter().zip(c2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(p.reward(&h1).unwrap().to_bits(), q.reward(&h2).unwrap().to_bits());
}

fn sum_of_squares(t: &mut Tape, v: Var) -> Result<Var, AdError> {
    let s = t.square(v)?;
    t.sum(s)
}

fn to_ad(e: ModelError) -> AdError {
    match e {
        ModelError::Tape(e) => e,
        other => AdError::Invalid(other.to_string()),
    }
}

/// Checks the gradient of `program(net, input)` with respect to the input
/// and to every parameter tensor.
fn gradcheck_all<F>(p: &ModelParams, inputs: Vec<Tensor>, program: F)
where
    F: Fn(&Net, &mut Tape, &[Var]) -> Result<Var, ModelError>,
{
    let k = inputs.len();
    let mut all = inputs;
    all.extend(p.tensors().iter().cloned());
    let run = |t: &mut Tape, v: &[Var]| -> Result<Var, AdError> {
        let net = Net::from_vars(p, v[k..].to_vec()).map_err(to_ad)?;
        let out = program(&net, t, &v[..k]).map_err(to_ad)?;
        sum_of_squares(t, out)
    };
    for leaf in 0..all.len() {
        let report = check_gradient(run, &all, leaf, 1e-6).unwrap();
        let name = if leaf < k {
            "input".to_string()
        } else {
            p.names()[leaf - k].clone()
        };
        assert!(report.max_rel_error < 1e-5, "{name}: {report:?}");
    }
}

#[test]
fn encoder_decoder_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = Architecture {
        point_mlp: vec![5, 6],
        global_mlp: vec![7],
        decoder_hidden: vec![6, 5],
        ..Architecture::small(4, 3, 3)
    };
    let p = ModelParams::init(arch, &[Component::Encoder, Component::Decoder], 11).unwrap();
    gradcheck_all(&p, vec![cloud(&mut rng, 6)], |net, t, v| {
        let h = net.encode(t, v[0])?;
        net.decode(t, h)
    });
}

#[test]
fn head_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = Architecture {
        head_hidden: vec![6, 5],
        policy_input: 5,
        ..Architecture::small(4, 4, 2)
    };
    let p = ModelParams::init(
        arch,
        &[
            Component::Reward,
            Component::Forward,
            Component::Inverse,
            Component::Policy,
        ],
        12,
    )
    .unwrap();
    let h0 = random_tensor(&mut rng, 2, 4, 1.0);
    let h1 = random_tensor(&mut rng, 2, 4, 1.0);
    let a = random_tensor(&mut rng, 2, 2, 1.0);
    let f = random_tensor(&mut rng, 1, 5, 1.0);
    gradcheck_all(&p, vec![h0.clone()], |net, t, v| net.reward(t, v[0]));
    gradcheck_all(&p, vec![h0.clone(), a], |net, t, v| net.forward_model(t, v[0], v[1]));
    gradcheck_all(&p, vec![h0, h1], |net, t, v| net.inverse_model(t, v[0], v[1]));
    gradcheck_all(&p, vec![f], |net, t, v| net.policy(t, v[0]));
}

/// Runs full-batch Adam on `loss` and returns the final loss.
fn overfit<F>(p: &mut ModelParams, train: Component, steps: usize, lr: f64, loss: F) -> f64
where
    F: Fn(&Net, &mut Tape) -> Result<Var, ModelError>,
{
    let mut adam = Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, &[train]);
        let l = loss(&net, &mut tape).unwrap();
        last = tape.scalar_value(l);
        if last < 1e-4 {
            break;
        }
        let grads = net.grads(&tape.backward(l).unwrap());
        adam.step(p, &grads).unwrap();
    }
    last
}

#[test]
fn reward_head_overfits_ten_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ModelParams::init(Architecture::new(16, 32, 3), &[Component::Reward], 1).unwrap();
    let h = random_tensor(&mut rng, 10, 32, 1.0);
    let r = random_tensor(&mut rng, 10, 1, 1.0);
    let mse = overfit(&mut p, Component::Reward, 2000, 1e-3, |net, t| {
        let x = t.constant(h.clone());
        let y = t.constant(r.clone());
        let pred = net.reward(t, x)?;
        Ok(t.mse(pred, y)?)
    });
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn forward_model_overfits_ten_transitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = ModelParams::init(Architecture::new(16, 16, 3), &[Component::Forward], 2).unwrap();
    let h = random_tensor(&mut rng, 10, 16, 1.0);
    let a = random_tensor(&mut rng, 10, 3, 1.0);
    let next = random_tensor(&mut rng, 10, 16, 1.0);
    let mse = overfit(&mut p, Component::Forward, 2000, 1e-3, |net, t| {
        let (x, u, y) = (t.constant(h.clone()), t.constant(a.clone()), t.constant(next.clone()));
        let pred = net.forward_model(t, x, u)?;
        Ok(t.mse(pred, y)?)
    });
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn inverse_model_overfits_ten_transitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = ModelParams::init(Architecture::new(16, 16, 3), &[Component::Inverse], 3).unwrap();
    let h0 = random_tensor(&mut rng, 10, 16, 1.0);
    let h1 = random_tensor(&mut rng, 10, 16, 1.0);
    let a = random_tensor(&mut rng, 10, 3, 1.0);
    let mse = overfit(&mut p, Component::Inverse, 2000, 1e-3, |net, t| {
        let (x, y, u) = (t.constant(h0.clone()), t.constant(h1.clone()), t.constant(a.clone()));
        let pred = net.inverse_model(t, x, y)?;
        Ok(t.mse(pred, u)?)
    });
    assert!(mse < 1e-3, "{mse}");
}

#[test]
fn frozen_components_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = ModelParams::init(
        Architecture::small(8, 4, 3),
        &[Component::Encoder, Component::Decoder],
        4,
    )
    .unwrap();
    let mut tape = Tape::new();
    let net = p.bind(&mut tape, &[Component::Decoder]);
    let x = tape.constant(cloud(&mut rng, 8));
    let h = net.encode(&mut tape, x).unwrap();
    let y = net.decode(&mut tape, h).unwrap();
    let l = sum_of_squares(&mut tape, y).unwrap();
    let grads = net.grads(&tape.backward(l).unwrap());
    for (i, g) in grads.iter().enumerate() {
        assert_eq!(g.is_some(), p.component_of(i) == Component::Decoder, "{}", p.names()[i]);
    }
}
