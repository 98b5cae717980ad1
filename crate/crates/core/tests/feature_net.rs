use mstgcn::features::*;
use mstgcn::params::ParamStore;
use mstgcn::tensor::grad_check;
use mstgcn::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_signals(m: usize, len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![m, len], (0..m * len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn build(cfg: FeatureNetConfig, seed: u64) -> (FeatureNet, ParamStore) {
    let mut store = ParamStore::new();
    let net = FeatureNet::new(cfg, &mut store, "feat", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store)
}

#[test]
fn standard_network_stage_shapes() {
    let (net, mut store) = build(FeatureNetConfig::standard(), 1);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.constant(random_signals(2, 3000, 2));
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = net.forward_traced(&mut tape, &mut store, &bind, x, Mode::Eval, &mut rng, Some(&mut trace)).unwrap();
    assert_eq!(tape.shape(out), &[2, 256]);

    let expect: &[(&str, &[usize])] = &[
        ("small.conv0", &[492, 32]),
        ("small.pool1", &[30, 32]),
        ("small.conv1", &[30, 64]),
        ("small.conv2", &[30, 64]),
        ("small.conv3", &[30, 64]),
        ("small.pool2", &[3, 64]),
        ("small.flat", &[192]),
        ("large.conv0", &[53, 64]),
        ("large.pool1", &[6, 64]),
        ("large.conv1", &[6, 64]),
        ("large.conv2", &[6, 64]),
        ("large.conv3", &[6, 64]),
        ("large.pool2", &[1, 64]),
        ("large.flat", &[64]),
        ("concat", &[256]),
    ];
    let got: Vec<(&str, &[usize])> = trace.iter().map(|s| (s.stage.as_str(), s.shape.as_slice())).collect();
    assert_eq!(got, expect);
    assert_eq!(FeatureNetConfig::standard().stage_shapes().unwrap(), trace);
}

#[test]
fn zero_input_gives_zero_features_in_eval_mode() {
    let (net, mut store) = build(FeatureNetConfig::standard(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = extract_features(&net, &mut store, &Tensor::zeros(&[3, 3000]), Mode::Eval, &mut rng).unwrap();
    assert_eq!(f.shape(), &[3, 256]);
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_length_names_the_expected_length() {
    let (net, mut store) = build(FeatureNetConfig::standard(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = extract_features(&net, &mut store, &Tensor::zeros(&[3, 2999]), Mode::Eval, &mut rng).unwrap_err();
    assert!(matches!(e, FeatureError::SignalLength { expected: 3000, got: 2999 }));
    assert!(e.to_string().contains("3000"));
}

#[test]
fn channels_are_processed_independently() {
    let (net, mut store) = build(FeatureNetConfig::standard(), 5);
    let x = random_signals(3, 3000, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = extract_features(&net, &mut store, &x, Mode::Eval, &mut rng).unwrap();
    let perm = [2, 0, 1];
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let pf = extract_features(&net, &mut store, &px, Mode::Eval, &mut rng).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(pf.row(r), f.row(i));
    }
}

#[test]
fn eval_mode_is_repeatable() {
    let (net, mut store) = build(FeatureNetConfig::standard(), 7);
    let x = random_signals(2, 3000, 8);
    let a = extract_features(&net, &mut store, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = extract_features(&net, &mut store, &x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_mode_updates_running_statistics() {
    let (net, mut store) = build(FeatureNetConfig::shortened(), 7);
    let before = store.clone();
    extract_features(&net, &mut store, &random_signals(4, 300, 1), Mode::Train, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let id = store.id("feat.small.conv0.bn_mean").unwrap();
    assert_ne!(store.value(id), before.value(id));
}

fn readout(tape: &mut Tape, f: mstgcn::Var, seed: u64) -> std::result::Result<mstgcn::Var, FeatureError> {
    let s = tape.shape(f).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(s.clone(), (0..s.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let wv = tape.constant(w);
    let m = tape.mul(f, wv)?;
    Ok(tape.sum_all(m))
}

#[test]
fn shortened_network_passes_gradient_checks() {
    let (net, store) = build(FeatureNetConfig::shortened(), 21);
    let x0 = random_signals(3, 300, 22);

    let mut s = store.clone();
    let err = grad_check(
        |tape, x| {
            let bind = s.bind(tape);
            let f = net.forward(tape, &mut s, &bind, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
            readout(tape, f, 5)
        },
        &x0,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "input gradient: {err}");

    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let mut s = store.clone();
        let name = store.name(id).to_string();
        let err = grad_check(
            |tape, p| {
                let mut bind = s.bind(tape);
                bind.set(id, p);
                let x = tape.constant(x0.clone());
                let f = net.forward(tape, &mut s, &bind, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))?;
                readout(tape, f, 5)
            },
            store.value(id),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}
