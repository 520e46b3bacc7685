use tmpa::model::{is_transfer_param, Forward, Params};
use tmpa::pipeline::{total_loss_gradcheck, training_losses};
use tmpa::rng::derive_rng;
use tmpa::synthdata::{generate, pk_sample, Batch, SynthSpec};
use tmpa::tensor::{BnMode, Tape};
use tmpa::trainer::{prepare_inputs, resume, train, train_step, Checkpoint, TrainConfig, TrainState};

fn small_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data = SynthSpec {
        num_ids: 6,
        num_test_ids: 2,
        imgs_per_id_per_modality: 3,
        ..SynthSpec::default()
    };
    cfg.widths = [4, 6, 8];
    cfg.p = 3;
    cfg.k = 2;
    cfg.epochs = 2;
    cfg.steps_per_epoch = 2;
    cfg.lr0 = 0.01;
    cfg
}

fn batch(cfg: &TrainConfig, seed: u64) -> Batch {
    let ds = generate(&cfg.data);
    pk_sample(&ds, cfg.p, cfg.k, &mut derive_rng(seed, &[1])).unwrap()
}

fn bitwise_eq(a: &Params, b: &Params) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && a.stats == b.stats
}

#[test]
fn end_to_end_total_loss_gradient() {
    for mft in [true, false] {
        let report = total_loss_gradcheck(1, mft, 1e-5, 1e-4);
        assert!(report.passed, "mft={mft}: max rel {}", report.max_rel_error());
    }
}

#[test]
fn one_step_is_deterministic() {
    let cfg = small_cfg();
    let b = batch(&cfg, 3);
    let run = || {
        let mut s = TrainState::init(&cfg);
        train_step(&mut s, &b, &cfg, 0.01, &mut derive_rng(9, &[]), (0, 0)).unwrap();
        s
    };
    assert!(bitwise_eq(&run().params, &run().params));
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = small_cfg();
    let b = batch(&cfg, 4);
    let mut s = TrainState::init(&cfg);
    let before = s.params.tensors.clone();
    train_step(&mut s, &b, &cfg, 0.0, &mut derive_rng(1, &[]), (0, 0)).unwrap();
    assert_eq!(before, s.params.tensors);
}

/// Loss of `state` on a fixed batch with fixed augmentation. Train-mode
/// batch norm ignores running statistics, so the state's copy is discarded.
fn frozen_loss(state: &TrainState, b: &Batch, cfg: &TrainConfig, aug_seed: u64) -> f64 {
    let (x_v, x_sh) = prepare_inputs(b, cfg, &mut derive_rng(aug_seed, &[])).unwrap();
    let mut tape = Tape::new();
    let mut stats = state.params.stats.clone();
    let mut fwd = Forward::from_parts(&mut tape, &state.params.tensors, &mut stats, BnMode::Train);
    let xs = fwd.tape.constant(x_sh);
    let xv = fwd.tape.constant(x_v);
    let xi = fwd.tape.constant(b.x_i.clone());
    let t = training_losses(&mut fwd, xs, xv, xi, &b.labels, cfg.enable_mft, &cfg.weights);
    tape.value(t.l_total).item()
}

#[test]
fn small_step_descends_in_most_trials() {
    let mut cfg = small_cfg();
    cfg.momentum = 0.0;
    let trials = 20;
    let mut down = 0;
    for seed in 0..trials {
        cfg.seed = seed;
        let b = batch(&cfg, 100 + seed);
        let mut s = TrainState::init(&cfg);
        let before = frozen_loss(&s, &b, &cfg, seed);
        train_step(&mut s, &b, &cfg, 1e-3, &mut derive_rng(seed, &[]), (0, 0)).unwrap();
        if frozen_loss(&s, &b, &cfg, seed) < before {
            down += 1;
        }
    }
    assert!(down * 100 >= 95 * trials as usize, "{down}/{trials}");
}

#[test]
fn baseline_leaves_transfer_parameters_without_gradient() {
    let mut cfg = small_cfg();
    cfg.enable_mft = false;
    let b = batch(&cfg, 5);
    let (x_v, x_sh) = prepare_inputs(&b, &cfg, &mut derive_rng(0, &[])).unwrap();
    let mut params = Params::init(&cfg.model(), 0);
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, BnMode::Train);
    let xs = fwd.tape.constant(x_sh);
    let xv = fwd.tape.constant(x_v);
    let xi = fwd.tape.constant(b.x_i.clone());
    let t = training_losses(&mut fwd, xs, xv, xi, &b.labels, false, &cfg.weights);
    let bound = fwd.into_bound();
    tape.backward(t.l_total);
    assert!(!bound.is_empty());
    for (name, v) in &bound {
        assert!(!is_transfer_param(name), "{name} was used by the baseline");
        assert!(tape.grad(*v).is_some(), "{name} got no gradient");
    }
    // And a full step moves none of them.
    let mut s = TrainState::init(&cfg);
    let before = s.params.tensors.clone();
    train_step(&mut s, &b, &cfg, 0.1, &mut derive_rng(0, &[]), (0, 0)).unwrap();
    for (name, t) in &s.params.tensors {
        if is_transfer_param(name) {
            assert_eq!(t, &before[name], "{name}");
        }
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let mut cfg = small_cfg();
    cfg.epochs = 0;
    let ds = generate(&cfg.data);
    let ck = train(&ds, &cfg, None).unwrap();
    assert_eq!(ck.epoch, 0);
    assert!(bitwise_eq(&ck.params, &Params::init(&cfg.model(), cfg.seed)));
    assert!(ck.momentum.is_empty());
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let cfg = small_cfg();
    let ds = generate(&cfg.data);
    let dir = tempfile::tempdir().unwrap();
    let ck = train(&ds, &cfg, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,l_id,l_wrt,l_mss,l_msi,l_mft,l_total");
    assert_eq!(lines.len(), 1 + cfg.epochs * cfg.steps_per_epoch);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 8));
    for e in 1..=cfg.epochs {
        assert!(dir.path().join(format!("checkpoint_epoch{e:03}.bin")).exists());
    }
    let last = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(last, ck);
    assert_eq!(last.train_config().unwrap(), cfg);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let mut cfg = small_cfg();
    cfg.epochs = 3;
    let ds = generate(&cfg.data);
    let full = train(&ds, &cfg, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.epochs = 1;
    train(&ds, &first, Some(dir.path())).unwrap();
    let saved = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    let resumed = resume(&ds, &cfg, Some(saved), Some(dir.path())).unwrap();
    assert!(bitwise_eq(&full.params, &resumed.params));
    let mom_eq = full.momentum.len() == resumed.momentum.len()
        && full
            .momentum
            .iter()
            .zip(&resumed.momentum)
            .all(|((a, x), (b, y))| a == b && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(mom_eq);
    let log = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + cfg.epochs * cfg.steps_per_epoch);
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut cfg = small_cfg();
    let b = batch(&cfg, 6);
    let mut s = TrainState::init(&cfg);
    let name = "cls.fc.w".to_string();
    s.params.tensors.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let before = s.clone();
    cfg.seed = 0;
    let err = train_step(&mut s, &b, &cfg, 0.1, &mut derive_rng(0, &[]), (3, 4)).unwrap_err();
    assert!(matches!(err, tmpa::Error::NonFinite { epoch: 3, step: 4, .. }), "{err}");
    assert_eq!(format!("{:?}", before.params.tensors), format!("{:?}", s.params.tensors));
}
