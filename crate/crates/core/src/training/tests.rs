use super::*;
use crate::encoders::Selection;
use crate::generator::{build_gt_dictionary, default_tree};

fn gaussian(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(rows, cols);
    for v in a.as_mut_slice() {
        *v = scale * rng.standard_normal();
    }
    a
}

fn random_model(variant: Variant, m: usize, p: usize, seed: u64) -> EncoderModel {
    let mut rng = RngStream::new(seed, 5);
    let atoms = Dictionary::normalized(gaussian(&mut rng, m, p, 1.0)).unwrap();
    let pre_bias: Vec<f64> = (0..m).map(|_| 0.1 * rng.standard_normal()).collect();
    if variant.is_mp() {
        let d = Dictionary::new(atoms.atoms().clone(), pre_bias, NormMode::ExactUnit).unwrap();
        return EncoderModel::new(d, None, vec![0.0; p], variant).unwrap();
    }
    let mut a = atoms.atoms().clone();
    a.scale(0.8);
    let d = Dictionary::new(a, pre_bias, NormMode::UnitBall).unwrap();
    let w = gaussian(&mut rng, m, p, 0.5);
    let b: Vec<f64> = (0..p).map(|_| 0.05 * rng.standard_normal()).collect();
    EncoderModel::new(d, Some(w), b, variant).unwrap()
}

/// Central differences over every parameter. Coordinates whose two one-sided
/// slopes disagree straddle a discrete switch and are skipped; at most a
/// handful may do so.
fn check_gradient(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) {
    let (_, grads) = backward(model, batch, objective).unwrap();
    let analytic = grads.flatten();
    let theta = flatten_params(model);
    let eval = |t: &[f64]| batch_loss(&unflatten_params(model, t).unwrap(), batch, objective).unwrap();
    let f0 = eval(&theta);
    let h = 1e-6;
    let mut skipped = 0;
    let mut checked = 0;
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let (fp, fm) = (eval(&tp), eval(&tm));
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-3 * (1.0 + right.abs()) {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let tol = 1e-4 * numeric.abs().max(analytic[i].abs()) + 1e-6;
        assert!(
            (numeric - analytic[i]).abs() <= tol,
            "parameter {i}: analytic {} numeric {numeric}",
            analytic[i]
        );
        checked += 1;
    }
    assert!(skipped * 50 <= theta.len(), "{skipped} of {} coordinates straddled a switch", theta.len());
    assert!(checked > 0);
}

fn batch(seed: u64, n: usize, m: usize) -> DenseMatrix {
    gaussian(&mut RngStream::new(seed, 6), n, m, 1.0)
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let model = random_model(Variant::Relu, 6, 9, 1);
    check_gradient(&model, &batch(2, 7, 6), &Objective::with_l1(0.05));
}

#[test]
fn topk_gradient_matches_finite_differences() {
    let model = random_model(Variant::TopK { k: 3 }, 6, 9, 3);
    check_gradient(&model, &batch(4, 7, 6), &Objective::reconstruction_only());
}

#[test]
fn batch_topk_gradient_matches_finite_differences() {
    let model = random_model(Variant::BatchTopK { k: 2.5 }, 6, 9, 5);
    check_gradient(&model, &batch(6, 8, 6), &Objective::reconstruction_only());
    let warm = Objective { batch_topk_k: Some(4.0), ..Objective::reconstruction_only() };
    check_gradient(&model, &batch(6, 8, 6), &warm);
}

#[test]
fn matryoshka_gradient_matches_finite_differences() {
    let model = random_model(Variant::Matryoshka { prefixes: vec![2, 5, 9] }, 6, 9, 7);
    check_gradient(&model, &batch(8, 7, 6), &Objective::with_l1(0.02));
}

#[test]
fn mp_gradient_matches_finite_differences() {
    for selection in [Selection::Signed, Selection::Absolute] {
        let stop = StopRule::FixedSteps { steps: 4 };
        let model = random_model(Variant::Mp { stop, selection }, 6, 9, 9);
        check_gradient(&model, &batch(10, 7, 6), &Objective::reconstruction_only());
        let inter = Objective { mp_intermediate: true, ..Objective::reconstruction_only() };
        check_gradient(&model, &batch(10, 7, 6), &inter);
    }
}

#[test]
fn mp_gradient_with_residual_stop() {
    let stop = StopRule::Residual { threshold: 0.3, max_steps: 6 };
    let model = random_model(Variant::Mp { stop, selection: Selection::Signed }, 5, 8, 11);
    check_gradient(&model, &batch(12, 6, 5), &Objective::reconstruction_only());
}

#[test]
fn exact_reconstruction_has_zero_gradient() {
    let m = 4;
    let d = Dictionary::new(DenseMatrix::identity(m), vec![0.0; m], NormMode::ExactUnit).unwrap();
    let model = EncoderModel::mp(d, StopRule::FixedSteps { steps: m }).unwrap();
    let x = DenseMatrix::from_rows(&[vec![0.5, 1.0, 0.25, 2.0]]).unwrap();
    let (stats, grads) = backward(&model, &x, &Objective::reconstruction_only()).unwrap();
    assert!(stats.loss < 1e-24);
    assert!(grads.norm() < 1e-12);
}

#[test]
fn relu_closed_form_agrees_with_backward() {
    let model = random_model(Variant::Relu, 5, 7, 13);
    let x = batch(14, 1, 5);
    let (_, grads) = backward(&model, &x, &Objective::reconstruction_only()).unwrap();
    let closed = relu_atom_gradient_closed_form(&model, x.row(0)).unwrap();
    assert!(closed.max_abs_diff(&grads.atoms) < 1e-12);
}

#[test]
fn clipping_caps_gradient_norm() {
    let model = random_model(Variant::Relu, 5, 7, 15);
    let x = gaussian(&mut RngStream::new(16, 0), 10, 5, 50.0);
    let (_, mut grads) = backward(&model, &x, &Objective::reconstruction_only()).unwrap();
    let before = grads.norm();
    assert!(before > 1.0);
    assert_eq!(grads.clip(1.0), before);
    assert!((grads.norm() - 1.0).abs() < 1e-12);
    let (_, mut small) = backward(&model, &x, &Objective::reconstruction_only()).unwrap();
    let big = small.norm() * 2.0;
    let copy = small.clone();
    small.clip(big);
    assert_eq!(small, copy);
}

#[test]
fn flatten_roundtrip() {
    for v in [Variant::Relu, Variant::Mp { stop: StopRule::FixedSteps { steps: 2 }, selection: Selection::Signed }] {
        let model = random_model(v, 4, 6, 17);
        let back = unflatten_params(&model, &flatten_params(&model)).unwrap();
        assert_eq!(back, model);
    }
}

#[test]
fn loss_helpers() {
    assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 0.0]).unwrap(), 4.0);
    assert!(loss_mse(&[1.0], &[1.0, 2.0]).is_err());
    let model = random_model(Variant::Matryoshka { prefixes: vec![2, 6] }, 4, 6, 18);
    let x = batch(19, 1, 4);
    let z = crate::encoders::encode_relu(&model, x.row(0)).unwrap();
    let expected = loss_mse(x.row(0), &decode_prefix(&model, &z, 2).unwrap()).unwrap()
        + loss_mse(x.row(0), &decode(&model, &z)).unwrap();
    assert!((loss_matryoshka(&model, x.row(0), &z).unwrap() - expected).abs() < 1e-12);
    let relu = random_model(Variant::Relu, 4, 6, 18);
    assert!(loss_matryoshka(&relu, x.row(0), &z).is_err());
}

#[test]
fn non_finite_loss_is_reported() {
    let mut model = random_model(Variant::Relu, 3, 4, 20);
    let config = TrainConfig::synthetic(Variant::Relu, 4, 0);
    let mut state = AdamState::new(flatten_params(&model).len());
    let mut x = batch(21, 3, 3);
    x.as_mut_slice()[0] = f64::NAN;
    let err = train_step(&mut model, &mut state, &x, &config, &StepContext::at(&config, 7, 1e-3)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 7, .. }));
}

fn small_config(variant: Variant, latents: usize) -> TrainConfig {
    TrainConfig { steps: 40, batch_size: 32, l1_warmup_steps: 5, batch_topk_warm_steps: 5, ..TrainConfig::synthetic(variant, latents, 99) }
}

fn synthetic_source(seed: u64) -> SyntheticSource {
    let spec = default_tree();
    let gt = build_gt_dictionary(&spec, &mut RngStream::new(seed, 0)).unwrap();
    SyntheticSource::new(&spec, gt.dictionary).unwrap()
}

#[test]
fn training_keeps_norm_constraints_and_reduces_loss() {
    let variants = [
        Variant::Relu,
        Variant::TopK { k: 2 },
        Variant::BatchTopK { k: 1.36 },
        Variant::Matryoshka { prefixes: vec![5, 20] },
        Variant::Mp { stop: default_mp_stop(20), selection: Selection::Signed },
    ];
    for v in variants {
        let mut source = synthetic_source(1);
        let mut trainer = Trainer::new(small_config(v.clone(), 20), 20).unwrap();
        trainer.run(&mut source, None).unwrap();
        trainer.model.dictionary.check_norms().unwrap();
        let first = trainer.history[..5].iter().map(|r| r.mse).sum::<f64>();
        let last = trainer.history[35..].iter().map(|r| r.mse).sum::<f64>();
        assert!(last < first, "{}: mse {first} -> {last}", v.name());
    }
}

#[test]
fn resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for v in [
        Variant::Relu,
        Variant::BatchTopK { k: 1.36 },
        Variant::Mp { stop: default_mp_stop(20), selection: Selection::Signed },
    ] {
        let config = small_config(v, 20);
        let mut straight = Trainer::new(config.clone(), 20).unwrap();
        straight.run(&mut synthetic_source(2), None).unwrap();

        let mut source = synthetic_source(2);
        let mut first = Trainer::new(config, 20).unwrap();
        first.run(&mut source, Some(17)).unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &first.checkpoint()).unwrap();
        let mut resumed = Trainer::from_checkpoint(load_checkpoint(&path).unwrap());
        resumed.run(&mut source, None).unwrap();

        assert_eq!(resumed.model, straight.model);
        assert_eq!(resumed.history, straight.history);
        assert_eq!(resumed.checkpoint().to_bytes().unwrap(), straight.checkpoint().to_bytes().unwrap());
    }
}

#[test]
fn checkpoint_bytes_roundtrip_and_corruption() {
    let mut trainer = Trainer::new(small_config(Variant::Relu, 20), 20).unwrap();
    trainer.run(&mut synthetic_source(3), Some(4)).unwrap();
    let bytes = trainer.checkpoint().to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, trainer.checkpoint());
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let mut flipped = bytes.clone();
    let mid = bytes.len() - 40;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum { .. })));

    let mut versioned = bytes[..bytes.len() - 4].to_vec();
    versioned[9..13].copy_from_slice(&2u32.to_le_bytes());
    let crc = crc32fast::hash(&versioned);
    versioned.extend_from_slice(&crc.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::Version { found: 2, expected: 1 })));

    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Checksum { .. })));
}

#[test]
fn dead_latents_are_revived() {
    let mut model = random_model(Variant::TopK { k: 1 }, 4, 6, 22);
    model.encoder_bias = vec![-100.0; 6];
    model.encoder_bias[0] = 100.0;
    let config = TrainConfig { revive_eps: 0.5, ..TrainConfig::synthetic(Variant::TopK { k: 1 }, 6, 0) };
    let mut state = AdamState::new(flatten_params(&model).len());
    let x = batch(23, 5, 4);
    let before = model.encoder_bias.clone();
    train_step(&mut model, &mut state, &x, &config, &StepContext::at(&config, 0, 0.0)).unwrap();
    for j in 1..6 {
        // Adam moves a zero-gradient parameter by nothing, so only the revival shows
        assert!((model.encoder_bias[j] - before[j] - 0.5).abs() < 1e-12);
    }
}

#[test]
fn controller_only_runs_for_penalized_variants() {
    let mut t = Trainer::new(small_config(Variant::TopK { k: 2 }, 20), 20).unwrap();
    t.run(&mut synthetic_source(4), Some(12)).unwrap();
    assert!(t.history.iter().all(|r| r.l1_weight == t.config.l1_weight));
    let mut r = Trainer::new(small_config(Variant::Relu, 20), 20).unwrap();
    r.run(&mut synthetic_source(4), Some(12)).unwrap();
    assert!(r.history[..6].iter().all(|h| h.l1_weight == r.config.l1_weight));
    assert_ne!(r.history[11].l1_weight, r.config.l1_weight);
}

#[test]
fn config_validation() {
    let good = TrainConfig::synthetic(Variant::Relu, 20, 0);
    good.validate().unwrap();
    assert!(TrainConfig { learning_rate: 0.0, ..good.clone() }.validate().is_err());
    assert!(TrainConfig { adam_betas: (1.0, 0.9), ..good.clone() }.validate().is_err());
    assert!(TrainConfig { variant: Variant::TopK { k: 21 }, ..good.clone() }.validate().is_err());
    assert!(TrainConfig { variant: Variant::Matryoshka { prefixes: vec![5, 3] }, ..good.clone() }.validate().is_err());
    let round: TrainConfig = serde_json::from_str(&serde_json::to_string(&good).unwrap()).unwrap();
    assert_eq!(round, good);
}
