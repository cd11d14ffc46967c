//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::io::Write;
use std::time::Instant;

use mpsae::analysis::{
    absorption_score, effective_rank, modality_score, support_recovery, sweep_inference_k, CodeMatrix, Modality,
};
use mpsae::cli::embfile::encode_embeddings;
use mpsae::cli::{
    cmd_eval, cmd_gen, cmd_sweep, cmd_train, ground_truth, read_embeddings, DataConfig,
    RunConfig, SweepMode, STREAM_ABSORPTION, STREAM_HELD_OUT,
};
use mpsae::dictionary::{babel, flat_mse, hierarchical_mse, match_to_ground_truth, Dictionary, NormMode};
use mpsae::encoders::{encode_mp, EncoderModel, Selection, StopRule, Variant};
use mpsae::generator::{sample_batch, Sampler};
use mpsae::numerics::{DenseMatrix, RngStream};
use mpsae::training::{
    backward, batch_loss, flatten_params, unflatten_params, Objective, SyntheticSource, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gaussian(rng: &mut RngStream, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.standard_normal()).collect()).unwrap()
}

fn unit_dictionary(rng: &mut RngStream, m: usize, p: usize, pre_bias: Vec<f64>) -> Dictionary {
    let atoms = Dictionary::normalized(gaussian(rng, m, p)).unwrap();
    Dictionary::new(atoms.atoms().clone(), pre_bias, NormMode::ExactUnit).unwrap()
}

// ---------------------------------------------------------------- 1

/// Reference pursuit written out loop by loop: returns the selected index and
/// coefficient of every step.
fn reference_pursuit(d: &DenseMatrix, b_pre: &[f64], x: &[f64], steps: usize) -> Vec<(usize, f64)> {
    let (m, p) = (d.rows(), d.cols());
    let mut r: Vec<f64> = (0..m).map(|i| x[i] - b_pre[i]).collect();
    let mut x_hat: Vec<f64> = b_pre.to_vec();
    let mut z = vec![0.0; p];
    let mut out = Vec::new();
    for _t in 0..steps {
        let mut dtr = vec![0.0; p];
        for (j, s) in dtr.iter_mut().enumerate() {
            for i in 0..m {
                *s += d[(i, j)] * r[i];
            }
        }
        let mut j_t = 0;
        for j in 1..p {
            if dtr[j] > dtr[j_t] {
                j_t = j;
            }
        }
        let z_t = dtr[j_t];
        for i in 0..m {
            x_hat[i] += z_t * d[(i, j_t)];
            r[i] -= z_t * d[(i, j_t)];
        }
        z[j_t] += z_t;
        out.push((j_t, z_t));
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 1);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let m = 3 + rng.below(10);
        let p = m + rng.below(3 * m);
        let b: Vec<f64> = (0..m).map(|_| 0.3 * rng.standard_normal()).collect();
        let d = unit_dictionary(&mut rng, m, p, b.clone());
        let x: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        let steps = 1 + rng.below(2 * m);
        let oracle = reference_pursuit(d.atoms(), &b, &x, steps);
        let model = EncoderModel::mp(d, StopRule::FixedSteps { steps }).unwrap();
        let (_, trace) = encode_mp(&model, &x).unwrap();
        if trace.steps.len() != oracle.len() {
            return outcome(false, format!("instance {inst}: {} steps vs oracle {}", trace.steps.len(), oracle.len()));
        }
        for (t, (s, &(j, c))) in trace.steps.iter().zip(&oracle).enumerate() {
            if s.index != j {
                return outcome(false, format!("instance {inst} step {t}: index {} vs oracle {j}", s.index));
            }
            worst = worst.max((s.coefficient - c).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 1.0,
        format!("100 instances, indices identical, max coefficient difference {worst:.1e}, {secs:.2}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(2024, 2);
    let (mut worst_ortho, mut worst_energy, mut worst_conv) = (0.0f64, 0.0f64, 0.0f64);
    for inst in 0..1000 {
        let m = 2 + rng.below(11);
        let p = m + rng.below(2 * m + 1);
        let b: Vec<f64> = (0..m).map(|_| 0.2 * rng.standard_normal()).collect();
        let d = unit_dictionary(&mut rng, m, p, b.clone());
        let x: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        let steps = 10 * m;

        // Per-step identities on the default encoder, replaying the trace.
        let atoms = d.atoms().clone();
        let model = EncoderModel::mp(d, StopRule::FixedSteps { steps }).unwrap();
        let (_, trace) = encode_mp(&model, &x).unwrap();
        let mut r: Vec<f64> = x.iter().zip(&b).map(|(a, c)| a - c).collect();
        for s in &trace.steps {
            let before: f64 = r.iter().map(|v| v * v).sum();
            for (i, ri) in r.iter_mut().enumerate() {
                *ri -= s.coefficient * atoms[(i, s.index)];
            }
            let after: f64 = r.iter().map(|v| v * v).sum();
            let ortho: f64 = (0..m).map(|i| atoms[(i, s.index)] * r[i]).sum();
            worst_ortho = worst_ortho.max(ortho.abs());
            let sq = s.coefficient * s.coefficient;
            worst_energy = worst_energy.max(((before - after) - sq).abs() / before.max(f64::MIN_POSITIVE));
        }

        // Convergence. The signed rule only converges when the atoms
        // positively span the space, so this uses the classical rule, either
        // directly or as signed selection over a dictionary closed under
        // negation. The step budget is met reliably only by overcomplete
        // dictionaries (p >= 4m); near-square random bases are too poorly
        // conditioned for a 10m-step bound.
        let q = 4 * m + rng.below(4 * m + 1);
        let dq = unit_dictionary(&mut rng, m, q, b.clone());
        let conv_model = if inst % 2 == 0 {
            let mut both = DenseMatrix::zeros(m, 2 * q);
            for j in 0..q {
                let a = dq.atom(j);
                both.set_col(j, &a);
                both.set_col(q + j, &a.iter().map(|v| -v).collect::<Vec<_>>());
            }
            let dd = Dictionary::new(both, b.clone(), NormMode::ExactUnit).unwrap();
            EncoderModel::mp(dd, StopRule::FixedSteps { steps }).unwrap()
        } else {
            let variant = Variant::Mp { stop: StopRule::FixedSteps { steps }, selection: Selection::Absolute };
            EncoderModel::new(dq, None, vec![0.0; q], variant).unwrap()
        };
        let r0 = x.iter().zip(&b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        let (_, trace) = encode_mp(&conv_model, &x).unwrap();
        worst_conv = worst_conv.max(trace.final_residual_norm() / r0);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_ortho < 1e-9 && worst_energy < 1e-9 && worst_conv < 1e-3 && secs < 10.0,
        format!(
            "1000 instances: max |<D_j, r>| {worst_ortho:.1e}, energy identity {worst_energy:.1e} rel, \
             worst residual after 10m steps {worst_conv:.1e} rel, {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- shared synthetic runs

struct SyntheticRun {
    model: EncoderModel,
    exact_support: f64,
    max_coefficient_error: f64,
    min_cosine: f64,
    flat: f64,
    hier: f64,
}

fn train_synthetic(cfg: &RunConfig) -> SyntheticRun {
    let (spec, gt) = ground_truth(cfg).unwrap();
    let mut source = SyntheticSource::new(&spec, gt.dictionary.clone()).unwrap();
    let mut trainer = Trainer::new(cfg.train_for_dim(spec.dim).unwrap(), spec.dim).unwrap();
    trainer.run(&mut source, None).unwrap();
    let model = trainer.model;
    let held = sample_batch(&spec, &gt.dictionary, 1000, &mut RngStream::new(cfg.seed, STREAM_HELD_OUT)).unwrap();
    let rec = support_recovery(&model, &gt.dictionary, &held).unwrap();
    let a = match_to_ground_truth(&model.dictionary, &gt.dictionary).unwrap();
    SyntheticRun {
        exact_support: rec.exact_support,
        max_coefficient_error: rec.max_coefficient_error,
        min_cosine: rec.min_cosine(),
        flat: flat_mse(&model.dictionary, &gt.dictionary, &gt.levels, &a).unwrap(),
        hier: hierarchical_mse(&model.dictionary, &gt.dictionary, &gt.levels, &a).unwrap(),
        model,
    }
}

fn preset_run(preset: &str, seed: u64, correlation: Option<f64>) -> SyntheticRun {
    let mut cfg = RunConfig::preset(preset).unwrap();
    cfg.set_seed(seed);
    cfg.tree.correlation = correlation;
    train_synthetic(&cfg)
}

// ---------------------------------------------------------------- 3

fn criterion_3(mp: &[SyntheticRun]) -> Outcome {
    let passes: Vec<bool> =
        mp.iter().map(|r| r.min_cosine >= 0.95 && r.exact_support == 1.0 && r.max_coefficient_error < 0.05).collect();
    let n = passes.iter().filter(|&&p| p).count();
    let failed: Vec<String> = mp
        .iter()
        .enumerate()
        .filter(|(i, _)| !passes[*i])
        .map(|(i, r)| format!("seed {i}: min|cos| {:.3}, exact {:.3}, max coef err {:.3}", r.min_cosine, r.exact_support, r.max_coefficient_error))
        .collect();
    outcome(
        n >= 8,
        format!(
            "{n}/10 seeds recover every atom (|cos| >= 0.95) with exact supports and coefficient error < 0.05 on 1000 \
             held-out samples; median exact-support fraction {:.3}, median min|cos| {:.4}{}",
            median(mp.iter().map(|r| r.exact_support).collect()),
            median(mp.iter().map(|r| r.min_cosine).collect()),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut med = Vec::new();
    let mut text = Vec::new();
    for (label, preset) in [("MP", "synthetic-mp"), ("Vanilla", "synthetic-relu"), ("BatchTopK", "synthetic-batch-topk")] {
        let mut scores = Vec::new();
        for seed in 0..5 {
            let mut cfg = RunConfig::preset(preset).unwrap();
            cfg.set_seed(seed);
            cfg.tree.parent_magnitude = (1.0, 0.25);
            cfg.tree.child_magnitude = (1.0, 0.05);
            let spec = cfg.tree.spec().unwrap();
            let (_, gt) = ground_truth(&cfg).unwrap();
            let run = train_synthetic(&cfg);
            let report = absorption_score(
                &run.model,
                &spec,
                &gt.dictionary,
                &mut RngStream::new(seed, STREAM_ABSORPTION),
                20_000,
            )
            .unwrap();
            scores.push(report.mean);
        }
        let m = median(scores.iter().copied().map(|v| if v.is_nan() { f64::INFINITY } else { v }).collect());
        text.push(format!("{label} {m:.3e} (seeds {})", scores.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")));
        med.push(m);
    }
    outcome(med[0] < 0.1 && med[1] > 0.4 && med[2] > 0.4, format!("median absorption over 5 seeds: {}", text.join(", ")))
}

// ---------------------------------------------------------------- 5

fn criterion_5(mp0: &[SyntheticRun], mp3: &[SyntheticRun], vanilla0: &[SyntheticRun]) -> Outcome {
    let h0 = median(mp0.iter().map(|r| r.hier).collect());
    let f0 = median(mp0.iter().map(|r| r.flat).collect());
    let h3 = median(mp3.iter().map(|r| r.hier).collect());
    let f3 = median(mp3.iter().map(|r| r.flat).collect());
    let hv = median(vanilla0.iter().map(|r| r.hier).collect());
    let pass = h0 < 1e-2 && f0 < 1e-2 && h3 < 1e-2 && f3 < 1e-2 && hv >= 10.0 * h0;
    outcome(
        pass,
        format!(
            "medians over 10 seeds: MP corr 0 hier {h0:.2e} flat {f0:.2e}; MP corr 0.3 hier {h3:.2e} flat {f3:.2e}; \
             Vanilla corr 0 hier {hv:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6(mp: &EncoderModel) -> Outcome {
    let cfg = RunConfig::preset("synthetic-mp").unwrap();
    let (spec, gt) = ground_truth(&cfg).unwrap();
    let xs = sample_batch(&spec, &gt.dictionary, 1000, &mut RngStream::new(cfg.seed, STREAM_HELD_OUT)).unwrap().inputs;
    let ks: Vec<usize> = (1..=50).collect();
    let mp_sweep = sweep_inference_k(mp, &xs, &ks).unwrap();
    let monotone = mp_sweep.rowwise_non_increasing(1e-12);

    let mut topk_cfg = RunConfig::preset("synthetic-topk").unwrap();
    topk_cfg.train.variant = Variant::TopK { k: 5 };
    let topk = train_synthetic(&topk_cfg).model;
    let t_sweep = sweep_inference_k(&topk, &xs, &ks).unwrap();
    let at_star = t_sweep.points[4].normalized_mse;
    let worst_after = t_sweep.points[5..].iter().map(|p| p.normalized_mse).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        monotone && worst_after > at_star,
        format!(
            "MP: per-input error non-increasing over k = 1..50 for all 1000 inputs: {monotone} (nmse k=1 {:.2e}, k=50 {:.2e}); \
             TopK k*=5: nmse {at_star:.3e} at k*, max {worst_after:.3e} for k > k*",
            mp_sweep.points[0].normalized_mse, mp_sweep.points[49].normalized_mse
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let cfg = RunConfig::preset("synthetic-mp").unwrap();
    let (spec, gt) = ground_truth(&cfg).unwrap();
    let sampler = Sampler::new(&spec).unwrap();
    let mut rng = RngStream::new(7, 7);
    let (mut active, mut violations, total) = (0usize, 0usize, 1_000_000usize);
    for _ in 0..total / 100_000 {
        let batch = sampler.sample(&gt.dictionary, 100_000, &mut rng).unwrap();
        for i in 0..batch.codes.rows() {
            let row = batch.codes.row(i);
            for (a, &v) in row.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                active += 1;
                if let Some(parent) = spec.nodes[a + 1].parent.filter(|&p| p != 0) {
                    if row[parent - 1] == 0.0 {
                        violations += 1;
                    }
                }
            }
        }
    }
    let l0 = active as f64 / total as f64;
    outcome(
        (1.352..=1.368).contains(&l0) && violations == 0,
        format!("mean l0 {l0:.4} over 10^6 samples, {violations} child-without-parent violations"),
    )
}

// ---------------------------------------------------------------- 8

fn exhaustive_babel(g: &DenseMatrix, r: usize) -> f64 {
    let p = g.rows();
    let mut best = 0.0f64;
    for j in 0..p {
        let others: Vec<usize> = (0..p).filter(|&i| i != j).collect();
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != r {
                continue;
            }
            let s: f64 = others.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &i)| g[(i, j)].abs()).sum();
            best = best.max(s);
        }
    }
    best
}

/// Eigenvalues of a small symmetric PSD matrix by unshifted QR iteration.
fn qr_eigenvalues(a: &DenseMatrix) -> Option<Vec<f64>> {
    let n = a.rows();
    let mut a = a.clone();
    for _ in 0..20_000 {
        let mut q = a.clone();
        let mut r = DenseMatrix::zeros(n, n);
        for j in 0..n {
            for k in 0..j {
                let d: f64 = (0..n).map(|i| q[(i, k)] * q[(i, j)]).sum();
                r[(k, j)] = d;
                for i in 0..n {
                    let v = q[(i, k)];
                    q[(i, j)] -= d * v;
                }
            }
            let nrm = (0..n).map(|i| q[(i, j)] * q[(i, j)]).sum::<f64>().sqrt();
            r[(j, j)] = nrm;
            if nrm > 0.0 {
                for i in 0..n {
                    q[(i, j)] /= nrm;
                }
            }
        }
        a = r.matmul(&q).unwrap();
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off.sqrt() < 1e-13 {
            return Some((0..n).map(|i| a[(i, i)].max(0.0)).collect());
        }
    }
    None
}

fn criterion_8() -> Outcome {
    let mut rng = RngStream::new(2024, 8);
    let mut babel_checked = 0;
    let mut babel_worst = 0.0f64;
    for _ in 0..200 {
        let p = 2 + rng.below(7);
        let m = 2 + rng.below(6);
        let d = unit_dictionary(&mut rng, m, p, vec![0.0; m]);
        let g = d.atoms().transpose().matmul(d.atoms()).unwrap();
        for r in 1..p {
            let got = babel(&d, r).unwrap();
            babel_worst = babel_worst.max((got - exhaustive_babel(&g, r)).abs());
            babel_checked += 1;
        }
    }
    let mut er_worst = 0.0f64;
    let mut er_checked = 0;
    while er_checked < 200 {
        let n = 3 + rng.below(10);
        let p = 2 + rng.below(5);
        let mut z = gaussian(&mut rng, n, p);
        for v in z.as_mut_slice() {
            *v = v.max(0.0);
        }
        let Some(eig) = qr_eigenvalues(&z.transpose().matmul(&z).unwrap()) else { continue };
        let total: f64 = eig.iter().sum();
        if total == 0.0 {
            continue;
        }
        let h: f64 = eig.iter().map(|l| l / total).filter(|&l| l > 0.0).map(|l| -l * l.ln()).sum();
        er_worst = er_worst.max((effective_rank(&z).unwrap() - h.exp()).abs());
        er_checked += 1;
    }
    let labels = vec![Modality::Image, Modality::Image, Modality::Text, Modality::Text];
    let z = DenseMatrix::from_rows(&[
        vec![1.0, 0.0, 2.0],
        vec![3.0, 0.0, 2.0],
        vec![0.0, 5.0, 2.0],
        vec![0.0, 1.0, 2.0],
    ])
    .unwrap();
    let s = modality_score(&CodeMatrix::new(z, Some(labels)).unwrap(), Some(1.0)).unwrap();
    let analytic = s.scores == vec![1.0, 0.0, 0.5];
    outcome(
        babel_worst < 1e-12 && er_worst < 1e-6 && analytic,
        format!(
            "babel vs enumeration on {babel_checked} (dictionary, r) pairs: max diff {babel_worst:.1e}; \
             effective rank vs QR-iteration entropy on {er_checked} matrices: max diff {er_worst:.1e}; \
             modality scores {:?}",
            s.scores
        ),
    )
}

// ---------------------------------------------------------------- 9

fn random_model(variant: &Variant, rng: &mut RngStream) -> EncoderModel {
    let (m, p) = (5, 8);
    let pre: Vec<f64> = (0..m).map(|_| 0.1 * rng.standard_normal()).collect();
    let d = unit_dictionary(rng, m, p, pre.clone());
    if variant.is_mp() {
        return EncoderModel::new(d, None, vec![0.0; p], variant.clone()).unwrap();
    }
    let mut a = d.atoms().clone();
    a.scale(0.8);
    let d = Dictionary::new(a, pre, NormMode::UnitBall).unwrap();
    let mut w = gaussian(rng, m, p);
    w.scale(0.5);
    let b: Vec<f64> = (0..p).map(|_| 0.05 * rng.standard_normal()).collect();
    EncoderModel::new(d, Some(w), b, variant.clone()).unwrap()
}

/// Central-difference check of every coordinate. `None` when some
/// coordinate straddles a selection switch (the instance sits near a tie).
fn fd_agrees(model: &EncoderModel, batch: &DenseMatrix, objective: &Objective) -> Option<bool> {
    let (_, grads) = backward(model, batch, objective).unwrap();
    let analytic = grads.flatten();
    let theta = flatten_params(model);
    let eval = |t: &[f64]| batch_loss(&unflatten_params(model, t).unwrap(), batch, objective).unwrap();
    let f0 = eval(&theta);
    let h = 1e-6;
    let mut ok = true;
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        tp[i] += h;
        let mut tm = theta.clone();
        tm[i] -= h;
        let (fp, fm) = (eval(&tp), eval(&tm));
        let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
        if (right - left).abs() > 1e-3 * (1.0 + right.abs()) {
            return None;
        }
        let numeric = (fp - fm) / (2.0 * h);
        ok &= (numeric - analytic[i]).abs() <= 1e-4 * numeric.abs().max(analytic[i].abs()) + 1e-7;
    }
    Some(ok)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let variants: Vec<(Variant, Objective)> = vec![
        (Variant::Relu, Objective::with_l1(0.05)),
        (Variant::TopK { k: 3 }, Objective::reconstruction_only()),
        (Variant::BatchTopK { k: 2.5 }, Objective::reconstruction_only()),
        (Variant::Matryoshka { prefixes: vec![2, 5, 8] }, Objective::with_l1(0.02)),
        (
            Variant::Mp { stop: StopRule::FixedSteps { steps: 4 }, selection: Selection::Signed },
            Objective::reconstruction_only(),
        ),
    ];
    let mut rng = RngStream::new(2024, 9);
    let mut text = Vec::new();
    let mut all_ok = true;
    for (variant, objective) in &variants {
        let (mut good, mut bad, mut near_tie) = (0, 0, 0);
        while good + bad < 50 {
            let model = random_model(variant, &mut rng);
            let batch = gaussian(&mut rng, 6, 5);
            match fd_agrees(&model, &batch, objective) {
                None => near_tie += 1,
                Some(true) => good += 1,
                Some(false) => bad += 1,
            }
        }
        all_ok &= bad == 0;
        text.push(format!("{} {good}/50 (near-tie draws resampled: {near_tie})", variant.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(all_ok && secs < 30.0, format!("{}, {secs:.1}s", text.join(", ")))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let mut cfg = RunConfig::preset("embedding-mp").unwrap();
    // Smoke-test scale: the full preset (batch 8000, 2000 steps) is a
    // long-running job on one core.
    cfg.train.steps = 40;
    cfg.train.batch_size = 500;
    cfg.checkpoint_every = 20;
    cfg.eval.absorption_samples = 0;
    cfg.sweep.k_values = (1..=50).collect();
    let DataConfig::Embedding { .. } = cfg.data else { return outcome(false, "embedding preset lost its data source") };
    let gen = cmd_gen(&cfg, dir).unwrap();
    let file = read_embeddings(&gen.data_file).unwrap();
    let bytes = std::fs::read(&gen.data_file).unwrap();
    let round_trip = encode_embeddings(&file.data, file.width) == bytes && file.data.rows() == 10_000;
    let train = cmd_train(&cfg, dir, false).unwrap();
    let history = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    let finite = history
        .lines()
        .skip(1)
        .all(|l| l.split(',').skip(1).all(|c| c.parse::<f64>().is_ok_and(f64::is_finite)));
    let eval = cmd_eval(&cfg, dir, None).unwrap();
    let csv = cmd_sweep(&cfg, dir, None, Some(SweepMode::InferenceK)).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    let nmse_col = text.lines().next().unwrap().split(',').position(|h| h == "normalized_mse").unwrap();
    let nmse: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(nmse_col).unwrap().parse().unwrap()).collect();
    let column_monotone = nmse.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let model = mpsae::cli::load_model(dir, None).unwrap().0;
    let held = file.data.select_rows(&(9000..10_000).collect::<Vec<_>>());
    let rowwise = sweep_inference_k(&model, &held, &(1..=50).collect::<Vec<_>>()).unwrap().rowwise_non_increasing(1e-12);
    outcome(
        round_trip && finite && column_monotone && rowwise && eval.r2.is_some_and(f64::is_finite),
        format!(
            "10k x {} file re-encodes byte-identically: {round_trip}; {} training steps with finite losses: {finite}; \
             eval R2 {:.3}, modality scale {:?}; inference-k nmse non-increasing (column {column_monotone}, per row {rowwise}), \
             k=1 {:.3} to k=50 {:.3}",
            file.data.cols(),
            train.steps,
            eval.r2.unwrap_or(f64::NAN),
            eval.modality.as_ref().map(|m| m.text_energy_scale),
            nmse[0],
            nmse[49]
        ),
    )
}

// ---------------------------------------------------------------- main

fn report(n: usize, started: Instant, o: &Outcome) -> bool {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "CRITERION {n:>2}: {} [{:.1}s] {}",
        if o.pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    let _ = out.flush();
    o.pass
}

fn main() {
    // Numeric arguments select criteria; anything else cargo passes is ignored.
    let chosen: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = |n: usize| chosen.is_empty() || chosen.contains(&n);
    let mut ok = true;
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        if want(n) {
            let t = Instant::now();
            let o = f();
            ok &= report(n, t, &o);
        }
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    let mp0: Vec<SyntheticRun> = if want(3) || want(5) || want(6) {
        (0..10).map(|s| preset_run("synthetic-mp", s, None)).collect()
    } else {
        Vec::new()
    };
    run(3, &mut || criterion_3(&mp0));
    run(4, &mut criterion_4);
    run(5, &mut || {
        let mp3: Vec<SyntheticRun> = (0..10).map(|s| preset_run("synthetic-mp", s, Some(0.3))).collect();
        let vanilla0: Vec<SyntheticRun> = (0..10).map(|s| preset_run("synthetic-relu", s, None)).collect();
        criterion_5(&mp0, &mp3, &vanilla0)
    });
    run(6, &mut || criterion_6(&mp0[0].model));
    run(7, &mut criterion_7);
    run(8, &mut criterion_8);
    run(9, &mut criterion_9);
    run(10, &mut criterion_10);
    if !ok {
        std::process::exit(1);
    }
}
