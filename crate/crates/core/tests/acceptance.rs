//! Acceptance gate: one criterion per numbered block, one printed pass/fail
//! line each. Run with `cargo test --test acceptance -- --nocapture` to see
//! the lines on success; the test fails if any criterion fails.
//!
//! The suite trains three detector networks at desk scale (D = 1e5), so it
//! takes several minutes in an optimized test profile.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use musa_mud::codebook::{build_codebook, mutual_coherence, sequence_space_size, SpreadingMatrix};
use musa_mud::channel::ChannelParams;
use musa_mud::config::ExperimentConfig;
use musa_mud::detect::{detect_ls_bomp, detect_oracle};
use musa_mud::metrics::{finalize, rank_auc, CellResult, ConfusionCounts};
use musa_mud::nn::{bce_loss, sigmoid, train, LayerGrads, MlpModel, Mode, TrainConfig};
use musa_mud::pipeline::{evaluate_grid, run_pipeline, RunPaths, STAGES};
use musa_mud::sim::{build_dataset, snapshot_rng, ActivityPolicy, DatasetSpec, SnrPolicy, SnrSpec};

const L: usize = 4;
const RHO: f64 = 0.75;

struct Outcome {
    name: String,
    pass: bool,
    detail: String,
}

fn record(out: &mut Vec<Outcome>, name: &str, pass: bool, detail: String) {
    out.push(Outcome { name: name.to_string(), pass, detail });
}

// ---------------------------------------------------------------- criterion 1

fn flatten(grads: Vec<LayerGrads<f64>>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for g in grads {
        match g {
            LayerGrads::Dense { dw, db } => {
                out.push(dw.into_raw_vec_and_offset().0);
                out.push(db.into_raw_vec_and_offset().0);
            }
            LayerGrads::BatchNorm { dgamma, dbeta } => {
                out.push(dgamma.into_raw_vec_and_offset().0);
                out.push(dbeta.into_raw_vec_and_offset().0);
            }
            LayerGrads::None => {}
        }
    }
    out
}

/// Central-finite-difference check of every trainable tensor on randomized
/// small shapes.
fn criterion_1(out: &mut Vec<Outcome>) {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..4 {
        let cfg = TrainConfig::<f64> {
            hidden_width: rng.gen_range(3..7),
            hidden_dense: rng.gen_range(1..4),
            dropout_p: if case % 2 == 0 { 0.0 } else { 0.1 },
            ..Default::default()
        };
        let input = rng.gen_range(3..6);
        let output = rng.gen_range(2..5);
        let batch = rng.gen_range(4..7);
        let model = MlpModel::<f64>::new(input, output, &cfg, String::new(), &mut rng);
        let x = {
            let mut r = ChaCha8Rng::seed_from_u64(7 + case);
            Array2::from_shape_fn((batch, input), |_| r.gen_range(-1.0..1.0))
        };
        let y = {
            let mut r = ChaCha8Rng::seed_from_u64(70 + case);
            Array2::from_shape_fn((batch, output), |_| f64::from(r.gen::<f64>() < 0.4))
        };
        // same dropout mask every evaluation: fixed rng seed per forward
        let loss_of = |m: &MlpModel<f64>| {
            let mut m = m.clone();
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (z, _) = m.forward_cached(&x, Mode::Train, &mut r, false).unwrap();
            bce_loss(&z.mapv(sigmoid), &y).unwrap()
        };
        let mut work = model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (z, caches) = work.forward_cached(&x, Mode::Train, &mut r, true).unwrap();
        let p = z.mapv(sigmoid);
        let scale = 1.0 / p.len() as f64;
        let dlogits = (&p - &y).mapv(|v| v * scale);
        let grads = flatten(work.backward(&caches, dlogits));

        let shapes: Vec<usize> = {
            let mut m = model.clone();
            m.param_tensors_mut().iter().map(|t| t.len()).collect()
        };
        let h = 1e-5;
        for (ti, &len) in shapes.iter().enumerate() {
            for i in 0..len {
                let mut plus = model.clone();
                plus.param_tensors_mut()[ti][i] += h;
                let mut minus = model.clone();
                minus.param_tensors_mut()[ti][i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[ti][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    record(
        out,
        "1 gradient correctness",
        worst < 1e-4,
        format!("{checked} parameters over 4 random architectures, worst relative error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2(out: &mut Vec<Outcome>, cb8: &SpreadingMatrix<f64>) {
    let ch = ChannelParams::<f64>::default();
    let trials = 1000u64;
    let mut agree = 0u64;
    for t in 0..trials {
        let mut rng = snapshot_rng(2024, t);
        let psi = musa_mud::sim::draw_activity::<f64, _>(
            8,
            &ActivityPolicy::FixedN { n: 1 },
            &mut rng,
        )
        .unwrap();
        let h = musa_mud::channel::draw_channel(&ch, 8, &mut rng);
        let snap =
            musa_mud::sim::synthesize_snapshot(cb8, &psi, &h, SnrSpec::Db(30.0), &mut rng).unwrap();
        let bomp = detect_ls_bomp(cb8, &snap.y_p, 1).unwrap();
        let oracle = detect_oracle(cb8, &snap.y_p, 1, 1 << 20).unwrap();
        if bomp.support == oracle.support {
            agree += 1;
        }
    }
    let rate = agree as f64 / trials as f64;
    record(
        out,
        "2 LS-BOMP vs exhaustive oracle at 30 dB",
        rate >= 0.99,
        format!("agreement {rate:.3} over {trials} snapshots (needs >= 0.99)"),
    );
}

// --------------------------------------------------- shared training pipeline

fn train_model(n_devices: usize) -> (SpreadingMatrix<f64>, MlpModel<f64>) {
    // mirrors the pipeline defaults: per-N seed offsets, uniform n and SNR
    let cb = build_codebook::<f64>(3, L, n_devices, RHO, 7 + n_devices as u64).unwrap();
    let ch = ChannelParams::<f64>::default();
    let spec = DatasetSpec {
        size: 100_000,
        fractions: [0.8, 0.1, 0.1],
        snr_policy: SnrPolicy::UniformDb { lo: 0.0, hi: 30.0 },
        activity: ActivityPolicy::UniformN { choices: (1..=n_devices.div_ceil(2)).collect() },
        seed: 11 + n_devices as u64,
    };
    let ds = build_dataset(&cb, &ch, &spec, String::new()).unwrap();
    let cfg = TrainConfig::<f64> { epochs: 30, seed: n_devices as u64, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::new(2 * L, n_devices, &cfg, cb.hash(), &mut rng);
    train(&mut model, &ds, &cfg).unwrap();
    (cb, model)
}

fn eval_cfg(snr_db: Vec<f64>, n_active: Vec<usize>, snapshots: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.eval.snr_db = snr_db;
    cfg.eval.n_active = n_active;
    cfg.eval.snapshots_per_cell = snapshots;
    cfg.eval.dnn_blind = false;
    cfg
}

fn cell_pd(cells: &[CellResult], detector: &str, or: f64, n: usize, snr: f64) -> (f64, u64) {
    let c = cells
        .iter()
        .find(|c| {
            c.key.detector == detector
                && c.key.mode == "known_n"
                && c.key.or_percent == or
                && c.key.n_active == n
                && c.key.snr_db == snr
        })
        .unwrap_or_else(|| panic!("missing cell {detector} OR{or} n={n} snr={snr}"));
    (c.report.p_d.expect("p_d defined"), c.snapshots * n as u64)
}

// ------------------------------------------------------------- criteria 3 + 4

fn criteria_3_4(out: &mut Vec<Outcome>, cb8: &SpreadingMatrix<f64>, model8: &MlpModel<f64>) {
    let cfg = eval_cfg(vec![20.0], vec![1, 3], 10_000);
    let cells = evaluate_grid(&cfg, cb8, Some(model8), 200.0).unwrap();

    let (dnn, _) = cell_pd(&cells, "dnn", 200.0, 3, 20.0);
    let (bomp, _) = cell_pd(&cells, "ls_bomp", 200.0, 3, 20.0);
    let (camp, _) = cell_pd(&cells, "camp", 200.0, 3, 20.0);
    let ordering = dnn > bomp && dnn > camp;
    let band = |v: f64, c: f64, tol: f64| if (v - c).abs() <= tol { "in" } else { "out of" };
    record(
        out,
        "3 detector ordering at 20 dB, OR 200%, n=3",
        ordering,
        format!(
            "P_D dnn {dnn:.3} > ls_bomp {bomp:.3} and > camp {camp:.3} (strict); soft bands: \
             dnn {} 0.70±0.15, ls_bomp {} 0.35±0.10, camp {} 0.38±0.10 \
             (exact per-snapshot SNR realization shifts the baselines upward)",
            band(dnn, 0.70, 0.15),
            band(bomp, 0.35, 0.10),
            band(camp, 0.38, 0.10)
        ),
    );

    let (dnn1, _) = cell_pd(&cells, "dnn", 200.0, 1, 20.0);
    let p_m = 1.0 - dnn1;
    record(
        out,
        "4 DNN misdetection anchor at n=1, 20 dB, OR 200%",
        p_m <= 0.08,
        format!("P_M = {p_m:.4} over 10^4 snapshots (needs <= 0.08)"),
    );
}

// ------------------------------------------------------------- criteria 5 + 6

fn se_pd(p: f64, m: u64) -> f64 {
    (p * (1.0 - p) / m as f64).sqrt()
}

fn criteria_5_6(out: &mut Vec<Outcome>, trained: &[(SpreadingMatrix<f64>, MlpModel<f64>)]) {
    let snr_grid: Vec<f64> = (0..8).map(|i| (i * 4) as f64).collect();
    let cfg = eval_cfg(snr_grid.clone(), vec![1, 3], 2000);
    let mut cells: Vec<CellResult> = Vec::new();
    for (cb, model) in trained {
        let or = 100.0 * cb.n_devices() as f64 / L as f64;
        cells.extend(evaluate_grid(&cfg, cb, Some(model), or).unwrap());
    }

    // 5: P_D non-decreasing in SNR within 2 standard errors, per detector/OR/n
    let mut violations = Vec::new();
    for det in ["dnn", "ls_bomp", "camp"] {
        for or in [200.0, 300.0, 400.0] {
            for n in [1usize, 3] {
                for w in snr_grid.windows(2) {
                    let (p0, m0) = cell_pd(&cells, det, or, n, w[0]);
                    let (p1, m1) = cell_pd(&cells, det, or, n, w[1]);
                    let tol = 2.0 * (se_pd(p0, m0).powi(2) + se_pd(p1, m1).powi(2)).sqrt();
                    if p1 < p0 - tol {
                        violations.push(format!(
                            "{det} OR{or} n={n}: P_D({}) = {p1:.3} < P_D({}) = {p0:.3} - {tol:.3}",
                            w[1], w[0]
                        ));
                    }
                }
            }
        }
    }
    record(
        out,
        "5 P_D monotone in SNR (2 SE) for every detector and OR",
        violations.is_empty(),
        if violations.is_empty() {
            format!("{} adjacent pairs checked, no violations", 3 * 3 * 2 * (snr_grid.len() - 1))
        } else {
            violations.join("; ")
        },
    );

    // 6: at 20 dB, n=1: OR 200% >= 300% >= 400% within 2 SE per detector
    let mut violations = Vec::new();
    for det in ["dnn", "ls_bomp", "camp"] {
        let ors = [200.0, 300.0, 400.0];
        for w in ors.windows(2) {
            let (hi, m_hi) = cell_pd(&cells, det, w[0], 1, 20.0);
            let (lo, m_lo) = cell_pd(&cells, det, w[1], 1, 20.0);
            let tol = 2.0 * (se_pd(hi, m_hi).powi(2) + se_pd(lo, m_lo).powi(2)).sqrt();
            if hi < lo - tol {
                violations.push(format!(
                    "{det}: P_D(OR{}) = {hi:.3} < P_D(OR{}) = {lo:.3} - {tol:.3}",
                    w[0], w[1]
                ));
            }
        }
    }
    record(
        out,
        "6 P_D ordering across OR at 20 dB, n=1 (2 SE)",
        violations.is_empty(),
        if violations.is_empty() {
            "OR 200% >= 300% >= 400% for dnn, ls_bomp, camp".to_string()
        } else {
            violations.join("; ")
        },
    );
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(out: &mut Vec<Outcome>) {
    let set = musa_mud::codebook::ComplexElementSet::<f64>::new(3).unwrap();
    let space = sequence_space_size(&set, L).unwrap();
    let mut pass = space == 6560;
    let mut detail = format!("sequence space 9^{L} - 1 = {space}; ");
    let mut worst: f64 = 0.0;
    'outer: for seed in 0..100u64 {
        for n in [8usize, 12, 16] {
            match build_codebook::<f64>(3, L, n, RHO, seed) {
                Ok(cb) => {
                    let mu = mutual_coherence(&cb).unwrap();
                    worst = worst.max(mu);
                    if mu > RHO + 1e-9 {
                        pass = false;
                        detail.push_str(&format!(
                            "seed {seed} N={n}: pairwise correlation {mu:.4} > {RHO}"
                        ));
                        break 'outer;
                    }
                }
                Err(e) => {
                    pass = false;
                    detail.push_str(&format!("seed {seed} N={n}: {e}"));
                    break 'outer;
                }
            }
        }
    }
    if pass {
        detail.push_str(&format!(
            "300 codebooks (100 seeds x N in {{8,12,16}}) verified exhaustively, max pairwise correlation {worst:.4} <= {RHO}"
        ));
    }
    record(out, "7 codebook contract over 100 seeds", pass, detail);
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut pass = true;
    let mut detail = String::new();
    for _ in 0..1000 {
        let n = rng.gen_range(2..20usize);
        let k_t = rng.gen_range(0..=n);
        let k_e = rng.gen_range(0..=n);
        let mut pick = |k: usize| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        };
        let truth = pick(k_t);
        let est = pick(k_e);
        let mut counts = ConfusionCounts::default();
        counts.accumulate(&truth, &est, n);
        if (counts.tp + counts.fp + counts.fn_ + counts.tn) as usize != n {
            pass = false;
            detail = format!("count conservation broken: {counts:?} for N={n}");
            break;
        }
        let r = finalize(counts, None);
        if let (Some(pd), Some(pm)) = (r.p_d, r.p_m) {
            if (pd + pm - 1.0).abs() > 1e-12 {
                pass = false;
                detail = format!("P_D + P_M = {} != 1", pd + pm);
                break;
            }
        }
    }
    // AUC identities
    let m = 200_000usize;
    let labels: Vec<u8> = (0..m).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
    let perfect: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let inverted: Vec<f64> = labels.iter().map(|&l| 1.0 - f64::from(l)).collect();
    let random: Vec<f64> = (0..m).map(|_| rng.gen()).collect();
    let a_perf = rank_auc(&perfect, &labels).unwrap();
    let a_inv = rank_auc(&inverted, &labels).unwrap();
    let a_rand = rank_auc(&random, &labels).unwrap();
    if a_perf != 1.0 || a_inv != 0.0 || (a_rand - 0.5).abs() > 0.02 {
        pass = false;
        detail = format!("AUC identities: perfect {a_perf}, inverted {a_inv}, random {a_rand}");
    }
    if pass {
        detail = format!(
            "1000 random confusion draws conserve counts and P_D + P_M = 1; AUC perfect {a_perf}, inverted {a_inv}, random {a_rand:.3}"
        );
    }
    record(out, "8 metrics identities", pass, detail);
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(out: &mut Vec<Outcome>) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.codebook.n_devices = vec![8];
    cfg.dataset.size = 2000;
    cfg.train.epochs = 2;
    cfg.train.hidden_width = 16;
    cfg.train.batch_size = 100;
    cfg.eval.snr_db = vec![0.0, 10.0, 20.0];
    cfg.eval.n_active = vec![1, 2];
    cfg.eval.snapshots_per_cell = 300;

    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        cfg.output_dir = dir.path().join(run);
        run_pipeline(&cfg, &STAGES).unwrap();
        csvs.push(std::fs::read(RunPaths::new(&cfg.output_dir).metrics()).unwrap());
    }
    let pass = csvs[0] == csvs[1];
    record(
        out,
        "9 end-to-end determinism",
        pass,
        if pass {
            format!("two fresh pipeline runs produced byte-identical metrics CSVs ({} bytes)", csvs[0].len())
        } else {
            "metrics CSVs differ between identically-configured runs".to_string()
        },
    );
}

// -------------------------------------------------------------------- driver

#[test]
fn acceptance() {
    let mut out = Vec::new();

    criterion_1(&mut out);

    let trained: Vec<(SpreadingMatrix<f64>, MlpModel<f64>)> =
        [8, 12, 16].iter().map(|&n| train_model(n)).collect();

    criterion_2(&mut out, &trained[0].0);
    criteria_3_4(&mut out, &trained[0].0, &trained[0].1);
    criteria_5_6(&mut out, &trained);
    criterion_7(&mut out);
    criterion_8(&mut out);
    criterion_9(&mut out);

    let mut failed = 0;
    for o in &out {
        println!(
            "criterion {}: {} — {}",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
