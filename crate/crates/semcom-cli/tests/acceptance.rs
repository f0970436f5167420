//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line. Run with `--nocapture --test-threads=1` for ordered
//! output.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semcom::channel::{self, ChannelConfig, Snr};
use semcom::losses::{self, CorrKind, CorrelationMatrix, LossHyperParams};
use semcom::pipeline::{self, Method, RunConfig, Stage};
use semcom::{Graph, Tensor};
use semcom_cli::{loss_grad_reports, mi_identity_suite, render_csv, run_grid, ExperimentGrid};

/// Prints the criterion verdict, then enforces it.
fn verdict(number: u32, label: &str, pass: bool, detail: &str) {
    println!(
        "criterion {number} ({label}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {number} ({label}) failed: {detail}");
}

fn median_f64(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_u64(values: &mut [u64]) -> u64 {
    values.sort_unstable();
    values[values.len() / 2]
}

/// A two-modality configuration small enough to train in well under a second.
fn tiny_cfg(method: Method, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default_two_modality(method, seed);
    cfg.gen.num_classes = 3;
    cfg.gen.samples_per_class = 20;
    cfg.gen.shared_dim = 2;
    cfg.gen.unique_dims = vec![2, 2];
    cfg.gen.observed_dims = vec![8, 8];
    cfg.encoder_hidden = vec![8];
    cfg.decoder_hidden = vec![8];
    cfg.feature_dim = 4;
    cfg.loss = LossHyperParams::defaults(2, 4);
    cfg.batch_size = 10;
    cfg.epochs_pretrain = if method == Method::Supervised { 0 } else { 2 };
    cfg.epochs_finetune = 2;
    cfg.eval_every = 4;
    cfg.pretrain_eval_every = 1;
    cfg
}

#[test]
fn c1_loss_gradients_match_finite_differences() {
    let started = Instant::now();
    let reports = loss_grad_reports().expect("gradient suite runs");
    let elapsed = started.elapsed();
    let worst = reports
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let all_pass = reports.iter().all(|r| r.pass);
    let in_time = elapsed.as_secs_f64() < 30.0;
    verdict(
        1,
        "loss gradients match central finite differences",
        all_pass && in_time && reports.len() == 6,
        &format!(
            "{} losses checked, max relative error {worst:.3e} (tolerance 1e-4), {:.2}s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c2_losses_hit_closed_form_values() {
    const TOL: f64 = 1e-9;
    let mut failures = Vec::new();

    // Intra loss on [[1, .5], [.5, 1]] with unit off-diagonal weight:
    // diagonal residual 0, off-diagonals 2 * 0.25 -> 0.5.
    {
        let mut g = Graph::new();
        let node = g.leaf(&Tensor::new(2, 2, vec![1.0, 0.5, 0.5, 1.0]).unwrap());
        let c = CorrelationMatrix::from_node(&g, node, CorrKind::Intra { modality: 0 }).unwrap();
        let loss = losses::intra_loss(&mut g, &c, 1.0).unwrap();
        let got = g.value(loss)[0];
        if (got - 0.5).abs() > TOL {
            failures.push(format!("intra {got} != 0.5"));
        }
    }

    // Cross loss, K=2 with one shared dimension: shared diagonal 0.9 and
    // unique diagonal 0.3 give (1-0.9)^2 + 0.3^2 = 0.10; the off-block
    // entries are unpenalized, so arbitrary values must not change the loss.
    {
        let mut g = Graph::new();
        let node = g.leaf(&Tensor::new(2, 2, vec![0.9, 0.7, -0.4, 0.3]).unwrap());
        let c = CorrelationMatrix::from_node(&g, node, CorrKind::Cross { m: 0, n: 1 }).unwrap();
        let hp = LossHyperParams {
            lambda_m: vec![1.0, 1.0],
            lambda_sha: 1.0,
            lambda_uni: 1.0,
            k_sha: 1,
            tau: 0.5,
            lambda_bt: 5e-3,
        };
        let loss = losses::cross_loss(&mut g, &c, &hp).unwrap();
        let got = g.value(loss)[0];
        if (got - 0.10).abs() > TOL {
            failures.push(format!("cross {got} != 0.10"));
        }
    }

    // NT-Xent with B=2 orthonormal rows equal to their own views at tau=1:
    // every anchor sees positive e and two distractors e^0, so the loss is
    // -ln(e / (e + 2)).
    {
        let mut g = Graph::new();
        let z = g.leaf(&Tensor::identity(2));
        let zt = g.leaf(&Tensor::identity(2));
        let loss = losses::simclr_loss(&mut g, z, zt, 1.0).unwrap();
        let got = g.value(loss)[0];
        let want = -(std::f64::consts::E / (std::f64::consts::E + 2.0)).ln();
        if (got - want).abs() > TOL {
            failures.push(format!("simclr {got} != {want}"));
        }
    }

    // Cross-entropy of a uniform 10-class predictor is ln 10.
    {
        let mut g = Graph::new();
        let batch = 4;
        let classes = 10;
        let log_probs = g.leaf(&Tensor::filled(batch, classes, (0.1f64).ln()));
        let labels = [0usize, 3, 7, 9];
        let mask = [true; 4];
        let loss = losses::cross_entropy(&mut g, log_probs, &labels, &mask).unwrap();
        let got = g.value(loss)[0];
        let want = (10.0f64).ln();
        if (got - want).abs() > TOL {
            failures.push(format!("cross-entropy {got} != {want}"));
        }
    }

    verdict(
        2,
        "losses reproduce hand-derived values",
        failures.is_empty(),
        &if failures.is_empty() {
            "intra 0.5, cross 0.10, nt-xent -ln(e/(e+2)), uniform CE ln 10, all within 1e-9"
                .to_string()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn c3_mutual_information_identities_hold() {
    let started = Instant::now();
    let report = mi_identity_suite(100).expect("mi suite runs");
    let elapsed = started.elapsed();
    let pass = report.max_residual <= 1e-12
        && report.xor_interaction == -1.0
        && elapsed.as_secs_f64() < 5.0;
    verdict(
        3,
        "chain-rule decompositions and xor interaction",
        pass,
        &format!(
            "{} random joints, max residual {:.3e} (bound 1e-12), xor interaction {} bits, {:.2}s",
            report.trials,
            report.max_residual,
            report.xor_interaction,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c4_pretraining_is_communication_free() {
    let mut pretrain_rounds = 0usize;
    for method in Method::ALL {
        for seed in [0u64, 1] {
            let cfg = tiny_cfg(method, seed);
            let out = pipeline::run_experiment(&cfg).expect("tiny run succeeds");
            for entry in out.ledger.entries() {
                if entry.stage == Stage::Pretrain {
                    pretrain_rounds += 1;
                    assert_eq!(
                        (entry.uplink_scalars, entry.downlink_scalars),
                        (0, 0),
                        "{} seed {seed} charged communication during pre-training",
                        method.as_str()
                    );
                }
            }
            if method != Method::Supervised {
                assert!(
                    out.ledger
                        .entries()
                        .iter()
                        .any(|e| e.stage == Stage::Pretrain),
                    "{} seed {seed} recorded no pre-training rounds",
                    method.as_str()
                );
            }
        }
    }
    verdict(
        4,
        "pre-training exchanges zero scalars",
        pretrain_rounds > 0,
        &format!("{pretrain_rounds} pre-training rounds across all methods and seeds, all 0/0"),
    );
}

#[test]
fn c5_finetuning_round_charges_exact_budget() {
    // Two modalities, batch 64, sixteen features: uplink 2*64*16*2 = 4096
    // real scalars (complex counted as two), downlink 2*64*16 = 2048.
    let mut cfg = RunConfig::default_two_modality(Method::Supervised, 44);
    cfg.epochs_pretrain = 0;
    cfg.gen.num_classes = 2;
    cfg.gen.samples_per_class = 64;
    cfg.epochs_finetune = 1;
    let out = pipeline::run_experiment(&cfg).expect("budget run succeeds");
    let entries = out.ledger.entries();
    let rounds = entries.len();
    let exact = rounds > 0
        && entries
            .iter()
            .all(|e| e.uplink_scalars == 4096 && e.downlink_scalars == 2048);
    verdict(
        5,
        "fine-tuning rounds charge 4096 up / 2048 down",
        exact,
        &format!("{rounds} rounds, every entry exactly 4096/2048"),
    );
}

#[test]
fn c6_channel_noise_variance_and_noiseless_identity() {
    let cfg = ChannelConfig::awgn(1, Snr::Db(10.0));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let z = Tensor::randn(256, 16, &mut rng); // 4096 complex noise samples
    let out = channel::transmit(&z, &cfg, 0, &mut rng).unwrap();
    let n = z.len();
    let mut sum_sq = 0.0;
    for i in 0..n {
        // received = h * (norm_scale * z) + noise, so subtract the scaled
        // signal rotated by h to recover the raw complex noise.
        let x = out.norm_scale * z.data()[i];
        let n_re = out.received_re.data()[i] - out.h.re * x;
        let n_im = out.received_im.data()[i] - out.h.im * x;
        sum_sq += n_re * n_re + n_im * n_im;
    }
    let var = sum_sq / n as f64;
    // |noise|^2 is exponential with mean sigma^2, so the sample-mean standard
    // error is sigma^2 / sqrt(N).
    let sigma2 = 0.1;
    let three_se = 3.0 * sigma2 / (n as f64).sqrt();
    let var_ok = (var - sigma2).abs() <= three_se;

    // The noiseless round trip must be the identity on the power-normalized
    // features the receiver works with: equalize returns z_norm = scale * z.
    let noiseless = ChannelConfig::awgn(1, Snr::Noiseless);
    let out = channel::transmit(&z, &noiseless, 0, &mut rng).unwrap();
    let back = channel::equalize(&out).unwrap();
    let mut max_diff = 0.0f64;
    for i in 0..n {
        max_diff = max_diff.max((back.data()[i] - out.norm_scale * z.data()[i]).abs());
    }
    let identity_ok = max_diff <= 1e-12;

    verdict(
        6,
        "noise variance calibrated, noiseless path is identity",
        var_ok && identity_ok,
        &format!(
            "empirical variance {var:.5} vs 0.1 +/- {three_se:.5}; noiseless round-trip max diff {max_diff:.2e}"
        ),
    );
}

/// Per-(snr, seed) fine-tuning curves for one method, sorted by round.
fn curves(
    records: &[pipeline::MetricRecord],
    method: Method,
    snr: Snr,
) -> Vec<Vec<(u64, f64)>> {
    let mut seeds: Vec<u64> = records
        .iter()
        .filter(|r| r.method == method && r.snr_db == snr)
        .map(|r| r.seed)
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .iter()
        .map(|&seed| {
            let mut cell: Vec<(u64, f64)> = records
                .iter()
                .filter(|r| {
                    r.method == method
                        && r.snr_db == snr
                        && r.seed == seed
                        && r.stage == Stage::Finetune
                })
                .map(|r| (r.round, r.test_accuracy))
                .collect();
            cell.sort_unstable_by_key(|&(round, _)| round);
            cell
        })
        .collect()
}

#[test]
fn c7_pretrained_finetuning_halves_supervised_rounds() {
    let grid = ExperimentGrid::accuracy_trend_grid();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let started = Instant::now();
    let records = run_grid(&grid, threads).expect("default grid runs");
    let elapsed = started.elapsed();

    let mut detail = Vec::new();
    let mut pass = elapsed.as_secs_f64() < 600.0;
    for snr in [Snr::Db(10.0), Snr::Db(20.0)] {
        let supervised = curves(&records, Method::Supervised, snr);
        let total_rounds = supervised
            .iter()
            .flat_map(|cell| cell.iter().map(|&(round, _)| round))
            .max()
            .expect("supervised rounds exist");
        let mut sup_finals: Vec<f64> = supervised
            .iter()
            .map(|cell| cell.last().expect("non-empty").1)
            .collect();
        let sup_final = median_f64(&mut sup_finals);

        let proposed = curves(&records, Method::Proposed, snr);
        let mut reach: Vec<u64> = proposed
            .iter()
            .map(|cell| {
                cell.iter()
                    .find(|&&(_, acc)| acc >= sup_final)
                    .map_or(u64::MAX, |&(round, _)| round)
            })
            .collect();
        let mut finals: Vec<f64> = proposed
            .iter()
            .map(|cell| cell.last().expect("non-empty").1)
            .collect();
        let med_reach = median_u64(&mut reach);
        let med_final = median_f64(&mut finals);

        let speed_ok = med_reach as f64 <= 0.5 * total_rounds as f64;
        let final_ok = med_final >= sup_final - 0.01;
        pass = pass && speed_ok && final_ok;
        detail.push(format!(
            "{snr:?}: reach {med_reach}/{total_rounds} rounds (bar {:.0}), final {med_final:.4} vs supervised {sup_final:.4}",
            0.5 * total_rounds as f64
        ));
    }
    detail.push(format!("grid wall time {:.0}s (bound 600s)", elapsed.as_secs_f64()));
    verdict(
        7,
        "pre-trained model reaches the supervised final in half the rounds",
        pass,
        &detail.join("; "),
    );
}

#[test]
fn c8_pretraining_wins_at_half_labels() {
    let grid = ExperimentGrid::label_scarcity_grid();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let records = run_grid(&grid, threads).expect("label-scarcity grid runs");

    let mut detail = Vec::new();
    let mut pass = true;
    for snr in [Snr::Db(10.0), Snr::Db(20.0)] {
        let mut sup_finals: Vec<f64> = curves(&records, Method::Supervised, snr)
            .iter()
            .map(|cell| cell.last().expect("non-empty").1)
            .collect();
        let mut pro_finals: Vec<f64> = curves(&records, Method::Proposed, snr)
            .iter()
            .map(|cell| cell.last().expect("non-empty").1)
            .collect();
        let sup = median_f64(&mut sup_finals);
        let pro = median_f64(&mut pro_finals);
        pass = pass && pro >= sup;
        detail.push(format!("{snr:?}: proposed {pro:.4} vs supervised {sup:.4}"));
    }
    verdict(
        8,
        "pre-training beats supervised at 50% labels",
        pass,
        &detail.join("; "),
    );
}

#[test]
fn c9_identical_runs_emit_identical_bytes() {
    let cfg = tiny_cfg(Method::Proposed, 5);
    let first = pipeline::run_experiment(&cfg).expect("first run");
    let second = pipeline::run_experiment(&cfg).expect("second run");
    let a = render_csv(&first.records).expect("csv renders");
    let b = render_csv(&second.records).expect("csv renders");
    verdict(
        9,
        "identical config and seed reproduce byte-identical metrics",
        a == b,
        &format!("{} bytes, equal", a.len()),
    );
}
