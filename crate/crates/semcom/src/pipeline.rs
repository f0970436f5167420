//! Two-stage training over the feature channel, end to end.
//!
//! Stage I runs entirely on the devices: every modality encodes its own data
//! and its augmented view, a label-free objective aligns the encoders, and
//! nothing crosses the channel — the communication ledger records a hard zero
//! for every Stage-I round. Stage II fine-tunes encoders and decoder jointly
//! with a masked cross-entropy: features travel uplink through the channel,
//! the per-feature gradient blocks travel downlink, and the ledger charges
//! each round its exact scalar count.
//!
//! A "round" is one fine-tuning mini-batch exchange; metric rows emitted
//! during Stage I carry round 0 because no communication has happened yet.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig, Snr};
use crate::datagen::{self, AugConfig, GenConfig, MultiModalDataset};
use crate::error::{Error, Result};
use crate::losses::{self, LossHyperParams, ModalityViews};
use crate::model::{
    init_decoder, init_encoder, Decoder, Encoder, MlpPass, OptimConfig, SgdOptimizer,
};
use crate::ndcore::graph::{Graph, NodeId};

/// Training objective selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Intra-modal alignment plus cross-modal shared/unique decoupling.
    Proposed,
    /// Per-modality NT-Xent contrastive pre-training.
    Simclr,
    /// Per-modality redundancy-reduction pre-training.
    Barlow,
    /// No pre-training; fine-tune from random initialization.
    Supervised,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Simclr => "simclr",
            Method::Barlow => "barlow",
            Method::Supervised => "supervised",
        }
    }

    pub const ALL: [Method; 4] = [
        Method::Proposed,
        Method::Simclr,
        Method::Barlow,
        Method::Supervised,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// One audited communication event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
}

/// Per-round communication audit. Recording a Stage-I entry with nonzero
/// traffic is a contract violation, not a data point — pre-training is
/// local by construction.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    total_uplink: u64,
    total_downlink: u64,
}

impl CommLedger {
    pub fn new() -> CommLedger {
        CommLedger::default()
    }

    pub fn record(&mut self, stage: Stage, uplink: u64, downlink: u64) -> Result<()> {
        if stage == Stage::Pretrain && (uplink != 0 || downlink != 0) {
            return Err(Error::contract(format!(
                "pre-training must not communicate, got uplink {uplink}, downlink {downlink}"
            )));
        }
        self.entries.push(LedgerEntry {
            stage,
            uplink_scalars: uplink,
            downlink_scalars: downlink,
        });
        self.total_uplink += uplink;
        self.total_downlink += downlink;
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn total_uplink(&self) -> u64 {
        self.total_uplink
    }

    pub fn total_downlink(&self) -> u64 {
        self.total_downlink
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Stage-I epochs; must be 0 for the supervised method.
    pub epochs_pretrain: usize,
    /// Stage-II epochs.
    pub epochs_finetune: usize,
    pub batch_size: usize,
    /// Fraction of training rows that keep their labels.
    pub label_fraction: f64,
    /// Run seed driving shuffling, augmentation, channel noise, evaluation
    /// noise, and label subsetting.
    pub seed: u64,
    /// Evaluation cadence in fine-tuning rounds (the final round is always
    /// evaluated).
    pub eval_every: usize,
    /// Evaluation cadence in Stage-I epochs (the final epoch is always
    /// evaluated).
    pub pretrain_eval_every: usize,
    /// When false, training and evaluation run over an ideal link (the
    /// noiseless unit channel — the identical code path, so results are
    /// bit-for-bit the same as a noiseless channel config).
    pub channel_enabled: bool,
    /// Count each complex feature symbol as 2 uplink reals (in-phase and
    /// quadrature). When false a symbol counts once per channel use.
    pub count_complex_as_two: bool,
    /// Hidden layer widths of every encoder (input and feature dims are
    /// derived from the data config).
    pub encoder_hidden: Vec<usize>,
    /// Semantic feature dimension K produced by every encoder.
    pub feature_dim: usize,
    /// Hidden layer widths of the decoder.
    pub decoder_hidden: Vec<usize>,
    pub gen: GenConfig,
    /// Optimizer settings; `total_epochs` is overridden per stage with the
    /// stage's epoch count to drive the cosine schedule.
    pub optim: OptimConfig,
    pub loss: LossHyperParams,
    pub channel: ChannelConfig,
    pub aug: AugConfig,
}

impl RunConfig {
    /// Experiment defaults: two modalities, 10 classes, 2000 train samples.
    pub fn default_two_modality(method: Method, seed: u64) -> RunConfig {
        let gen = GenConfig::default_two_modality();
        let modalities = gen.num_modalities();
        let feature_dim = 16;
        // The generic loss default splits the feature space evenly, but for
        // the stock generator the shared-latent dimension is known, so the
        // benchmark aligns exactly that many feature dimensions across
        // modalities instead of guessing half.
        let mut loss = LossHyperParams::defaults(modalities, feature_dim);
        loss.k_sha = gen.shared_dim;
        RunConfig {
            method,
            epochs_pretrain: if method == Method::Supervised { 0 } else { 60 },
            epochs_finetune: 30,
            batch_size: 64,
            label_fraction: 1.0,
            seed,
            eval_every: 16,
            pretrain_eval_every: 5,
            channel_enabled: true,
            count_complex_as_two: true,
            encoder_hidden: vec![64],
            feature_dim,
            decoder_hidden: vec![64],
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
                total_epochs: 30,
                seed: 0,
            },
            loss,
            channel: ChannelConfig::awgn(modalities, Snr::Db(10.0)),
            aug: AugConfig {
                jitter: 0.3,
                dropout: 0.1,
                seed_stream: 0,
            },
            gen,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.gen.num_modalities()
    }

    pub fn encoder_dims(&self, modality: usize) -> Vec<usize> {
        let mut dims = vec![self.gen.observed_dims[modality]];
        dims.extend_from_slice(&self.encoder_hidden);
        dims.push(self.feature_dim);
        dims
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.num_modalities() * self.feature_dim];
        dims.extend_from_slice(&self.decoder_hidden);
        dims.push(self.gen.num_classes);
        dims
    }

    /// The channel actually applied: the configured one, or the ideal link
    /// when the channel is disabled.
    pub fn effective_channel(&self) -> ChannelConfig {
        if self.channel_enabled {
            self.channel.clone()
        } else {
            ChannelConfig::awgn(self.num_modalities(), Snr::Noiseless)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size < 2 {
            problems.push(format!("batch_size = {} must be >= 2", self.batch_size));
        }
        if self.epochs_finetune == 0 {
            problems.push("epochs_finetune must be >= 1".to_string());
        }
        if self.method == Method::Supervised && self.epochs_pretrain != 0 {
            problems.push(format!(
                "the supervised method has no pre-training stage; epochs_pretrain = {}",
                self.epochs_pretrain
            ));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            problems.push(format!(
                "label_fraction = {} must be in (0, 1]",
                self.label_fraction
            ));
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be >= 1".to_string());
        }
        if self.pretrain_eval_every == 0 {
            problems.push("pretrain_eval_every must be >= 1".to_string());
        }
        if self.feature_dim < 2 {
            problems.push(format!(
                "feature_dim = {} must be >= 2 to split into shared and unique blocks",
                self.feature_dim
            ));
        }
        let mut absorb = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(mut v)) => problems.append(&mut v),
            Err(other) => problems.push(other.to_string()),
        };
        absorb(self.gen.validate());
        absorb(self.optim.validate());
        absorb(self.loss.validate(self.num_modalities(), self.feature_dim));
        absorb(self.channel.validate());
        absorb(self.aug.validate());
        if self.channel.num_modalities() != self.num_modalities() {
            problems.push(format!(
                "channel configures {} modalities, data has {}",
                self.channel.num_modalities(),
                self.num_modalities()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// One row of the metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Completed fine-tuning rounds at snapshot time (0 during Stage I).
    pub round: u64,
    pub stage: Stage,
    pub method: Method,
    pub seed: u64,
    pub snr_db: Snr,
    pub label_fraction: f64,
    /// Mean Stage-I epoch loss, or the round's batch loss in Stage II.
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Cumulative uplink scalars at snapshot time.
    pub uplink_scalars: u64,
    /// Cumulative downlink scalars at snapshot time.
    pub downlink_scalars: u64,
}

/// The independent RNG streams of one run. Every source of randomness after
/// dataset generation draws from exactly one of these, so any stage can be
/// reproduced in isolation.
#[derive(Debug)]
pub struct RngSet {
    pub shuffle: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub channel: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

impl RngSet {
    pub fn for_run(seed: u64) -> RngSet {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        RngSet {
            shuffle: stream(1),
            augment: stream(2),
            channel: stream(3),
            eval: stream(4),
        }
    }
}

/// splitmix64 finalizer; decorrelates derived seeds.
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn model_seed(cfg: &RunConfig, tag: u64) -> u64 {
    mix(cfg.seed ^ mix(cfg.optim.seed ^ tag))
}

/// Seed used to pick which training rows keep labels; exposed so standalone
/// stage runners subset exactly like [`run_experiment`].
pub fn label_subset_seed(cfg: &RunConfig) -> u64 {
    mix(cfg.seed ^ 5)
}

/// Fresh models for a run: one encoder per modality plus the decoder.
pub fn init_models(cfg: &RunConfig) -> Result<(Vec<Encoder>, Decoder)> {
    let encoders = (0..cfg.num_modalities())
        .map(|m| {
            init_encoder(
                format!("encoder{m}"),
                &cfg.encoder_dims(m),
                model_seed(cfg, 1000 + m as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = init_decoder("decoder", &cfg.decoder_dims(), model_seed(cfg, 2000))?;
    Ok((encoders, decoder))
}

fn stage_optimizer(cfg: &RunConfig, stage_epochs: usize) -> Result<SgdOptimizer> {
    SgdOptimizer::new(OptimConfig {
        total_epochs: stage_epochs.max(1),
        ..cfg.optim.clone()
    })
}

/// Stage I: label-free pre-training at the devices. Labels are never read in
/// this code path; the ledger records (0, 0) for every mini-batch round.
/// `on_epoch(epoch, mean_loss, encoders)` fires after each epoch.
pub fn pretrain<F>(
    train: &MultiModalDataset,
    encoders: &mut [Encoder],
    cfg: &RunConfig,
    ledger: &mut CommLedger,
    shuffle_rng: &mut ChaCha8Rng,
    augment_rng: &mut ChaCha8Rng,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(usize, f64, &[Encoder]) -> Result<()>,
{
    if cfg.method == Method::Supervised {
        return Err(Error::contract(
            "the supervised method has no pre-training stage".to_string(),
        ));
    }
    if cfg.epochs_pretrain == 0 {
        return Ok(());
    }
    let mut optimizer = stage_optimizer(cfg, cfg.epochs_pretrain)?;
    let mut indices: Vec<usize> = (0..train.num_samples()).collect();

    for epoch in 0..cfg.epochs_pretrain {
        indices.shuffle(shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0u64;
        for chunk in indices.chunks_exact(cfg.batch_size) {
            let (mats, _labels, _mask) = train.batch(chunk)?;
            let views_aug = datagen::augment(&mats, &cfg.aug, augment_rng)?;

            let mut graph = Graph::new();
            let mut passes = Vec::with_capacity(encoders.len());
            let mut views = Vec::with_capacity(encoders.len());
            for (m, enc) in encoders.iter().enumerate() {
                let x = graph.leaf(&mats[m]);
                let x_aug = graph.leaf(&views_aug[m]);
                // One parameter binding shared by both views, so both views'
                // gradients accumulate onto a single node per parameter and
                // one optimizer step consumes them together.
                let params = enc.net.register_params(&mut graph);
                let z = enc.net.forward_with(&mut graph, x, &params, false)?;
                let z_tilde = enc.net.forward_with(&mut graph, x_aug, &params, false)?;
                views.push(ModalityViews { z, z_tilde });
                passes.push(MlpPass { output: z, params });
            }
            let loss = match cfg.method {
                Method::Proposed => losses::pretrain_loss(&mut graph, &views, &cfg.loss)?,
                Method::Simclr => {
                    let mut total: Option<NodeId> = None;
                    for v in &views {
                        let l = losses::simclr_loss(&mut graph, v.z, v.z_tilde, cfg.loss.tau)?;
                        total = Some(match total {
                            Some(t) => graph.add(t, l)?,
                            None => l,
                        });
                    }
                    total.expect("at least one modality")
                }
                Method::Barlow => {
                    let mut total: Option<NodeId> = None;
                    for v in &views {
                        let l = losses::barlow_twins_loss(
                            &mut graph,
                            v.z,
                            v.z_tilde,
                            cfg.loss.lambda_bt,
                        )?;
                        total = Some(match total {
                            Some(t) => graph.add(t, l)?,
                            None => l,
                        });
                    }
                    total.expect("at least one modality")
                }
                Method::Supervised => unreachable!("rejected above"),
            };
            let loss_value = graph.scalar_value(loss)?;
            graph.backward(loss)?;
            for (pass, enc) in passes.iter().zip(encoders.iter_mut()) {
                optimizer.step_model(&graph, pass, &mut enc.net, epoch)?;
            }
            ledger.record(Stage::Pretrain, 0, 0)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        let mean_loss = if batches > 0 {
            epoch_loss / batches as f64
        } else {
            f64::NAN
        };
        on_epoch(epoch, mean_loss, encoders)?;
    }
    Ok(())
}

/// Per-round state passed to the fine-tuning callback.
#[derive(Debug, Clone, Copy)]
pub struct RoundSnapshot {
    /// Completed communication rounds so far (1-based after the first).
    pub round: u64,
    /// This round's masked cross-entropy on the training batch.
    pub loss: f64,
    /// Ledger totals including this round.
    pub total_uplink: u64,
    pub total_downlink: u64,
}

/// Stage II: supervised fine-tuning across the channel. Each full mini-batch
/// is one communication round: per modality B×K features go uplink (counted
/// as 2 reals per complex symbol unless configured otherwise) and the B×K
/// feature-gradient block comes back downlink. Batches with no labeled rows
/// are skipped without a ledger charge. `on_round` fires after every round;
/// returns the total round count.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F>(
    train: &MultiModalDataset,
    encoders: &mut [Encoder],
    decoder: &mut Decoder,
    cfg: &RunConfig,
    ledger: &mut CommLedger,
    shuffle_rng: &mut ChaCha8Rng,
    channel_rng: &mut ChaCha8Rng,
    mut on_round: F,
) -> Result<u64>
where
    F: FnMut(RoundSnapshot, &[Encoder], &Decoder) -> Result<()>,
{
    let ch = cfg.effective_channel();
    let mut optimizer = stage_optimizer(cfg, cfg.epochs_finetune)?;
    let mut indices: Vec<usize> = (0..train.num_samples()).collect();
    let mut round = 0u64;

    let b = cfg.batch_size as u64;
    let k = cfg.feature_dim as u64;
    let m_count = encoders.len() as u64;
    let uplink_per_round = m_count * b * k * if cfg.count_complex_as_two { 2 } else { 1 };
    let downlink_per_round = m_count * b * k;

    for epoch in 0..cfg.epochs_finetune {
        indices.shuffle(shuffle_rng);
        for chunk in indices.chunks_exact(cfg.batch_size) {
            let (mats, labels, mask) = train.batch(chunk)?;
            if !mask.iter().any(|&m| m) {
                // Nothing to learn from and nothing worth transmitting.
                continue;
            }
            let mut graph = Graph::new();
            let mut eq_nodes = Vec::with_capacity(encoders.len());
            let mut enc_passes = Vec::with_capacity(encoders.len());
            for (m, enc) in encoders.iter().enumerate() {
                let x = graph.leaf(&mats[m]);
                let pass = enc.encode(&mut graph, x)?;
                let z = graph.value_tensor(pass.output);
                let out = channel::transmit(&z, &ch, m, channel_rng)?;
                let eq = channel::equalize_on_graph(&mut graph, pass.output, &out)?;
                eq_nodes.push(eq);
                enc_passes.push(pass);
            }
            let concat = graph.concat_cols(&eq_nodes)?;
            let dec_pass = decoder.decode(&mut graph, concat)?;
            let loss = losses::cross_entropy(&mut graph, dec_pass.output, &labels, &mask)?;
            let loss_value = graph.scalar_value(loss)?;
            graph.backward(loss)?;

            optimizer.step_model(&graph, &dec_pass, &mut decoder.net, epoch)?;
            for (pass, enc) in enc_passes.iter().zip(encoders.iter_mut()) {
                optimizer.step_model(&graph, pass, &mut enc.net, epoch)?;
            }
            ledger.record(Stage::Finetune, uplink_per_round, downlink_per_round)?;
            round += 1;
            let snapshot = RoundSnapshot {
                round,
                loss: loss_value,
                total_uplink: ledger.total_uplink(),
                total_downlink: ledger.total_downlink(),
            };
            on_round(snapshot, encoders, decoder)?;
        }
    }
    Ok(round)
}

/// Test accuracy under the configured channel with fresh noise realizations
/// drawn from `rng`. Argmax ties resolve to the lowest class index.
pub fn evaluate(
    test: &MultiModalDataset,
    encoders: &[Encoder],
    decoder: &Decoder,
    ch: &ChannelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if test.num_samples() == 0 {
        return Err(Error::contract("evaluation on an empty test set".to_string()));
    }
    let mut equalized = Vec::with_capacity(encoders.len());
    for (m, enc) in encoders.iter().enumerate() {
        let mut graph = Graph::new();
        let x = graph.leaf(&test.modalities[m]);
        let pass = enc.encode(&mut graph, x)?;
        let z = graph.value_tensor(pass.output);
        let out = channel::transmit(&z, ch, m, rng)?;
        equalized.push(channel::equalize(&out)?);
    }
    let concat = channel::concat_features(&equalized.iter().collect::<Vec<_>>())?;
    let mut graph = Graph::new();
    let zi = graph.leaf(&concat);
    let pass = decoder.decode(&mut graph, zi)?;
    let log_probs = graph.value_tensor(pass.output);

    let mut correct = 0usize;
    for (i, &y) in test.labels.iter().enumerate() {
        let row = log_probs.row_slice(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.num_samples() as f64)
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub ledger: CommLedger,
}

/// Runs the full two-stage experiment described by `cfg`: generate data,
/// subset labels, pre-train (unless supervised), fine-tune, and emit metric
/// snapshots. Bit-for-bit deterministic per config.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train_full, test) = datagen::gen_dataset(&cfg.gen)?;
    let train = if cfg.label_fraction < 1.0 {
        datagen::subset_labels(&train_full, cfg.label_fraction, label_subset_seed(cfg))?
    } else {
        train_full
    };

    let (mut encoders, mut decoder) = init_models(cfg)?;
    let mut rngs = RngSet::for_run(cfg.seed);
    let mut ledger = CommLedger::new();
    let mut records: Vec<MetricRecord> = Vec::new();
    let ch = cfg.effective_channel();
    let snr_db = ch.snr_db;

    if cfg.method != Method::Supervised && cfg.epochs_pretrain > 0 {
        let last_epoch = cfg.epochs_pretrain - 1;
        pretrain(
            &train,
            &mut encoders,
            cfg,
            &mut ledger,
            &mut rngs.shuffle,
            &mut rngs.augment,
            |epoch, mean_loss, current| {
                if epoch % cfg.pretrain_eval_every == 0 || epoch == last_epoch {
                    let acc = evaluate(&test, current, &decoder, &ch, &mut rngs.eval)?;
                    records.push(MetricRecord {
                        round: 0,
                        stage: Stage::Pretrain,
                        method: cfg.method,
                        seed: cfg.seed,
                        snr_db,
                        label_fraction: cfg.label_fraction,
                        train_loss: mean_loss,
                        test_accuracy: acc,
                        uplink_scalars: 0,
                        downlink_scalars: 0,
                    });
                }
                Ok(())
            },
        )?;
    }

    let batches_per_epoch = train.num_samples() / cfg.batch_size;
    let total_rounds = (batches_per_epoch * cfg.epochs_finetune) as u64;
    let mut last_loss = f64::NAN;
    let rounds_done = finetune(
        &train,
        &mut encoders,
        &mut decoder,
        cfg,
        &mut ledger,
        &mut rngs.shuffle,
        &mut rngs.channel,
        |snap, current_enc, current_dec| {
            last_loss = snap.loss;
            if snap.round % cfg.eval_every as u64 == 0 || snap.round == total_rounds {
                let acc = evaluate(&test, current_enc, current_dec, &ch, &mut rngs.eval)?;
                records.push(MetricRecord {
                    round: snap.round,
                    stage: Stage::Finetune,
                    method: cfg.method,
                    seed: cfg.seed,
                    snr_db,
                    label_fraction: cfg.label_fraction,
                    train_loss: snap.loss,
                    test_accuracy: acc,
                    uplink_scalars: snap.total_uplink,
                    downlink_scalars: snap.total_downlink,
                });
            }
            Ok(())
        },
    )?;
    // Skipped zero-label batches can leave the actual round count short of
    // the estimate above; guarantee a final snapshot either way.
    let have_final = records
        .iter()
        .any(|r| r.stage == Stage::Finetune && r.round == rounds_done);
    if rounds_done > 0 && !have_final {
        let acc = evaluate(&test, &encoders, &decoder, &ch, &mut rngs.eval)?;
        records.push(MetricRecord {
            round: rounds_done,
            stage: Stage::Finetune,
            method: cfg.method,
            seed: cfg.seed,
            snr_db,
            label_fraction: cfg.label_fraction,
            train_loss: last_loss,
            test_accuracy: acc,
            uplink_scalars: ledger.total_uplink(),
            downlink_scalars: ledger.total_downlink(),
        });
    }
    Ok(RunOutput { records, ledger })
}
