//! Single-stage runners backing the `pretrain` and `finetune` subcommands.
//!
//! Each reproduces one stage of the combined experiment, with models crossing
//! the stage boundary through checkpoints. RNG streams restart per
//! invocation, so results are reproducible per command; a split run is not
//! bit-equal to a combined one because the combined run's shuffle stream
//! spans both stages.

use std::path::{Path, PathBuf};

use semcom::datagen;
use semcom::error::{Error, Result};
use semcom::model::{load_checkpoint, Decoder, Encoder};
use semcom::pipeline::{
    self, evaluate, CommLedger, MetricRecord, Method, RngSet, RunConfig, Stage,
};

/// Everything a single stage leaves behind.
#[derive(Debug)]
pub struct StageOutput {
    pub records: Vec<MetricRecord>,
    pub ledger: CommLedger,
    pub encoders: Vec<Encoder>,
    pub decoder: Decoder,
}

/// Canonical checkpoint location inside an output directory.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("models.ckpt")
}

/// Runs Stage I only: label-free pre-training with epoch snapshots. The
/// returned decoder is the (untouched) fresh initialization used for the
/// accuracy probes.
pub fn run_pretrain_stage(cfg: &RunConfig) -> Result<StageOutput> {
    cfg.validate()?;
    if cfg.method == Method::Supervised {
        return Err(Error::Validation(vec![
            "the supervised method has no pre-training stage".to_string(),
        ]));
    }
    let (train, test) = datagen::gen_dataset(&cfg.gen)?;
    let (mut encoders, decoder) = pipeline::init_models(cfg)?;
    let mut rngs = RngSet::for_run(cfg.seed);
    let mut ledger = CommLedger::new();
    let mut records = Vec::new();
    let ch = cfg.effective_channel();
    let snr_db = ch.snr_db;
    let last_epoch = cfg.epochs_pretrain.saturating_sub(1);
    pipeline::pretrain(
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
    Ok(StageOutput {
        records,
        ledger,
        encoders,
        decoder,
    })
}

/// Runs Stage II only, starting from a checkpoint when given one and from a
/// fresh initialization otherwise.
pub fn run_finetune_stage(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<StageOutput> {
    cfg.validate()?;
    let (train_full, test) = datagen::gen_dataset(&cfg.gen)?;
    let train = if cfg.label_fraction < 1.0 {
        datagen::subset_labels(
            &train_full,
            cfg.label_fraction,
            pipeline::label_subset_seed(cfg),
        )?
    } else {
        train_full
    };
    let (mut encoders, mut decoder) = match checkpoint {
        Some(path) => {
            let (encoders, decoder, _meta) = load_checkpoint(path)?;
            check_model_dims(cfg, &encoders, &decoder)?;
            (encoders, decoder)
        }
        None => pipeline::init_models(cfg)?,
    };
    let mut rngs = RngSet::for_run(cfg.seed);
    let mut ledger = CommLedger::new();
    let mut records = Vec::new();
    let ch = cfg.effective_channel();
    let snr_db = ch.snr_db;
    let total_rounds = (train.num_samples() / cfg.batch_size * cfg.epochs_finetune) as u64;
    let mut last_loss = f64::NAN;
    let rounds_done = pipeline::finetune(
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
    let have_final = records.iter().any(|r| r.round == rounds_done);
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
    Ok(StageOutput {
        records,
        ledger,
        encoders,
        decoder,
    })
}

/// Checkpointed models must match the config's architecture before they can
/// be fine-tuned against its data.
fn check_model_dims(cfg: &RunConfig, encoders: &[Encoder], decoder: &Decoder) -> Result<()> {
    let mut problems = Vec::new();
    if encoders.len() != cfg.num_modalities() {
        problems.push(format!(
            "checkpoint has {} encoders, config expects {}",
            encoders.len(),
            cfg.num_modalities()
        ));
    }
    for (m, enc) in encoders.iter().enumerate() {
        let want = cfg.encoder_dims(m);
        if enc.net.dims() != want.as_slice() {
            problems.push(format!(
                "encoder {m} dims {:?} do not match config {:?}",
                enc.net.dims(),
                want
            ));
        }
    }
    let want = cfg.decoder_dims();
    if decoder.net.dims() != want.as_slice() {
        problems.push(format!(
            "decoder dims {:?} do not match config {:?}",
            decoder.net.dims(),
            want
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use semcom::losses::LossHyperParams;
    use semcom::model::save_checkpoint;

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
    fn pretrain_stage_is_communication_free() {
        let out = run_pretrain_stage(&tiny_cfg(Method::Proposed, 1)).unwrap();
        assert!(!out.records.is_empty());
        assert_eq!(out.ledger.total_uplink(), 0);
        assert_eq!(out.ledger.total_downlink(), 0);
        assert!(out.records.iter().all(|r| r.stage == Stage::Pretrain));
    }

    #[test]
    fn pretrain_stage_rejects_supervised() {
        assert!(run_pretrain_stage(&tiny_cfg(Method::Supervised, 1)).is_err());
    }

    #[test]
    fn finetune_resumes_from_checkpoint() {
        let cfg = tiny_cfg(Method::Proposed, 2);
        let pre = run_pretrain_stage(&cfg).unwrap();
        let dir = std::env::temp_dir().join("semcom-stage-test");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = checkpoint_path(&dir);
        save_checkpoint(&ckpt, &pre.encoders, &pre.decoder, cfg.seed, "pretrain").unwrap();

        let fine = run_finetune_stage(&cfg, Some(&ckpt)).unwrap();
        assert!(!fine.records.is_empty());
        assert!(fine.ledger.total_uplink() > 0);
        // Resuming from the checkpoint differs from a cold start.
        let cold = run_finetune_stage(&cfg, None).unwrap();
        assert_ne!(
            fine.records.last().unwrap().train_loss,
            cold.records.last().unwrap().train_loss
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn finetune_rejects_mismatched_checkpoint() {
        let cfg = tiny_cfg(Method::Proposed, 3);
        let pre = run_pretrain_stage(&cfg).unwrap();
        let dir = std::env::temp_dir().join("semcom-stage-mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = checkpoint_path(&dir);
        save_checkpoint(&ckpt, &pre.encoders, &pre.decoder, cfg.seed, "pretrain").unwrap();

        let mut other = tiny_cfg(Method::Proposed, 3);
        other.feature_dim = 8;
        other.loss = LossHyperParams::defaults(2, 8);
        let err = run_finetune_stage(&other, Some(&ckpt)).unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
