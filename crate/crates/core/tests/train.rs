mod common;

use std::path::Path;

use common::tiny_config;
use simulst::data::{SyntheticTask, SyntheticTaskConfig, Utterance};
use simulst::model::{Model, ModelConfig, Objective, WAIT_ALL};
use simulst::shrink::ShrinkMode;
use simulst::simul::PolicyConfig;
use simulst::train::{
    average, average_checkpoints, epoch_path, evaluate, finetune, pretrain_ctc, train_epochs, validation_loss,
    Checkpoint, TrainConfig, TrainStage, LOG_HEADER,
};
use simulst::Error;

fn corpus(size: usize) -> (ModelConfig, Vec<Utterance>) {
    let task = SyntheticTask::new(SyntheticTaskConfig { feat_dim: 4, vocab_size: 6, max_len: 5, ..Default::default() })
        .unwrap();
    let cfg = ModelConfig {
        src_vocab: task.src_vocab().len(),
        tgt_vocab: task.tgt_vocab().len(),
        ..tiny_config()
    };
    (cfg, task.generate(size).unwrap().utterances)
}

fn tcfg() -> TrainConfig {
    TrainConfig { max_batch_frames: 600, warmup: 10, lr: 3e-3, ..Default::default() }
}

fn values(m: &Model, prefix: &str) -> Vec<f32> {
    m.params
        .iter()
        .filter(|(_, n, _)| n.starts_with(prefix))
        .flat_map(|(_, _, t)| t.data().to_vec())
        .collect()
}

#[test]
fn checkpoint_round_trips_through_bytes_and_files() {
    let (cfg, utts) = corpus(20);
    let mut ck = Checkpoint::init(cfg, &tcfg(), TrainStage::Finetune).unwrap();
    train_epochs(&mut ck, &utts, &[], &tcfg(), 1, None).unwrap();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.epoch, 1);
    assert_eq!(back.optimizer.step, ck.optimizer.step);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);

    assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT", Path::new("x")), Err(Error::Format { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, Path::new("x")).is_err());
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn averaging_checks_count_and_architecture() {
    let (cfg, _) = corpus(1);
    let a = Checkpoint::init(cfg.clone(), &tcfg(), TrainStage::Finetune).unwrap();
    let b = Checkpoint::init(cfg.clone(), &TrainConfig { seed: 9, ..tcfg() }, TrainStage::Finetune).unwrap();
    let mean = average(&[a.clone(), b.clone()]).unwrap();
    for ((_, _, x), ((_, _, y), (_, _, z))) in mean.model.params.iter().zip(a.model.params.iter().zip(b.model.params.iter())) {
        for ((&m, &p), &q) in x.data().iter().zip(y.data()).zip(z.data()) {
            assert!((m - (p + q) / 2.0).abs() <= 1e-6 * (1.0 + m.abs()));
        }
    }
    assert!(average(&[]).is_err());

    let wide = Checkpoint::init(ModelConfig { d_model: 32, ..cfg }, &tcfg(), TrainStage::Finetune).unwrap();
    assert!(matches!(average(&[a.clone(), wide]), Err(Error::Fingerprint { .. })));

    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (1..=3).map(|e| epoch_path(dir.path(), TrainStage::Finetune, e)).collect();
    for p in &paths {
        a.save(p).unwrap();
    }
    assert!(average_checkpoints(&paths, 0).is_err());
    assert!(average_checkpoints(&paths, 4).is_err());
    assert_eq!(average_checkpoints(&paths, 2).unwrap().to_bytes(), a.to_bytes());
    assert_eq!(paths[0].file_name().unwrap(), "finetune_epoch001.ckpt");
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let (cfg, utts) = corpus(10);
    let init = Checkpoint::init(cfg.clone(), &tcfg(), TrainStage::Pretrain).unwrap();
    let pre = pretrain_ctc(&utts, &[], &cfg, &tcfg(), 0, None).unwrap();
    assert_eq!(pre.to_bytes(), init.to_bytes());
    let ft = finetune(&utts, &[], &pre, &cfg, &tcfg(), 0, None).unwrap();
    assert_eq!(values(&ft.model, ""), values(&pre.model, ""));
    assert_eq!(ft.stage, TrainStage::Finetune);
    assert_eq!(ft.optimizer.step, 0);
}

#[test]
fn pretraining_touches_only_the_acoustic_side() {
    let (cfg, utts) = corpus(20);
    let init = Checkpoint::init(cfg.clone(), &tcfg(), TrainStage::Pretrain).unwrap();
    let mut log = Vec::new();
    let pre = pretrain_ctc(&utts, &[], &cfg, &tcfg(), 1, Some(&mut log)).unwrap();
    assert_ne!(values(&pre.model, "acoustic."), values(&init.model, "acoustic."));
    assert_ne!(values(&pre.model, "ctc."), values(&init.model, "ctc."));
    assert_eq!(values(&pre.model, "semantic."), values(&init.model, "semantic."));
    assert_eq!(values(&pre.model, "decoder."), values(&init.model, "decoder."));

    let log = String::from_utf8(log).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows.len() as u64, pre.optimizer.step);
    let cols: Vec<&str> = rows[0].split('\t').collect();
    assert_eq!(cols.len(), LOG_HEADER.split('\t').count());
    assert_eq!(cols[2], "-");
    assert!(cols[3].parse::<f64>().unwrap().is_finite());
}

#[test]
fn one_joint_step_reaches_every_trainable_parameter() {
    let (cfg, utts) = corpus(6);
    let start = Checkpoint::init(cfg.clone(), &tcfg(), TrainStage::Finetune).unwrap();
    let mut ck = start.clone();
    train_epochs(&mut ck, &utts, &[], &TrainConfig { max_batch_frames: 100_000, ..tcfg() }, 1, None).unwrap();
    assert_eq!(ck.optimizer.step, 1);
    for ((_, name, before), (_, _, after)) in start.model.params.iter().zip(ck.model.params.iter()) {
        assert_ne!(before.data(), after.data(), "{name} did not move");
    }
}

#[test]
fn finetune_rejects_a_different_architecture() {
    let (cfg, utts) = corpus(6);
    let pre = Checkpoint::init(cfg.clone(), &tcfg(), TrainStage::Pretrain).unwrap();
    let other = ModelConfig { decoder_layers: 2, ..cfg.clone() };
    assert!(matches!(finetune(&utts, &[], &pre, &other, &tcfg(), 1, None), Err(Error::Fingerprint { .. })));
    let relaxed = ModelConfig { lambda: 0.0, alpha: 0.5, k: 5, n: 1, ..cfg };
    assert!(finetune(&utts, &[], &pre, &relaxed, &tcfg(), 1, None).is_ok());
}

#[test]
fn training_lowers_the_loss() {
    let (cfg, utts) = corpus(60);
    let mut ck = Checkpoint::init(ModelConfig { dropout: 0.0, ..cfg }, &tcfg(), TrainStage::Finetune).unwrap();
    let (before, _) = validation_loss(&ck.model, &utts, Objective::Joint).unwrap();
    let summaries = train_epochs(&mut ck, &utts, &utts, &tcfg(), 4, None).unwrap();
    assert_eq!(summaries.len(), 4);
    let after = summaries.last().unwrap().valid_loss.unwrap();
    assert!(after < before.unwrap() * 0.8, "{before:?} -> {after}");
}

#[test]
fn ablation_settings_train_and_decode() {
    let (cfg, utts) = corpus(50);
    let variants = [
        ModelConfig { use_shrink: false, ..cfg.clone() },
        ModelConfig { alpha: 0.0, use_shrink: false, ..cfg.clone() },
        ModelConfig { lambda: 0.0, ..cfg.clone() },
        ModelConfig { shrink_mode: ShrinkMode::Average, ..cfg.clone() },
        ModelConfig { shrink_mode: ShrinkMode::ArgmaxFrame, ..cfg.clone() },
        ModelConfig { shrink_mode: ShrinkMode::DropBlank, ..cfg.clone() },
        ModelConfig { gradual_downsampling: false, ..cfg.clone() },
        ModelConfig { unidirectional: false, ..cfg.clone() },
        ModelConfig { k: WAIT_ALL, n: 1, ..cfg.clone() },
    ];
    for v in variants {
        let start = Checkpoint::init(v.clone(), &tcfg(), TrainStage::Finetune).unwrap();
        let ck = finetune(&utts, &utts[..5], &start, &v, &tcfg(), 1, None)
            .unwrap_or_else(|e| panic!("{v:?}: {e}"));
        assert!(ck.model.params.iter().all(|(_, _, t)| t.data().iter().all(|x| x.is_finite())));
        let report = evaluate(&ck.model, &utts[..5], PolicyConfig { k: 2, n: 2, beam: 2 }, 8).unwrap();
        assert!(report.ap > 0.0 && report.ap <= 1.0 || report.rows.iter().all(|r| r.bleu.hyp_len == 0));
        assert!(report.al.is_finite());
    }
}

#[test]
fn evaluation_rejects_an_empty_corpus() {
    let (cfg, _) = corpus(1);
    let m = Model::new(cfg, 1).unwrap();
    assert!(evaluate(&m, &[], PolicyConfig::default(), 8).is_err());
}
