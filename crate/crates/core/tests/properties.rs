mod common;

use proptest::prelude::*;
use simulst::ctc::{self, detect_boundaries, SegmentSet};
use simulst::data::{SyntheticTask, SyntheticTaskConfig};
use simulst::metrics::{average_lagging, average_proportion, bleu_stats, corpus_bleu, LatencyRecord};
use simulst::model::{build_cross_attention_mask, visible_segments, Model, ModelConfig, Objective};
use simulst::numerics::{Tape, Tensor};
use simulst::shrink::{segment_weights, weighted_shrink, ShrinkConfig, ShrinkMode};
use simulst::train::{train_epochs, Checkpoint, TrainConfig, TrainStage};

fn split_at_boundaries(path: &[usize], blank: usize) -> Vec<(usize, usize)> {
    let mut cuts = vec![0];
    for t in 1..path.len() {
        if path[t - 1] != blank && path[t] != path[t - 1] {
            cuts.push(t);
        }
    }
    cuts.push(path.len());
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

#[test]
fn boundaries_match_rule_on_every_short_path() {
    for classes in 2..=3usize {
        let blank = classes - 1;
        for frames in 1..=5u32 {
            for code in 0..classes.pow(frames) {
                let path: Vec<usize> = (0..frames).map(|i| code / classes.pow(i) % classes).collect();
                let segs = detect_boundaries(&path, blank).unwrap();
                assert_eq!(segs.intervals(), split_at_boundaries(&path, blank).as_slice(), "{path:?}");
                let collapsed = ctc::collapse_path(&path, blank).len();
                let trailing = usize::from(*path.last().unwrap() == blank);
                assert_eq!(segs.len(), collapsed + trailing, "{path:?}");
            }
        }
    }
}

fn segments_of(cuts: &[usize], frames: usize) -> Vec<(usize, usize)> {
    let mut c: Vec<usize> = cuts.iter().map(|&x| x % frames).filter(|&x| x > 0).collect();
    c.push(0);
    c.push(frames);
    c.sort_unstable();
    c.dedup();
    c.windows(2).map(|w| (w[0], w[1])).collect()
}

proptest! {
    #[test]
    fn detected_segments_partition_the_path(path in prop::collection::vec(0usize..4, 1..40)) {
        let segs = detect_boundaries(&path, 3).unwrap();
        let iv = segs.intervals();
        prop_assert_eq!(iv[0].0, 0);
        prop_assert_eq!(iv.last().unwrap().1, path.len());
        for w in iv.windows(2) {
            prop_assert_eq!(w[0].1, w[1].0);
        }
        prop_assert!(iv.iter().all(|&(a, b)| a < b));
    }

    #[test]
    fn shrink_weights_are_distributions(
        blank in prop::collection::vec(0.0f64..=1.0, 1..20),
        cuts in prop::collection::vec(0usize..20, 0..6),
        mu in 0.0f64..100.0,
    ) {
        let segs = segments_of(&cuts, blank.len());
        let w = segment_weights(&blank, &segs, mu);
        for &(a, b) in &segs {
            prop_assert!(w[a..b].iter().all(|&x| x >= 0.0));
            prop_assert!((w[a..b].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharper_shrinking_favours_the_least_blank_frame(
        blank in prop::collection::vec(0.0f64..=1.0, 2..12),
        lo in 0.0f64..20.0,
        step in 0.0f64..20.0,
    ) {
        let min = blank.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(blank.iter().filter(|&&p| p == min).count() == 1);
        let i = blank.iter().position(|&p| p == min).unwrap();
        let seg = [(0, blank.len())];
        let a = segment_weights(&blank, &seg, lo)[i];
        let b = segment_weights(&blank, &seg, lo + step)[i];
        prop_assert!(b >= a - 1e-15);
    }

    #[test]
    fn shrunk_rows_match_segments(frames in 1usize..16, d in 1usize..5, cuts in prop::collection::vec(0usize..16, 0..5)) {
        let segs = SegmentSet::new(frames, segments_of(&cuts, frames)).unwrap();
        let states = Tensor::new(vec![frames, d], (0..frames * d).map(|x| x as f64).collect()).unwrap();
        let blank = vec![0.5; frames];
        for mode in [ShrinkMode::Weighted, ShrinkMode::Average, ShrinkMode::ArgmaxFrame] {
            let out = weighted_shrink(&states, &blank, &segs, &ShrinkConfig { mu: 1.0, mode }).unwrap();
            prop_assert_eq!(out.shape(), &[segs.len(), d][..]);
        }
    }

    #[test]
    fn mask_grows_by_stride(k in 1usize..8, n in 1usize..5, t_y in 1usize..30, s in 1usize..30) {
        let mask = build_cross_attention_mask(k, n, t_y, s).unwrap();
        let counts: Vec<usize> = mask.chunks(s).map(|r| r.iter().filter(|&&b| b).count()).collect();
        for (i, &c) in counts.iter().enumerate() {
            let t = i + 1;
            prop_assert_eq!(c, visible_segments(k, n, t, s));
            prop_assert!(mask[i * s..i * s + c].iter().all(|&b| b));
            if t > n {
                let before = counts[i - n];
                prop_assert!(c == (before + n).min(s));
            }
            if i > 0 {
                prop_assert!(c >= counts[i - 1]);
            }
        }
    }

    #[test]
    fn offline_delays_give_unit_proportion(frames in 1usize..50, len in 1usize..20) {
        let total = frames as f64 * 80.0;
        let rec = LatencyRecord { delays_ms: vec![total; len], source_frames: frames, frame_ms: 80.0, ref_len: len, offset_ms: 0.0 };
        prop_assert_eq!(average_proportion(&rec).unwrap(), 1.0);
    }

    #[test]
    fn earlier_delay_lowers_proportion(
        frames in 2usize..50,
        raw in prop::collection::vec(0usize..50, 1..15),
        pick in 0usize..15,
    ) {
        let mut steps: Vec<usize> = raw.iter().map(|&r| r % (frames + 1)).collect();
        steps.sort_unstable();
        let rec = |s: &[usize]| LatencyRecord {
            delays_ms: s.iter().map(|&x| x as f64 * 80.0).collect(),
            source_frames: frames,
            frame_ms: 80.0,
            ref_len: s.len(),
            offset_ms: 0.0,
        };
        let base = rec(&steps);
        let ap = average_proportion(&base).unwrap();
        prop_assert!(ap > 0.0 || steps.iter().all(|&x| x == 0));
        prop_assert!(ap <= 1.0);
        prop_assert_eq!(ap == 1.0, steps.iter().all(|&x| x == frames));
        let i = pick % steps.len();
        if steps[i] > 0 && (i == 0 || steps[i - 1] < steps[i]) {
            let mut lower = steps.clone();
            lower[i] -= 1;
            prop_assert!(average_proportion(&rec(&lower)).unwrap() < ap);
        }
        prop_assert_eq!(average_proportion(&base).unwrap().to_bits(), ap.to_bits());
        prop_assert_eq!(average_lagging(&base).unwrap().to_bits(), average_lagging(&base).unwrap().to_bits());
    }

    #[test]
    fn synced_delays_have_zero_lag(len in 1usize..12, per in 1usize..4) {
        let frames = len * per;
        let rec = LatencyRecord {
            delays_ms: (0..len).map(|i| (i * per) as f64 * 80.0).collect(),
            source_frames: frames,
            frame_ms: 80.0,
            ref_len: len,
            offset_ms: 0.0,
        };
        prop_assert_eq!(average_lagging(&rec).unwrap(), 0.0);
    }

    #[test]
    fn bleu_of_identity_and_permutation(
        sents in prop::collection::vec(prop::collection::vec(0u8..6, 4..10), 1..6),
        noise in prop::collection::vec(0u8..6, 4..10),
    ) {
        let refs: Vec<String> = sents.iter().map(|s| s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")).collect();
        prop_assert!((corpus_bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
        let mut hyps = refs.clone();
        hyps[0] = noise.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let forward = corpus_bleu(&hyps, &refs, 4).unwrap();
        let (rh, rr): (Vec<_>, Vec<_>) = hyps.iter().cloned().zip(refs.iter().cloned()).rev().unzip();
        prop_assert_eq!(forward, corpus_bleu(&rh, &rr, 4).unwrap());
        prop_assert!(bleu_stats(&hyps[0], &refs[0], 4).hyp_len == noise.len());
    }
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut store = simulst::numerics::ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap().with_grad());
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq);
    tape.backward_into(loss, &mut store).unwrap();
    let once = store.get(id).grad.clone().unwrap();
    tape.backward_into(loss, &mut store).unwrap();
    let twice = store.get(id).grad.clone().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(*b, 2.0 * a);
    }
}

#[test]
fn two_hundred_steps_halve_the_loss() {
    let task = SyntheticTask::new(SyntheticTaskConfig { feat_dim: 4, vocab_size: 6, max_len: 4, ..Default::default() })
        .unwrap();
    let utts = task.generate(4).unwrap().utterances;
    let cfg = ModelConfig {
        src_vocab: task.src_vocab().len(),
        tgt_vocab: task.tgt_vocab().len(),
        dropout: 0.0,
        ..common::tiny_config()
    };
    let tcfg = TrainConfig { max_batch_frames: 100_000, warmup: 20, lr: 3e-3, ..Default::default() };
    let mut ck = Checkpoint::init(cfg, &tcfg, TrainStage::Finetune).unwrap();
    let loss = |m: &Model| -> f64 { utts.iter().map(|u| m.evaluate_loss(u, Objective::Joint).unwrap().unwrap().total).sum() };
    let before = loss(&ck.model);
    train_epochs(&mut ck, &utts, &[], &tcfg, 200, None).unwrap();
    assert_eq!(ck.optimizer.step, 200);
    let after = loss(&ck.model);
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
