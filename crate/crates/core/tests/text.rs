use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsv_core::audio::FeatureMatrix;
use tdsv_core::text::*;
use tdsv_core::Error;
use tdsv_nn::gradcheck::{check_gradients, check_store_gradients};
use tdsv_nn::{Graph, Mode, ParamStore, Segments, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_log_probs(r: &mut impl Rng, t: usize, v: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| r.gen_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        data.extend(row.iter().map(|x| x - z));
    }
    Tensor::new(&[t, v], data).unwrap()
}

/// Sums the probability of every length-`T` path whose collapse (merge
/// repeats, drop blanks) equals `target`.
fn brute_force_ctc(lp: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, v) = lp.dims2();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &p in &path {
            if Some(p) != prev && p != blank {
                collapsed.push(p);
            }
            prev = Some(p);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(i, &p)| lp.at2(i, p)).sum::<f64>().exp();
        }
    }
    total
}

// ---------------------------------------------------------------- tokens

#[test]
fn canonical_sequences_follow_the_label_table() {
    let d001 = TextLabel::D001.canonical();
    assert_eq!(d001.digit_count(), 10);
    assert_eq!(d001.pause_count(), 0);
    assert_eq!(d001.to_string(), "8173259604");
    assert_eq!(TextLabel::D002.canonical().to_string(), "8173|2596|04");
    assert_eq!(TextLabel::D003.canonical().to_string(), "817|325|960|4");
    assert_eq!(TextLabel::D004.canonical().to_string(), "81|73|25|96|04");
    assert_eq!(TextLabel::D005.canonical().to_string(), "9405|3726|81");
    assert_eq!(TextLabel::D006.canonical().to_string(), "940|537|268|1");
    let pauses: Vec<usize> = TextLabel::ALL.iter().map(|l| l.canonical().pause_count()).collect();
    assert_eq!(pauses, vec![0, 2, 3, 4, 2, 3]);
}

#[test]
fn canonical_sequences_distinct_and_share_digits() {
    let seqs: Vec<TokenSeq> = TextLabel::ALL.iter().map(|l| l.canonical()).collect();
    for i in 0..6 {
        for j in i + 1..6 {
            assert_ne!(seqs[i], seqs[j]);
        }
    }
    let digits = |s: &TokenSeq| {
        let mut d: Vec<usize> = s.ids().into_iter().filter(|&i| i < 10).collect();
        d.sort();
        d
    };
    for s in &seqs[1..4] {
        assert_eq!(digits(s), digits(&seqs[0]));
    }
    assert_eq!(digits(&seqs[4]), digits(&seqs[5]));
    assert!(seqs.iter().all(|s| !s.ids().contains(&BLANK_ID)));
}

#[test]
fn token_seq_round_trips() {
    for l in TextLabel::ALL {
        let s = l.canonical();
        assert_eq!(s.to_string().parse::<TokenSeq>().unwrap(), s);
        assert_eq!(TokenSeq::from_ids(&s.ids()).unwrap(), s);
        assert_eq!(l.id().parse::<TextLabel>().unwrap(), l);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TokenSeq>(&json).unwrap(), s);
    }
    assert!(TokenSeq::new(vec![Token::Blank]).is_err());
    assert!(TokenSeq::from_ids(&[BLANK_ID]).is_err());
    assert!("12x".parse::<TokenSeq>().is_err());
}

#[test]
fn decoder_io_uses_sos_and_eos() {
    let s: TokenSeq = "81|0".parse().unwrap();
    let (inp, lab) = s.decoder_io();
    assert_eq!(inp, vec![SOS_ID, 8, 1, PAUSE_ID, 0]);
    assert_eq!(lab, vec![8, 1, PAUSE_ID, 0, EOS_ID]);
    assert_eq!(CTC_VOCAB, 12);
    assert_eq!(DECODER_VOCAB, 13);
}

// ---------------------------------------------------------------- CTC

#[test]
fn ctc_single_frame() {
    let lp = random_log_probs(&mut rng(1), 1, 4);
    let r = ctc_forward_backward(&lp, &[2], 0).unwrap();
    assert!((r.loss + lp.at2(0, 2)).abs() < 1e-12);
}

#[test]
fn ctc_two_frames_three_alignments() {
    let lp = random_log_probs(&mut rng(2), 2, 4);
    let p = |t: usize, k: usize| lp.at2(t, k).exp();
    let (tok, b) = (1, 0);
    let expect = p(0, tok) * p(1, tok) + p(0, b) * p(1, tok) + p(0, tok) * p(1, b);
    let r = ctc_forward_backward(&lp, &[tok], b).unwrap();
    assert!(((-r.loss).exp() - expect).abs() < 1e-12);
}

#[test]
fn ctc_matches_path_enumeration() {
    let mut r = rng(3);
    let mut checked = 0;
    while checked < 300 {
        let v = r.gen_range(2..=4);
        let t = r.gen_range(1..=6);
        let blank = r.gen_range(0..v);
        let len = r.gen_range(0..=3);
        let target: Vec<usize> = (0..len)
            .map(|_| loop {
                let k = r.gen_range(0..v);
                if k != blank {
                    break k;
                }
            })
            .collect();
        let lp = random_log_probs(&mut r, t, v);
        let brute = brute_force_ctc(&lp, &target, blank);
        match ctc_forward_backward(&lp, &target, blank) {
            Ok(res) => {
                assert!(((-res.loss).exp() - brute).abs() < 1e-8, "{:?} T={} V={}", target, t, v);
                checked += 1;
            }
            Err(Error::Infeasible(_)) => {
                assert_eq!(brute, 0.0);
                assert!(t < min_frames(&target));
            }
            Err(e) => panic!("{}", e),
        }
    }
}

#[test]
fn ctc_infeasible_when_too_short() {
    let lp = random_log_probs(&mut rng(4), 2, 4);
    assert!(matches!(ctc_forward_backward(&lp, &[1, 1], 0), Err(Error::Infeasible(_))));
    assert!(matches!(ctc_forward_backward(&lp, &[1, 2, 3], 0), Err(Error::Infeasible(_))));
    assert!(ctc_forward_backward(&random_log_probs(&mut rng(4), 3, 4), &[1, 1], 0).is_ok());
}

#[test]
fn ctc_depends_on_non_target_tokens_only_through_their_mass() {
    let mut r = rng(5);
    for _ in 0..50 {
        let lp = random_log_probs(&mut r, 6, 6);
        let target = [1, 2, 1];
        let base = ctc_forward_backward(&lp, &target, 0).unwrap().loss;
        // Move probability mass between tokens 3, 4 and 5, none in the target.
        let mut p: Vec<f64> = lp.data().iter().map(|x| x.exp()).collect();
        for t in 0..6 {
            let mass: f64 = (3..6).map(|k| p[t * 6 + k]).sum();
            let w: Vec<f64> = (0..3).map(|_| r.gen_range(0.01..1.0)).collect();
            let ws: f64 = w.iter().sum();
            for (j, k) in (3..6).enumerate() {
                p[t * 6 + k] = mass * w[j] / ws;
            }
        }
        let moved = Tensor::new(&[6, 6], p.iter().map(|x| x.ln()).collect()).unwrap();
        let after = ctc_forward_backward(&moved, &target, 0).unwrap().loss;
        assert!((base - after).abs() < 1e-9);
    }
}

#[test]
fn ctc_loss_uses_transcript_ids() {
    let lp = random_log_probs(&mut rng(6), 8, CTC_VOCAB);
    let seq: TokenSeq = "1|2".parse().unwrap();
    let a = ctc_loss(&lp, &seq).unwrap();
    let b = ctc_forward_backward(&lp, &[1, PAUSE_ID, 2], BLANK_ID).unwrap().loss;
    assert_eq!(a, b);
}

#[test]
fn ctc_batch_gradcheck() {
    let mut r = rng(7);
    let logits = Tensor::new(&[9, 4], (0..36).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let segs = Segments::from_lengths(&[4, 5]);
    let targets = vec![vec![1, 2], vec![3, 3, 1]];
    let rep = check_gradients(&[logits], 1e-5, |g, v| {
        let lp = g.log_softmax_rows(v[0]);
        ctc_loss_batch(g, lp, &segs, &targets, 0).map_err(|e| tdsv_nn::NnError::State(e.to_string()))
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}

// ---------------------------------------------------------------- model

fn toy_cfg() -> TextExtractorConfig {
    TextExtractorConfig {
        input_dim: 3,
        frame_stack: 1,
        encoder_blocks: 1,
        decoder_blocks: 1,
        heads: 2,
        d_k: 2,
        ff_dim: 6,
        embed_dim: 4,
        n_classes: 6,
        conv_kernel: 3,
        attn_hidden: 3,
        loss_weights: LossWeights::default(),
        decoder_targets: DecoderTargets::GroundTruth,
    }
}

fn feats(r: &mut impl Rng, t: usize, d: usize) -> FeatureMatrix {
    let data = (0..t * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    FeatureMatrix::new(Tensor::new(&[t, d], data).unwrap(), 10.0, "x").unwrap()
}

fn build(cfg: TextExtractorConfig, seed: u64) -> (ParamStore, TextExtractor) {
    let mut store = ParamStore::new();
    let m = TextExtractor::new(&mut store, &mut rng(seed), cfg).unwrap();
    (store, m)
}

fn example(r: &mut impl Rng, t: usize, d: usize, label: TextLabel) -> TextExample {
    TextExample {
        utt_id: format!("u{}", t),
        feats: feats(r, t, d),
        label,
        transcript: label.canonical(),
    }
}

#[test]
fn paper_config_values() {
    let c = TextExtractorConfig::paper();
    assert_eq!((c.encoder_blocks, c.decoder_blocks, c.heads, c.d_k), (4, 4, 4, 64));
    assert_eq!(c.d_model(), 256);
    assert_eq!(c.ff_dim, 1024);
    assert_eq!(c.embed_dim, 192);
    assert_eq!(c.n_classes, 6);
    let w = c.loss_weights;
    assert_eq!((w.alpha, w.beta, w.gamma), (0.6, 0.2, 0.2));
    assert_eq!(TextExtractorConfig::default().embed_dim, 192);
}

#[test]
fn paper_encoder_shape() {
    let (store, m) = build(TextExtractorConfig::paper(), 8);
    for t in [1, 7] {
        let f = feats(&mut rng(9), t, 20);
        let x = m.encode(&store, &f).unwrap();
        assert_eq!(x.channel_major().shape(), &[256, t]);
    }
}

#[test]
fn encoder_sees_frame_order() {
    let (store, m) = build(toy_cfg(), 10);
    let mut r = rng(11);
    let f = feats(&mut r, 6, 3);
    let mut rev = f.frames.data().chunks(3).rev().flatten().copied().collect::<Vec<_>>();
    let g = FeatureMatrix::new(Tensor::new(&[6, 3], std::mem::take(&mut rev)).unwrap(), 10.0, "r").unwrap();
    let a = m.encode(&store, &f).unwrap();
    let b = m.encode(&store, &g).unwrap();
    // Row i of the reversed input's encoding would equal row 5-i without positions.
    let mut max = 0.0f64;
    for i in 0..6 {
        for (x, y) in a.time_major().row(i).iter().zip(b.time_major().row(5 - i)) {
            max = max.max((x - y).abs());
        }
    }
    assert!(max > 1e-6);
}

#[test]
fn zero_input_zero_projection_encodes_positions_deterministically() {
    let (mut store, m) = build(toy_cfg(), 12);
    store.insert("text.in_proj.weight", Tensor::zeros(&[3, 4]));
    let z = FeatureMatrix::new(Tensor::zeros(&[5, 3]), 10.0, "z").unwrap();
    let a = m.encode(&store, &z).unwrap();
    let b = m.encode(&store, &z).unwrap();
    assert_eq!(a, b);
    assert!(a.time_major().all_finite());
}

#[test]
fn frame_stacking_shortens_the_sequence() {
    let cfg = TextExtractorConfig {
        frame_stack: 4,
        ..toy_cfg()
    };
    let (store, m) = build(cfg, 13);
    let f = feats(&mut rng(14), 10, 3);
    assert_eq!(m.encode(&store, &f).unwrap().frames(), 3);
}

#[test]
fn classify_and_ctc_shapes() {
    let cfg = TextExtractorConfig {
        embed_dim: 192,
        ..toy_cfg()
    };
    let (store, m) = build(cfg, 15);
    let mut r = rng(16);
    let a = feats(&mut r, 5, 3);
    let b = feats(&mut r, 8, 3);
    let mut g = Graph::new();
    let fwd = m.forward(&mut g, &store, &[&a, &b], Mode::Eval).unwrap();
    assert_eq!(g.value(fwd.e_text).shape(), &[2, 192]);
    assert_eq!(g.value(fwd.logits).shape(), &[2, 6]);
    let lp = g.value(fwd.ctc_log_probs);
    assert_eq!(lp.shape(), &[13, CTC_VOCAB]);
    for i in 0..13 {
        let s: f64 = lp.row(i).iter().map(|x| x.exp()).sum();
        assert!((s.ln()).abs() < 1e-9);
    }
}

#[test]
fn constant_encoder_output_gives_finite_embedding() {
    let (store, m) = build(toy_cfg(), 17);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[6, 4], 0.7));
    let (e, logits) = m.classify(&mut g, &store, x, &Segments::single(6), Mode::Eval).unwrap();
    assert!(g.value(e).all_finite());
    assert!(g.value(logits).all_finite());
}

#[test]
fn classification_loss_is_negative_log_softmax() {
    let (store, m) = build(toy_cfg(), 18);
    let mut r = rng(19);
    let batch: Vec<TextExample> = vec![example(&mut r, 17, 3, TextLabel::D003), example(&mut r, 19, 3, TextLabel::D005)];
    let refs: Vec<&TextExample> = batch.iter().collect();
    let mut g = Graph::new();
    let (fwd, l) = m.losses(&mut g, &store, &refs, Mode::Train).unwrap();
    let logits = g.value(fwd.logits);
    let mut expect = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
        expect += lse - row[ex.label.index()];
    }
    expect /= 2.0;
    assert!((g.value(l.l1).item() - expect).abs() < 1e-12);
    let total = g.value(l.total).item();
    let (l1, l2, l3) = (g.value(l.l1).item(), g.value(l.l2).item(), g.value(l.l3).item());
    assert_eq!(total, 0.6 * l1 + 0.2 * l2 + 0.2 * l3);
}

#[test]
fn loss_breakdown_composition() {
    let b = LossBreakdown::compose(1.0, 2.0, 3.0, &LossWeights::default());
    assert!((b.total - 1.6).abs() < 1e-15);
    assert_eq!(b.total, 0.6 * 1.0 + 0.2 * 2.0 + 0.2 * 3.0);
}

#[test]
fn decoder_cross_entropy_closed_forms() {
    let mut g = Graph::new();
    let uniform = g.input(Tensor::zeros(&[4, DECODER_VOCAB]));
    let l = g.cross_entropy(uniform, &[1, 2, 3, EOS_ID]).unwrap();
    assert!((g.value(l).item() - (DECODER_VOCAB as f64).ln()).abs() < 1e-12);
    let mut peaked = Tensor::full(&[2, DECODER_VOCAB], -1e3);
    peaked.data_mut()[3] = 0.0;
    peaked.data_mut()[DECODER_VOCAB + 7] = 0.0;
    let p = g.input(peaked);
    let l = g.cross_entropy(p, &[3, 7]).unwrap();
    assert!(g.value(l).item().abs() < 1e-9);
}

#[test]
fn decoder_is_causal() {
    let (store, m) = build(toy_cfg(), 20);
    let mut r = rng(21);
    let mem = Tensor::new(&[5, 4], (0..20).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let run = |inp: Vec<usize>| {
        let mut g = Graph::new();
        let x = g.input(mem.clone());
        let y = m.decode(&mut g, &store, x, &Segments::single(5), &[inp]).unwrap();
        g.value(y).clone()
    };
    let a = run(vec![SOS_ID, 1, 2, 3, 4]);
    let b = run(vec![SOS_ID, 1, 9, 0, PAUSE_ID]);
    for i in 0..2 {
        assert_eq!(a.row(i), b.row(i));
    }
    assert!(a.row(2) != b.row(2));

    // No gradient from the loss at position 1 reaches later input embeddings.
    let mut g = Graph::new();
    let x = g.input(mem.clone());
    let emb = g.input(store.get("text.dec.embed").unwrap().clone());
    let _ = emb;
    let y = m.decode(&mut g, &store, x, &Segments::single(5), &[vec![SOS_ID, 1, 2, 3, 4]]).unwrap();
    let row1 = g.gather_rows(y, vec![1]).unwrap();
    let s = g.sum_all(row1);
    let mut st = store.clone();
    st.zero_grads();
    g.backward(s, &mut st).unwrap();
    let ge = st.grad("text.dec.embed").unwrap();
    for tok in [2, 3, 4] {
        assert!(ge.row(tok).iter().all(|&v| v == 0.0), "token {}", tok);
    }
    assert!(ge.row(1).iter().any(|&v| v != 0.0));
}

#[test]
fn empty_decoder_target_is_rejected() {
    let (store, m) = build(toy_cfg(), 22);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 4]));
    assert!(matches!(m.decode(&mut g, &store, x, &Segments::single(3), &[vec![]]), Err(Error::Domain(_))));
}

#[test]
fn ctc_too_short_names_the_utterance() {
    let cfg = TextExtractorConfig {
        frame_stack: 4,
        ..toy_cfg()
    };
    let (store, m) = build(cfg, 23);
    let mut r = rng(24);
    let mut a = example(&mut r, 80, 3, TextLabel::D001);
    a.utt_id = "fine".into();
    let mut b = example(&mut r, 20, 3, TextLabel::D004);
    b.utt_id = "short_one".into();
    let mut g = Graph::new();
    match m.losses(&mut g, &store, &[&a, &b], Mode::Train) {
        Err(Error::Infeasible(msg)) => assert!(msg.contains("short_one"), "{}", msg),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn predicted_targets_follow_classifier() {
    let cfg = TextExtractorConfig {
        decoder_targets: DecoderTargets::Predicted,
        ..toy_cfg()
    };
    let (store, m) = build(cfg, 25);
    let mut r = rng(26);
    let ex = [example(&mut r, 20, 3, TextLabel::D002), example(&mut r, 20, 3, TextLabel::D006)];
    let refs: Vec<&TextExample> = ex.iter().collect();
    let mut g = Graph::new();
    let (fwd, _) = m.losses(&mut g, &store, &refs, Mode::Train).unwrap();
    let labels = m.decoder_labels(&g, &fwd, &[TextLabel::D002, TextLabel::D006]);
    let logits = g.value(fwd.logits);
    for (i, l) in labels.iter().enumerate() {
        let row = logits.row(i);
        let best = (0..6).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        assert_eq!(l.index(), best);
    }
}

#[test]
fn total_gradient_is_weighted_sum_of_branch_gradients() {
    let (store, m) = build(toy_cfg(), 27);
    let mut r = rng(28);
    let ex = [example(&mut r, 16, 3, TextLabel::D002), example(&mut r, 18, 3, TextLabel::D004)];
    let refs: Vec<&TextExample> = ex.iter().collect();
    let grad_of = |pick: usize| {
        let mut g = Graph::new();
        let (_, l) = m.losses(&mut g, &store, &refs, Mode::Train).unwrap();
        let v = [l.l1, l.l2, l.l3, l.total][pick];
        let mut st = store.clone();
        st.zero_grads();
        g.backward(v, &mut st).unwrap();
        st
    };
    let parts: Vec<ParamStore> = (0..4).map(grad_of).collect();
    for name in store.names().filter(|n| n.starts_with("text.enc") || n.starts_with("text.in_proj")) {
        let total = parts[3].grad(name).unwrap();
        for j in 0..total.numel() {
            let combo = 0.6 * parts[0].grad(name).unwrap().data()[j]
                + 0.2 * parts[1].grad(name).unwrap().data()[j]
                + 0.2 * parts[2].grad(name).unwrap().data()[j];
            assert!((total.data()[j] - combo).abs() < 1e-12 * (1.0 + combo.abs()), "{}", name);
        }
    }
}

#[test]
fn eval_embedding_is_deterministic() {
    let (store, m) = build(toy_cfg(), 29);
    let f = feats(&mut rng(30), 12, 3);
    let a = m.embed_batch(&store, &[&f]).unwrap();
    let b = m.embed_batch(&store, &[&f]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, 4]);
}

fn jitter(store: &mut ParamStore, r: &mut impl Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
}

#[test]
fn classify_head_gradcheck() {
    let (mut store, m) = build(toy_cfg(), 41);
    let mut r = rng(42);
    jitter(&mut store, &mut r);
    let x = Tensor::new(&[11, 4], (0..44).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let segs = Segments::from_lengths(&[5, 6]);
    let rep = check_store_gradients(&store, &[x], 1e-5, 24, |g, st, v| {
        let (_, logits) = m.classify(g, st, v[0], &segs, Mode::Train)?;
        Ok::<_, Error>(g.cross_entropy(logits, &[1, 4])?)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}

#[test]
fn ctc_head_gradcheck() {
    let (mut store, m) = build(toy_cfg(), 33);
    let mut r = rng(34);
    jitter(&mut store, &mut r);
    let x = Tensor::new(&[13, 4], (0..52).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let segs = Segments::from_lengths(&[6, 7]);
    let targets = vec![vec![1, PAUSE_ID, 2], vec![3, 3]];
    let rep = check_store_gradients(&store, &[x], 1e-5, 24, |g, st, v| {
        let lp = m.ctc_log_probs(g, st, v[0], &segs, Mode::Train)?;
        ctc_loss_batch(g, lp, &segs, &targets, BLANK_ID)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}

#[test]
fn decoder_gradcheck() {
    let (mut store, m) = build(toy_cfg(), 35);
    let mut r = rng(36);
    jitter(&mut store, &mut r);
    let mem = Tensor::new(&[9, 4], (0..36).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let segs = Segments::from_lengths(&[4, 5]);
    let rep = check_store_gradients(&store, &[mem], 1e-5, 24, |g, st, v| {
        let y = m.decode(g, st, v[0], &segs, &[vec![SOS_ID, 1, 2], vec![SOS_ID, PAUSE_ID]])?;
        Ok::<_, Error>(g.cross_entropy(y, &[1, 2, EOS_ID, PAUSE_ID, EOS_ID])?)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}

#[test]
fn full_text_loss_gradcheck() {
    let (mut store, m) = build(toy_cfg(), 37);
    let mut r = rng(38);
    jitter(&mut store, &mut r);
    let ex = [example(&mut r, 16, 3, TextLabel::D001), example(&mut r, 17, 3, TextLabel::D004)];
    let refs: Vec<&TextExample> = ex.iter().collect();
    let rep = check_store_gradients(&store, &[], 1e-5, 8, |g, st, _| {
        let (_, l) = m.losses(g, st, &refs, Mode::Train)?;
        Ok::<_, Error>(l.total)
    })
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
}



