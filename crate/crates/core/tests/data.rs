use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdsv_core::audio::{mfcc, MfccConfig};
use tdsv_core::data::*;
use tdsv_core::scoring::TrialFamily;
use tdsv_core::text::{TextLabel, Token};
use tdsv_core::Error;
use tdsv_nn::layers::Linear;
use tdsv_nn::{adam_step, AdamState, Graph, ParamStore, Tensor};

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| synthesize_corpus(&CorpusConfig::default()).unwrap())
}

#[test]
fn speaker_draws_are_deterministic_and_in_range() {
    assert_eq!(synth_speaker(5, 42), synth_speaker(5, 42));
    assert_ne!(synth_speaker(5, 42), synth_speaker(5, 43));
    for p in synth_speakers(60, 42) {
        assert!((F0_RANGE.0..=F0_RANGE.1).contains(&p.f0_hz));
        assert!((FORMANT_SHIFT_RANGE.0..=FORMANT_SHIFT_RANGE.1).contains(&p.formant_shift));
        for g in p.resonance_gains {
            assert!((RESONANCE_GAIN_RANGE.0..=RESONANCE_GAIN_RANGE.1).contains(&g));
        }
    }
    assert_eq!(synth_speakers(8, 42)[..5], synth_speakers(5, 42)[..]);
}

#[test]
fn small_populations_keep_a_four_hz_pitch_gap() {
    for seed in [1, 42, 99] {
        let s = synth_speakers(20, seed);
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert!((s[i].f0_hz - s[j].f0_hz).abs() >= MIN_F0_GAP_HZ, "seed {seed}: {i} vs {j}");
            }
        }
    }
}

#[test]
fn sixty_speakers_are_pairwise_distinct() {
    // 60 pitches 4 Hz apart cannot fit in a 170 Hz range.
    let capacity = ((F0_RANGE.1 - F0_RANGE.0) / MIN_F0_GAP_HZ) as usize + 1;
    assert!(capacity < 60);
    let s = synth_speakers(60, 42);
    for i in 0..60 {
        for j in i + 1..60 {
            let df = (s[i].f0_hz - s[j].f0_hz).abs();
            let ds = (s[i].formant_shift - s[j].formant_shift).abs();
            assert!(df >= MIN_F0_GAP_HZ || ds >= MIN_FORMANT_GAP, "{i} vs {j}");
        }
    }
}

#[test]
fn transcripts_follow_label_structure() {
    let p = synth_speaker(0, 42);
    let (_, t1) = synth_utterance(&p, TextLabel::D001, 0);
    assert_eq!(t1.digit_count(), 10);
    assert_eq!(t1.pause_count(), 0);
    let (_, t2) = synth_utterance(&p, TextLabel::D002, 0);
    let pauses: Vec<usize> = t2
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Token::Pause)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(pauses, vec![4, 9]);
    assert_eq!(t2.to_string(), "8173|2596|04");
    let expected = [0, 2, 3, 4, 2, 3];
    for (label, &n) in TextLabel::ALL.iter().zip(&expected) {
        let (_, t) = synth_utterance(&p, *label, 3);
        assert_eq!(t.pause_count(), n);
        assert_eq!(t.digit_count(), 10);
        assert_eq!(t, label.canonical());
    }
}

#[test]
fn synthesis_is_bit_identical_per_seed() {
    let p = synth_speaker(3, 42);
    let (a, _) = synth_utterance(&p, TextLabel::D004, 7);
    let (b, _) = synth_utterance(&p, TextLabel::D004, 7);
    assert_eq!(a, b);
    let (c, _) = synth_utterance(&p, TextLabel::D004, 8);
    assert_ne!(a, c);
}

#[test]
fn token_durations_stay_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ms = |n: usize| n as f64 * 1000.0 / SYNTH_RATE as f64;
    for label in TextLabel::ALL {
        for _ in 0..200 {
            for tp in plan_tokens(&label.canonical(), &mut rng) {
                match tp.token {
                    Token::Digit(_) => assert!((180.0..=260.0).contains(&ms(tp.samples)), "{}", ms(tp.samples)),
                    _ => assert!((150.0..=350.0).contains(&ms(tp.samples))),
                }
            }
        }
    }
}

#[test]
fn utterances_last_two_to_six_seconds() {
    for r in corpus().manifest.iter() {
        let d = corpus().waveform(&r.utt_id).unwrap().duration_secs();
        assert!((2.0..=6.0).contains(&d), "{}: {d}", r.utt_id);
    }
}

#[test]
fn pauses_are_near_silent() {
    let p = synth_speaker(1, 42);
    let (w, _) = synth_utterance(&p, TextLabel::D002, 0);
    // Energy in 20 ms windows: the quietest window sits at the noise floor,
    // about 30 dB under the loudest.
    let x = w.samples();
    let win = 320;
    let e: Vec<f64> = x.chunks(win).map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).collect();
    let max = e.iter().cloned().fold(0.0, f64::max);
    let min = e.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(10.0 * (max / min).log10() > 25.0);
}

#[test]
fn corpus_sizes_and_tags() {
    assert_eq!(corpus().manifest.len(), 1200);
    let cfg = CorpusConfig {
        n_speakers: 3,
        utts_per_label: 2,
        augment: true,
        ..CorpusConfig::default()
    };
    let aug = synthesize_corpus(&cfg).unwrap();
    assert_eq!(aug.manifest.len(), 3 * 6 * 2 * 3);
    for tag in AugTag::ALL {
        assert_eq!(aug.manifest.iter().filter(|r| r.augmentation == tag).count(), 36);
    }
    let r = aug.manifest.iter().find(|r| r.augmentation == AugTag::Speed09).unwrap();
    let orig = aug.waveform(&r.source_utt).unwrap().len() as f64;
    let fast = aug.waveform(&r.utt_id).unwrap().len() as f64;
    assert!((fast - orig / 0.9).abs() <= 1.0);
    assert!(matches!(
        synthesize_corpus(&CorpusConfig {
            n_speakers: 1,
            ..CorpusConfig::default()
        }),
        Err(Error::Domain(_))
    ));
}

#[test]
fn manifest_round_trips_and_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_speakers: 2,
        utts_per_label: 1,
        augment: true,
        seed: 5,
    };
    let c = build_corpus(&cfg, dir.path()).unwrap();
    let text = c.manifest.to_json().unwrap();
    assert_eq!(CorpusManifest::from_json(&text).unwrap(), c.manifest);
    assert!(text.contains("\"speed0.9\"") && text.contains("\"d003\"") && text.contains("817|325|960|4"));
    let (m, audio) = load_corpus(dir.path()).unwrap();
    assert_eq!(m, c.manifest);
    for r in m.iter() {
        let a = &audio[&r.utt_id];
        let b = c.waveform(&r.utt_id).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| (x - y).abs() <= 1.0 / 32768.0));
    }
    match load_corpus(&dir.path().join("missing")) {
        Err(Error::Io { path, .. }) => assert!(path.ends_with(MANIFEST_FILE)),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn manifest_rejects_duplicates_and_wrong_transcripts() {
    let mut recs = corpus().manifest.utterances[..2].to_vec();
    recs[1].utt_id = recs[0].utt_id.clone();
    assert!(matches!(CorpusManifest::new(recs), Err(Error::Domain(_))));
    let mut recs = corpus().manifest.utterances[..1].to_vec();
    recs[0].transcript = TextLabel::D006.canonical();
    assert!(matches!(CorpusManifest::new(recs), Err(Error::Domain(_))));
}

#[test]
fn split_is_stratified_and_leak_free() {
    let (train, eval) = split_train_eval(&corpus().manifest, 0.8, 42).unwrap();
    assert_eq!(train.len(), 960);
    assert_eq!(eval.len(), 240);
    let a: HashSet<_> = train.iter().map(|r| &r.utt_id).collect();
    assert!(eval.iter().all(|r| !a.contains(&r.utt_id)));
    let mut cells: HashMap<(String, TextLabel), usize> = HashMap::new();
    for r in eval.iter() {
        *cells.entry((r.speaker_id.clone(), r.label)).or_default() += 1;
    }
    assert_eq!(cells.len(), 120);
    assert!(cells.values().all(|&n| n == 2));

    let aug = synthesize_corpus(&CorpusConfig {
        n_speakers: 3,
        utts_per_label: 5,
        augment: true,
        seed: 1,
    })
    .unwrap();
    let (tr, ev) = split_train_eval(&aug.manifest, 0.8, 3).unwrap();
    assert_eq!(tr.len() + ev.len(), aug.manifest.len());
    let side: HashMap<_, _> = tr.iter().map(|r| (r.utt_id.clone(), 0)).chain(ev.iter().map(|r| (r.utt_id.clone(), 1))).collect();
    for r in aug.manifest.iter() {
        assert_eq!(side[&r.utt_id], side[&r.source_utt], "{} leaked", r.utt_id);
    }
    assert_eq!(split_train_eval(&aug.manifest, 0.8, 3).unwrap(), (tr, ev));
}

#[test]
fn singleton_cells_stay_in_training() {
    let m = CorpusManifest::new(
        corpus()
            .manifest
            .iter()
            .filter(|r| r.utt_id.ends_with("_00"))
            .cloned()
            .collect(),
    )
    .unwrap();
    let (train, eval) = split_train_eval(&m, 0.8, 1).unwrap();
    assert_eq!(train.len(), m.len());
    assert!(eval.is_empty());
}

#[test]
fn trial_families_have_exact_counts() {
    let (_, eval) = split_train_eval(&corpus().manifest, 0.8, 42).unwrap();
    let trials = make_trials(&eval, &TrialPolicy::per_family(100, 7)).unwrap();
    assert_eq!(trials.len(), 400);
    for f in TrialFamily::ALL {
        assert_eq!(trials.count(f), 100);
    }
    let by_id: HashMap<_, _> = eval.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    for t in trials.iter() {
        assert_ne!(t.enroll, t.test);
        let (a, b) = (by_id[t.enroll.as_str()], by_id[t.test.as_str()]);
        assert_eq!(t.text_matched, a.label == b.label);
        assert_eq!(t.is_target, a.speaker_id == b.speaker_id);
    }
    assert_eq!(make_trials(&eval, &TrialPolicy::per_family(100, 7)).unwrap(), trials);
}

#[test]
fn exhaustive_trials_cover_every_pair() {
    let (_, eval) = split_train_eval(&corpus().manifest, 0.8, 42).unwrap();
    let trials = make_trials(&eval, &TrialPolicy::exhaustive(0)).unwrap();
    assert_eq!(trials.len(), 240 * 239 / 2);
    assert_eq!(trials.count(TrialFamily::TargetMatched), 120);
}

#[test]
fn oversized_requests_name_the_family() {
    let (_, eval) = split_train_eval(&corpus().manifest, 0.8, 42).unwrap();
    match make_trials(&eval, &TrialPolicy::per_family(500, 0)) {
        Err(Error::Protocol(m)) => assert!(m.contains("target-matched"), "{m}"),
        other => panic!("{other:?}"),
    }
    let one_speaker = CorpusManifest::new(eval.iter().filter(|r| r.speaker_id == "spk000").cloned().collect()).unwrap();
    assert!(matches!(make_trials(&one_speaker, &TrialPolicy::per_family(1, 0)), Err(Error::Protocol(_))));
}

#[test]
fn text_labels_are_linearly_separable_from_mean_mfcc() {
    let cfg = MfccConfig {
        cms: false,
        ..MfccConfig::default()
    };
    let (train, eval) = split_train_eval(&corpus().manifest, 0.8, 42).unwrap();
    let feats = |m: &CorpusManifest| -> (Vec<Vec<f64>>, Vec<usize>) {
        m.iter()
            .map(|r| {
                let f = mfcc(corpus().waveform(&r.utt_id).unwrap(), &cfg).unwrap();
                (f.mean(), r.label.index())
            })
            .unzip()
    };
    let (xtr, ytr) = feats(&train);
    let (xev, yev) = feats(&eval);
    let d = xtr[0].len();
    let mean: Vec<f64> = (0..d).map(|j| xtr.iter().map(|x| x[j]).sum::<f64>() / xtr.len() as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (xtr.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / xtr.len() as f64).sqrt())
        .collect();
    let to_tensor = |xs: &[Vec<f64>]| {
        let data = xs.iter().flat_map(|x| (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect::<Vec<_>>()).collect();
        Tensor::new(&[xs.len(), d], data).unwrap()
    };
    let (ttr, tev) = (to_tensor(&xtr), to_tensor(&xev));
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "probe", d, 6);
    let mut adam = AdamState::new(0.05);
    adam.epoch_decay = 1.0;
    for _ in 0..1500 {
        let mut g = Graph::new();
        let x = g.input(ttr.clone());
        let z = lin.forward(&mut g, &store, x).unwrap();
        let loss = g.cross_entropy(z, &ytr).unwrap();
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();
        adam_step(&mut store, &mut adam);
    }
    let mut g = Graph::new();
    let x = g.input(tev);
    let z = lin.forward(&mut g, &store, x).unwrap();
    let z = g.value(z);
    let correct = (0..yev.len())
        .filter(|&i| {
            let row = &z.data()[i * 6..(i + 1) * 6];
            let arg = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            arg == yev[i]
        })
        .count();
    let acc = correct as f64 / yev.len() as f64;
    println!("mean-MFCC linear probe accuracy: {acc:.3}");
    assert!(acc > 0.9, "accuracy {acc}");
}
