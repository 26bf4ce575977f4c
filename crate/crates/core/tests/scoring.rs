use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdsv_core::scoring::*;
use tdsv_core::Error;

fn set(targets: &[f64], nontargets: &[f64]) -> ScoreSet {
    let mut s = targets.to_vec();
    s.extend_from_slice(nontargets);
    let mut l = vec![true; targets.len()];
    l.extend(vec![false; nontargets.len()]);
    ScoreSet::new(s, l).unwrap()
}

fn emb(v: &[f64]) -> Embedding {
    Embedding::new(v.to_vec(), EmbeddingKind::Speaker).unwrap()
}

// Direct counting at every candidate threshold, then the crossing rule.
fn brute_points(s: &ScoreSet) -> Vec<(f64, f64, f64)> {
    let mut u = s.scores.clone();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let mut ts = vec![u[0] - 1.0];
    ts.extend(u.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    ts.push(u[u.len() - 1] + 1.0);
    let nt = s.labels.iter().filter(|&&l| l).count() as f64;
    let nn = s.labels.len() as f64 - nt;
    ts.into_iter()
        .map(|t| {
            let fa = (0..s.len()).filter(|&i| !s.labels[i] && s.scores[i] >= t).count() as f64 / nn;
            let fr = (0..s.len()).filter(|&i| s.labels[i] && s.scores[i] < t).count() as f64 / nt;
            (t, fa, fr)
        })
        .collect()
}

fn brute_eer(s: &ScoreSet) -> f64 {
    let p = brute_points(s);
    for i in 0..p.len() {
        let d = p[i].1 - p[i].2;
        if d == 0.0 {
            return p[i].1;
        }
        if d < 0.0 {
            let dq = p[i - 1].1 - p[i - 1].2;
            let lam = dq / (dq - d);
            return p[i - 1].1 + lam * (p[i].1 - p[i - 1].1);
        }
    }
    unreachable!()
}

// Every achievable (FAR, FRR) pair arises at some score value or above all.
fn brute_min_dcf(s: &ScoreSet, c: &DcfConfig) -> f64 {
    let nt = s.labels.iter().filter(|&&l| l).count() as f64;
    let nn = s.labels.len() as f64 - nt;
    let mut ts = s.scores.clone();
    ts.push(f64::INFINITY);
    let norm = (c.c_miss * c.p_target).min(c.c_fa * (1.0 - c.p_target));
    ts.iter()
        .map(|&t| {
            let fa = (0..s.len()).filter(|&i| !s.labels[i] && s.scores[i] >= t).count() as f64 / nn;
            let fr = (0..s.len()).filter(|&i| s.labels[i] && s.scores[i] < t).count() as f64 / nt;
            (c.c_miss * c.p_target * fr + c.c_fa * (1.0 - c.p_target) * fa) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, quantise: bool) -> ScoreSet {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let scores = labels
            .iter()
            .map(|&l| {
                let v = rng.gen_range(-1.0..1.0) + if l { 0.4 } else { 0.0 };
                if quantise {
                    (v * 5.0_f64).round() / 5.0
                } else {
                    v
                }
            })
            .collect();
        return ScoreSet::new(scores, labels).unwrap();
    }
}

#[test]
fn eer_perfect_separation_is_zero() {
    let e = compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
    assert_eq!(e.eer, 0.0);
    assert!(e.threshold > 0.2 && e.threshold <= 0.8);
}

#[test]
fn eer_interleaved_example_is_half() {
    let s = set(&[0.8, 0.2], &[0.7, 0.1]);
    let e = compute_eer(&s).unwrap();
    assert!((e.eer - 0.5).abs() < 1e-12);
    assert!((e.eer - brute_eer(&s)).abs() < 1e-12);
    assert!(e.threshold > 0.2 && e.threshold < 0.7);
}

#[test]
fn eer_of_coin_flip_labels_is_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
    let e = compute_eer(&ScoreSet::new(scores, labels).unwrap()).unwrap();
    assert!((0.45..=0.55).contains(&e.eer), "{}", e.eer);
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = DcfConfig::default();
    for trial in 0..300 {
        let n = rng.gen_range(2..=200);
        let s = random_set(&mut rng, n, trial % 2 == 0);
        let e = compute_eer(&s).unwrap().eer;
        assert!((e - brute_eer(&s)).abs() < 1e-12, "eer {e} vs {}", brute_eer(&s));
        let d = compute_min_dcf(&s, &cfg).unwrap();
        assert!((d - brute_min_dcf(&s, &cfg)).abs() < 1e-12);
        // An inverted detector can reach 1; the bound holds for the better orientation.
        let flipped = ScoreSet::new(s.scores.iter().map(|v| -v).collect(), s.labels.clone()).unwrap();
        let best = e.min(compute_eer(&flipped).unwrap().eer);
        assert!(e >= 0.0 && e <= 1.0);
        assert!(best <= 0.5 + 1.0 / n as f64, "n {n}: {best}");
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn inverted_detector_exceeds_half() {
    let e = compute_eer(&set(&[0.1], &[0.9])).unwrap();
    assert_eq!(e.eer, 1.0);
}

#[test]
fn min_dcf_degenerate_cases() {
    let cfg = DcfConfig::default();
    assert_eq!(compute_min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), &cfg).unwrap(), 0.0);
    let d = compute_min_dcf(&set(&[0.5, 0.5], &[0.5, 0.5, 0.5]), &cfg).unwrap();
    assert!((d - 1.0).abs() < 1e-12);
}

#[test]
fn single_class_is_a_domain_error() {
    let s = set(&[0.1, 0.2], &[]);
    assert!(matches!(compute_eer(&s), Err(Error::Domain(_))));
    assert!(matches!(compute_min_dcf(&s, &DcfConfig::default()), Err(Error::Domain(_))));
    assert!(matches!(compute_auc(&set(&[], &[0.3])), Err(Error::Domain(_))));
}

#[test]
fn invalid_dcf_config_rejected() {
    let s = set(&[0.9], &[0.1]);
    let bad = DcfConfig {
        p_target: 1.0,
        ..DcfConfig::default()
    };
    assert!(matches!(compute_min_dcf(&s, &bad), Err(Error::Domain(_))));
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(2..60);
        let s = random_set(&mut rng, n, true);
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s.labels[i] && !s.labels[j] {
                    pairs += 1.0;
                    wins += if s.scores[i] > s.scores[j] {
                        1.0
                    } else if s.scores[i] == s.scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert!((compute_auc(&s).unwrap() - wins / pairs).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn eer_is_rank_invariant(seed in 0u64..10_000, n in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_set(&mut rng, n, false);
        let pos = ScoreSet::new(s.scores.iter().map(|v| v + 2.0).collect(), s.labels.clone()).unwrap();
        let e = compute_eer(&pos).unwrap().eer;
        for f in [|x: f64| 2.0 * x + 1.0, |x: f64| x * x * x] {
            let t = ScoreSet::new(pos.scores.iter().map(|&v| f(v)).collect(), pos.labels.clone()).unwrap();
            prop_assert!((compute_eer(&t).unwrap().eer - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mul_fusion_then_cosine_is_operand_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 8),
        b in prop::collection::vec(-1.0f64..1.0, 8),
        c in prop::collection::vec(-1.0f64..1.0, 8),
        d in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let (a, b, c, d) = (emb(&a), emb(&b), emb(&c), emb(&d));
        let x = fuse(&a, &b, &Fuser::Mul).unwrap();
        let xs = fuse(&b, &a, &Fuser::Mul).unwrap();
        prop_assert_eq!(&x.vector, &xs.vector);
        let y = fuse(&c, &d, &Fuser::Mul).unwrap();
        let ys = fuse(&d, &c, &Fuser::Mul).unwrap();
        if x.norm() > 0.0 && y.norm() > 0.0 {
            prop_assert_eq!(cosine_score(&x, &y).unwrap(), cosine_score(&xs, &ys).unwrap());
        }
    }
}

#[test]
fn fusion_identities() {
    let spk = emb(&[0.3, -1.2, 2.0, 0.5]);
    let zero = emb(&[0.0; 4]);
    let ones = emb(&[1.0; 4]);
    assert_eq!(fuse(&zero, &spk, &Fuser::Add).unwrap().vector, spk.vector);
    assert_eq!(fuse(&ones, &spk, &Fuser::Mul).unwrap().vector, spk.vector);
    assert_eq!(fuse(&ones, &spk, &Fuser::None).unwrap().vector, spk.vector);
    let f = fuse(&ones, &spk, &Fuser::Add).unwrap();
    assert_eq!(f.kind, EmbeddingKind::Fused(FusionStrategy::Add));
    assert!(matches!(fuse(&emb(&[1.0; 3]), &spk, &Fuser::Mul), Err(Error::Nn(_))));
}

#[test]
fn strategy_names_round_trip() {
    for s in FusionStrategy::ALL {
        assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
    }
    assert!(matches!("concat".parse::<FusionStrategy>(), Err(Error::Lookup(_))));
}

#[test]
fn cnn_fusion_shape_and_reference() {
    let cfg = FusionCnnConfig {
        dim: 6,
        channels: 2,
        kernel: 3,
    };
    let cnn = FusionCnn::new(cfg.clone(), 5);
    let t = emb(&[0.1, -0.4, 0.9, 0.3, -0.2, 0.7]);
    let s = emb(&[0.5, 0.2, -0.6, 0.8, 0.1, -0.3]);
    let out = fuse(&t, &s, &Fuser::Cnn(cnn.clone())).unwrap();
    assert_eq!(out.dim(), 6);
    assert_eq!(out.kind, EmbeddingKind::Fused(FusionStrategy::Cnn));

    // Plain loops over the stored kernels.
    let p = |n: &str| cnn.store.get(n).unwrap().data().to_vec();
    let conv = |x: &Vec<Vec<f64>>, w: &[f64], b: &[f64], cin: usize, cout: usize, k: usize| {
        let len = x.len();
        let half = (k / 2) as isize;
        (0..len)
            .map(|i| {
                (0..cout)
                    .map(|o| {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for j in 0..k {
                                let src = i as isize + j as isize - half;
                                if src >= 0 && (src as usize) < len {
                                    acc += w[(o * cin + c) * k + j] * x[src as usize][c];
                                }
                            }
                        }
                        acc
                    })
                    .collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![t.vector[i], s.vector[i]]).collect();
    let relu = |m: Vec<Vec<f64>>| m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let h = relu(conv(&x, &p("fusion.conv1.weight"), &p("fusion.conv1.bias"), 2, 2, 3));
    let h = relu(conv(&h, &p("fusion.conv2.weight"), &p("fusion.conv2.bias"), 2, 2, 3));
    let y = conv(&h, &p("fusion.collapse.weight"), &p("fusion.collapse.bias"), 2, 1, 1);
    for i in 0..6 {
        assert!((y[i][0] - out.vector[i]).abs() < 1e-12);
    }

    let rebuilt = FusionCnn::from_store(cfg, cnn.store.clone()).unwrap();
    assert_eq!(rebuilt.fuse(&t, &s).unwrap().vector, out.vector);
}

#[test]
fn cnn_fusion_training_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dim = 8;
    let spk_proto: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let txt_proto: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut pairs = HashMap::new();
    let mut meta = Vec::new();
    for spk in 0..3 {
        for txt in 0..2 {
            for k in 0..4 {
                let id = format!("s{spk}t{txt}u{k}");
                let noisy = |p: &[f64], rng: &mut ChaCha8Rng| -> Embedding {
                    Embedding::new(p.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect(), EmbeddingKind::Text).unwrap()
                };
                let e_t = noisy(&txt_proto[txt], &mut rng);
                let e_s = noisy(&spk_proto[spk], &mut rng);
                pairs.insert(id.clone(), (e_t, e_s));
                meta.push((id, spk, txt));
            }
        }
    }
    let mut trials = Vec::new();
    for (i, a) in meta.iter().enumerate() {
        for b in meta.iter().skip(i + 1) {
            trials.push(Trial::new(&a.0, &b.0, a.1 == b.1, a.2 == b.2).unwrap());
        }
    }
    let trials = TrialList::new(trials);
    let cnn_cfg = FusionCnnConfig {
        dim,
        channels: 2,
        kernel: 3,
    };
    let cfg = FusionTrainConfig {
        epochs: 30,
        batch_size: 32,
        lr: 1e-2,
        ..FusionTrainConfig::default()
    };
    let out = train_fusion_cnn(&pairs, &trials, &cnn_cfg, &cfg).unwrap();
    assert_eq!(out.log.len(), 30);
    assert!(out.log.iter().all(|l| l.is_finite()));
    assert!(out.log[29] < out.log[0], "{:?}", out.log);
    let again = train_fusion_cnn(&pairs, &trials, &cnn_cfg, &cfg).unwrap();
    assert_eq!(again.cnn.store, out.cnn.store);
    assert_eq!(out.cnn.store.len(), 6);

    let missing = TrialList::new(vec![Trial::new("s0t0u0", "ghost", false, false).unwrap()]);
    match train_fusion_cnn(&pairs, &missing, &cnn_cfg, &cfg) {
        Err(Error::Lookup(m)) => assert!(m.contains("ghost")),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn cosine_examples() {
    let a = emb(&[1.0, 2.0, -3.0]);
    assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine_score(&emb(&[1.0, 0.0]), &emb(&[0.0, 2.0])).unwrap(), 0.0);
    let neg = emb(&[-1.0, -2.0, 3.0]);
    assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(cosine_score(&a, &emb(&[0.0; 3])), Err(Error::Degenerate(_))));
}

fn table() -> HashMap<String, Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..20)
        .map(|i| (format!("u{i}"), emb(&(0..5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())))
        .collect()
}

#[test]
fn score_trials_contract() {
    let t = table();
    assert!(score_trials(&TrialList::default(), &t).unwrap().is_empty());

    let mut same = t.clone();
    same.insert("twin".into(), t["u0"].clone());
    let one = TrialList::new(vec![Trial::new("u0", "twin", true, true).unwrap()]);
    let s = score_trials(&one, &same).unwrap();
    assert!((s.scores[0] - 1.0).abs() < 1e-15);
    assert_eq!(s.labels, vec![true]);

    let missing = TrialList::new(vec![
        Trial::new("u0", "u1", true, true).unwrap(),
        Trial::new("u2", "nobody", false, true).unwrap(),
    ]);
    match score_trials(&missing, &t) {
        Err(Error::Lookup(m)) => assert!(m.contains("nobody")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parallel_scoring_is_bitwise_identical() {
    let t = table();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = TrialList::new(
        (0..257)
            .map(|_| {
                let a = rng.gen_range(0..20);
                let b = (a + rng.gen_range(1..20)) % 20;
                Trial::new(format!("u{a}"), format!("u{b}"), rng.gen(), rng.gen()).unwrap()
            })
            .collect(),
    );
    let seq = trial_scores(&trials, &t).unwrap();
    for threads in [1, 2, 3, 8] {
        let par = trial_scores_parallel(&trials, &t, threads).unwrap();
        assert_eq!(seq.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), par.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn target_rules_and_families() {
    let t = Trial::new("a", "b", true, false).unwrap();
    assert_eq!(t.family(), TrialFamily::TargetMismatched);
    assert!(!t.accept());
    assert!(TargetRule::SameSpeaker.label(&t));
    assert!(!TargetRule::Accept.label(&t));
    for f in TrialFamily::ALL {
        assert_eq!(TrialFamily::new(f.same_speaker(), f.same_text()), f);
    }
    assert!(matches!(Trial::new("a", "a", true, true), Err(Error::Protocol(_))));
}

#[test]
fn trial_file_round_trip() {
    let list = TrialList::new(vec![
        Trial::new("spk01_d001_00", "spk01_d001_03", true, true).unwrap(),
        Trial::new("spk01_d001_00", "spk02_d001_01", false, true).unwrap(),
        Trial::new("spk01_d002_00", "spk01_d004_01", true, false).unwrap(),
        Trial::new("spk03_d005_02", "spk04_d006_00", false, false).unwrap(),
    ]);
    let text = list.to_text();
    assert_eq!(text.lines().next().unwrap(), "spk01_d001_00 spk01_d001_03 target matched");
    assert_eq!(TrialList::parse(&text).unwrap(), list);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.txt");
    list.save(&path).unwrap();
    assert_eq!(TrialList::load(&path).unwrap(), list);
    for bad in ["a b target", "a b maybe matched", "a b target sorta", "a a target matched"] {
        assert!(matches!(TrialList::parse(bad), Err(Error::Protocol(_))), "{bad}");
    }
}

#[test]
fn score_file_format() {
    let list = TrialList::new(vec![Trial::new("a", "b", true, true).unwrap()]);
    let text = format_scores(&list, &[0.123456789]);
    assert_eq!(text, "a b 0.123456789\n");
    let parsed = parse_scores(&text).unwrap();
    assert_eq!(parsed, vec![("a".into(), "b".into(), 0.123456789)]);
    let x = 0.1 + 0.2;
    let back = parse_scores(&format_scores(&list, &[x])).unwrap();
    assert_eq!(back[0].2.to_bits(), x.to_bits());
}
