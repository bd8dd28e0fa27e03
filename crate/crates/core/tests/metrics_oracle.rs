use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tut_core::metrics::{
    edit_score, evaluate, evaluate_corpus, f1_counts, f1_overlap, frame_accuracy, EvalOptions,
    DEFAULT_THRESHOLDS,
};

/// Segments as `(class, frame list)` found by a plain scan.
fn oracle_segments(x: &[usize], ignored: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
    for (t, &c) in x.iter().enumerate() {
        if t > 0 && x[t - 1] == c {
            out.last_mut().unwrap().1.push(t);
        } else {
            out.push((c, vec![t]));
        }
    }
    out.retain(|s| !ignored.contains(&s.0));
    out
}

/// Edit distance by exhaustive recursion over delete / insert / substitute.
fn oracle_lev(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ar)), Some((y, br))) => {
            let sub = oracle_lev(ar, br) + usize::from(x != y);
            sub.min(oracle_lev(ar, b) + 1).min(oracle_lev(a, br) + 1)
        }
    }
}

fn oracle_edit(p: &[usize], g: &[usize], ignored: &[usize]) -> f64 {
    let ps: Vec<usize> = oracle_segments(p, ignored)
        .into_iter()
        .map(|s| s.0)
        .collect();
    let gs: Vec<usize> = oracle_segments(g, ignored)
        .into_iter()
        .map(|s| s.0)
        .collect();
    let m = ps.len().max(gs.len());
    if m == 0 {
        100.0
    } else {
        (1.0 - oracle_lev(&ps, &gs) as f64 / m as f64) * 100.0
    }
}

fn oracle_f1(p: &[usize], g: &[usize], tau: f64, ignored: &[usize]) -> (usize, usize, usize, f64) {
    let ps = oracle_segments(p, ignored);
    let gs = oracle_segments(g, ignored);
    let mut consumed: Vec<usize> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (c, frames) in &ps {
        let mut best: Option<(usize, f64)> = None;
        for (j, (gc, gf)) in gs.iter().enumerate() {
            if gc != c || consumed.contains(&j) {
                continue;
            }
            let inter = frames.iter().filter(|f| gf.contains(f)).count();
            let union = frames.len() + gf.len() - inter;
            let iou = inter as f64 / union as f64;
            if best.is_none_or(|b| iou > b.1) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou >= tau => {
                tp += 1;
                consumed.push(j);
            }
            _ => fp += 1,
        }
    }
    let fn_ = gs.len() - consumed.len();
    let prec = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let rec = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if prec + rec > 0.0 {
        200.0 * prec * rec / (prec + rec)
    } else {
        0.0
    };
    (tp, fp, fn_, f1)
}

fn decode(mut code: usize, len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| {
            let c = code % 3;
            code /= 3;
            c
        })
        .collect()
}

#[test]
fn hand_examples() {
    assert_eq!(
        frame_accuracy(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(),
        100.0
    );
    assert_eq!(
        frame_accuracy(&[0, 0, 1, 1, 2], &[0, 0, 0, 1, 2]).unwrap(),
        80.0
    );
    assert_eq!(frame_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert!(frame_accuracy(&[0], &[0, 1]).is_err());

    assert_eq!(edit_score(&[0, 1, 2], &[0, 1, 2], &[]), 100.0);
    assert!((edit_score(&[0, 1, 2], &[0, 2], &[]) - 200.0 / 3.0).abs() < 1e-12);
    assert_eq!(edit_score(&[], &[0, 0], &[]), 0.0);
    assert_eq!(edit_score(&[], &[], &[]), 100.0);

    let pred = [0, 0, 1, 1, 2];
    let gt = [0, 0, 0, 1, 2];
    for t in DEFAULT_THRESHOLDS {
        assert_eq!(f1_overlap(&gt, &gt, t, &[]), 100.0);
    }
    assert_eq!(f1_overlap(&pred, &gt, 0.5, &[]), 100.0);
    let c = f1_counts(&pred, &gt, 0.75, &[]);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 2, 2));
    assert!((c.f1() - 100.0 / 3.0).abs() < 1e-12);

    // Two predicted segments over one ground-truth segment: the second is a false positive.
    let c = f1_counts(&[0, 0, 1, 0, 0], &[0, 0, 0, 0, 0], 0.1, &[]);
    assert_eq!((c.tp, c.fp, c.fn_), (1, 2, 0));
}

#[test]
fn ignored_classes_are_dropped() {
    let pred = [0, 0, 1, 1, 0, 2];
    let gt = [0, 1, 1, 1, 0, 2];
    assert_eq!(edit_score(&pred, &gt, &[0]), 100.0);
    assert_eq!(f1_overlap(&pred, &gt, 0.5, &[0]), 100.0);
}

#[test]
fn exhaustive_oracle_agreement_up_to_five_frames() {
    for len in 1..=5 {
        let n = 3usize.pow(len as u32);
        for a in 0..n {
            for b in 0..n {
                let (p, g) = (decode(a, len), decode(b, len));
                assert!((edit_score(&p, &g, &[]) - oracle_edit(&p, &g, &[])).abs() < 1e-9);
                for t in [0.1, 0.25, 0.5, 0.75] {
                    let c = f1_counts(&p, &g, t, &[]);
                    let (tp, fp, fn_, f1) = oracle_f1(&p, &g, t, &[]);
                    assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_), "{p:?} {g:?} {t}");
                    assert!((c.f1() - f1).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn sampled_oracle_agreement_at_six_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let len = rng.random_range(1..=6);
        let p: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let g: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
        let ignored: Vec<usize> = if rng.random_bool(0.2) {
            vec![rng.random_range(0..3)]
        } else {
            vec![]
        };
        assert!((edit_score(&p, &g, &ignored) - oracle_edit(&p, &g, &ignored)).abs() < 1e-9);
        for t in DEFAULT_THRESHOLDS {
            let (_, _, _, f1) = oracle_f1(&p, &g, t, &ignored);
            assert!(
                (f1_overlap(&p, &g, t, &ignored) - f1).abs() < 1e-9,
                "{p:?} {g:?} {t}"
            );
        }
    }
}

proptest! {
    #[test]
    fn scores_in_range_and_f1_monotone(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)
    ) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = evaluate(&p, &g, &EvalOptions { thresholds: vec![0.1, 0.25, 0.5, 0.75, 0.9], ..Default::default() }).unwrap();
        for v in [r.acc, r.edit].into_iter().chain(r.f1.iter().map(|x| x.1)) {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        for w in r.f1.windows(2) {
            prop_assert!(w[0].1 >= w[1].1 - 1e-12);
        }
    }

    #[test]
    fn class_permutation_invariance(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40),
        perm in Just([0usize, 1, 2]).prop_shuffle()
    ) {
        let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let gg: Vec<usize> = g.iter().map(|&c| perm[c]).collect();
        let a = evaluate(&p, &g, &EvalOptions::default()).unwrap();
        let b = evaluate(&pp, &gg, &EvalOptions::default()).unwrap();
        prop_assert_eq!(a.acc, b.acc);
        prop_assert_eq!(a.edit, b.edit);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn identical_sequences_score_100(g in prop::collection::vec(0usize..5, 1..50)) {
        let r = evaluate(&g, &g, &EvalOptions::default()).unwrap();
        prop_assert_eq!(r.acc, 100.0);
        prop_assert_eq!(r.edit, 100.0);
        prop_assert!(r.f1.iter().all(|x| x.1 == 100.0));
    }
}

#[test]
fn corpus_pooling() {
    let a = vec![0, 0, 1, 1];
    let b = vec![2, 2, 2, 2, 2, 2];
    let wrong = vec![0; 6];
    let single = evaluate_corpus(&[(&a, &a)], &EvalOptions::default()).unwrap();
    assert_eq!(single, evaluate(&a, &a, &EvalOptions::default()).unwrap());

    let r = evaluate_corpus(&[(&a, &a), (&wrong, &b)], &EvalOptions::default()).unwrap();
    assert!((r.acc - 40.0).abs() < 1e-12);
    assert!((r.edit - 50.0).abs() < 1e-12);
    // Pooled: TP 2, FP 1, FN 1.
    assert!((r.f1_at(0.5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
    let per = evaluate_corpus(
        &[(&a, &a), (&wrong, &b)],
        &EvalOptions {
            pool_f1: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((per.f1_at(0.5).unwrap() - 50.0).abs() < 1e-9);
}
