use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tut_core::attention::{
    full_attention, local_attention, logsparse_attention, logsparse_pattern, AttentionConfig,
    AttentionPattern, AttentionRecord,
};
use tut_core::tensor::gradcheck::check_gradients;
use tut_core::tensor::{Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn cfg(window: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        pattern: AttentionPattern::Local,
        window,
        heads,
        dropout: 0.0,
        ..Default::default()
    }
}

fn rows_sum_to_one(rec: &AttentionRecord) {
    for h in 0..rec.heads {
        for i in 0..rec.len() {
            let s: f64 = rec.row(h, i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "head {h} row {i} sums to {s}");
        }
    }
}

#[test]
fn single_frame_returns_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let q = tape.constant(rand_tensor(&mut rng, &[1, 4]));
    let k = tape.constant(rand_tensor(&mut rng, &[1, 4]));
    let v = tape.constant(rand_tensor(&mut rng, &[1, 4]));
    let (o, rec) = local_attention(&mut tape, q, k, v, &cfg(7, 2), None, None).unwrap();
    assert_eq!(tape.value(o), tape.value(v));
    assert_eq!(rec.row(0, 0), &[1.0]);
    let (o, _) = logsparse_attention(&mut tape, q, k, v, &cfg(7, 2), None, None).unwrap();
    assert_eq!(tape.value(o), tape.value(v));
}

#[test]
fn saturating_window_matches_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..50 {
        let t = rng.random_range(1..=32);
        let heads = [1, 2, 4][case % 3];
        let d = heads * rng.random_range(1..=3);
        let w = 2 * t - 1 + 2 * rng.random_range(0..3);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[t, d]));
        let k = tape.constant(rand_tensor(&mut rng, &[t, d]));
        let v = tape.constant(rand_tensor(&mut rng, &[t, d]));
        let c = cfg(w, heads);
        let (lo, lrec) = local_attention(&mut tape, q, k, v, &c, None, None).unwrap();
        let (fo, frec) = full_attention(&mut tape, q, k, v, &c, None, None).unwrap();
        for (a, b) in tape.value(lo).data().iter().zip(tape.value(fo).data()) {
            assert!((a - b).abs() < 1e-6, "case {case}: {a} vs {b}");
        }
        for (a, b) in lrec.values().data().iter().zip(frec.values().data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn local_storage_is_bounded_by_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(t, w, h) in &[(100, 11, 2), (37, 5, 4), (8, 51, 1)] {
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[t, 4 * h]));
        let (_, rec) = local_attention(&mut tape, q, q, q, &cfg(w, h), None, None).unwrap();
        assert!(rec.entry_count() <= h * w * t);
        rows_sum_to_one(&rec);
        let (_, frec) = full_attention(&mut tape, q, q, q, &cfg(w, h), None, None).unwrap();
        assert_eq!(frec.entry_count(), h * t * t);
        rows_sum_to_one(&frec);
    }
}

#[test]
fn uniform_keys_give_uniform_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let q = tape.constant(rand_tensor(&mut rng, &[6, 4]));
    let k = tape.constant(Tensor::full(&[6, 4], 0.3));
    let v = tape.constant(rand_tensor(&mut rng, &[6, 4]));
    let (o, rec) = full_attention(&mut tape, q, k, v, &cfg(3, 2), None, None).unwrap();
    for h in 0..2 {
        for i in 0..6 {
            for &p in rec.row(h, i) {
                assert!((p - 1.0 / 6.0).abs() < 1e-12);
            }
        }
    }
    let out = tape.value(o);
    for i in 1..6 {
        for (a, b) in out.row(0).iter().zip(out.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn full_attention_is_invariant_to_joint_key_value_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, d) = (7, 4);
    let qv = rand_tensor(&mut rng, &[t, d]);
    let kv = rand_tensor(&mut rng, &[t, d]);
    let vv = rand_tensor(&mut rng, &[t, d]);
    let perm = [3usize, 0, 6, 1, 5, 2, 4];
    let permute = |x: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let mut tape = Tape::new();
    let q = tape.constant(qv);
    let k = tape.constant(kv.clone());
    let v = tape.constant(vv.clone());
    let kp = tape.constant(permute(&kv));
    let vp = tape.constant(permute(&vv));
    let (a, _) = full_attention(&mut tape, q, k, v, &cfg(3, 2), None, None).unwrap();
    let (b, _) = full_attention(&mut tape, q, kp, vp, &cfg(3, 2), None, None).unwrap();
    for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_relative_table_leaves_scores_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let q = tape.constant(rand_tensor(&mut rng, &[9, 4]));
    let table = tape.constant(Tensor::zeros(&[5, 2]));
    let c = cfg(5, 2);
    let (a, _) = local_attention(&mut tape, q, q, q, &c, None, None).unwrap();
    let (b, _) = local_attention(&mut tape, q, q, q, &c, Some(table), None).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
}

#[test]
fn relative_bias_alone_sets_attention_rows() {
    // Zeroed queries and keys leave only the positional bias in the scores.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, w, h) = (10, 5, 2);
    let table_v = rand_tensor(&mut rng, &[w, h]);
    let mut tape = Tape::new();
    let zeros = tape.constant(Tensor::zeros(&[t, 4]));
    let v = tape.constant(rand_tensor(&mut rng, &[t, 4]));
    let table = tape.constant(table_v.clone());
    let (_, rec) =
        local_attention(&mut tape, zeros, zeros, v, &cfg(w, h), Some(table), None).unwrap();
    let r = w / 2;
    for head in 0..h {
        for i in 0..t {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(t - 1);
            let logits: Vec<f64> = (lo..=hi)
                .map(|j| table_v.data()[(j + r - i) * h + head])
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (p, l) in rec.row(head, i).iter().zip(&logits) {
                assert!((p - (l - m).exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_attention_length_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[4, 4]));
    let k = tape.constant(Tensor::zeros(&[4, 4]));
    let v = tape.constant(Tensor::zeros(&[3, 4]));
    assert!(local_attention(&mut tape, q, k, v, &cfg(3, 2), None, None).is_err());
    let k2 = tape.constant(Tensor::zeros(&[5, 4]));
    assert!(local_attention(&mut tape, q, k2, k2, &cfg(3, 2), None, None).is_err());
}

#[test]
fn logsparse_matches_power_of_two_enumeration() {
    for t in 1..=64usize {
        let p = logsparse_pattern(t);
        let bound = 2 * (t as f64).log2().ceil() as usize + 1;
        for i in 0..t {
            let mut expected: Vec<usize> = (0..t)
                .filter(|&j| {
                    let d = i.abs_diff(j);
                    d == 0 || d.is_power_of_two()
                })
                .collect();
            expected.sort_unstable();
            assert_eq!(p.row_keys(i), expected.as_slice(), "T={t} i={i}");
            assert!(expected.len() <= bound);
        }
    }
}

type AttnFn = fn(
    &mut Tape,
    Var,
    Var,
    Var,
    &AttentionConfig,
    Option<Var>,
    Option<&mut ChaCha8Rng>,
) -> tut_core::Result<(Var, AttentionRecord)>;

#[test]
fn all_patterns_pass_gradient_checks() {
    let fns: [(&str, AttnFn); 3] = [
        ("full", full_attention),
        ("local", local_attention),
        ("logsparse", logsparse_attention),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (name, f) in fns {
        let inputs = vec![
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[6, 4]),
            rand_tensor(&mut rng, &[3, 2]),
        ];
        let r = check_gradients(&inputs, 1e-4, |tape, v| {
            let (o, _) = f(tape, v[0], v[1], v[2], &cfg(3, 2), Some(v[3]), None)?;
            let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            let o = tape.mul_const(o, w)?;
            Ok(tape.sum_all(o))
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{name}: {r:?}");
    }
}

#[test]
fn record_keeps_pre_dropout_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let q = tape.constant(rand_tensor(&mut rng, &[12, 4]));
    let mut c = cfg(5, 2);
    c.dropout = 0.5;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(9);
    let (_, rec) = local_attention(&mut tape, q, q, q, &c, None, Some(&mut drop_rng)).unwrap();
    rows_sum_to_one(&rec);
}

proptest! {
    #[test]
    fn every_pattern_normalises_rows(t in 1usize..40, w_half in 0usize..6, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let q = tape.constant(rand_tensor(&mut rng, &[t, 4]));
        let k = tape.constant(rand_tensor(&mut rng, &[t, 4]));
        let c = cfg(2 * w_half + 1, 2);
        let (_, a) = local_attention(&mut tape, q, k, k, &c, None, None).unwrap();
        let (_, b) = logsparse_attention(&mut tape, q, k, k, &c, None, None).unwrap();
        let (_, f) = full_attention(&mut tape, q, k, k, &c, None, None).unwrap();
        for rec in [a, b, f] {
            for h in 0..2 {
                for i in 0..t {
                    let s: f64 = rec.row(h, i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }
}
