use proptest::prelude::*;

use subadj_core::attention::{linear_attention, roll_rows, sacon_unwrapped, sacon_values, sacon_via_roll};
use subadj_core::{MappingConfig, MappingKind, SubAdjacentSpan, Tape, Tensor};

/// Double loop over (i, j) with the wrapped index of each source row.
fn brute_force(a: &Tensor, k1: usize, k2: usize) -> Vec<f64> {
    let win = a.rows() as isize;
    let mut out = vec![0.0; a.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let i = i as isize;
        for j in (i - k2 as isize)..=(i + k2 as isize) {
            let dist = (j - i).unsigned_abs();
            if dist < k1 || dist > k2 {
                continue;
            }
            let wrapped = [j - win, j, j + win]
                .into_iter()
                .find(|w| (0..win).contains(w))
                .unwrap();
            *o += a.get2(wrapped as usize, i as usize);
        }
    }
    out
}

fn span_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    prop_oneof![Just(8usize), Just(10), Just(100)].prop_flat_map(|win| {
        (0..win).prop_flat_map(move |k2| (0..=k2).prop_map(move |k1| (k1, k2, win)))
    })
}

fn matrix(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, n * m).prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn wrapped_sacon_matches_double_loop(
        (k1, k2, win, a) in span_strategy().prop_flat_map(|(k1, k2, win)| (Just(k1), Just(k2), Just(win), matrix(win, win)))
    ) {
        let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
        let fast = sacon_values(&a, &span).unwrap();
        let slow = brute_force(&a, k1, k2);
        for (f, s) in fast.iter().zip(&slow) {
            prop_assert!((f - s).abs() <= 1e-12, "{f} vs {s}");
        }
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let sv = subadj_core::attention::sacon(&mut tape, av, &span).unwrap();
        prop_assert_eq!(tape.value(sv).data(), &fast[..]);
    }

    #[test]
    fn roll_formulation_matches(
        (k1, k2, win) in span_strategy(),
        seed in any::<u64>(),
        kind in prop::sample::select(vec![
            MappingKind::LearnableRowSoftmax,
            MappingKind::ColumnSoftmax,
            MappingKind::Power,
            MappingKind::Relu,
            MappingKind::EluPlusOne,
        ]),
        tau in 0.1f64..3.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut gen = || Tensor::new(vec![win, d], (0..win * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (q, k, v) = (gen(), gen(), gen());
        let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
        let cfg = MappingConfig { kind, ..Default::default() };
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v));
        let tv = tape.constant(Tensor::scalar(tau));
        let (_, a) = linear_attention(&mut tape, qv, kv, vv, kind.uses_tau().then_some(tv), &cfg).unwrap();
        let direct = sacon_values(tape.value(a), &span).unwrap();
        let rolled = sacon_via_roll(&q, &k, Some(tau), &cfg, &span).unwrap();
        for (x, y) in direct.iter().zip(&rolled) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn circular_shift_of_inputs_shifts_sacon(
        (k1, k2) in (0usize..10).prop_flat_map(|k2| (0..=k2, Just(k2))),
        shift in 0isize..100,
        q in matrix(10, 3),
        k in matrix(10, 3),
    ) {
        let win = 10;
        let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
        let cfg = MappingConfig::default();
        let base = sacon_via_roll(&q, &k, Some(1.0), &cfg, &span).unwrap();
        let moved = sacon_via_roll(&roll_rows(&q, shift), &roll_rows(&k, shift), Some(1.0), &cfg, &span).unwrap();
        for (i, m) in moved.iter().enumerate() {
            let src = (i as isize - shift).rem_euclid(win as isize) as usize;
            prop_assert!((m - base[src]).abs() < 1e-12);
        }
    }

    #[test]
    fn nonnegative_attention_gives_nonnegative_sacon(
        (k1, k2, win, a) in span_strategy().prop_flat_map(|(k1, k2, win)| (Just(k1), Just(k2), Just(win), matrix(win, win)))
    ) {
        let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
        prop_assert!(sacon_values(&a, &span).unwrap().iter().all(|&s| s >= 0.0));
    }
}

#[test]
fn stripe_cell_counts() {
    for win in [8usize, 10, 16, 100] {
        for k2 in 1..win / 2 {
            for k1 in 1..=k2 {
                let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
                let expect = 2 * (k2 - k1 + 1);
                let mask = span.wrapped_mask();
                for i in 0..win {
                    let col: f64 = (0..win).map(|j| mask.get2(j, i)).sum();
                    assert_eq!(col as usize, expect, "win {win} span {k1}:{k2} col {i}");
                }
                assert_eq!(span.cells_per_column(), expect);
            }
        }
    }
}

#[test]
fn uniform_matrix_span_20_30() {
    let span = SubAdjacentSpan::new(20, 30, 100).unwrap();
    let a = Tensor::filled(&[100, 100], 0.01);
    let s = sacon_values(&a, &span).unwrap();
    assert!(s.iter().all(|v| (v - 0.22).abs() < 1e-12));
    assert_eq!(brute_force(&a, 20, 30), s);
}

#[test]
fn unwrapped_form_loses_cells_near_edges() {
    let (k1, k2, win) = (20, 30, 100);
    let span = SubAdjacentSpan::new(k1, k2, win).unwrap();
    let ones = Tensor::filled(&[win, win], 1.0);
    let wrapped = sacon_values(&ones, &span).unwrap();
    let unwrapped = sacon_unwrapped(&ones, &span).unwrap();
    for i in 0..win {
        assert_eq!(wrapped[i], 22.0);
        if i < k2 || i + k2 >= win {
            assert!(unwrapped[i] < wrapped[i], "column {i}");
        } else {
            assert_eq!(unwrapped[i], wrapped[i]);
        }
    }
}

#[test]
fn identity_attention_has_no_contribution() {
    let span = SubAdjacentSpan::new(1, 3, 10).unwrap();
    let s = sacon_values(&Tensor::eye(10), &span).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
    let one_hot = Tensor::eye(10);
    let cfg = MappingConfig {
        kind: MappingKind::Relu,
        ..Default::default()
    };
    let s = sacon_via_roll(&one_hot, &one_hot, None, &cfg, &span).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
}
