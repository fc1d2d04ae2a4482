mod common;

use common::{brute_spectrum, random_vec, rng, sine};
use proptest::prelude::*;
use spdnet_core::spectral::{compute_spectrum, detect_periods, fold, top_k_periods, unfold};
use spdnet_core::Tensor;

fn window(values: Vec<f64>) -> Tensor {
    Tensor::new(&[1, values.len(), 1], values).unwrap()
}

#[test]
fn spectrum_matches_direct_dft() {
    let mut r = rng(3);
    for (b, s, n) in [(1, 32, 1), (2, 96, 3), (3, 17, 2)] {
        let data = random_vec(&mut r, b * s * n, 2.0);
        let x = Tensor::new(&[b, s, n], data.clone()).unwrap();
        let got = compute_spectrum(&x).unwrap();
        let want = brute_spectrum(&data, b, s, n);
        assert_eq!(got.magnitudes.len(), want.len());
        for (f, (g, w)) in got.magnitudes.iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() < 1e-9 * (1.0 + w.abs()),
                "S={s} bin {f}: {g} vs {w}"
            );
        }
    }
}

#[test]
fn pure_tone_sweep_matches_oracle_peak() {
    for s in [32usize, 96, 128] {
        for f in 2..=s / 4 {
            let x = sine(s, f, 1.0);
            let oracle = brute_spectrum(&x, 1, s, 1);
            let oracle_peak = (1..oracle.len())
                .max_by(|&a, &b| oracle[a].total_cmp(&oracle[b]).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(oracle_peak, f);
            let set = detect_periods(&window(x), 1).unwrap();
            assert_eq!(set.entries[0].frequency, f, "S={s}");
            assert_eq!(set.entries[0].period, s.div_ceil(f), "S={s} f={f}");
        }
    }
}

#[test]
fn two_tone_ordering() {
    let a = sine(96, 4, 2.0);
    let b = sine(96, 8, 1.0);
    let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
    let oracle = brute_spectrum(&x, 1, 96, 1);
    let spec = compute_spectrum(&window(x)).unwrap();
    let m = &spec.magnitudes;
    assert!(m[4] > m[8]);
    for f in (1..m.len()).filter(|&f| f != 4 && f != 8) {
        assert!(m[8] > m[f], "bin {f}");
        assert!(oracle[8] > oracle[f]);
    }
    let set = top_k_periods(&spec, 2).unwrap();
    assert_eq!(set.periods(), vec![24, 12]);
}

#[test]
fn three_tone_descending_periods() {
    let x: Vec<f64> = (0..96)
        .map(|t| {
            [(4, 3.0), (8, 2.0), (12, 1.0)]
                .iter()
                .map(|&(f, a)| sine(96, f, a)[t])
                .sum()
        })
        .collect();
    let oracle = brute_spectrum(&x, 1, 96, 1);
    let mut order: Vec<usize> = (1..oracle.len()).collect();
    order.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]).then(a.cmp(&b)));
    let expected: Vec<usize> = order[..3].iter().map(|f| 96 / f).collect();
    assert_eq!(expected, vec![24, 12, 8]);
    assert_eq!(detect_periods(&window(x), 3).unwrap().periods(), expected);
}

#[test]
fn fold_examples() {
    let x = window((0..6).map(f64::from).collect());
    let folded = fold(&x, 3, 2).unwrap();
    assert_eq!(folded.tensor.shape(), &[1, 3, 2, 1]);
    assert_eq!(folded.tensor.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);

    let x = window((0..5).map(f64::from).collect());
    let folded = fold(&x, 3, 2).unwrap();
    assert_eq!(folded.tensor.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 0.0]);

    let mut r = rng(9);
    let x = window(random_vec(&mut r, 96, 1.0));
    assert_eq!(unfold(&fold(&x, 24, 4).unwrap()).unwrap(), x);
}

fn fold_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..4, 2usize..130, 1usize..4)
        .prop_flat_map(|(b, s, n)| (Just(b), Just(s), Just(n), 1..=s))
        .prop_flat_map(|(b, s, n, p)| {
            let min_f = s.div_ceil(p);
            (
                Just(b),
                Just(s),
                Just(n),
                Just(p),
                min_f..=min_f + 2,
                any::<u64>(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn fold_unfold_bijection((b, s, n, p, f, seed) in fold_case()) {
        let mut r = rng(seed);
        let x = Tensor::new(&[b, s, n], random_vec(&mut r, b * s * n, 5.0)).unwrap();
        let folded = fold(&x, p, f).unwrap();
        prop_assert_eq!(folded.tensor.shape(), &[b, p, f, n][..]);
        for bi in 0..b {
            for t in 0..p {
                for c in 0..f {
                    for ni in 0..n {
                        let got = folded.tensor.at(&[bi, t, c, ni]);
                        let pos = c * p + t;
                        let want = if pos < s { x.at(&[bi, pos, ni]) } else { 0.0 };
                        prop_assert_eq!(got.to_bits(), want.to_bits());
                    }
                }
            }
        }
        prop_assert_eq!(unfold(&folded).unwrap(), x);
    }

    #[test]
    fn periods_invariant_to_positive_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let data = random_vec(&mut r, 64, 1.0);
        let base = detect_periods(&window(data.clone()), 3).unwrap();
        let scaled = detect_periods(&window(data.iter().map(|v| v * scale).collect()), 3).unwrap();
        // Scaling can only reorder bins whose magnitudes are equal to rounding.
        let m = compute_spectrum(&window(data)).unwrap().magnitudes;
        let mut sorted: Vec<f64> = m[1..].to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let well_separated = sorted.windows(2).take(3).all(|w| (w[0] - w[1]).abs() > 1e-9 * w[0]);
        if well_separated {
            prop_assert_eq!(base.periods(), scaled.periods());
        }
    }

    #[test]
    fn spectrum_invariant_to_batch_order(seed in any::<u64>(), b in 2usize..4, n in 1usize..3) {
        let s = 24;
        let mut r = rng(seed);
        let data = random_vec(&mut r, b * s * n, 1.0);
        let mut swapped = data[s * n..].to_vec();
        swapped.extend_from_slice(&data[..s * n]);
        let a = compute_spectrum(&Tensor::new(&[b, s, n], data).unwrap()).unwrap();
        let c = compute_spectrum(&Tensor::new(&[b, s, n], swapped).unwrap()).unwrap();
        for (x, y) in a.magnitudes.iter().zip(&c.magnitudes) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
