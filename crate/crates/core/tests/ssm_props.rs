use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vimq_core::metrics::max_relative_error;
use vimq_core::ssm::{discretize, selective_scan, Discretization};
use vimq_core::Tensor;

struct Instance {
    c: usize,
    l: usize,
    d: usize,
    abar: Tensor,
    bbar: Tensor,
    cm: Tensor,
    skip: Tensor,
    x: Tensor,
}

fn instance(seed: u64, max: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l, d) = (
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
    );
    let mut uni = |n: usize, lo: f32, hi: f32| -> Vec<f32> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    };
    let delta = Tensor::from_f32(&[c, l], uni(c * l, 0.05, 1.5)).unwrap();
    let a = Tensor::from_f32(&[c, d], uni(c * d, -2.0, -0.1)).unwrap();
    let b = Tensor::from_f32(&[l, d], uni(l * d, -1.0, 1.0)).unwrap();
    let cm = Tensor::from_f32(&[l, d], uni(l * d, -1.0, 1.0)).unwrap();
    let skip = Tensor::from_f32(&[c], uni(c, -1.0, 1.0)).unwrap();
    let x = Tensor::from_f32(&[c, l], uni(c * l, -2.0, 2.0)).unwrap();
    let (abar, bbar) = discretize(&delta, &a, &b, Discretization::Simplified).unwrap();
    Instance { c, l, d, abar, bbar, cm, skip, x }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn scan_matches_unrolled_closed_form(seed in any::<u64>()) {
        let s = instance(seed, 4);
        let (c, l, d) = (s.c, s.l, s.d);
        let (a, b, x) = (s.abar.as_f32().unwrap(), s.bbar.as_f32().unwrap(), s.x.as_f32().unwrap());
        let at = |ci: usize, t: usize, di: usize| (ci * l + t) * d + di;
        let mut want = vec![0.0f64; c * l * d];
        for ci in 0..c {
            for t in 0..l {
                for di in 0..d {
                    let mut acc = 0.0f64;
                    for tau in 0..=t {
                        let mut prod = 1.0f64;
                        for sigma in tau + 1..=t {
                            prod *= f64::from(a[at(ci, sigma, di)]);
                        }
                        acc += prod * f64::from(b[at(ci, tau, di)]) * f64::from(x[ci * l + tau]);
                    }
                    want[at(ci, t, di)] = acc;
                }
            }
        }
        let got = selective_scan(&s.abar, &s.bbar, &s.cm, &s.skip, &s.x).unwrap();
        let want: Vec<f32> = want.into_iter().map(|v| v as f32).collect();
        let err = max_relative_error(got.h.as_f32().unwrap(), &want);
        prop_assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn state_is_bounded_by_input_drive(seed in any::<u64>()) {
        let s = instance(seed, 8);
        let (c, l, d) = (s.c, s.l, s.d);
        let (b, x) = (s.bbar.as_f32().unwrap(), s.x.as_f32().unwrap());
        let abar = s.abar.as_f32().unwrap();
        prop_assert!(abar.iter().all(|&v| v > 0.0 && v < 1.0));
        let h = selective_scan(&s.abar, &s.bbar, &s.cm, &s.skip, &s.x).unwrap().h;
        let h = h.as_f32().unwrap();
        let mut drive = 0.0f32;
        for t in 0..l {
            for ci in 0..c {
                for di in 0..d {
                    let i = (ci * l + t) * d + di;
                    drive = drive.max((b[i] * x[ci * l + t]).abs());
                }
            }
            let bound = drive * (t + 1) as f32;
            for ci in 0..c {
                for di in 0..d {
                    prop_assert!(h[(ci * l + t) * d + di].abs() <= bound * (1.0 + 1e-6));
                }
            }
        }
    }

    #[test]
    fn scan_is_bit_deterministic(seed in any::<u64>()) {
        let s = instance(seed, 8);
        let r1 = selective_scan(&s.abar, &s.bbar, &s.cm, &s.skip, &s.x).unwrap();
        let r2 = selective_scan(&s.abar, &s.bbar, &s.cm, &s.skip, &s.x).unwrap();
        prop_assert_eq!(r1.h.to_qten_bytes(), r2.h.to_qten_bytes());
        prop_assert_eq!(r1.y.to_qten_bytes(), r2.y.to_qten_bytes());
    }
}
