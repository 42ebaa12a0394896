use proptest::prelude::*;

use salattn::attention::{
    coattention, count_flops, gate, lightweight_nonlocal, lightweight_nonlocal_unordered, naive_nonlocal_reference,
    self_attention_block, CoAttentionParams, DynamicFilterGenerator, GateParams, NonlocalVariant,
};
use salattn::contrastive::{infonce_value, mine_hard_samples, Polarity, RegionFeature};
use salattn::data::{generate_video, ShapeKind, SynthConfig};
use salattn::metrics::{jaccard, mae, max_f_measure};
use salattn::tensor::{bce_loss, matmul, softmax_rows};
use salattn::{Rng, Tensor};

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, &mut Rng::new(seed))
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    Tensor::random_uniform(shape, 0.0, 1.0, &mut Rng::new(seed)).map(|v| v.round())
}

fn vec_of(values: &[f64]) -> Tensor {
    Tensor::new(vec![values.len()], values.to_vec()).unwrap()
}

/// Anchor `e0` and a vector whose dot with it is `d`.
fn with_dot(d: f64, tail: f64) -> Tensor {
    vec_of(&[d, tail, 0.3])
}

fn sum_exp(dots: &[f64], tau: f64) -> f64 {
    dots.iter().map(|d| (d / tau).exp()).sum()
}

/// Weight of each positive among positives, and of each negative among all terms.
fn softmax_weights(pos: &[f64], neg: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let (sp, sn) = (sum_exp(pos, tau), sum_exp(neg, tau));
    (
        pos.iter().map(|d| (d / tau).exp() / sp).collect(),
        neg.iter().map(|d| (d / tau).exp() / (sp + sn)).collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let a = rand(&[6, 4], seed);
        let b = rand(&[4, 4], seed ^ 1);
        let c = rand(&[4, 6], seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-10);
    }

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8, shift in -50.0f64..50.0) {
        let x = rand(&[rows, cols], seed).map(|v| v * 10.0);
        let s = softmax_rows(&x).unwrap();
        for r in 0..rows {
            let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
        let mut shifted = x.clone();
        for v in &mut shifted.data_mut()[..cols] {
            *v += shift;
        }
        prop_assert!(softmax_rows(&shifted).unwrap().max_abs_diff(&s) <= 1e-12);
    }

    #[test]
    fn bce_is_nonnegative(seed in any::<u64>(), n in 1usize..30) {
        let p = Tensor::random_uniform(&[n], 0.0, 1.0, &mut Rng::new(seed));
        let t = binary(&[n], seed ^ 7);
        prop_assert!(bce_loss(&p, &t).unwrap() >= 0.0);
        let half = Tensor::full(&[n], 0.5);
        prop_assert!((bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
    }

    #[test]
    fn nonlocal_variants_agree(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8, c in 1usize..=8) {
        let x = rand(&[h, w, c], seed);
        let fast = lightweight_nonlocal(&x).unwrap();
        let unordered = lightweight_nonlocal_unordered(&x).unwrap();
        let naive = naive_nonlocal_reference(&x).unwrap();
        prop_assert!(fast.max_abs_diff(&unordered) <= 1e-10);
        prop_assert!(fast.max_abs_diff(&naive) <= 1e-10);
    }

    #[test]
    fn zero_filter_bank_is_identity(seed in any::<u64>(), h in 1usize..=6, w in 1usize..=6, c in 1usize..=8) {
        let x = rand(&[h, w, c], seed);
        let out = self_attention_block(&x, &DynamicFilterGenerator::zeros(c)).unwrap();
        prop_assert_eq!(out, x);
    }

    #[test]
    fn coattention_stays_in_convex_hull(seed in any::<u64>(), hx in 1usize..=4, wx in 1usize..=4, c in 1usize..=6) {
        let v = rand(&[hx * 2, wx * 2, 3], seed);
        let x = rand(&[hx, wx, c], seed ^ 3);
        let p = CoAttentionParams { weight: rand(&[c, c], seed ^ 4), resize: rand(&[3, 3, 3, c], seed ^ 5) };
        let z = coattention(&v, &x, &p).unwrap();
        for ch in 0..c {
            let col: Vec<f64> = x.data().iter().skip(ch).step_by(c).copied().collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for zv in z.data().iter().skip(ch).step_by(c) {
                prop_assert!(*zv >= lo - 1e-12 && *zv <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn gate_never_amplifies(seed in any::<u64>(), c in 1usize..=6) {
        let z = rand(&[3, 3, c], seed).map(|v| v * 5.0);
        let g = GateParams { weight: rand(&[1, 1, c, c], seed ^ 1), bias: rand(&[c], seed ^ 2) };
        let out = gate(&z, &g).unwrap();
        for (o, zv) in out.data().iter().zip(z.data()) {
            prop_assert!(o.abs() <= zv.abs());
        }
    }

    #[test]
    fn flop_ratio_is_n_over_c(h in 1u64..64, w in 1u64..64, c in 1u64..64) {
        let naive = count_flops(NonlocalVariant::Naive, h, w, c);
        let fast = count_flops(NonlocalVariant::LightweightReordered, h, w, c);
        prop_assert_eq!(naive * c, fast * h * w);
    }

    #[test]
    fn infonce_permutation_invariant(seed in any::<u64>(), np in 1usize..5, nn in 1usize..5) {
        let mut rng = Rng::new(seed);
        let anchor = Tensor::random_uniform(&[4], -1.0, 1.0, &mut rng);
        let pos: Vec<Tensor> = (0..np).map(|_| Tensor::random_uniform(&[4], -1.0, 1.0, &mut rng)).collect();
        let neg: Vec<Tensor> = (0..nn).map(|_| Tensor::random_uniform(&[4], -1.0, 1.0, &mut rng)).collect();
        let base = infonce_value(&anchor, &pos.iter().collect::<Vec<_>>(), &neg.iter().collect::<Vec<_>>(), 0.1).unwrap();
        let mut pp: Vec<&Tensor> = pos.iter().collect();
        let mut nq: Vec<&Tensor> = neg.iter().collect();
        pp.reverse();
        nq.rotate_left(nn / 2);
        let permuted = infonce_value(&anchor, &pp, &nq, 0.1).unwrap();
        prop_assert!((base - permuted).abs() <= 1e-12);
    }

    #[test]
    fn infonce_monotone_in_single_dot(
        pos_dots in prop::collection::vec(-1.0f64..1.0, 1..4),
        neg_dots in prop::collection::vec(-1.0f64..1.0, 1..4),
        which in any::<prop::sample::Index>(),
        tau in 0.05f64..1.0,
    ) {
        let anchor = vec_of(&[1.0, 0.0, 0.0]);
        let build = |ds: &[f64]| ds.iter().map(|&d| with_dot(d, 0.2)).collect::<Vec<_>>();
        let eval = |p: &[f64], n: &[f64]| {
            let (p, n) = (build(p), build(n));
            infonce_value(&anchor, &p.iter().collect::<Vec<_>>(), &n.iter().collect::<Vec<_>>(), tau).unwrap()
        };
        let base = eval(&pos_dots, &neg_dots);
        let (ip, ineg) = (which.index(pos_dots.len()), which.index(neg_dots.len()));
        // First-order change of the loss, used to skip bumps below f64 resolution.
        let (wp, wn) = softmax_weights(&pos_dots, &neg_dots, tau);
        let wp_all = wp[ip] * sum_exp(&pos_dots, tau) / (sum_exp(&pos_dots, tau) + sum_exp(&neg_dots, tau));
        prop_assume!((wp[ip] - wp_all) * 1e-4 / tau > 1e-10 * base);
        prop_assume!(wn[ineg] * 1e-4 / tau > 1e-10 * base);
        let mut up_pos = pos_dots.clone();
        up_pos[ip] += 1e-4;
        prop_assert!(eval(&up_pos, &neg_dots) < base);
        let mut up_neg = neg_dots.clone();
        up_neg[ineg] += 1e-4;
        prop_assert!(eval(&pos_dots, &up_neg) > base);
    }

    #[test]
    fn infonce_matches_direct_summation(dots in prop::collection::vec(-1.0f64..1.0, 2..9), split in any::<prop::sample::Index>()) {
        let k = 1 + split.index(dots.len() - 1);
        let (pd, nd) = dots.split_at(k);
        let anchor = vec_of(&[1.0, 0.0]);
        let mk = |ds: &[f64]| ds.iter().map(|&d| vec_of(&[d, 0.5])).collect::<Vec<_>>();
        let (p, n) = (mk(pd), mk(nd));
        let stable = infonce_value(&anchor, &p.iter().collect::<Vec<_>>(), &n.iter().collect::<Vec<_>>(), 0.1).unwrap();
        let num: f64 = pd.iter().map(|d| (d / 0.1).exp()).sum();
        let den: f64 = num + nd.iter().map(|d| (d / 0.1).exp()).sum::<f64>();
        prop_assert!((stable - (-(num / den).ln())).abs() <= 1e-12);
    }

    #[test]
    fn mined_scores_dominate_excluded(scores in prop::collection::vec(0.0f64..1.0, 0..12), k in 0usize..8) {
        let cands: Vec<RegionFeature> = scores.iter().enumerate().map(|(i, &s)| RegionFeature {
            video_id: "v".into(),
            frame_idx: i,
            polarity: Polarity::Foreground,
            vec: vec_of(&[1.0]),
            mining_score: s,
        }).collect();
        let picked = mine_hard_samples(&cands, k);
        prop_assert_eq!(picked.len(), k.min(cands.len()));
        let chosen: Vec<usize> = picked.iter().map(|r| r.frame_idx).collect();
        for p in &picked {
            for c in cands.iter().filter(|c| !chosen.contains(&c.frame_idx)) {
                prop_assert!(p.mining_score >= c.mining_score);
            }
        }
    }

    #[test]
    fn max_f_invariant_under_power_remap(seed in any::<u64>(), gamma_idx in 0usize..2) {
        let gamma = [0.5, 2.0][gamma_idx];
        let mut rng = Rng::new(seed);
        // Sparse levels of the 256-grid so remapped values stay threshold-separated.
        let levels: Vec<f64> = (0..144).map(|_| (17 * rng.below(16)) as f64 / 255.0).collect();
        let p = Tensor::new(vec![12, 12], levels).unwrap();
        let g = binary(&[12, 12], seed ^ 9);
        prop_assume!(g.sum() > 0.0);
        let base = max_f_measure(&p, &g, 0.3).unwrap().unwrap();
        let remapped = max_f_measure(&p.map(|v| v.powf(gamma)), &g, 0.3).unwrap().unwrap();
        prop_assert!((base - remapped).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = binary(&[7, 9], seed);
        let b = binary(&[7, 9], seed ^ 1);
        prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
        prop_assert_eq!(jaccard(&a, &b).unwrap(), jaccard(&b, &a).unwrap());
        let j = jaccard(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j == 1.0, a == b);
    }

    #[test]
    fn flipping_pixels_never_raises_jaccard(seed in any::<u64>(), k_idx in 0usize..3) {
        let k = [1usize, 4, 16][k_idx];
        let g = binary(&[8, 8], seed);
        let mut rng = Rng::new(seed ^ 5);
        let start = g.clone();
        let mut p = start.clone();
        for i in rng.choose_distinct(64, k) {
            p.data_mut()[i] = 1.0 - p.data()[i];
        }
        prop_assert!(jaccard(&p, &g).unwrap() <= jaccard(&start, &g).unwrap());
        // From an imperfect start as well.
        let q0 = binary(&[8, 8], seed ^ 6);
        let mut q = q0.clone();
        for i in rng.choose_distinct(64, k) {
            if q.data()[i] == g.data()[i] {
                q.data_mut()[i] = 1.0 - q.data()[i];
            }
        }
        prop_assert!(jaccard(&q, &g).unwrap() <= jaccard(&q0, &g).unwrap());
    }

    #[test]
    fn synth_masks_in_support_band(seed in any::<u64>(), scale in 0.1f64..=0.4, disk in any::<bool>()) {
        let cfg = SynthConfig {
            seed,
            n_frames: 4,
            shape: if disk { ShapeKind::Disk } else { ShapeKind::Square },
            scale,
            ..SynthConfig::default()
        };
        let v = generate_video("p", &cfg).unwrap();
        let area = (cfg.height * cfg.width) as f64;
        for m in &v.masks {
            let fg = m.sum();
            prop_assert!(fg >= scale * scale * 0.5 * area && fg <= scale * scale * 2.0 * area, "{}", fg);
        }
        prop_assert_eq!(generate_video("p", &cfg).unwrap(), v);
    }
}
