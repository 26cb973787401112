use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use maskdiff::denoiser::{CondMode, Denoiser, DenoiserConfig};
use maskdiff::evalkit::dice_iou;
use maskdiff::objectives::{adaptive_loss, conditional_loss, seg_loss, weight_map, WeightMap};
use maskdiff::rng::{randn, RngState};
use maskdiff::sampler::{sample, sample_with, SamplerConfig, SamplerKind};
use maskdiff::schedule::{make_linear_schedule, q_sample_iterated, SigmaMode};
use maskdiff::synthdata::{gen_item, Geometry};
use maskdiff::tensor::Tensor;

fn binary(bits: &[bool], h: usize, w: usize) -> Tensor {
    Tensor::from_vec([1, 1, h, w], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (2usize..=12, 2usize..=12).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w)))
}

fn tiny_denoiser(mode: CondMode) -> Denoiser {
    Denoiser::new(DenoiserConfig {
        base_channels: 4,
        levels: 2,
        time_embed_dim: 8,
        groups: 2,
        cond_mode: mode,
        mask_hidden: 4,
        max_timestep: 20,
        ..Default::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreasing(t in 1usize..400, start in 1e-5f64..0.05, span in 0.0f64..0.4) {
        let sched = make_linear_schedule(t, start, start + span, SigmaMode::BetaTilde).unwrap();
        let ab = sched.alpha_bars();
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn weight_balance((h, w, bits) in mask_strategy(), clamp in 0.001f64..0.2) {
        let m = binary(&bits, h, w);
        let wm = weight_map(&m, clamp).unwrap();
        let r = wm.ratio[0];
        let hw = (h * w) as f64;
        let n_fg = bits.iter().filter(|&&b| b).count() as f64;
        // The clamp moves r away from the raw ratio only in degenerate masks.
        let raw = n_fg / hw;
        prop_assert!((r - raw.clamp(clamp, 1.0 - clamp)).abs() < 1e-15);
        let (mut fg, mut bg) = (0.0, 0.0);
        for (&wt, &b) in wm.weights.data().iter().zip(&bits) {
            if b { fg += wt } else { bg += wt }
        }
        prop_assert!((fg - n_fg * (1.0 - r)).abs() <= 1e-9);
        prop_assert!((bg - (hw - n_fg) * r).abs() <= 1e-9);
        if raw == r {
            prop_assert!((fg - bg).abs() <= 1e-9);
        }
    }

    #[test]
    fn uniform_weights_scale_the_plain_loss(seed in any::<u64>(), c in 0.0f64..3.0, h in 1usize..8, w in 1usize..8) {
        let shape = [2, 3, h, w];
        let eps = randn(shape, &mut RngState::new(seed).fork(1).generator());
        let pred = randn(shape, &mut RngState::new(seed).fork(2).generator());
        let a = adaptive_loss(&eps, &pred, &WeightMap::uniform([2, 1, h, w], c)).unwrap();
        let b = c * conditional_loss(&eps, &pred).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn losses_are_nonnegative((h, w, bits) in mask_strategy(), seed in any::<u64>()) {
        let m = binary(&bits, h, w);
        let mut g = RngState::new(seed).generator();
        let probs: Vec<f64> = (0..h * w).map(|_| g.random_range(0.0..1.0)).collect();
        let p = Tensor::from_vec([1, 1, h, w], probs).unwrap();
        prop_assert!(seg_loss(&p, &m).unwrap() >= 0.0);
        let eps = randn([1, 3, h, w], &mut g);
        prop_assert_eq!(conditional_loss(&eps, &eps).unwrap(), 0.0);
        let wm = weight_map(&m, 0.01).unwrap();
        let other = randn([1, 3, h, w], &mut g);
        prop_assert!(adaptive_loss(&eps, &other, &wm).unwrap() >= 0.0);
        prop_assert_eq!(adaptive_loss(&eps, &eps, &wm).unwrap(), 0.0);
    }

    #[test]
    fn dice_iou_identity_and_relabel_invariance(
        (h, w, a) in mask_strategy(),
        seed in any::<u64>(),
    ) {
        let mut g = RngState::new(seed).generator();
        let b: Vec<bool> = (0..h * w).map(|_| g.random_bool(0.5)).collect();
        let (pa, pb) = (binary(&a, h, w), binary(&b, h, w));
        let (d, i) = dice_iou(&pa, &pb).unwrap()[0];
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
        prop_assert!(0.0 <= i && i <= d && d <= 1.0);
        // Swapping prediction and ground truth, or permuting pixels of both.
        prop_assert_eq!(dice_iou(&pb, &pa).unwrap()[0], (d, i));
        let mut order: Vec<usize> = (0..h * w).collect();
        order.shuffle(&mut g);
        let perm = |v: &[bool]| order.iter().map(|&k| v[k]).collect::<Vec<_>>();
        prop_assert_eq!(dice_iou(&binary(&perm(&a), h, w), &binary(&perm(&b), h, w)).unwrap()[0], (d, i));
    }

    #[test]
    fn iterated_chain_is_deterministic(seed in any::<u64>(), t in 1usize..50) {
        let sched = make_linear_schedule(50, 1e-4, 0.05, SigmaMode::BetaTilde).unwrap();
        let x0 = randn([1, 3, 4, 4], &mut RngState::new(seed).generator());
        let a = q_sample_iterated(&x0, t, RngState::new(seed ^ 1), &sched).unwrap();
        let b = q_sample_iterated(&x0, t, RngState::new(seed ^ 1), &sched).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn encoder_ignores_the_mask(seed in any::<u64>(), t in 1usize..=20, spade in any::<bool>()) {
        let net = tiny_denoiser(if spade { CondMode::Spade } else { CondMode::Concat });
        let params = net.init_params(RngState::new(seed));
        let x = randn([1, 3, 8, 8], &mut RngState::new(seed).fork(1).generator());
        let m1 = binary(&(0..64).map(|k| k % 3 == 0).collect::<Vec<_>>(), 8, 8);
        let m2 = binary(&(0..64).map(|k| k < 20).collect::<Vec<_>>(), 8, 8);
        let a = net.encoder_activations(&params, &x, &[t], &m1).unwrap();
        let b = net.encoder_activations(&params, &x, &[t], &m2).unwrap();
        prop_assert_eq!(a, b);
        let out = net.predict(&params, &x, &[t], &m1).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        prop_assert_eq!(out, net.predict(&params, &x, &[t], &m1).unwrap());
    }

    #[test]
    fn samples_are_deterministic_and_masks_untouched(seed in any::<u64>(), eta in 0.0f64..1.0, ddpm in any::<bool>()) {
        let net = tiny_denoiser(CondMode::Spade);
        let params = net.init_params(RngState::new(seed));
        let sched = make_linear_schedule(20, 1e-3, 0.2, SigmaMode::BetaTilde).unwrap();
        let masks = binary(&(0..128).map(|k| (k / 8 + k % 8) % 5 == 0).collect::<Vec<_>>(), 8, 16);
        let masks = Tensor::from_vec([2, 1, 8, 8], masks.data().to_vec()).unwrap();
        let cfg = SamplerConfig {
            kind: if ddpm { SamplerKind::Ddpm } else { SamplerKind::Ddim },
            num_steps: 5,
            eta,
            ..Default::default()
        };
        let a = sample(&net, &params, &masks, &cfg, &sched, RngState::new(seed ^ 7), None).unwrap();
        let b = sample(&net, &params, &masks, &cfg, &sched, RngState::new(seed ^ 7), None).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut seen = Vec::new();
        sample_with(
            |x, t| {
                seen.push(t);
                net.predict(&params, x, &[t, t], &masks)
            },
            [2, 3, 8, 8],
            &cfg,
            &sched,
            RngState::new(seed ^ 7),
            None,
        )
        .unwrap();
        prop_assert!(seen.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(seen[0], 20);
    }

    #[test]
    fn items_generate_independently(seed in any::<u64>(), index in 0u64..500) {
        let g = Geometry { size: 24 };
        let a = gen_item(seed, index, g).unwrap();
        let b = gen_item(seed, index, g).unwrap();
        prop_assert_eq!(&a, &b);
        let blob = a.blob.as_ref().unwrap();
        prop_assert_eq!(&blob.mask_bytes(24), &a.mask.data);
        let n_fg = a.mask.data.iter().filter(|&&v| v == 255).count();
        prop_assert!(n_fg as f64 >= 0.01 * 576.0);
    }
}
