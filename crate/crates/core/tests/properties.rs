use maskdiff::conditioning::{extract_bundle, ConditionBundle, PyramidEncoder};
use maskdiff::data::{generate_dataset, DataConfig};
use maskdiff::diffusion::*;
use maskdiff::image::Image;
use maskdiff::inference::{
    aggregate, member_streams, sample_mask, BernoulliSampler, MaskPredictor, MaskSampler,
};
use maskdiff::metrics::{auc, f1};
use maskdiff::numerics::{Tape, Tensor};
use maskdiff::rng::RngStream;
use maskdiff::schedule::{make_cosine_schedule, make_linear_schedule, NoiseSchedule};
use maskdiff::Result;
use proptest::prelude::*;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = MaskState> {
    proptest::collection::vec(0u8..2, h * w).prop_map(move |l| MaskState::new(h, w, l, 0).unwrap())
}

fn linear_strategy() -> impl Strategy<Value = NoiseSchedule> {
    (2usize..60, 1e-4f64..0.05, 0.05f64..0.5)
        .prop_map(|(t, a, b)| make_linear_schedule(t, a, b).unwrap())
}

fn any_schedule() -> impl Strategy<Value = NoiseSchedule> {
    prop_oneof![
        linear_strategy(),
        (2usize..60, 1e-4f64..0.1).prop_map(|(t, s)| make_cosine_schedule(t, s).unwrap()),
    ]
}

/// Tampered probability read off the red channel, so members disagree where the image is grey.
struct RedPredictor {
    steps: usize,
}

impl MaskPredictor for RedPredictor {
    fn max_step(&self) -> usize {
        self.steps
    }

    fn p0_batch(
        &self,
        x_t: &[&MaskState],
        _: &[usize],
        bundles: &[&ConditionBundle],
    ) -> Result<Vec<CategoricalField>> {
        x_t.iter()
            .zip(bundles)
            .map(|(x, b)| {
                let red = &b.image.to_chw()[..x.pixels()];
                let p: Vec<f64> = red.iter().map(|v| v.clamp(0.05, 0.95)).collect();
                CategoricalField::from_tampered(x.height(), x.width(), &p)
            })
            .collect()
    }
}

fn random_bundle(seed: u64) -> ConditionBundle {
    let mut rng = RngStream::new(seed);
    let image = Image::new(8, 8, (0..8 * 8 * 3).map(|_| rng.uniform()).collect()).unwrap();
    extract_bundle(&image, &PyramidEncoder::new(1, [8, 8, 8]).unwrap()).unwrap()
}

/// `P(X_{t-1} = k | X_t, X_0)` by summing the forward joint over both previous classes.
fn enumerated(xt: u8, x0: u8, t: usize, s: &NoiseSchedule) -> [f64; 2] {
    let joint: Vec<f64> = (0..2u8)
        .map(|k| {
            keep_or_uniform(k, 1.0 - s.beta(t))[xt as usize]
                * keep_or_uniform(x0, s.alpha_bar(t - 1))[k as usize]
        })
        .collect();
    let z = joint[0] + joint[1];
    [joint[0] / z, joint[1] / z]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_bytes_round_trip(s in any_schedule()) {
        let back = NoiseSchedule::from_bytes(&s.to_bytes()).unwrap();
        prop_assert_eq!(back.betas(), s.betas());
        prop_assert_eq!(back.alpha_bars(), s.alpha_bars());
    }

    #[test]
    fn alpha_bar_decreases_within_unit_interval(s in any_schedule()) {
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&v| v > 0.0 && v <= 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn posterior_matches_enumeration(s in any_schedule(), t_off in 0usize..9) {
        let t = 2 + t_off.min(s.steps() - 2);
        for xt in 0..2u8 {
            for x0 in 0..2u8 {
                let got = posterior_pixel(xt, x0, s.alpha(t), s.alpha_bar(t - 1));
                let want = enumerated(xt, x0, t, &s);
                prop_assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_law_recovers_marginal(s in any_schedule(), t_off in 0usize..20, x0 in 0u8..2) {
        // sum_{x_{t-1}} q(x_t | x_{t-1}) q(x_{t-1} | x_0) = q(x_t | x_0)
        let t = 2 + t_off.min(s.steps() - 2);
        let prev = keep_or_uniform(x0, s.alpha_bar(t - 1));
        let want = keep_or_uniform(x0, s.alpha_bar(t));
        for xt in 0..2usize {
            let got: f64 = (0..2u8).map(|k| keep_or_uniform(k, s.alpha(t))[xt] * prev[k as usize]).sum();
            prop_assert!((got - want[xt]).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_finite_and_nonnegative(
        s in linear_strategy(),
        x0 in mask_strategy(4, 4),
        p in proptest::collection::vec(0.0f64..=1.0, 16),
        seed in any::<u64>(),
        t_off in 0usize..60,
    ) {
        let t = 2 + t_off % (s.steps() - 1);
        let x_t = q_sample(&x0, t, &s, &mut RngStream::new(seed)).unwrap();
        let field = CategoricalField::from_tampered(4, 4, &p).unwrap();
        let kl = kl_loss(&x_t, &x0, &field, t, &s).unwrap().value;
        let ce = ce_loss(&x0, &field).unwrap().value;
        prop_assert!(kl.is_finite() && kl >= 0.0);
        prop_assert!(ce.is_finite() && ce >= 0.0);
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), img in 0u64..1000, steps in 1usize..6) {
        let sched = make_linear_schedule(steps.max(2), 0.01, 0.2).unwrap();
        let pred = RedPredictor { steps: sched.steps() };
        let sampler = BernoulliSampler { predictor: &pred, sched: &sched, batch: 4, one_step: false };
        let bundle = random_bundle(img);
        let a = sample_mask(&sampler, &bundle, &mut RngStream::new(seed)).unwrap();
        let b = sample_mask(&sampler, &bundle, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ensemble_is_exchangeable(seed in any::<u64>(), n in 1usize..7, rot in 0usize..7) {
        let sched = make_linear_schedule(4, 0.01, 0.2).unwrap();
        let pred = RedPredictor { steps: 4 };
        let sampler = BernoulliSampler { predictor: &pred, sched: &sched, batch: 3, one_step: false };
        let bundle = random_bundle(seed ^ 7);
        let brefs = vec![&bundle; n];
        let streams = member_streams(&RngStream::new(seed), n);
        let mut rotated = streams.clone();
        rotated.rotate_left(rot % n);
        let a = aggregate(&sampler.sample_batch(&brefs, &mut streams.clone()).unwrap()).unwrap();
        let members_b = sampler.sample_batch(&brefs, &mut rotated).unwrap();
        let b = aggregate(&members_b).unwrap();
        prop_assert_eq!(&a.vote_probs, &b.vote_probs);
        prop_assert_eq!(&a.final_mask, &b.final_mask);
        prop_assert_eq!(&a.uncertainty, &b.uncertainty);
        let mut ma = a.members.clone();
        ma.rotate_left(rot % n);
        prop_assert_eq!(ma, b.members);
        prop_assert!(a.vote_probs.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.uncertainty.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.final_mask.labels().iter().all(|&l| l <= 1));
    }

    #[test]
    fn metrics_ignore_pixel_order(
        gt in mask_strategy(6, 6),
        pred in mask_strategy(6, 6),
        probs in proptest::collection::vec(0.0f64..1.0, 36),
        key in any::<u64>(),
    ) {
        prop_assume!(gt.labels().contains(&0) && gt.labels().contains(&1));
        let mut perm: Vec<usize> = (0..36).collect();
        let mut rng = RngStream::new(key);
        for i in (1..36).rev() {
            perm.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let shuffle = |m: &MaskState| MaskState::new(6, 6, perm.iter().map(|&i| m.labels()[i]).collect(), 0).unwrap();
        let probs_p: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
        prop_assert_eq!(f1(&pred, &gt).unwrap(), f1(&shuffle(&pred), &shuffle(&gt)).unwrap());
        prop_assert!((auc(&probs, &gt).unwrap() - auc(&probs_p, &shuffle(&gt)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms(gt in mask_strategy(5, 5), probs in proptest::collection::vec(0.0f64..1.0, 25)) {
        prop_assume!(gt.labels().contains(&0) && gt.labels().contains(&1));
        let squashed: Vec<f64> = probs.iter().map(|p| (3.0 * p).exp_m1() / 3f64.exp_m1()).collect();
        let cubed: Vec<f64> = probs.iter().map(|p| p * p * p).collect();
        let base = auc(&probs, &gt).unwrap();
        prop_assert!((base - auc(&squashed, &gt).unwrap()).abs() < 1e-12);
        prop_assert!((base - auc(&cubed, &gt).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn dataset_generation_is_reproducible() {
    let cfg = DataConfig {
        count: 6,
        size: 32,
        seed: 3,
        ambiguous_frac: 0.5,
    };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.mask, y.mask);
        assert_eq!(x.image.to_chw(), y.image.to_chw());
    }
}
