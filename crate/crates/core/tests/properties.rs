use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdmamba::checkpoint::{read_checkpoint, write_checkpoint};
use cdmamba::config::RunConfig;
use cdmamba::data::{patch_split, Mask, SamplePair};
use cdmamba::model::{CdMamba, ModelConfig};
use cdmamba::ssm::{selective_scan_reference, zoh, ScanInputs};
use cdmamba::train::{ce_loss, change_probability, dice_loss, pixel_logits};
use cdmamba::{Tape, Tensor};

#[test]
fn default_parameter_count_is_stable() {
    assert_eq!(CdMamba::parameter_count(&ModelConfig::default()).unwrap(), 5_127_810);
    let without = ModelConfig {
        aglgf_stages: BTreeSet::new(),
        ..ModelConfig::default()
    };
    assert!(CdMamba::parameter_count(&without).unwrap() < 5_127_810);
}

#[test]
fn same_seed_same_weights() {
    let cfg = ModelConfig::reduced();
    let (_, a) = CdMamba::new(&cfg, 11).unwrap();
    let (_, b) = CdMamba::new(&cfg, 11).unwrap();
    let (_, c) = CdMamba::new(&cfg, 12).unwrap();
    let values = |s: &cdmamba::nn::ParamStore| s.iter().flat_map(|p| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, h, w], |_| rng.gen_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zoh_is_a_contraction_for_stable_poles(a in -20.0f64..-1e-3, delta in 1e-4f64..2.0) {
        let z = zoh(a, delta).unwrap();
        prop_assert!(z.a_bar > 0.0 && z.a_bar < 1.0);
        // phi = (exp(Δa) − 1)/a lies in (0, Δ] for a < 0.
        prop_assert!(z.phi > 0.0 && z.phi <= delta * (1.0 + 1e-15));
    }

    #[test]
    fn scan_is_linear_in_the_input(l in 1usize..24, n in 1usize..5, alpha in -3.0f64..3.0, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = 2;
        let mut v = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let (u, delta, a, b, c) = (v(l * dm, -1.0, 1.0), v(l * dm, 0.01, 1.0), v(dm * n, -2.0, -0.1), v(l * n, -1.0, 1.0), v(l * n, -1.0, 1.0));
        let d = v(dm, -1.0, 1.0);
        let scan = |u: &[f64]| selective_scan_reference(&ScanInputs {
            u, delta: &delta, a: &a, b: &b, c: &c, d: Some(&d), len: l, channels: dm, state: n,
        }).unwrap();
        let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        for (y1, y2) in scan(&u).iter().zip(scan(&scaled)) {
            prop_assert!((alpha * y1 - y2).abs() <= 1e-12 * (1.0 + y2.abs()));
        }
    }

    #[test]
    fn losses_are_bounded(p in 1usize..40, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn([p, 2], |_| rng.gen_range(-6.0..6.0));
        let mut y: Vec<u8> = (0..p).map(|_| rng.gen_range(0..2)).collect();
        y[0] = 1;
        let tape = Tape::new();
        let x = tape.constant(logits);
        let ce = ce_loss(x, &y).unwrap().value().data()[0];
        let dice = dice_loss(change_probability(x).unwrap(), &y, 1.0).unwrap().value().data()[0];
        prop_assert!(ce >= 0.0 && ce.is_finite());
        prop_assert!((0.0..=1.0).contains(&dice));
    }

    #[test]
    fn patches_tile_the_image_exactly(tiles_y in 1usize..4, tiles_x in 1usize..4, seed in 0u64..100) {
        let patch = 8;
        let (h, w) = (tiles_y * patch, tiles_x * patch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = Mask::new(h, w, (0..h * w).map(|_| rng.gen_range(0..2)).collect()).unwrap();
        let s = SamplePair::new("s", random_image(seed, h, w), random_image(seed + 1, h, w), gt).unwrap();
        let parts = patch_split(&s, patch).unwrap();
        prop_assert_eq!(parts.len(), tiles_y * tiles_x);
        for (k, part) in parts.iter().enumerate() {
            let (r, c) = (k / tiles_x, k % tiles_x);
            prop_assert_eq!(&part.id, &format!("s_r{r}_c{c}"));
            for y in 0..patch {
                for x in 0..patch {
                    let (gy, gx) = (r * patch + y, c * patch + x);
                    prop_assert_eq!(part.gt.data[y * patch + x], s.gt.data[gy * w + gx]);
                    for ch in 0..3 {
                        prop_assert_eq!(
                            part.t2.data()[(ch * patch + y) * patch + x],
                            s.t2.data()[(ch * h + gy) * w + gx]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn config_text_round_trips(epochs in 1usize..500, lr in 1e-6f64..1e-1, l1 in 0.0f64..2.0, seed in any::<u64>(), stages in proptest::collection::btree_set(1usize..=4, 0..4)) {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = epochs;
        cfg.train.adam.lr = lr;
        cfg.train.loss.lambda1 = l1;
        cfg.train.seed = seed;
        cfg.model.aglgf_stages = stages;
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..50) {
        let cfg = RunConfig { model: ModelConfig::reduced(), ..RunConfig::default() };
        let (_, store) = CdMamba::new(&cfg.model, seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        let (back, params) = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, cfg);
        for (p, (name, t)) in store.iter().zip(params) {
            prop_assert_eq!(&p.name, &name);
            prop_assert_eq!(&p.value, &t);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn reduced_model_is_swap_symmetric(seed in 0u64..1000, side in prop::sample::select(vec![8usize, 16])) {
        let (model, store) = CdMamba::new(&ModelConfig::reduced(), seed).unwrap();
        let (a, b) = (random_image(seed, side, side), random_image(seed ^ 1, side, side));
        let run = |x: &Tensor, y: &Tensor| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let logits = model.forward(&p, tape.constant(x.clone()), tape.constant(y.clone())).unwrap();
            let rows = pixel_logits(logits).unwrap().value();
            rows.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(&a, &b), run(&b, &a));
    }
}
