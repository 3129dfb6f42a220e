//! Property tests for module invariants.

use maskris::losses::{total_loss, LossConfig, LossValue};
use maskris::masking::{
    apply_image_mask, exact_full_mask_prob, mask_tokens_detailed, round_half_up, sample_image_mask,
    sample_patch_mask, MaskStrategy, PatchGrid, PixelMask, TextMaskConfig, TokenAction,
};
use maskris::metrics::{intersection_union, iou, EvalResult};
use maskris::model::{decode_checkpoint, encode_checkpoint, forward, init_params, ModelConfig};
use maskris::synthdata::{
    corrupt, decode_dataset, encode_dataset, generate_dataset, generate_scene, resolve, CorruptionKind, SceneConfig,
    Shape, ShapeKind,
};
use maskris::text::{TokenSequence, Vocabulary, MASK, PAD, RESERVED};
use maskris::{ImageBuffer, RngStream};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = MaskStrategy> {
    prop::sample::select(MaskStrategy::ALL.to_vec())
}

fn random_mask(h: usize, w: usize, seed: u64, density: f64) -> PixelMask {
    let mut rng = RngStream::new(seed, "prop/mask");
    let bits = (0..h * w).map(|_| rng.bernoulli(density)).collect();
    PixelMask::from_bits(h, w, bits).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = RngStream::new(seed, "prop/image");
    ImageBuffer::from_raw(h, w, (0..h * w * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
}

/// Independent point-in-shape test: triangles by barycentric sign tests
/// against the three vertices instead of the row-width rule.
fn oracle_contains(s: &Shape, y: f64, x: f64) -> bool {
    let (cy, cx) = s.center;
    let h = s.size / 2.0;
    match s.kind {
        ShapeKind::Square => y > cy - h && y < cy + h && x > cx - h && x < cx + h,
        ShapeKind::Circle => (y - cy).powi(2) + (x - cx).powi(2) < h * h,
        ShapeKind::Triangle => {
            let (a, b, c) = ((cy - h, cx), (cy + h, cx - h), (cy + h, cx + h));
            let edge = |p: (f64, f64), q: (f64, f64)| (q.1 - p.1) * (y - p.0) - (q.0 - p.0) * (x - p.1);
            let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
            (d1 < 0.0 && d2 < 0.0 && d3 < 0.0) || (d1 > 0.0 && d2 > 0.0 && d3 > 0.0)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_mask_count_is_rounded_ratio(rows in 1usize..16, cols in 1usize..16, ratio in 0.0f64..=1.0, seed: u64) {
        let grid = PatchGrid::new(rows * 4, cols * 4, 4).unwrap();
        let m = sample_patch_mask(grid, ratio, &mut RngStream::new(seed, "p")).unwrap();
        prop_assert_eq!(m.count(), round_half_up(ratio * (rows * cols) as f64));
    }

    #[test]
    fn samplers_are_pure(strategy in mask_strategy(), ratio in prop::sample::select(vec![0.25, 0.5, 0.75]), seed: u64) {
        let rng = RngStream::new(seed, "pure");
        let a = sample_image_mask(strategy, 32, 32, 8, ratio, &mut rng.clone()).unwrap();
        let b = sample_image_mask(strategy, 32, 32, 8, ratio, &mut rng.clone()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn image_masking_is_idempotent(seed: u64, density in 0.0f64..1.0) {
        let img = random_image(8, 8, seed);
        let m = random_mask(8, 8, seed, density);
        let once = apply_image_mask(&img, &m).unwrap();
        prop_assert_eq!(&apply_image_mask(&once, &m).unwrap(), &once);
        for y in 0..8 {
            for x in 0..8 {
                let expect = if m.get(y, x) { [0.0; 3] } else { img.pixel(y, x) };
                prop_assert_eq!(once.pixel(y, x), expect);
            }
        }
    }

    #[test]
    fn text_masking_respects_padding_and_vocabulary(valid in 0usize..=20, seed: u64, select in 0.0f64..=1.0) {
        let vocab = Vocabulary::standard();
        let mut rng = RngStream::new(seed, "t");
        let mut ids: Vec<u16> = (0..valid).map(|_| rng.between(RESERVED, vocab.len() - 1) as u16).collect();
        ids.resize(20, PAD);
        let toks = TokenSequence::new(ids, valid).unwrap();
        let cfg = TextMaskConfig { select_ratio: select, ..Default::default() };
        let (out, actions) = mask_tokens_detailed(&toks, &cfg, &vocab, &mut rng).unwrap();
        prop_assert_eq!(&out.ids()[valid..], &toks.ids()[valid..]);
        for (i, a) in actions.iter().enumerate() {
            let (before, after) = (toks.ids()[i], out.ids()[i]);
            match a {
                TokenAction::Kept | TokenAction::Unchanged => prop_assert_eq!(after, before),
                TokenAction::Masked => prop_assert_eq!(after, MASK),
                TokenAction::Randomized => prop_assert!(after as usize >= RESERVED),
            }
            if i >= valid {
                prop_assert_eq!(*a, TokenAction::Kept);
            }
        }
    }

    #[test]
    fn full_mask_probability_is_monotone(cells in 1usize..=256, m in 0usize..=256, k in 0usize..8) {
        let masked = m.min(cells);
        let k = k.min(cells - 1);
        let p = exact_full_mask_prob(cells, masked, k).unwrap();
        prop_assert!(exact_full_mask_prob(cells, masked, k + 1).unwrap() <= p);
        if masked < cells {
            prop_assert!(exact_full_mask_prob(cells, masked + 1, k).unwrap() >= p);
        }
    }

    #[test]
    fn iou_is_symmetric_and_matches_double_loop(a: u64, b: u64, da in 0.0f64..1.0, db in 0.0f64..1.0) {
        let (p, g) = (random_mask(16, 16, a, da), random_mask(16, 16, b, db));
        let (mut i, mut u) = (0u64, 0u64);
        for y in 0..16 {
            for x in 0..16 {
                i += (p.get(y, x) && g.get(y, x)) as u64;
                u += (p.get(y, x) || g.get(y, x)) as u64;
            }
        }
        prop_assert_eq!(intersection_union(&p, &g).unwrap(), (i, u));
        let expect = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        prop_assert_eq!(iou(&p, &g).unwrap(), expect);
        prop_assert_eq!(iou(&g, &p).unwrap(), expect);
    }

    #[test]
    fn metrics_ignore_consistent_pixel_permutation(a: u64, b: u64, perm_seed: u64) {
        let (p, g) = (random_mask(16, 16, a, 0.4), random_mask(16, 16, b, 0.4));
        let mut order: Vec<usize> = (0..256).collect();
        let mut rng = RngStream::new(perm_seed, "perm");
        for i in (1..256).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let shuffle = |m: &PixelMask| PixelMask::from_bits(16, 16, order.iter().map(|&i| m.bits()[i]).collect()).unwrap();
        prop_assert_eq!(iou(&p, &g).unwrap(), iou(&shuffle(&p), &shuffle(&g)).unwrap());
    }

    #[test]
    fn repeated_sample_aggregates_to_its_iou(a: u64, b: u64, n in 1usize..20) {
        let (p, g) = (random_mask(16, 16, a, 0.5), random_mask(16, 16, b, 0.5));
        let single = iou(&p, &g).unwrap();
        let r = EvalResult::from_masks(&vec![p; n], &vec![g; n]).unwrap();
        prop_assert!((r.miou - single).abs() < 1e-12);
        prop_assert!((r.oiou - single).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_affine(lambda in 0.0f64..=1.0, ce in 0.0f64..5.0, dist in 0.0f64..5.0) {
        let ce_v = LossValue { value: ce, grad: vec![0.5, -1.5] };
        let dist_v = LossValue { value: dist, grad: vec![2.0, 0.25] };
        let t = total_loss(&ce_v, &dist_v, &LossConfig { lambda, full_bce: true }).unwrap();
        prop_assert_eq!(t.value, lambda * ce + (1.0 - lambda) * dist);
    }

    #[test]
    fn corruptions_stay_in_unit_range(seed: u64, kind_ix in 0usize..5, severity in 1u8..=5) {
        let img = random_image(8, 8, seed);
        let kind = CorruptionKind::ALL[kind_ix];
        let out = corrupt(&img, kind, severity, &mut RngStream::new(seed, "c")).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenes_resolve_uniquely_and_gt_matches_oracle(seed: u64) {
        let cfg = SceneConfig::default();
        let vocab = Vocabulary::standard();
        let (spec, rec) = generate_scene(&cfg, &vocab, &mut RngStream::new(seed, "scene")).unwrap();
        prop_assert_eq!(resolve(&rec.expression, &spec.shapes), Some(spec.referent_index));
        let s = &spec.shapes[spec.referent_index];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let hidden = spec.occluders.iter().any(|o| y >= o.y0 && y < o.y1 && x >= o.x0 && x < o.x1);
                let inside = oracle_contains(s, y as f64 + 0.5, x as f64 + 0.5);
                prop_assert_eq!(rec.gt_mask.get(y, x), inside && !hidden, "pixel ({}, {})", y, x);
            }
        }
    }

    #[test]
    fn dataset_bytes_round_trip(seed: u64, count in 1usize..6) {
        let d = generate_dataset(seed, count, &SceneConfig::default()).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes, "mem").unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, d);
    }

    #[test]
    fn checkpoints_round_trip(seed: u64) {
        let mut s = init_params(ModelConfig::default(), &mut RngStream::new(seed, "init")).unwrap();
        s.step = seed % 1000;
        let bytes = encode_checkpoint(&s);
        prop_assert_eq!(decode_checkpoint(&bytes, "mem").unwrap(), s);
    }

    #[test]
    fn forward_ignores_pad_permutation_and_stays_finite(seed: u64, valid in 1usize..6, extreme: bool) {
        let cfg = ModelConfig { image_height: 16, image_width: 16, ..Default::default() };
        let mut rng = RngStream::new(seed, "fwd");
        let mut state = init_params(cfg, &mut rng).unwrap();
        if extreme {
            for p in state.params.iter_mut() {
                *p *= 50.0;
            }
        }
        let img = random_image(16, 16, seed);
        let mut ids: Vec<u16> = (0..valid).map(|_| rng.between(RESERVED, cfg.vocab_size - 1) as u16).collect();
        ids.resize(20, PAD);
        let toks = TokenSequence::new(ids.clone(), valid).unwrap();
        let (p1, cache) = forward(&state, &img, &toks).unwrap();
        ids.swap(valid, 19);
        let (p2, _) = forward(&state, &img, &TokenSequence::new(ids, valid).unwrap()).unwrap();
        prop_assert_eq!(p1.probs(), p2.probs());
        prop_assert!(p1.probs().iter().all(|p| p.is_finite() && *p > 0.0 && *p < 1.0));
        let w: Vec<f64> = (0..256).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let g = maskris::model::backward(&state, &cache, &w).unwrap();
        prop_assert!(g.all_finite());
    }
}
