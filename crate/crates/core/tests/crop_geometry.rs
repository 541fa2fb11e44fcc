use linevlp_core::crops::{plan_context_crops, sample_context_crops, CropSpec, DefectRegion, Rect};
use linevlp_core::CategoryId;
use image::RgbImage;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_case() -> impl Strategy<Value = ((u32, u32), DefectRegion, usize, u64)> {
    (16u32..600, 16u32..600)
        .prop_flat_map(|(w, h)| {
            (Just((w, h)), 1..=w.min(80), 1..=h.min(80), 1usize..=5, any::<u64>())
        })
        .prop_flat_map(|((w, h), rw, rh, n, seed)| {
            (Just((w, h)), 0..=w - rw, 0..=h - rh, Just(rw), Just(rh), Just(n), Just(seed))
        })
        .prop_map(|(size, x, y, rw, rh, n, seed)| {
            (size, DefectRegion { x, y, w: rw, h: rh, category: CategoryId(0) }, n, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn crops_contain_box_and_respect_bounds((size, r, n, seed) in arb_case()) {
        let spec = CropSpec::with_sizes(n);
        let plan = plan_context_crops(size, &r, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let boxed = Rect { x: r.x, y: r.y, w: r.w, h: r.h };
        if plan.full_image_fallback {
            prop_assert_eq!(plan.rects.len(), 1);
            return Ok(());
        }
        prop_assert_eq!(plan.rects.len(), n);
        for (s, c) in &plan.rects {
            let (lo, hi) = spec.bounds[*s];
            prop_assert!(c.contains(&boxed));
            prop_assert!(c.x + c.w <= size.0 && c.y + c.h <= size.1);
            prop_assert!(c.h <= hi * r.h && c.w <= hi * r.w);
            // exact bounds whenever the centred search region fits in the image
            let fits = |obj: u32, len: u32, limit: u32| {
                let margin = (hi - 1) * len;
                obj >= margin / 2 && obj + len + (margin - margin / 2) <= limit
            };
            if fits(r.y, r.h, size.1) {
                prop_assert!(lo * r.h <= c.h, "{:?} {:?}", c, r);
            }
            if fits(r.x, r.w, size.0) {
                prop_assert!(lo * r.w <= c.w, "{:?} {:?}", c, r);
            }
        }
    }
}

#[test]
fn pixel_crops_follow_their_rects() {
    let mut img = RgbImage::new(100, 80);
    for (x, y, p) in img.enumerate_pixels_mut() {
        *p = image::Rgb([x as u8, y as u8, 7]);
    }
    let r = DefectRegion { x: 40, y: 30, w: 10, h: 8, category: CategoryId(2) };
    let (crops, fallback) = sample_context_crops(&img, &r, &CropSpec::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(!fallback);
    assert_eq!(crops.len(), 3);
    for c in &crops {
        assert_eq!(c.image.dimensions(), (c.rect.w, c.rect.h));
        assert_eq!(c.image.get_pixel(0, 0)[0] as u32, c.rect.x);
        assert_eq!(c.source_region, r);
    }
}
