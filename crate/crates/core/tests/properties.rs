use diffcf::forensics::Detector;
use diffcf::forgerylab::{make_forgery, synth_clean, ForgerySpec, PipelineParams, Region};
use diffcf::guidance::ssim;
use diffcf::image::{ImageTensor, Shape};
use diffcf::metrics::{psnr, score, weighted_confusion, ConfusionW, Mask};
use diffcf::seed::NoiseStream;
use diffcf::tiler::{merge_patches, split_patches};
use diffcf::{HeatMap, NoiseSchedule, SsimParams, TileLayout};
use proptest::prelude::*;

fn image(seed: u64, shape: Shape) -> ImageTensor<f32> {
    let mut rng = NoiseStream::new(seed);
    ImageTensor::from_fn(shape, |_, _, _| (rng.uniform() * 2.0 - 1.0) as f32)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_recursions(steps in 1usize..300, start in 1e-5f64..0.05, extra in 0.0f64..0.15) {
        let end = start + extra;
        let s = NoiseSchedule::linear(steps, start, end).unwrap();
        prop_assert_eq!(s.sigma(1).unwrap(), 0.0);
        for t in 1..=steps {
            let b = s.beta(t).unwrap();
            let expect = s.alpha_bar(t - 1).unwrap() * (1.0 - b);
            prop_assert!((s.alpha_bar(t).unwrap() - expect).abs() <= 4.0 * f64::EPSILON * expect);
            prop_assert!(s.sigma(t).unwrap().powi(2) <= b * (1.0 + 1e-12));
            if t > 1 {
                prop_assert!(b >= s.beta(t - 1).unwrap());
                prop_assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                prop_assert!(s.guidance_scale(t, 3.0).unwrap() > s.guidance_scale(t - 1, 3.0).unwrap());
            }
        }
    }

    #[test]
    fn tiler_round_trip(h in 1usize..600, w in 1usize..600, c in 1usize..4, patch in 16usize..300, seed in any::<u64>()) {
        let img = image(seed, Shape::new(h, w, c));
        let (patches, layout) = split_patches(&img, patch).unwrap();
        prop_assert_eq!(patches.len(), h.div_ceil(patch) * w.div_ceil(patch));
        prop_assert_eq!(layout, TileLayout::new(img.shape(), patch).unwrap());
        prop_assert!(patches.iter().all(|p| p.shape() == Shape::new(patch, patch, c)));
        prop_assert_eq!(merge_patches(&patches, &layout).unwrap(), img);
    }

    #[test]
    fn small_patch_round_trip(h in 1usize..40, w in 1usize..40, patch in 1usize..12, seed in any::<u64>()) {
        let img = image(seed, Shape::new(h, w, 2));
        let (patches, layout) = split_patches(&img, patch).unwrap();
        prop_assert_eq!(merge_patches(&patches, &layout).unwrap(), img);
    }

    #[test]
    fn confusion_scores_are_consistent(tp in 0.0f64..50.0, fp in 0.0f64..50.0, tn in 0.0f64..50.0, fn_ in 0.0f64..50.0) {
        let c = ConfusionW { tp, fp, tn, fn_ };
        let s = score(&c);
        prop_assert!((-1.0..=1.0).contains(&s.mcc));
        prop_assert!(s.iou <= s.f1 + 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.iou) && (0.0..=1.0).contains(&s.f1));
        let w = score(&c.swapped());
        prop_assert!((s.iou - w.iou).abs() <= 1e-12);
        prop_assert!((s.f1 - w.f1).abs() <= 1e-12);
        prop_assert!((s.mcc - w.mcc).abs() <= 1e-12);
    }

    #[test]
    fn binary_heat_gives_integer_counts(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = NoiseStream::new(seed);
        let m: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < 0.3) as u8).collect();
        let hv: Vec<u8> = (0..h * w).map(|_| (rng.uniform() < 0.5) as u8).collect();
        let mask = Mask::new(h, w, m.clone()).unwrap();
        let heat = HeatMap::new(h, w, hv.iter().map(|&v| v as f64).collect()).unwrap();
        let c = weighted_confusion(&heat, &mask).unwrap();
        let count = |a: u8, b: u8| hv.iter().zip(&m).filter(|&(&x, &y)| x == a && y == b).count() as f64;
        prop_assert_eq!(c.tp, count(1, 1));
        prop_assert_eq!(c.fp, count(1, 0));
        prop_assert_eq!(c.fn_, count(0, 1));
        prop_assert_eq!(c.tn, count(0, 0));
        prop_assert_eq!(c.total(), (h * w) as f64);
    }

    #[test]
    fn quality_metrics_are_symmetric(h in 11usize..30, w in 11usize..30, seed in any::<u64>()) {
        let a = image(seed, Shape::new(h, w, 3)).to_unit_range();
        let b = image(seed ^ 1, Shape::new(h, w, 3)).to_unit_range();
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let p = SsimParams::unit_range();
        prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forgery_touches_only_the_mask(seed in any::<u64>(), top in 0usize..40, left in 0usize..40, size in 0usize..24, disk in any::<bool>()) {
        let params = PipelineParams::default();
        let target = synth_clean::<f32>(seed, 64, &params).unwrap();
        let donor = synth_clean::<f32>(seed ^ 7, 64, &PipelineParams { bayer_phase: 2, ..params }).unwrap();
        let region = if disk {
            Region::Disk { cy: 20 + top / 4, cx: 20 + left / 4, radius: size / 2 }
        } else {
            Region::Rect { top, left, height: size, width: size }
        };
        let spec = ForgerySpec { region, offset: (0, 0), donor: params };
        let (forged, mask) = make_forgery(&target, &donor, &spec).unwrap();
        if !disk {
            prop_assert_eq!(mask.count(), size * size);
        }
        for y in 0..64 {
            for x in 0..64 {
                for c in 0..3 {
                    let expect = if mask.get(y, x) { donor.get(c, y, x) } else { target.get(c, y, x) };
                    prop_assert_eq!(forged.get(c, y, x), expect);
                }
            }
        }
        let (again, _) = make_forgery(&target, &donor, &spec).unwrap();
        prop_assert_eq!(again, forged);
    }

    #[test]
    fn detector_outputs_are_valid(h in 32usize..90, w in 32usize..90, seed in any::<u64>()) {
        let img = image(seed, Shape::new(h, w, 3)).quantize_u8();
        for d in Detector::ALL {
            let heat = d.run(&img).unwrap();
            prop_assert_eq!((heat.height(), heat.width()), (h, w));
            prop_assert!(heat.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(d.run(&img).unwrap(), heat);
        }
    }
}
