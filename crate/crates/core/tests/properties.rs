use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pseudoseg::maskgen::{rasterize_ellipse, sample_ellipse_params};
use pseudoseg::metrics::{assd, dice_score};
use pseudoseg::noisy::lqss_select;
use pseudoseg::{Canvas, EllipsePrior, LqssConfig, PseudoLabelRecord, ShapeMask};

fn record(i: usize, score: f64) -> PseudoLabelRecord {
    PseudoLabelRecord {
        image_id: format!("img_{i:04}"),
        mask: ShapeMask::binary(1, 1, vec![0.0], 1.0).unwrap(),
        score,
        round: 0,
    }
}

fn mask_pair() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        let px = prop::collection::vec(prop::bool::weighted(0.4).prop_map(|b| b as u8 as f32), h * w);
        (Just(h), Just(w), px.clone(), px)
    })
}

fn brute_assd(p: &[f32], g: &[f32], h: usize, w: usize, spacing: (f64, f64)) -> Option<f64> {
    let fg = |m: &[f32], r: isize, c: isize| {
        r >= 0 && c >= 0 && r < h as isize && c < w as isize && m[r as usize * w + c as usize] == 1.0
    };
    let edge = |m: &[f32]| {
        let mut out = Vec::new();
        for r in 0..h as isize {
            for c in 0..w as isize {
                let inner = fg(m, r - 1, c) && fg(m, r + 1, c) && fg(m, r, c - 1) && fg(m, r, c + 1);
                if fg(m, r, c) && !inner {
                    out.push((r as f64 * spacing.0, c as f64 * spacing.1));
                }
            }
        }
        out
    };
    let (bp, bg) = (edge(p), edge(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let directed = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        a.iter()
            .map(|x| b.iter().map(|y| (x.0 - y.0).hypot(x.1 - y.1)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    Some(0.5 * (directed(&bp, &bg) + directed(&bg, &bp)))
}

proptest! {
    #[test]
    fn lqss_keeps_the_lowest_floor_fraction(
        scores in prop::collection::vec(0u8..8, 1..120),
        frac in 0.05f64..=1.0,
    ) {
        let recs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| record(i, s as f64)).collect();
        let kept = lqss_select(&recs, &LqssConfig { keep_fraction: frac }).unwrap();
        prop_assert_eq!(kept.len(), (frac * recs.len() as f64).floor() as usize);
        prop_assert!(kept.iter().all(|k| recs.contains(k)));
        if let Some(worst_kept) = kept.iter().map(|r| r.score).reduce(f64::max) {
            let dropped = recs.iter().filter(|r| !kept.contains(r));
            prop_assert!(dropped.into_iter().all(|r| r.score >= worst_kept));
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((_h, _w, p, g) in mask_pair()) {
        let ab = dice_score(&p, &g).unwrap();
        let ba = dice_score(&g, &p).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
    }

    #[test]
    fn assd_matches_brute_force(
        (h, w, p, g) in mask_pair(),
        sy in 0.1f64..4.0,
        sx in 0.1f64..4.0,
    ) {
        let got = assd(&p, &g, h, w, (sy, sx)).unwrap();
        let want = brute_assd(&p, &g, h, w, (sy, sx));
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{} vs {}", a, b),
            (a, b) => prop_assert_eq!(a, b),
        }
        prop_assert_eq!(assd(&g, &p, h, w, (sy, sx)).unwrap(), got);
    }

    #[test]
    fn ellipses_respect_the_prior(seed in any::<u64>(), circle in any::<bool>()) {
        let prior = EllipsePrior { circle, ..EllipsePrior::default() };
        let canvas = Canvas { size: 64, pixel_mm: 3.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = sample_ellipse_params(&mut rng, &prior, &canvas).unwrap();
        prop_assert!((25.0..=105.0).contains(&e.minor_axis_mm));
        if circle {
            prop_assert_eq!(e.aspect_ratio, 1.0);
        } else {
            prop_assert!((1.2..=1.8).contains(&e.aspect_ratio));
        }
        prop_assert!((0.0..2.0 * std::f64::consts::PI).contains(&e.orientation));
        prop_assert!(e.fits(&canvas));
        let m = rasterize_ellipse(&e, &canvas).unwrap();
        let (a, b) = e.semi_axes_px(canvas.pixel_mm);
        let area = std::f64::consts::PI * a * b;
        let count = m.foreground_count() as f64;
        // Pixel-centre sampling: the count stays within a perimeter-wide band of the area.
        prop_assert!((count - area).abs() <= 2.0 * std::f64::consts::PI * a + 4.0, "{} vs {}", count, area);
    }
}

/// Orientation is uniform on [0, 2π): chi-square over 12 bins at p = 0.001.
#[test]
fn orientation_is_uniform() {
    let prior = EllipsePrior::default();
    let canvas = Canvas { size: 64, pixel_mm: 3.2 };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (n, bins) = (6000usize, 12usize);
    let mut counts = vec![0usize; bins];
    for _ in 0..n {
        let e = sample_ellipse_params(&mut rng, &prior, &canvas).unwrap();
        counts[(e.orientation / (2.0 * std::f64::consts::PI) * bins as f64) as usize] += 1;
    }
    let expected = n as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 11 degrees of freedom, upper 0.1% point.
    assert!(chi2 < 31.26, "chi2 {chi2:.2} over {counts:?}");
}
