use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use orscene::metrics::{
    bb_iou, compare_sequences, extract_entity_masks, psnr, seg_iou, ssim, ssim_rgb, BinaryMask, Plane, Psnr,
};
use orscene::render::{render_sequence, RenderConfig, RenderMode};
use orscene::scene::{default_palette, EllipsoidNode, SceneFrame, SceneSequence};
use orscene::{synth, Resolution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> (Vec<Vec<bool>>, BinaryMask) {
    let density = rng.random_range(0.05..0.6);
    let grid: Vec<Vec<bool>> = (0..h).map(|_| (0..w).map(|_| rng.random_bool(density)).collect()).collect();
    let pixels = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| grid[y as usize][x as usize]);
    let mask = BinaryMask::from_pixels(Resolution::new(w, h), pixels.collect::<Vec<_>>());
    (grid, mask)
}

/// Inclusive cell bounds of the set cells.
fn cell_bounds(grid: &[Vec<bool>]) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (y, row) in grid.iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b
}

#[test]
fn ious_match_brute_force_counting_on_small_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut compared_boxes = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let (ga, ma) = random_mask(&mut rng, w, h);
        let (gb, mb) = random_mask(&mut rng, w, h);

        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..h as usize {
            for x in 0..w as usize {
                inter += u32::from(ga[y][x] && gb[y][x]);
                union += u32::from(ga[y][x] || gb[y][x]);
            }
        }
        let expect = if union == 0 { 1.0 } else { f64::from(inter) / f64::from(union) };
        assert_eq!(seg_iou(&ma, &mb).unwrap(), expect);

        if let (Some(ba), Some(bb)) = (cell_bounds(&ga), cell_bounds(&gb)) {
            let inside = |b: (usize, usize, usize, usize), x: usize, y: usize| x >= b.0 && x <= b.2 && y >= b.1 && y <= b.3;
            let (mut inter, mut union) = (0u32, 0u32);
            for y in 0..h as usize {
                for x in 0..w as usize {
                    inter += u32::from(inside(ba, x, y) && inside(bb, x, y));
                    union += u32::from(inside(ba, x, y) || inside(bb, x, y));
                }
            }
            let got = bb_iou(&ma.bounding_box().unwrap(), &mb.bounding_box().unwrap()).unwrap();
            assert_eq!(got, f64::from(inter) / f64::from(union));
            compared_boxes += 1;
        }
    }
    assert!(compared_boxes > 700, "{compared_boxes}");
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

#[test]
fn psnr_matches_the_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let a = random_image(&mut rng, w, h);
        let mut b = a.clone();
        for _ in 0..rng.random_range(1..20) {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            b.put_pixel(x, y, Rgb([rng.random(), rng.random(), rng.random()]));
        }
        let n = f64::from(w * h * 3);
        let sse: f64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
            .sum();
        match psnr(&a, &b).unwrap() {
            Psnr::Infinite => assert_eq!(sse, 0.0),
            Psnr::Finite(v) => {
                let expect = 20.0 * 255f64.log10() - 10.0 * (sse / n).log10();
                assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
            }
        }
    }
    let a = random_image(&mut rng, 8, 8);
    assert!(psnr(&a, &a).unwrap().is_infinite());
}

/// Direct 2-D SSIM: explicit Gaussian weights at each valid window position.
fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let size = 11;
    let sigma: f64 = 1.5;
    let mut g = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..size {
                for j in 0..size {
                    let k = (y + i) * w + x + j;
                    let wt = g[i][j] / total;
                    ma += wt * a[k];
                    mb += wt * b[k];
                    saa += wt * a[k] * a[k];
                    sbb += wt * b[k] * b[k];
                    sab += wt * a[k] * b[k];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / f64::from(count)
}

#[test]
fn ssim_matches_a_direct_two_dimensional_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(11..30), rng.random_range(11..30));
        let a: Vec<f64> = (0..w * h).map(|_| f64::from(rng.random::<u8>())).collect();
        // b is a noisy copy so the score is far from both bounds
        let b: Vec<f64> = a.iter().map(|v| (v + rng.random_range(-60.0..60.0)).clamp(0.0, 255.0)).collect();
        let pa = Plane::new(w, h, a.clone()).unwrap();
        let pb = Plane::new(w, h, b.clone()).unwrap();
        let got = ssim(&pa, &pb).unwrap();
        let expect = naive_ssim(&a, &b, w, h);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((ssim(&pa, &pa).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn ssim_of_identical_frames_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let img = random_image(&mut rng, 64, 48);
        assert!((ssim_rgb(&img, &img).unwrap() - 1.0).abs() < 1e-9);
    }
}

fn shift_right(img: &RgbImage, dx: u32) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        if x >= dx {
            *img.get_pixel(x - dx, y)
        } else {
            Rgb([0, 0, 0])
        }
    })
}

#[test]
fn ten_pixel_shift_matches_the_analytic_scores() {
    let res = Resolution::new(320, 240);
    let node = EllipsoidNode {
        entity_id: "walker".into(),
        class_id: 7,
        cx: 0.5,
        cy: 0.5,
        semi_a: 0.1,
        semi_b: 0.15,
        theta: 0.4,
        depth: 0.6,
    };
    let seq = SceneSequence { resolution: res, fps: 24.0, frames: vec![SceneFrame::new(0, vec![node])] };
    let cond = render_sequence(&seq, &RenderConfig::default().with_resolution(res)).unwrap();
    let shifted = vec![shift_right(&cond[0], 10)];
    let masks = extract_entity_masks(&shifted, &seq, &default_palette(), RenderMode::EllipseDepth).unwrap();
    let report = compare_sequences(&seq, &masks, &shifted, &cond).unwrap();
    let s = report.frames[0].entities["walker"];

    let lit: Vec<(u32, u32)> = cond[0].enumerate_pixels().filter(|(_, _, p)| p.0 != [0, 0, 0]).map(|(x, y, _)| (x, y)).collect();
    let x0 = lit.iter().map(|p| p.0).min().unwrap();
    let x1 = lit.iter().map(|p| p.0).max().unwrap();
    let box_w = f64::from(x1 - x0 + 1);
    // same-height boxes offset horizontally by 10
    assert!((s.bb_iou - (box_w - 10.0) / (box_w + 10.0)).abs() < 1e-12);

    let set: std::collections::HashSet<(u32, u32)> = lit.iter().copied().collect();
    let inter = lit.iter().filter(|&&(x, y)| set.contains(&(x + 10, y))).count() as f64;
    let expect = inter / (2.0 * lit.len() as f64 - inter);
    assert!((s.seg_iou - expect).abs() < 1e-12);
    assert!(s.seg_iou < 1.0 && s.bb_iou < 1.0);
    assert!(report.frames[0].ssim < 1.0);
    assert!(!report.frames[0].psnr.is_infinite());
}

#[test]
fn summary_means_follow_their_definitions() {
    let seq = synth::random_sequence(31, 6, 3, Resolution::new(120, 90));
    let frames = render_sequence(&seq, &RenderConfig::default().with_resolution(seq.resolution)).unwrap();
    // drop one entity from half the generated frames so entities differ
    let mut masks = extract_entity_masks(&frames, &seq, &default_palette(), RenderMode::EllipseDepth).unwrap();
    for m in masks.iter_mut().step_by(2) {
        m.remove("e01");
    }
    let noisy: Vec<RgbImage> = frames.iter().map(|f| shift_right(f, 3)).collect();
    let report = compare_sequences(&seq, &masks, &noisy, &frames).unwrap();

    let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for f in &report.frames {
        for (id, s) in &f.entities {
            per.entry(id.as_str()).or_default().push(s.seg_iou);
            all.push(s.seg_iou);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let macro_: Vec<f64> = per.values().map(|v| mean(v)).collect();
    assert!((report.summary.seg_iou_macro.unwrap() - mean(&macro_)).abs() < 1e-12);
    assert!((report.summary.seg_iou_micro.unwrap() - mean(&all)).abs() < 1e-12);
    assert!(report.entities["e01"].seg_iou < 1.0);
    let ssims: Vec<f64> = report.frames.iter().map(|f| f.ssim).collect();
    assert!((report.summary.ssim - mean(&ssims)).abs() < 1e-12);
    let psnrs: Vec<f64> = report.frames.iter().map(|f| f.psnr.value()).collect();
    assert!((report.summary.psnr.value() - mean(&psnrs)).abs() < 1e-9);
}
