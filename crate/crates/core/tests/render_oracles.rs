use orscene::render::{decode_frame, depth_to_blue, render_frame, render_sequence, RenderConfig, RenderMode};
use orscene::scene::{default_palette, EllipsoidNode, SceneFrame, SceneSequence};
use orscene::{synth, Resolution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RES: Resolution = Resolution::new(1024, 768);

/// Independent implicit test at the center of pixel (x, y).
fn covers(n: &EllipsoidNode, res: Resolution, x: u32, y: u32) -> bool {
    let (w, h) = (f64::from(res.width), f64::from(res.height));
    let dx = f64::from(x) + 0.5 - n.cx * w;
    let dy = f64::from(y) + 0.5 - n.cy * h;
    let (s, c) = n.theta.sin_cos();
    let u = (dx * c + dy * s) / (n.semi_a * w);
    let v = (-dx * s + dy * c) / (n.semi_b * h);
    u * u + v * v <= 1.0
}

fn color_of(n: &EllipsoidNode) -> [u8; 3] {
    let [r, g] = default_palette().color(n.class_id);
    [r, g, depth_to_blue(n.depth)]
}

fn random_node(rng: &mut ChaCha8Rng, id: &str) -> EllipsoidNode {
    EllipsoidNode {
        entity_id: id.into(),
        class_id: rng.random_range(0..36),
        cx: rng.random_range(0.3..0.7),
        cy: rng.random_range(0.3..0.7),
        semi_a: rng.random_range(0.05..0.2),
        semi_b: rng.random_range(0.05..0.2),
        theta: rng.random_range(0.0..std::f64::consts::PI),
        depth: rng.random_range(0.0..1.0),
    }
}

#[test]
fn overlap_pixels_carry_the_nearer_color() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let res = Resolution::new(256, 192);
    let cfg = RenderConfig::default().with_resolution(res);
    let mut checked = 0;
    for _ in 0..50 {
        let a = random_node(&mut rng, "a");
        let mut b = random_node(&mut rng, "b");
        b.cx = a.cx + rng.random_range(-0.05..0.05);
        b.cy = a.cy + rng.random_range(-0.05..0.05);
        let img = render_frame(&SceneFrame::new(0, vec![a.clone(), b.clone()]), &cfg).unwrap();
        // equal depths fall back to id order, so "b" is drawn last
        let near = if b.depth >= a.depth { &b } else { &a };
        for (x, y, p) in img.enumerate_pixels() {
            let (ia, ib) = (covers(&a, res, x, y), covers(&b, res, x, y));
            let expect = match (ia, ib) {
                (true, true) => {
                    checked += 1;
                    color_of(near)
                }
                (true, false) => color_of(&a),
                (false, true) => color_of(&b),
                (false, false) => [0, 0, 0],
            };
            assert_eq!(p.0, expect, "pixel ({x}, {y})");
        }
    }
    assert!(checked > 0);
}

#[test]
fn sequence_render_counts_and_determinism() {
    let seq = synth::random_sequence(2, 97, 3, Resolution::new(128, 96));
    let cfg = RenderConfig::default().with_resolution(seq.resolution);
    let a = render_sequence(&seq, &cfg).unwrap();
    let b = render_sequence(&seq, &cfg).unwrap();
    assert_eq!(a.len(), 97);
    assert!(a.iter().zip(&b).all(|(x, y)| x.as_raw() == y.as_raw()));
}

#[test]
fn flat_and_depth_differ_only_in_blue() {
    let seq = synth::random_sequence(9, 8, 4, Resolution::new(200, 150));
    let depth = render_sequence(&seq, &RenderConfig::with_mode(RenderMode::EllipseDepth).with_resolution(seq.resolution)).unwrap();
    let flat = render_sequence(&seq, &RenderConfig::with_mode(RenderMode::EllipseFlat).with_resolution(seq.resolution)).unwrap();
    let mut blue_diffs = 0;
    for (d, f) in depth.iter().zip(&flat) {
        for (p, q) in d.pixels().zip(f.pixels()) {
            assert_eq!(p.0[..2], q.0[..2]);
            assert_eq!(q.0[2], 0);
            blue_diffs += usize::from(p.0[2] != q.0[2]);
        }
    }
    assert!(blue_diffs > 0);
}

/// Pixel IoU of two nodes, counted over a window that contains both.
fn ellipse_iou(a: &EllipsoidNode, b: &EllipsoidNode, res: Resolution) -> f64 {
    let (w, h) = (f64::from(res.width), f64::from(res.height));
    let r = (a.semi_a.max(a.semi_b).max(b.semi_a).max(b.semi_b) * w.max(h)).ceil() + 2.0;
    let x0 = ((a.cx.min(b.cx) * w - r).max(0.0)) as u32;
    let x1 = ((a.cx.max(b.cx) * w + r).min(w)) as u32;
    let y0 = ((a.cy.min(b.cy) * h - r).max(0.0)) as u32;
    let y1 = ((a.cy.max(b.cy) * h + r).min(h)) as u32;
    let (mut inter, mut union) = (0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (p, q) = (covers(a, res, x, y), covers(b, res, x, y));
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    inter as f64 / union as f64
}

/// Non-overlapping frame: nodes placed in separate grid cells with a margin.
fn separated_frame(rng: &mut ChaCha8Rng) -> SceneFrame {
    let mut nodes = Vec::new();
    let cells = [(0.2, 0.25), (0.5, 0.25), (0.8, 0.25), (0.2, 0.75), (0.5, 0.75), (0.8, 0.75)];
    let count = rng.random_range(1..=cells.len());
    for (i, &(cx, cy)) in cells.iter().take(count).enumerate() {
        nodes.push(EllipsoidNode {
            entity_id: format!("n{i}"),
            class_id: rng.random_range(0..36),
            cx: cx + rng.random_range(-0.02..0.02),
            cy: cy + rng.random_range(-0.02..0.02),
            semi_a: rng.random_range(0.03..0.1),
            semi_b: rng.random_range(0.05..0.18),
            theta: rng.random_range(0.0..std::f64::consts::PI),
            depth: rng.random_range(0.0..1.0),
        });
    }
    SceneFrame::new(0, nodes)
}

#[test]
fn decode_round_trip_on_separated_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = RenderConfig::default();
    let palette = default_palette();
    for trial in 0..25 {
        let frame = separated_frame(&mut rng);
        let img = render_frame(&frame, &cfg).unwrap();
        let decoded = decode_frame(&img, &palette).unwrap();
        assert_eq!(decoded.nodes.len(), frame.nodes.len(), "trial {trial}");
        for n in &frame.nodes {
            let d = decoded
                .nodes
                .iter()
                .min_by(|p, q| {
                    let dp = (p.cx - n.cx).hypot(p.cy - n.cy);
                    let dq = (q.cx - n.cx).hypot(q.cy - n.cy);
                    dp.total_cmp(&dq)
                })
                .unwrap();
            assert_eq!(d.class_id, n.class_id);
            assert!(ellipse_iou(n, d, RES) >= 0.95, "trial {trial}");
            assert!((d.depth - n.depth).abs() <= 1.0 / 255.0);
        }
    }
}

#[test]
fn decoded_half_depth_is_within_one_level() {
    let node = EllipsoidNode {
        entity_id: "x".into(),
        class_id: 12,
        cx: 0.5,
        cy: 0.5,
        semi_a: 0.1,
        semi_b: 0.1,
        theta: 0.0,
        depth: 0.5,
    };
    let img = render_frame(&SceneFrame::new(0, vec![node]), &RenderConfig::default()).unwrap();
    let d = decode_frame(&img, &default_palette()).unwrap();
    assert_eq!(d.nodes.len(), 1);
    assert!((d.nodes[0].depth - 0.5).abs() <= 1.0 / 255.0);
}

#[test]
fn ninety_seven_frame_sequence_round_trips_through_json() {
    let seq = synth::random_sequence(1, 97, 5, RES);
    let back = SceneSequence::from_json(&seq.to_json().unwrap()).unwrap();
    assert_eq!(back, seq);
}
