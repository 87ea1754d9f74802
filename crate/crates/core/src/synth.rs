//! Synthetic mask and depth bundles rasterized from known scenes, for tests
//! and demos that need ground truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::abstraction::{DepthBundle, DepthMap, InstanceInfo, LabelImage, MaskBundle};
use crate::render::rasterize_owners;
use crate::scene::{classes, EllipsoidNode, Resolution, SceneFrame, SceneSequence};

/// Rasterizes every frame into a label image (visible pixels only) and a
/// depth map holding each owner's depth, with 0 for the background.
///
/// Labels are assigned in entity-id order starting at 1.
pub fn bundles_from_sequence(seq: &SceneSequence) -> (MaskBundle, DepthBundle) {
    let res = seq.resolution;
    let entities = seq.entities();
    let label_of: BTreeMap<&str, u16> = entities
        .keys()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i as u16 + 1))
        .collect();
    let mapping = entities
        .iter()
        .enumerate()
        .map(|(i, (id, &class))| (i as u16 + 1, InstanceInfo { entity: id.clone(), class }))
        .collect();

    let (labels, depths): (Vec<LabelImage>, Vec<DepthMap>) = seq
        .frames
        .par_iter()
        .map(|frame| {
            let owners = rasterize_owners(frame, res);
            let mut labels = LabelImage::empty(res);
            let mut depth = DepthMap::constant(res, 0.0);
            for y in 0..res.height {
                for x in 0..res.width {
                    if let Some(i) = owners.get(x, y) {
                        let k = y as usize * res.width as usize + x as usize;
                        let node = &frame.nodes[i];
                        labels.labels[k] = label_of[node.entity_id.as_str()];
                        depth.values[k] = node.depth;
                    }
                }
            }
            (labels, depth)
        })
        .unzip();
    (
        MaskBundle { resolution: res, frames: labels, mapping },
        DepthBundle { frames: depths },
    )
}

const SYNTH_CLASSES: [u8; 6] = [
    classes::PATIENT,
    classes::INSTRUMENT_TABLE,
    classes::HEAD_SURGEON,
    classes::CIRCULATING_NURSE,
    classes::ANESTHETIST,
    classes::SCRUB_NURSE,
];

/// Seeded scene of `entities` ellipses moving on straight lines, each with
/// a fixed shape and a distinct depth, staying inside the image.
pub fn random_sequence(seed: u64, frames: usize, entities: usize, resolution: Resolution) -> SceneSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    struct Track {
        node: EllipsoidNode,
        end: (f64, f64),
    }
    let tracks: Vec<Track> = (0..entities)
        .map(|i| {
            let node = EllipsoidNode {
                entity_id: format!("e{i:02}"),
                class_id: SYNTH_CLASSES[i % SYNTH_CLASSES.len()],
                cx: rng.random_range(0.2..0.8),
                cy: rng.random_range(0.2..0.8),
                semi_a: rng.random_range(0.04..0.09),
                semi_b: rng.random_range(0.04..0.09),
                theta: rng.random_range(0.0..std::f64::consts::PI),
                // distinct depths keep the painter order unambiguous
                depth: (i as f64 + rng.random_range(0.1..0.9)) / entities.max(1) as f64,
            };
            let end = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
            Track { node, end }
        })
        .collect();
    let frames = (0..frames)
        .map(|t| {
            let s = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 0.0 };
            let nodes = tracks
                .iter()
                .map(|tr| {
                    let mut n = tr.node.clone();
                    n.cx += (tr.end.0 - n.cx) * s;
                    n.cy += (tr.end.1 - n.cy) * s;
                    n
                })
                .collect();
            SceneFrame::new(t, nodes)
        })
        .collect();
    SceneSequence { resolution, fps: 24.0, frames }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{abstract_sequence, AbstractOptions};

    #[test]
    fn bundles_round_trip_through_abstraction() {
        let seq = random_sequence(3, 4, 3, Resolution::new(320, 240));
        let (masks, depths) = bundles_from_sequence(&seq);
        masks.validate().unwrap();
        let abs = abstract_sequence(&masks, &depths, &AbstractOptions::default()).unwrap();
        assert_eq!(abs.sequence.len(), 4);
        for (a, b) in abs.sequence.frames.iter().zip(&seq.frames) {
            for n in &b.nodes {
                let m = a.node(&n.entity_id).unwrap();
                assert_eq!(m.class_id, n.class_id);
            }
        }
    }
}
