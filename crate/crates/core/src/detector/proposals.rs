use ndarray::{ArrayView3, ArrayView4};
use rand::Rng;

use crate::boxes;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::synthdomains::ObjectInstance;

/// A candidate region in input-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: [f64; 4],
    pub objectness: f64,
}

/// Where proposals come from: the learned RPN head, or ground truth plus
/// jitter (labeled-domain training shortcut; the trainer supplies the boxes).
#[derive(Clone, Copy, Debug)]
pub enum ProposalMode<'a> {
    LearnedRpn,
    Oracle { gt: &'a [ObjectInstance], seed: u64 },
}

/// Square anchors for every feature cell, laid out to match the RPN head
/// output: index (a, i, j) -> a * H' * W' + i * W' + j.
pub fn anchor_grid(hf: usize, wf: usize, stride: usize, sizes: &[f64]) -> Vec<[f64; 4]> {
    let mut anchors = Vec::with_capacity(sizes.len() * hf * wf);
    for &s in sizes {
        for i in 0..hf {
            let cy = (i as f64 + 0.5) * stride as f64;
            for j in 0..wf {
                let cx = (j as f64 + 0.5) * stride as f64;
                anchors.push([cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0]);
            }
        }
    }
    anchors
}

/// Decode one image's RPN output into scored proposals: clip, drop tiny
/// boxes, keep the top pre-NMS candidates, NMS, keep the top post-NMS.
pub fn proposals_from_rpn(
    objectness: &ArrayView3<f64>, // (A, H', W') logits
    deltas: &ArrayView3<f64>,     // (4A, H', W')
    cfg: &ModelConfig,
    stride: usize,
    canvas: (u32, u32),
) -> Vec<Proposal> {
    let (a, hf, wf) = objectness.dim();
    let anchors = anchor_grid(hf, wf, stride, &cfg.anchor_sizes);
    let mut cand: Vec<(f64, [f64; 4], usize)> = Vec::with_capacity(a * hf * wf);
    for ai in 0..a {
        for i in 0..hf {
            for j in 0..wf {
                let idx = ai * hf * wf + i * wf + j;
                let score = 1.0 / (1.0 + (-objectness[[ai, i, j]]).exp());
                let d = [
                    deltas[[4 * ai, i, j]],
                    deltas[[4 * ai + 1, i, j]],
                    deltas[[4 * ai + 2, i, j]],
                    deltas[[4 * ai + 3, i, j]],
                ];
                let b = boxes::clip(
                    boxes::decode_deltas(&anchors[idx], &d),
                    f64::from(canvas.1),
                    f64::from(canvas.0),
                );
                if b[2] - b[0] >= cfg.rpn_min_size && b[3] - b[1] >= cfg.rpn_min_size {
                    cand.push((score, b, idx));
                }
            }
        }
    }
    cand.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.2.cmp(&y.2))
    });
    cand.truncate(cfg.rpn_pre_nms);
    let bxs: Vec<[f64; 4]> = cand.iter().map(|c| c.1).collect();
    let scores: Vec<f64> = cand.iter().map(|c| c.0).collect();
    let keep = boxes::nms(&bxs, &scores, cfg.rpn_nms_iou);
    keep.into_iter()
        .take(cfg.rpn_post_nms)
        .map(|k| Proposal {
            bbox: bxs[k],
            objectness: scores[k],
        })
        .collect()
}

/// Ground-truth boxes with objectness 1, plus J jittered copies and J random
/// negatives per box, deterministic in the seed.
pub fn oracle_proposals(
    gt: &[ObjectInstance],
    jitter: usize,
    seed: u64,
    canvas: (u32, u32),
) -> Vec<Proposal> {
    let mut out = Vec::new();
    let (h, w) = (f64::from(canvas.0), f64::from(canvas.1));
    let mut r = rng::rng_for(seed, 0x07ac1e);
    for o in gt {
        out.push(Proposal {
            bbox: o.as_f64(),
            objectness: 1.0,
        });
    }
    for o in gt {
        let b = o.as_f64();
        let bw = b[2] - b[0];
        let bh = b[3] - b[1];
        for _ in 0..jitter {
            let dx = r.random_range(-0.15..0.15) * bw;
            let dy = r.random_range(-0.15..0.15) * bh;
            let sw = 1.0 + r.random_range(-0.15..0.15);
            let sh = 1.0 + r.random_range(-0.15..0.15);
            let cx = (b[0] + b[2]) / 2.0 + dx;
            let cy = (b[1] + b[3]) / 2.0 + dy;
            let jb = boxes::clip(
                [
                    cx - bw * sw / 2.0,
                    cy - bh * sh / 2.0,
                    cx + bw * sw / 2.0,
                    cy + bh * sh / 2.0,
                ],
                w,
                h,
            );
            if jb[2] - jb[0] >= 2.0 && jb[3] - jb[1] >= 2.0 {
                out.push(Proposal {
                    bbox: jb,
                    objectness: 0.8,
                });
            }
        }
        for _ in 0..jitter {
            let nw = r.random_range(8.0..(w / 2.0));
            let nh = r.random_range(8.0..(h / 2.0));
            let x0 = r.random_range(0.0..(w - nw));
            let y0 = r.random_range(0.0..(h - nh));
            out.push(Proposal {
                bbox: [x0, y0, x0 + nw, y0 + nh],
                objectness: 0.1,
            });
        }
    }
    out
}

/// Dispatch on the proposal source for one image of a batch.
pub fn propose_regions(
    rpn_objectness: Option<&ArrayView4<f64>>,
    rpn_deltas: Option<&ArrayView4<f64>>,
    image_index: usize,
    cfg: &ModelConfig,
    stride: usize,
    canvas: (u32, u32),
    mode: ProposalMode<'_>,
) -> Result<Vec<Proposal>> {
    match mode {
        ProposalMode::Oracle { gt, seed } => {
            Ok(oracle_proposals(gt, cfg.oracle_jitter, seed, canvas))
        }
        ProposalMode::LearnedRpn => {
            let obj = rpn_objectness
                .ok_or_else(|| Error::Data("learned RPN mode without RPN output".into()))?;
            let del = rpn_deltas
                .ok_or_else(|| Error::Data("learned RPN mode without RPN output".into()))?;
            if obj.shape()[2] == 0 || obj.shape()[3] == 0 {
                return Err(Error::Shape("empty feature map".into()));
            }
            Ok(proposals_from_rpn(
                &obj.index_axis(ndarray::Axis(0), image_index),
                &del.index_axis(ndarray::Axis(0), image_index),
                cfg,
                stride,
                canvas,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_without_jitter_is_gt_passthrough() {
        let gt = vec![
            ObjectInstance { bbox: [4, 4, 20, 20], category: 0 },
            ObjectInstance { bbox: [30, 30, 50, 44], category: 2 },
        ];
        let props = oracle_proposals(&gt, 0, 9, (64, 64));
        assert_eq!(props.len(), 2);
        for (p, o) in props.iter().zip(&gt) {
            assert_eq!(p.bbox, o.as_f64());
            assert_eq!(p.objectness, 1.0);
        }
    }

    #[test]
    fn oracle_recall_at_half_iou_is_total() {
        let gt = vec![ObjectInstance { bbox: [10, 10, 30, 30], category: 1 }];
        let props = oracle_proposals(&gt, 3, 1, (64, 64));
        let hit = props
            .iter()
            .any(|p| crate::boxes::iou(&p.bbox, &gt[0].as_f64()) >= 0.999);
        assert!(hit);
    }

    #[test]
    fn anchors_cover_the_grid_in_head_order() {
        let anchors = anchor_grid(2, 3, 8, &[16.0, 32.0]);
        assert_eq!(anchors.len(), 2 * 2 * 3);
        // first anchor: size 16 at cell (0,0) -> center (4,4)
        assert_eq!(anchors[0], [-4.0, -4.0, 12.0, 12.0]);
        // index (a=1, i=0, j=1): 1*6 + 0*3 + 1 = 7 -> center (12,4), size 32
        assert_eq!(anchors[7], [-4.0, -12.0, 28.0, 20.0]);
    }
}
