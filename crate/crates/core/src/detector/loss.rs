use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RoiBox, Tape, Var};
use crate::boxes;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::langspace;
use crate::params::Binding;
use crate::synthdomains::ObjectInstance;

use super::{classify_regions, regression_head, FeatureMap, PromptBank, Proposal, RpnOut};

const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;
const HEAD_SMOOTH_L1_BETA: f64 = 1.0;

/// Proposals matched to ground truth and subsampled for the detection head.
/// `targets[i]` is the class of `boxes[i]`, with the background index equal
/// to the category count. Positives come first.
#[derive(Clone, Debug)]
pub struct RegionSample {
    pub boxes: Vec<[f64; 4]>,
    pub targets: Vec<usize>,
    pub num_positive: usize,
    /// Encoded (dx, dy, dw, dh) targets for the positive boxes.
    pub reg_targets: Array2<f64>,
}

impl RegionSample {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// IoU matching (>= pos_iou positive, < bg_iou background, rest ignored)
/// followed by ratio-controlled subsampling.
pub fn sample_regions(
    proposals: &[Proposal],
    gt: &[ObjectInstance],
    num_categories: usize,
    cfg: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> RegionSample {
    let background = num_categories;
    let mut positives: Vec<(usize, usize)> = Vec::new(); // (proposal, gt)
    let mut backgrounds: Vec<usize> = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best_iou = 0.0;
        let mut best_gt = None;
        for (gi, g) in gt.iter().enumerate() {
            let v = boxes::iou(&p.bbox, &g.as_f64());
            if v > best_iou {
                best_iou = v;
                best_gt = Some(gi);
            }
        }
        if best_iou >= cfg.match_pos_iou {
            positives.push((pi, best_gt.unwrap()));
        } else if best_iou < cfg.match_bg_iou {
            backgrounds.push(pi);
        }
    }
    let max_pos = ((cfg.sample_regions as f64) * cfg.positive_fraction).round() as usize;
    positives.shuffle(rng);
    positives.truncate(max_pos.max(1).min(positives.len()));
    backgrounds.shuffle(rng);
    backgrounds.truncate(cfg.sample_regions.saturating_sub(positives.len()));

    let mut boxes_out = Vec::with_capacity(positives.len() + backgrounds.len());
    let mut targets = Vec::with_capacity(boxes_out.capacity());
    let mut reg_targets = Array2::<f64>::zeros((positives.len(), 4));
    for (row, (pi, gi)) in positives.iter().enumerate() {
        boxes_out.push(proposals[*pi].bbox);
        targets.push(gt[*gi].category);
        let d = boxes::encode_deltas(&proposals[*pi].bbox, &gt[*gi].as_f64());
        for k in 0..4 {
            reg_targets[[row, k]] = d[k];
        }
    }
    for pi in &backgrounds {
        boxes_out.push(proposals[*pi].bbox);
        targets.push(background);
    }
    RegionSample {
        boxes: boxes_out,
        targets,
        num_positive: positives.len(),
        reg_targets,
    }
}

/// RPN objectness + box loss over a batch. Anchors are matched at
/// rpn_pos_iou / rpn_neg_iou with the best anchor per ground-truth box
/// forced positive, then subsampled to rpn_sample per image.
#[allow(clippy::too_many_arguments)]
pub fn rpn_loss(
    tape: &mut Tape,
    rpn: &RpnOut,
    fmap: &FeatureMap,
    cfg: &ModelConfig,
    gt_per_image: &[Vec<ObjectInstance>],
    canvas: (u32, u32),
    rng: &mut ChaCha8Rng,
) -> Var {
    let (hf, wf) = (fmap.height, fmap.width);
    let a = rpn.num_anchors;
    let n = fmap.batch;
    let anchors = super::anchor_grid(hf, wf, fmap.stride, &cfg.anchor_sizes);
    let per_image = a * hf * wf;

    let mut obj_indices: Vec<usize> = Vec::new();
    let mut obj_targets: Vec<f64> = Vec::new();
    let mut delta_indices: Vec<usize> = Vec::new();
    let mut delta_targets: Vec<[f64; 4]> = Vec::new();

    for (img, gt) in gt_per_image.iter().enumerate() {
        let mut pos: Vec<(usize, usize)> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        let mut best_per_gt: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gt.len()];
        let inside = |b: &[f64; 4]| {
            b[0] >= -4.0
                && b[1] >= -4.0
                && b[2] <= f64::from(canvas.1) + 4.0
                && b[3] <= f64::from(canvas.0) + 4.0
        };
        for (ai, anchor) in anchors.iter().enumerate() {
            if !inside(anchor) {
                continue;
            }
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, g) in gt.iter().enumerate() {
                let v = boxes::iou(anchor, &g.as_f64());
                if v > best {
                    best = v;
                    best_gt = Some(gi);
                }
                if v > best_per_gt[gi].0 {
                    best_per_gt[gi] = (v, ai);
                }
            }
            if best >= cfg.rpn_pos_iou {
                pos.push((ai, best_gt.unwrap()));
            } else if best < cfg.rpn_neg_iou {
                neg.push(ai);
            }
        }
        for (gi, (v, ai)) in best_per_gt.iter().enumerate() {
            if *ai != usize::MAX && *v > 0.0 && !pos.iter().any(|(p, _)| p == ai) {
                pos.push((*ai, gi));
            }
        }
        pos.shuffle(rng);
        pos.truncate(cfg.rpn_sample / 2);
        neg.shuffle(rng);
        neg.truncate(cfg.rpn_sample - pos.len());

        for (ai, gi) in &pos {
            obj_indices.push(img * per_image + ai);
            obj_targets.push(1.0);
            // delta flat layout: ((img * 4A + 4a + k) * hf + i) * wf + j
            let cell = ai % (hf * wf);
            let a_idx = ai / (hf * wf);
            for k in 0..4 {
                delta_indices.push((img * 4 * a + 4 * a_idx + k) * hf * wf + cell);
            }
            delta_targets.push(boxes::encode_deltas(&anchors[*ai], &gt[*gi].as_f64()));
        }
        for ai in &neg {
            obj_indices.push(img * per_image + ai);
            obj_targets.push(0.0);
        }
    }

    if obj_indices.is_empty() {
        return tape.leaf(ndarray::arr0(0.0).into_dyn());
    }

    let obj_flat = tape.reshape(rpn.objectness, &[n * per_image, 1]);
    let sel = tape.select_rows(obj_flat, &obj_indices);
    let sel = tape.reshape(sel, &[obj_indices.len()]);
    let obj_loss = tape.bce_with_logits(sel, &ndarray::Array1::from_vec(obj_targets));

    if delta_indices.is_empty() {
        return obj_loss;
    }
    let delta_flat = tape.reshape(rpn.deltas, &[n * 4 * a * hf * wf, 1]);
    let sel_d = tape.select_rows(delta_flat, &delta_indices);
    let sel_d = tape.reshape(sel_d, &[delta_targets.len(), 4]);
    let mut tgt = Array2::<f64>::zeros((delta_targets.len(), 4));
    for (i, d) in delta_targets.iter().enumerate() {
        for k in 0..4 {
            tgt[[i, k]] = d[k];
        }
    }
    let box_loss = tape.smooth_l1(sel_d, &tgt, RPN_SMOOTH_L1_BETA);
    tape.add(obj_loss, box_loss)
}

/// The assembled supervised loss and the intermediate features the
/// consistency branch reuses (same proposals, same RoI features).
pub struct DetectionLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub rpn: Var,
    /// (R_total, C, P, P) pooled features of every sampled region.
    pub region_feats: Var,
    /// (R_total, D_l) language-space features of every sampled region.
    pub lang_feats: Var,
    /// Image index of every sampled region row.
    pub region_image: Vec<usize>,
}

/// Classification (focal CE against the prompt bank), box regression
/// (smooth-L1 over positives) and the RPN term (zero in oracle mode).
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    tape: &mut Tape,
    trainable: &Binding,
    v2l: &Binding,
    bank: &PromptBank,
    cfg: &ModelConfig,
    fmap: &FeatureMap,
    samples: &[RegionSample],
    rpn_term: Option<Var>,
) -> Result<DetectionLoss> {
    let mut rois: Vec<RoiBox> = Vec::new();
    let mut targets: Vec<usize> = Vec::new();
    let mut region_image: Vec<usize> = Vec::new();
    let mut pos_rows: Vec<usize> = Vec::new();
    let mut reg_rows: Vec<[f64; 4]> = Vec::new();
    for (img, s) in samples.iter().enumerate() {
        let base = rois.len();
        for (i, b) in s.boxes.iter().enumerate() {
            rois.push(RoiBox {
                image: img,
                x0: b[0],
                y0: b[1],
                x1: b[2],
                y1: b[3],
            });
            region_image.push(img);
            if i < s.num_positive {
                pos_rows.push(base + i);
            }
        }
        targets.extend_from_slice(&s.targets);
        for r in 0..s.num_positive {
            reg_rows.push([
                s.reg_targets[[r, 0]],
                s.reg_targets[[r, 1]],
                s.reg_targets[[r, 2]],
                s.reg_targets[[r, 3]],
            ]);
        }
    }
    if rois.is_empty() {
        return Err(Error::Data(
            "no labeled regions in batch; detection loss needs labels".into(),
        ));
    }
    for roi in &rois {
        if roi.x1 - roi.x0 <= 0.0 || roi.y1 - roi.y0 <= 0.0 {
            return Err(Error::Degenerate("zero-area proposal".into()));
        }
    }

    let region_feats = tape.roi_align(fmap.var, &rois, fmap.stride, cfg.pooled_size);
    let lang_feats = langspace::v2l_map_regions(tape, v2l, cfg, region_feats);
    let logits = classify_regions(tape, lang_feats, bank, cfg.cls_temperature);
    let cls = tape.focal_ce(logits, &targets, cfg.focal_gamma, cfg.background_weight);

    let reg = if pos_rows.is_empty() {
        tape.leaf(ndarray::arr0(0.0).into_dyn())
    } else {
        let deltas = regression_head(tape, trainable, cfg, region_feats);
        let pos = tape.select_rows(deltas, &pos_rows);
        let mut tgt = Array2::<f64>::zeros((reg_rows.len(), 4));
        for (i, d) in reg_rows.iter().enumerate() {
            for k in 0..4 {
                tgt[[i, k]] = d[k];
            }
        }
        tape.smooth_l1(pos, &tgt, HEAD_SMOOTH_L1_BETA)
    };

    let rpn = rpn_term.unwrap_or_else(|| tape.leaf(ndarray::arr0(0.0).into_dyn()));
    let partial = tape.add(cls, reg);
    let total = tape.add(partial, rpn);
    Ok(DetectionLoss {
        total,
        cls,
        reg,
        rpn,
        region_feats,
        lang_feats,
        region_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{backbone_forward, init_detector, oracle_proposals};
    use crate::langspace::init_v2l;
    use crate::params::bind;
    use crate::rng;
    use ndarray::Array4;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone_channels: [4, 6, 8, 8],
            lang_dim: 16,
            attn_dim: 8,
            v2l_hidden: 12,
            sample_regions: 8,
            ..ModelConfig::default()
        }
    }

    fn bank(cfg: &ModelConfig) -> PromptBank {
        super::super::build_prompt_bank(
            &cfg.categories.clone(),
            &cfg.prompt_templates.clone(),
            cfg.lang_dim,
            0,
        )
        .unwrap()
    }

    #[test]
    fn oracle_mode_rpn_component_is_exactly_zero() {
        let cfg = cfg();
        let store = init_detector(&cfg, 0);
        let v2l_store = init_v2l(&cfg, 0);
        let bank = bank(&cfg);
        let gt = vec![ObjectInstance { bbox: [8, 8, 28, 28], category: 1 }];
        let mut rng = rng::rng_from(0);

        let mut tape = Tape::new();
        let bt = bind(&mut tape, &store, true);
        let bv = bind(&mut tape, &v2l_store, false);
        let images = Array4::from_elem((1, 3, 48, 48), 0.4);
        let fm = backbone_forward(&mut tape, &bt, &cfg, &images).unwrap();
        let props = oracle_proposals(&gt, 2, 0, (48, 48));
        let sample = sample_regions(&props, &gt, 4, &cfg, &mut rng);
        let out = detection_loss(&mut tape, &bt, &bv, &bank, &cfg, &fm, &[sample], None).unwrap();
        assert_eq!(tape.scalar(out.rpn), 0.0);
        let total = tape.scalar(out.total);
        let sum = tape.scalar(out.cls) + tape.scalar(out.reg) + tape.scalar(out.rpn);
        assert!((total - sum).abs() < 1e-12);
    }

    #[test]
    fn sampling_respects_ratio_and_thresholds() {
        let cfg = cfg();
        let gt = vec![ObjectInstance { bbox: [10, 10, 26, 26], category: 2 }];
        let props = vec![
            Proposal { bbox: [10.0, 10.0, 26.0, 26.0], objectness: 1.0 }, // IoU 1
            Proposal { bbox: [11.0, 11.0, 27.0, 27.0], objectness: 0.9 }, // high IoU
            Proposal { bbox: [40.0, 40.0, 56.0, 56.0], objectness: 0.2 }, // disjoint
            Proposal { bbox: [12.0, 18.0, 30.0, 34.0], objectness: 0.5 }, // middling
        ];
        let mut rng = rng::rng_from(1);
        let s = sample_regions(&props, &gt, 4, &cfg, &mut rng);
        assert!(s.num_positive >= 1);
        assert!(s.targets[..s.num_positive].iter().all(|&t| t == 2));
        assert!(s.targets[s.num_positive..].iter().all(|&t| t == 4));
        // the middling-IoU proposal is neither positive nor background
        assert!(s.boxes.len() < props.len() || s.targets.contains(&4));
    }

    #[test]
    fn empty_batch_is_an_error() {
        let cfg = cfg();
        let store = init_detector(&cfg, 0);
        let v2l_store = init_v2l(&cfg, 0);
        let bank = bank(&cfg);
        let mut tape = Tape::new();
        let bt = bind(&mut tape, &store, true);
        let bv = bind(&mut tape, &v2l_store, false);
        let images = Array4::from_elem((1, 3, 48, 48), 0.4);
        let fm = backbone_forward(&mut tape, &bt, &cfg, &images).unwrap();
        let err = detection_loss(&mut tape, &bt, &bv, &bank, &cfg, &fm, &[], None);
        assert!(err.is_err());
    }
}
