use ndarray::Ix2;

use crate::autodiff::{RoiBox, Tape};
use crate::boxes;
use crate::config::{EvalConfig, ModelConfig};
use crate::error::Result;
use crate::langspace;
use crate::params::{bind, ParamStore};
use crate::synthdomains::RenderedSample;

use super::{backbone_forward, classify_regions, images_to_batch, proposals_from_rpn, regression_head, rpn_forward, PromptBank};

/// Final detector output. `category` is always a foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub category: usize,
    pub confidence: f64,
}

/// Full inference on one image: learned proposals, language-space
/// classification, box refinement, per-class NMS, score filtering.
pub fn infer(
    params: &ParamStore,
    v2l_params: &ParamStore,
    bank: &PromptBank,
    cfg: &ModelConfig,
    eval: &EvalConfig,
    sample: &RenderedSample,
) -> Result<Vec<Detection>> {
    let (h, w, _) = sample.image.dim();
    let canvas = (h as u32, w as u32);
    let mut tape = Tape::new();
    let bd = bind(&mut tape, params, false);
    let bv = bind(&mut tape, v2l_params, false);
    let batch = images_to_batch(&[sample])?;
    let fmap = backbone_forward(&mut tape, &bd, cfg, &batch)?;
    let rpn = rpn_forward(&mut tape, &bd, cfg, &fmap);
    let obj = tape.value(rpn.objectness).clone();
    let del = tape.value(rpn.deltas).clone();
    let obj3 = obj.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let del3 = del.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let proposals = proposals_from_rpn(
        &obj3.index_axis(ndarray::Axis(0), 0),
        &del3.index_axis(ndarray::Axis(0), 0),
        cfg,
        fmap.stride,
        canvas,
    );
    if proposals.is_empty() {
        return Ok(Vec::new());
    }

    let rois: Vec<RoiBox> = proposals
        .iter()
        .map(|p| RoiBox {
            image: 0,
            x0: p.bbox[0],
            y0: p.bbox[1],
            x1: p.bbox[2],
            y1: p.bbox[3],
        })
        .collect();
    let region_feats = tape.roi_align(fmap.var, &rois, fmap.stride, cfg.pooled_size);
    let lang = langspace::v2l_map_regions(&mut tape, &bv, cfg, region_feats);
    let logits = classify_regions(&mut tape, lang, bank, cfg.cls_temperature);
    let probs = tape.softmax_rows(logits);
    let probs = tape.value(probs).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let deltas = regression_head(&mut tape, &bd, cfg, region_feats);
    let deltas = tape.value(deltas).view().into_dimensionality::<Ix2>().unwrap().to_owned();

    let c = bank.num_categories();
    let mut candidates: Vec<Detection> = Vec::new();
    for (ri, p) in proposals.iter().enumerate() {
        let mut best_cat = 0usize;
        let mut best_prob = -1.0;
        for cat in 0..c {
            if probs[[ri, cat]] > best_prob {
                best_prob = probs[[ri, cat]];
                best_cat = cat;
            }
        }
        if best_prob < eval.score_threshold {
            continue;
        }
        let d = [deltas[[ri, 0]], deltas[[ri, 1]], deltas[[ri, 2]], deltas[[ri, 3]]];
        let refined = boxes::clip(
            boxes::decode_deltas(&p.bbox, &d),
            f64::from(canvas.1),
            f64::from(canvas.0),
        );
        if refined[2] - refined[0] < 1.0 || refined[3] - refined[1] < 1.0 {
            continue;
        }
        candidates.push(Detection {
            bbox: refined,
            category: best_cat,
            confidence: best_prob,
        });
    }

    // per-class NMS, then global ordering by confidence
    let mut kept: Vec<Detection> = Vec::new();
    for cat in 0..c {
        let class_dets: Vec<&Detection> = candidates.iter().filter(|d| d.category == cat).collect();
        if class_dets.is_empty() {
            continue;
        }
        let bxs: Vec<[f64; 4]> = class_dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = class_dets.iter().map(|d| d.confidence).collect();
        for k in boxes::nms(&bxs, &scores, eval.nms_iou) {
            kept.push(*class_dets[k]);
        }
    }
    kept.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::super::{build_prompt_bank, init_detector};
    use super::*;
    use crate::langspace::init_v2l;
    use crate::synthdomains::{default_styles, DomainGenerator, GeneratorConfig};

    fn setup() -> (ModelConfig, ParamStore, ParamStore, PromptBank, RenderedSample) {
        let cfg = ModelConfig {
            backbone_channels: [4, 6, 8, 8],
            lang_dim: 16,
            attn_dim: 8,
            v2l_hidden: 12,
            ..ModelConfig::default()
        };
        let store = init_detector(&cfg, 0);
        let v2l = init_v2l(&cfg, 0);
        let bank =
            build_prompt_bank(&cfg.categories, &cfg.prompt_templates, cfg.lang_dim, 0).unwrap();
        let generator = DomainGenerator::new(GeneratorConfig::default(), default_styles(), 3);
        let sample = generator.render_scene(0, "plain").unwrap();
        (cfg, store, v2l, bank, sample)
    }

    #[test]
    fn impossible_threshold_yields_no_detections() {
        let (cfg, store, v2l, bank, sample) = setup();
        let eval = EvalConfig {
            score_threshold: 1.01,
            ..EvalConfig::default()
        };
        let dets = infer(&store, &v2l, &bank, &cfg, &eval, &sample).unwrap();
        assert!(dets.is_empty());
    }

    #[test]
    fn inference_is_deterministic_and_per_image() {
        let (cfg, store, v2l, bank, sample) = setup();
        let eval = EvalConfig::default();
        let a = infer(&store, &v2l, &bank, &cfg, &eval, &sample).unwrap();
        let b = infer(&store, &v2l, &bank, &cfg, &eval, &sample).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn detections_never_emit_background_and_respect_canvas() {
        let (cfg, store, v2l, bank, sample) = setup();
        let eval = EvalConfig {
            score_threshold: 0.0,
            ..EvalConfig::default()
        };
        let dets = infer(&store, &v2l, &bank, &cfg, &eval, &sample).unwrap();
        for d in dets {
            assert!(d.category < bank.num_categories());
            assert!(d.bbox[0] >= 0.0 && d.bbox[1] >= 0.0);
            assert!(d.bbox[2] <= 64.0 && d.bbox[3] <= 64.0);
        }
    }
}
