//! A small two-stage detector: strided conv backbone, region proposal head,
//! RoIAlign, a text-prompt classifier in the shared language space, and a
//! class-agnostic box regression head.

mod bank;
mod infer;
mod loss;
mod proposals;

pub use bank::{build_prompt_bank, PromptBank};
pub use infer::{infer, Detection};
pub use loss::{detection_loss, rpn_loss, sample_regions, DetectionLoss, RegionSample};
pub use proposals::{
    anchor_grid, oracle_proposals, proposals_from_rpn, propose_regions, Proposal, ProposalMode,
};

use ndarray::{Array4, ArrayD};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng;
use crate::synthdomains::RenderedSample;

/// Backbone output living on a tape, with the spatial bookkeeping needed to
/// map boxes between input pixels and feature cells.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

/// RPN head output: objectness logits (N, A, H', W') and box deltas
/// (N, 4A, H', W').
#[derive(Clone, Copy, Debug)]
pub struct RpnOut {
    pub objectness: Var,
    pub deltas: Var,
    pub num_anchors: usize,
}

/// Initialize detector weights (backbone, RPN, regression head).
pub fn init_detector(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = rng::rng_for(seed, 0xde7ec);
    let mut store = ParamStore::new();
    let ch = cfg.backbone_channels;
    let mut cin = 3usize;
    for (i, &cout) in ch.iter().enumerate() {
        let std = (2.0 / (cin as f64 * 9.0)).sqrt();
        store.insert(
            &format!("backbone.conv{}.w", i + 1),
            rng::randn_array(&[cout, cin, 3, 3], std, &mut rng),
        );
        store.insert(
            &format!("backbone.conv{}.b", i + 1),
            ArrayD::zeros(vec![cout]),
        );
        cin = cout;
    }
    let f = cfg.feature_dim();
    let a = cfg.anchor_sizes.len();
    let std = (2.0 / (f as f64 * 9.0)).sqrt();
    store.insert("rpn.conv.w", rng::randn_array(&[f, f, 3, 3], std, &mut rng));
    store.insert("rpn.conv.b", ArrayD::zeros(vec![f]));
    let std1 = (1.0 / f as f64).sqrt();
    store.insert("rpn.obj.w", rng::randn_array(&[a, f, 1, 1], 0.1 * std1, &mut rng));
    store.insert("rpn.obj.b", ArrayD::zeros(vec![a]));
    store.insert("rpn.delta.w", rng::randn_array(&[4 * a, f, 1, 1], 0.1 * std1, &mut rng));
    store.insert("rpn.delta.b", ArrayD::zeros(vec![4 * a]));
    let flat = f * cfg.pooled_size * cfg.pooled_size;
    store.insert(
        "reg.fc1.w",
        rng::randn_array(&[flat, cfg.reg_hidden], (2.0 / flat as f64).sqrt(), &mut rng),
    );
    store.insert("reg.fc1.b", ArrayD::zeros(vec![cfg.reg_hidden]));
    store.insert(
        "reg.fc2.w",
        rng::randn_array(
            &[cfg.reg_hidden, 4],
            0.1 * (1.0 / cfg.reg_hidden as f64).sqrt(),
            &mut rng,
        ),
    );
    store.insert("reg.fc2.b", ArrayD::zeros(vec![4]));
    store
}

/// Stack rendered samples into an (N, 3, H, W) batch.
pub fn images_to_batch(samples: &[&RenderedSample]) -> Result<Array4<f64>> {
    if samples.is_empty() {
        return Err(Error::Data("empty image batch".into()));
    }
    let (h, w, c) = samples[0].image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut out = Array4::<f64>::zeros((samples.len(), 3, h, w));
    for (n, s) in samples.iter().enumerate() {
        let (sh, sw, _) = s.image.dim();
        if (sh, sw) != (h, w) {
            return Err(Error::Shape("mixed image sizes in one batch".into()));
        }
        for y in 0..h {
            for x in 0..w {
                for ci in 0..3 {
                    out[[n, ci, y, x]] = s.image[[y, x, ci]];
                }
            }
        }
    }
    Ok(out)
}

/// Backbone forward pass: four 3x3 conv blocks with strides 2,2,2,1.
/// Works for both the live backbone and the frozen reference encoder; which
/// one it is depends only on how `binding` was created.
pub fn backbone_forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    images: &Array4<f64>,
) -> Result<FeatureMap> {
    let (n, c, _h, _w) = images.dim();
    if c != 3 {
        return Err(Error::Shape(format!("backbone expects 3 channels, got {c}")));
    }
    if !images.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite image values".into()));
    }
    let x = tape.leaf(images.clone().into_dyn());
    let strides = [2usize, 2, 2, 1];
    let mut cur = x;
    for i in 0..4 {
        let wv = binding.var(&format!("backbone.conv{}.w", i + 1));
        let bv = binding.var(&format!("backbone.conv{}.b", i + 1));
        cur = tape.conv2d(cur, wv, bv, strides[i], 1);
        cur = tape.relu(cur);
    }
    let shape = tape.value(cur).shape().to_vec();
    debug_assert_eq!(shape[0], n);
    Ok(FeatureMap {
        var: cur,
        stride: cfg.stride(),
        batch: n,
        height: shape[2],
        width: shape[3],
    })
}

/// RPN forward: shared 3x3 conv then 1x1 objectness / delta heads.
pub fn rpn_forward(tape: &mut Tape, binding: &Binding, cfg: &ModelConfig, fmap: &FeatureMap) -> RpnOut {
    let w = binding.var("rpn.conv.w");
    let b = binding.var("rpn.conv.b");
    let mid = tape.conv2d(fmap.var, w, b, 1, 1);
    let mid = tape.relu(mid);
    let objectness = tape.conv2d(mid, binding.var("rpn.obj.w"), binding.var("rpn.obj.b"), 1, 0);
    let deltas = tape.conv2d(mid, binding.var("rpn.delta.w"), binding.var("rpn.delta.b"), 1, 0);
    RpnOut {
        objectness,
        deltas,
        num_anchors: cfg.anchor_sizes.len(),
    }
}

/// Class-agnostic box regression head over flattened region features.
pub fn regression_head(tape: &mut Tape, binding: &Binding, _cfg: &ModelConfig, region_feats: Var) -> Var {
    let shape = tape.value(region_feats).shape().to_vec();
    let r = shape[0];
    let flat = shape[1] * shape[2] * shape[3];
    let x = tape.reshape(region_feats, &[r, flat]);
    let h = tape.matmul(x, binding.var("reg.fc1.w"));
    let h = tape.add_row_bias(h, binding.var("reg.fc1.b"));
    let h = tape.relu(h);
    let out = tape.matmul(h, binding.var("reg.fc2.w"));
    tape.add_row_bias(out, binding.var("reg.fc2.b"))
}

/// Cosine-similarity classification logits against the prompt bank.
/// The background column (last bank row, all zeros) is exactly 0 before and
/// after temperature scaling; its loss weighting happens in the focal loss.
pub fn classify_regions(tape: &mut Tape, descriptive: Var, bank: &PromptBank, temperature: f64) -> Var {
    tape.prompt_logits(descriptive, &bank.rows, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use ndarray::Array3;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            backbone_channels: [4, 6, 8, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_image_gives_finite_feature_map() {
        let cfg = tiny_cfg();
        let store = init_detector(&cfg, 0);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &store, false);
        let images = Array4::<f64>::zeros((1, 3, 32, 32));
        let fm = backbone_forward(&mut tape, &b, &cfg, &images).unwrap();
        assert!(tape.value(fm.var).iter().all(|v| v.is_finite()));
        assert_eq!((fm.height, fm.width), (4, 4));
    }

    #[test]
    fn backbone_is_deterministic() {
        let cfg = tiny_cfg();
        let store = init_detector(&cfg, 0);
        let img = Array3::from_shape_fn((32, 32, 3), |(y, x, c)| {
            ((y * 31 + x * 7 + c * 13) % 17) as f64 / 17.0
        });
        let sample = RenderedSample {
            scene_id: 0,
            style_id: "t".into(),
            image: img,
            labels: None,
        };
        let batch = images_to_batch(&[&sample]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let b = bind(&mut tape, &store, false);
            let fm = backbone_forward(&mut tape, &b, &cfg, &batch).unwrap();
            tape.value(fm.var).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn spatial_dims_follow_stride() {
        let cfg = tiny_cfg();
        let store = init_detector(&cfg, 1);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &store, false);
        // 30 is not divisible by 8: dims are ceil(30/8) with pad-1 3x3 convs
        let images = Array4::<f64>::zeros((1, 3, 30, 30));
        let fm = backbone_forward(&mut tape, &b, &cfg, &images).unwrap();
        assert_eq!((fm.height, fm.width), (4, 4));
    }
}
