//! Two-stage optimization: supervised burn-up on the labeled source, then
//! joint training where the detection loss is combined with the
//! consistency objectives on scene-aligned stylized pairs and the
//! distillation regularizer against the frozen post-burn-up reference.

mod checkpoint;
mod dataio;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CheckpointData};
pub use dataio::{load_split, load_target_with_gt, load_train_data, TrainData};

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RoiBox, Tape, Var};
use crate::baselines::{caption_pl_from_features, TokenCodebook};
use crate::config::{ExperimentConfig, Method};
use crate::detector::{
    backbone_forward, build_prompt_bank, detection_loss, images_to_batch, init_detector,
    oracle_proposals, proposals_from_rpn, rpn_forward, rpn_loss, sample_regions, PromptBank,
    Proposal, RegionSample,
};
use crate::error::{Error, Result};
use crate::langspace::{
    freeze_snapshot, init_projection, init_v2l, project, reference_encode, v2l_map_regions,
};
use crate::losses::{contrastive_var, kd_var, total_loss, LossReport};
use crate::params::{bind, Binding, ParamStore};
use crate::rng;
use crate::synthdomains::RenderedSample;

/// Everything the optimizer owns. Fully serializable; a reloaded state
/// reproduces the identical loss sequence.
pub struct TrainState {
    pub step: usize,
    /// backbone.*, rpn.*, reg.*, proj.* (trainable).
    pub trainable: ParamStore,
    pub momentum: ParamStore,
    /// Frozen mapper weights.
    pub v2l: ParamStore,
    pub bank: PromptBank,
    pub codebook: TokenCodebook,
    /// Frozen backbone snapshot taken at the end of burn-up.
    pub reference: Option<ParamStore>,
    pub rng: ChaCha8Rng,
    pub config_hash: u64,
}

impl TrainState {
    pub fn v2l_checksum(&self) -> [u8; 32] {
        self.v2l.checksum()
    }

    pub fn reference_checksum(&self) -> Option<[u8; 32]> {
        self.reference.as_ref().map(|r| r.checksum())
    }
}

/// Fresh state from config seeds alone.
pub fn init_state(cfg: &ExperimentConfig) -> Result<TrainState> {
    let m = &cfg.model;
    let mut trainable = init_detector(m, rng::mix(cfg.seed, 1));
    let proj_input = match cfg.method {
        Method::Dva => m.feature_dim(),
        _ => m.lang_dim,
    };
    let mut proj_cfg = m.clone();
    proj_cfg.lang_dim = proj_input;
    for (name, value) in init_projection(&proj_cfg, rng::mix(cfg.seed, 2)).iter() {
        trainable.insert(name, value.clone());
    }
    let momentum: ParamStore = trainable
        .iter()
        .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
        .collect();
    let mut v2l = init_v2l(m, rng::mix(cfg.seed, 3));
    let categories: Vec<String> = m.categories[..cfg.dataset.generator.num_categories].to_vec();
    let bank = build_prompt_bank(&categories, &m.prompt_templates, m.lang_dim, rng::mix(cfg.seed, 4))?;
    let codebook = TokenCodebook::new(m.codebook_size, m.lang_dim, rng::mix(cfg.seed, 5))?;
    if cfg.train.v2l_prefit {
        prefit_v2l(&mut v2l, &bank, cfg)?;
    }
    Ok(TrainState {
        step: 0,
        trainable,
        momentum,
        v2l,
        bank,
        codebook,
        reference: None,
        rng: rng::rng_for(cfg.seed, 6),
        config_hash: cfg.config_hash(),
    })
}

/// Optional pre-freeze calibration of the mapper: regress seeded per-class
/// token patterns onto their prompt rows so the frozen mapper starts out
/// class-sensitive. Runs before burn-up; afterwards the mapper is frozen.
fn prefit_v2l(v2l: &mut ParamStore, bank: &PromptBank, cfg: &ExperimentConfig) -> Result<()> {
    let m = &cfg.model;
    let mut r = rng::rng_for(cfg.seed, 0xf17);
    let c = bank.num_categories();
    let p2 = m.pooled_size * m.pooled_size;
    let patterns: Vec<ArrayD<f64>> = (0..c)
        .map(|_| rng::randn_array(&[1, m.feature_dim(), m.pooled_size, m.pooled_size], 1.0, &mut r))
        .collect();
    let _ = p2;
    let lr = 0.05;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let binding = bind(&mut tape, v2l, true);
        let mut loss_terms = Vec::new();
        for (ci, pat) in patterns.iter().enumerate() {
            let x = tape.leaf(pat.clone());
            let out = v2l_map_regions(&mut tape, &binding, m, x);
            let target = tape.leaf(
                bank.rows
                    .row(ci)
                    .to_owned()
                    .insert_axis(Axis(0))
                    .into_dyn(),
            );
            let diff = tape.sub(out, target);
            let sq = tape.mul(diff, diff);
            loss_terms.push(tape.mean_all(sq));
        }
        let mut total = loss_terms[0];
        for t in &loss_terms[1..] {
            total = tape.add(total, *t);
        }
        let grads = tape.backward(total);
        for (name, var) in binding.iter() {
            if let Some(g) = grads.get(*var) {
                let w = v2l.get_mut(name)?;
                *w = &*w - &(g * lr);
            }
        }
    }
    Ok(())
}

fn lr_at(cfg: &ExperimentConfig, step: usize) -> f64 {
    let total = (cfg.train.burnup_steps + cfg.train.joint_steps).max(1);
    cfg.train.lr * (1.0 - step as f64 / total as f64).max(0.01)
}

fn sgd_step(
    state: &mut TrainState,
    binding: &Binding,
    grads: &crate::autodiff::GradStore,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, var) in binding.iter() {
        let Some(g) = grads.get(*var) else { continue };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient for {name}")));
        }
        let m = state.momentum.get_mut(name)?;
        *m = &*m * momentum + g;
        let update = &*m * lr;
        let w = state.trainable.get_mut(name)?;
        *w = &*w - &update;
    }
    Ok(())
}

/// Per-image proposal generation for a labeled training batch.
#[allow(clippy::too_many_arguments)]
fn training_proposals(
    tape: &Tape,
    cfg: &ExperimentConfig,
    rpn_out: Option<&crate::detector::RpnOut>,
    batch: &[&RenderedSample],
    canvas: (u32, u32),
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Proposal>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let gt = s.labels.as_deref().unwrap_or(&[]);
            if cfg.train.oracle_proposals {
                let seed: u64 = rng.random();
                oracle_proposals(gt, cfg.model.oracle_jitter, seed, canvas)
            } else {
                let rpn = rpn_out.expect("learned mode has RPN output");
                let obj = tape.value(rpn.objectness).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let del = tape.value(rpn.deltas).view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let mut props = proposals_from_rpn(
                    &obj.index_axis(Axis(0), i),
                    &del.index_axis(Axis(0), i),
                    &cfg.model,
                    stride,
                    canvas,
                );
                if cfg.model.add_gt_proposals {
                    for g in gt {
                        props.push(Proposal { bbox: g.as_f64(), objectness: 1.0 });
                    }
                }
                props
            }
        })
        .collect()
}

struct StepOutcome {
    report: LossReport,
}

/// One optimization step. During burn-up only the supervised loss is active;
/// during joint training the method's consistency terms join it.
fn train_step(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    data: &TrainData,
    joint: bool,
) -> Result<StepOutcome> {
    let mcfg = &cfg.model;
    let tcfg = &cfg.train;
    let n_labeled = data.labeled.len();
    let batch_size = tcfg.batch_size.min(n_labeled);

    // every random draw comes from the state stream, in a fixed order
    let indices: Vec<usize> = (0..batch_size)
        .map(|_| state.rng.random_range(0..n_labeled))
        .collect();
    let batch: Vec<&RenderedSample> = indices.iter().map(|&i| &data.labeled[i]).collect();
    let counterparts: Vec<&RenderedSample> = indices
        .iter()
        .map(|&i| {
            let scene = data.labeled[i].scene_id;
            let options = &data.counterparts[&scene];
            let pick = if options.len() == 1 {
                0
            } else {
                state.rng.random_range(0..options.len())
            };
            &options[pick]
        })
        .collect();

    let (h, w, _) = batch[0].image.dim();
    let canvas = (h as u32, w as u32);

    let mut tape = Tape::new();
    let bt = bind(&mut tape, &state.trainable, true);
    let bv = bind(&mut tape, &state.v2l, false);

    let labeled_images = images_to_batch(&batch)?;
    let fmap_l = backbone_forward(&mut tape, &bt, mcfg, &labeled_images)?;

    let rpn_out = if tcfg.oracle_proposals {
        None
    } else {
        Some(rpn_forward(&mut tape, &bt, mcfg, &fmap_l))
    };

    let proposals = training_proposals(&tape, cfg, rpn_out.as_ref(), &batch, canvas, fmap_l.stride, &mut state.rng);
    let samples: Vec<RegionSample> = batch
        .iter()
        .zip(proposals.iter())
        .map(|(s, props)| {
            sample_regions(
                props,
                s.labels.as_deref().unwrap_or(&[]),
                state.bank.num_categories(),
                mcfg,
                &mut state.rng,
            )
        })
        .collect();

    let rpn_term = match &rpn_out {
        Some(rpn) => {
            let gt: Vec<Vec<_>> = batch
                .iter()
                .map(|s| s.labels.clone().unwrap_or_default())
                .collect();
            Some(rpn_loss(&mut tape, rpn, &fmap_l, mcfg, &gt, canvas, &mut state.rng))
        }
        None => None,
    };

    let det = detection_loss(&mut tape, &bt, &bv, &state.bank, mcfg, &fmap_l, &samples, rpn_term)?;

    let mut l_inst_var: Option<Var> = None;
    let mut l_img_var: Option<Var> = None;
    let mut l_dist_var: Option<Var> = None;

    if joint && cfg.method != Method::SourceOnly {
        let styl_images = images_to_batch(&counterparts)?;
        let fmap_s = backbone_forward(&mut tape, &bt, mcfg, &styl_images)?;

        // identical pixel boxes pooled on the stylized counterpart
        let mut rois: Vec<RoiBox> = Vec::new();
        for (img, s) in samples.iter().enumerate() {
            for b in &s.boxes {
                rois.push(RoiBox { image: img, x0: b[0], y0: b[1], x1: b[2], y1: b[3] });
            }
        }

        match cfg.method {
            Method::Cddmsl => {
                if tcfg.use_inst && !rois.is_empty() {
                    let region_s = tape.roi_align(fmap_s.var, &rois, fmap_s.stride, mcfg.pooled_size);
                    let lang_s = v2l_map_regions(&mut tape, &bv, mcfg, region_s);
                    let anchors = project(&mut tape, &bt, det.lang_feats);
                    let counter = project(&mut tape, &bt, lang_s);
                    l_inst_var = Some(contrastive_var(&mut tape, anchors, counter, tcfg.tau, tcfg.symmetric_contrastive)?);
                }
                let pooled_l = tape.adaptive_avg_pool(fmap_l.var, mcfg.pooled_size);
                let lang_img_l = v2l_map_regions(&mut tape, &bv, mcfg, pooled_l);
                if tcfg.use_img {
                    let pooled_s = tape.adaptive_avg_pool(fmap_s.var, mcfg.pooled_size);
                    let lang_img_s = v2l_map_regions(&mut tape, &bv, mcfg, pooled_s);
                    let mut ha = project(&mut tape, &bt, lang_img_l);
                    let mut hb = project(&mut tape, &bt, lang_img_s);
                    if tcfg.bidirectional_stylization && !data.reverse_pairs.is_empty() {
                        // reverse direction contributes image-level pairs
                        // only: unlabeled scenes carry no boxes
                        let k = batch_size.min(data.reverse_pairs.len());
                        let mut rev_a = Vec::new();
                        let mut rev_b = Vec::new();
                        for _ in 0..k {
                            let i = state.rng.random_range(0..data.reverse_pairs.len());
                            rev_a.push(&data.reverse_pairs[i].0);
                            rev_b.push(&data.reverse_pairs[i].1);
                        }
                        let ra = images_to_batch(&rev_a)?;
                        let rb = images_to_batch(&rev_b)?;
                        let fa = backbone_forward(&mut tape, &bt, mcfg, &ra)?;
                        let fb = backbone_forward(&mut tape, &bt, mcfg, &rb)?;
                        let pa = tape.adaptive_avg_pool(fa.var, mcfg.pooled_size);
                        let pb = tape.adaptive_avg_pool(fb.var, mcfg.pooled_size);
                        let la = v2l_map_regions(&mut tape, &bv, mcfg, pa);
                        let lb = v2l_map_regions(&mut tape, &bv, mcfg, pb);
                        let haa = project(&mut tape, &bt, la);
                        let hbb = project(&mut tape, &bt, lb);
                        let mut a_rows = split_rows(&mut tape, ha, batch_size);
                        let extra_a = split_rows(&mut tape, haa, k);
                        a_rows.extend(extra_a);
                        ha = tape.concat_rows(&a_rows);
                        let mut b_rows = split_rows(&mut tape, hb, batch_size);
                        let extra_b = split_rows(&mut tape, hbb, k);
                        b_rows.extend(extra_b);
                        hb = tape.concat_rows(&b_rows);
                    }
                    l_img_var = Some(contrastive_var(&mut tape, ha, hb, tcfg.tau, tcfg.symmetric_contrastive)?);
                }
                if tcfg.use_dist {
                    let reference = state
                        .reference
                        .as_ref()
                        .ok_or_else(|| Error::Data("distillation requires the burn-up snapshot".into()))?;
                    let fmap_r = reference_encode(&mut tape, reference, mcfg, &labeled_images)?;
                    let pooled_r = tape.adaptive_avg_pool(fmap_r.var, mcfg.pooled_size);
                    let lang_r = v2l_map_regions(&mut tape, &bv, mcfg, pooled_r);
                    l_dist_var = Some(kd_var(&mut tape, lang_img_l, lang_r));
                }
            }
            Method::Dva => {
                if tcfg.use_inst && !rois.is_empty() {
                    let region_s = tape.roi_align(fmap_s.var, &rois, fmap_s.stride, mcfg.pooled_size);
                    let vis_l = tape.mean_spatial(det.region_feats);
                    let vis_s = tape.mean_spatial(region_s);
                    let anchors = project(&mut tape, &bt, vis_l);
                    let counter = project(&mut tape, &bt, vis_s);
                    l_inst_var = Some(crate::baselines::dva_var(&mut tape, anchors, counter, tcfg.tau)?);
                }
                if tcfg.use_img {
                    let pooled_l = tape.adaptive_avg_pool(fmap_l.var, mcfg.pooled_size);
                    let pooled_s = tape.adaptive_avg_pool(fmap_s.var, mcfg.pooled_size);
                    let va = tape.mean_spatial(pooled_l);
                    let vb = tape.mean_spatial(pooled_s);
                    let ha = project(&mut tape, &bt, va);
                    let hb = project(&mut tape, &bt, vb);
                    l_img_var = Some(crate::baselines::dva_var(&mut tape, ha, hb, tcfg.tau)?);
                }
            }
            Method::CaptionPl => {
                if !rois.is_empty() {
                    let region_s = tape.roi_align(fmap_s.var, &rois, fmap_s.stride, mcfg.pooled_size);
                    let lang_s = v2l_map_regions(&mut tape, &bv, mcfg, region_s);
                    let original = tape
                        .value(det.lang_feats)
                        .view()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .to_owned();
                    let (loss, _pseudo) = caption_pl_from_features(
                        &mut tape,
                        lang_s,
                        &original,
                        &state.codebook,
                        tcfg.tau,
                    )?;
                    l_inst_var = Some(loss);
                }
            }
            Method::SourceOnly => unreachable!(),
        }
    }

    // assemble the step objective on the tape
    let mut objective = det.total;
    if let Some(v) = l_inst_var {
        objective = tape.add(objective, v);
    }
    if let Some(v) = l_img_var {
        objective = tape.add(objective, v);
    }
    if let Some(v) = l_dist_var {
        let scaled = tape.scale(v, tcfg.omega);
        objective = tape.add(objective, scaled);
    }

    let l_det = tape.scalar(det.total);
    let l_inst = l_inst_var.map_or(0.0, |v| tape.scalar(v));
    let l_img = l_img_var.map_or(0.0, |v| tape.scalar(v));
    let l_dist = l_dist_var.map_or(0.0, |v| tape.scalar(v));
    let report = total_loss(l_det, l_inst, l_img, l_dist, tcfg.omega)?;

    let lr = lr_at(cfg, state.step);
    let grads = tape.backward(objective);
    sgd_step(state, &bt, &grads, lr, tcfg.momentum)?;
    state.step += 1;
    Ok(StepOutcome { report })
}

fn split_rows(tape: &mut Tape, x: Var, rows: usize) -> Vec<Var> {
    (0..rows)
        .map(|i| tape.select_rows(x, &[i]))
        .collect()
}

/// Supervised warm-up on the labeled source; ends by freezing the
/// distillation reference from the current backbone.
pub fn burn_up(cfg: &ExperimentConfig, data: &TrainData) -> Result<(TrainState, Vec<LossReport>)> {
    if data.labeled.is_empty() {
        return Err(Error::Data("burn-up needs a non-empty labeled manifest".into()));
    }
    let mut state = init_state(cfg)?;
    let mut reports = Vec::with_capacity(cfg.train.burnup_steps);
    for _ in 0..cfg.train.burnup_steps {
        let out = train_step(&mut state, cfg, data, false)?;
        reports.push(out.report);
    }
    state.reference = Some(freeze_snapshot(&state.trainable));
    Ok((state, reports))
}

/// Joint training with the method's consistency objectives. The mapper and
/// the reference stay frozen; their checksums are asserted every step.
pub fn joint_train(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    data: &TrainData,
) -> Result<Vec<LossReport>> {
    if state.reference.is_none() {
        return Err(Error::Data("joint training requires a completed burn-up".into()));
    }
    if data.counterparts.is_empty() {
        return Err(Error::Data("joint training requires the auxiliary domain".into()));
    }
    let v2l_sum = state.v2l_checksum();
    let ref_sum = state.reference_checksum();
    let mut reports = Vec::with_capacity(cfg.train.joint_steps);
    for _ in 0..cfg.train.joint_steps {
        let out = train_step(state, cfg, data, true)?;
        reports.push(out.report);
    }
    debug_assert_eq!(state.v2l_checksum(), v2l_sum);
    debug_assert_eq!(state.reference_checksum(), ref_sum);
    if state.v2l_checksum() != v2l_sum || state.reference_checksum() != ref_sum {
        return Err(Error::Diverged("frozen component changed during joint training".into()));
    }
    Ok(reports)
}

/// Burn-up followed by joint training; the usual entry point.
pub fn train_full(cfg: &ExperimentConfig, data: &TrainData) -> Result<(TrainState, Vec<LossReport>)> {
    let (mut state, mut reports) = burn_up(cfg, data)?;
    let joint = joint_train(&mut state, cfg, data)?;
    reports.extend(joint);
    Ok((state, reports))
}

/// Continue a resumed state to the configured total step count.
pub fn resume_train(
    state: &mut TrainState,
    cfg: &ExperimentConfig,
    data: &TrainData,
) -> Result<Vec<LossReport>> {
    let total = cfg.train.burnup_steps + cfg.train.joint_steps;
    let mut reports = Vec::new();
    while state.step < cfg.train.burnup_steps {
        let out = train_step(state, cfg, data, false)?;
        reports.push(out.report);
        if state.step == cfg.train.burnup_steps {
            state.reference = Some(freeze_snapshot(&state.trainable));
        }
    }
    if state.reference.is_none() {
        state.reference = Some(freeze_snapshot(&state.trainable));
    }
    while state.step < total {
        let out = train_step(state, cfg, data, true)?;
        reports.push(out.report);
    }
    Ok(reports)
}

/// Serialize the full state (including optimizer and RNG position).
pub fn state_to_checkpoint(state: &TrainState) -> CheckpointData {
    let mut sections: Vec<(String, ArrayD<f64>)> = Vec::new();
    for (k, v) in state.trainable.iter() {
        sections.push((format!("trainable/{k}"), v.clone()));
    }
    for (k, v) in state.momentum.iter() {
        sections.push((format!("momentum/{k}"), v.clone()));
    }
    for (k, v) in state.v2l.iter() {
        sections.push((format!("v2l/{k}"), v.clone()));
    }
    sections.push(("bank/rows".into(), state.bank.rows.clone().into_dyn()));
    sections.push(("codebook/rows".into(), state.codebook.rows.clone().into_dyn()));
    if let Some(r) = &state.reference {
        for (k, v) in r.iter() {
            sections.push((format!("ref/{k}"), v.clone()));
        }
    }
    CheckpointData {
        config_hash: state.config_hash,
        step: state.step as u64,
        rng: state.rng.clone(),
        sections,
    }
}

/// Rebuild a state from checkpoint data (inverse of `state_to_checkpoint`).
pub fn state_from_checkpoint(data: CheckpointData, cfg: &ExperimentConfig) -> Result<TrainState> {
    let mut trainable = ParamStore::new();
    let mut momentum = ParamStore::new();
    let mut v2l = ParamStore::new();
    let mut reference = ParamStore::new();
    let mut bank_rows: Option<Array2<f64>> = None;
    let mut code_rows: Option<Array2<f64>> = None;
    for (name, value) in data.sections {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("unscoped section {name}")))?;
        match prefix {
            "trainable" => trainable.insert(rest, value),
            "momentum" => momentum.insert(rest, value),
            "v2l" => v2l.insert(rest, value),
            "ref" => reference.insert(rest, value),
            "bank" => {
                bank_rows = Some(value.into_dimensionality().map_err(|e| {
                    Error::Checkpoint(format!("bank rows shape: {e}"))
                })?)
            }
            "codebook" => {
                code_rows = Some(value.into_dimensionality().map_err(|e| {
                    Error::Checkpoint(format!("codebook rows shape: {e}"))
                })?)
            }
            other => return Err(Error::Checkpoint(format!("unknown section {other}"))),
        }
    }
    let categories: Vec<String> =
        cfg.model.categories[..cfg.dataset.generator.num_categories].to_vec();
    let bank = PromptBank {
        rows: bank_rows.ok_or_else(|| Error::Checkpoint("missing bank rows".into()))?,
        categories,
    };
    let codebook = TokenCodebook {
        rows: code_rows.ok_or_else(|| Error::Checkpoint("missing codebook rows".into()))?,
    };
    Ok(TrainState {
        step: data.step as usize,
        trainable,
        momentum,
        v2l,
        bank,
        codebook,
        reference: if reference.is_empty() { None } else { Some(reference) },
        rng: data.rng,
        config_hash: data.config_hash,
    })
}

/// Write the per-step loss log: one CSV row per step.
pub fn write_log(path: &Path, reports: &[LossReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "step,l_det,l_inst,l_img,l_dist,l_total")?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            i, r.l_det, r.l_inst, r.l_img, r.l_dist, r.l_total
        )?;
    }
    Ok(())
}

/// Read a loss log back (used by the report command for loss curves).
pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::Data(format!("bad log line: {line}")));
        }
        let nums: Vec<f64> = parts[1..]
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Data(format!("bad log line: {line}")))?;
        out.push(LossReport {
            l_det: nums[0],
            l_inst: nums[1],
            l_img: nums[2],
            l_dist: nums[3],
            omega: 1.0,
            l_total: nums[4],
        });
    }
    Ok(out)
}

/// The mean of a report column over a slice of steps.
pub fn mean_of<F: Fn(&LossReport) -> f64>(reports: &[LossReport], f: F) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(&f).sum::<f64>() / reports.len() as f64
}
